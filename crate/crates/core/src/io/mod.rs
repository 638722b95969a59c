//! File formats: MNBW weight serialization, IDX dataset ingestion, and the
//! plain-text architecture config schema.

pub mod config;
pub mod idx;
pub mod weights;

pub use config::{arch_config_to_text, parse_arch_config};
pub use idx::{load_idx_dataset, normalize_per_channel};
pub use weights::{export_weights, import_weights};
