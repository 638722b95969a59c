//! Binary neural networks with exact bit-packed xnor/popcount convolution.
//!
//! The crate implements the MeliusNet architecture family: Dense Blocks
//! that grow the feature map by 64 binary-conv channels, Improvement
//! Blocks that refine the newest channels through a residual connection,
//! grouped stems, and shuffled grouped downsampling. Around the
//! architecture it provides
//!
//! * exact 1-bit inference — packed ±1 tensors, `n − 2·popcount(xor)`
//!   convolution kernels that reproduce the 32-bit reference bitwise,
//! * an analytical cost model (BOPs, FLOPs, OPs = BOPs/64 + FLOPs,
//!   parameter counts, model size) for every preset,
//! * a desk-scale trainer: straight-through estimator with clipped
//!   gradients, Adam or SGD with warmup and cosine decay, weight
//!   sign-flip instrumentation,
//! * bit-exact weight serialization (MNBW) and IDX dataset ingestion.

pub mod cost;
pub mod error;
pub mod graph;
pub mod io;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{
    preset, preset_names, ArchConfig, BlockStyle, ExecMode, ForwardCache, GraphBuilder, LayerKind,
    LayerSpec, ModelGraph, Param, StemKind, GRAPH_INPUT,
};
pub use tensor::{
    pack_bits, sign_forward, ste_backward, unpack_bits, BitTensor, GradTensor, Tensor,
};
