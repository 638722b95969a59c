//! The seven MeliusNet presets.
//!
//! Reductions are (out, in) channel pairs per transition. MeliusNetC is
//! listed in its source with a 224/704 third transition, which is
//! impossible with its own block counts (stage 3 ends at 192 + 10·64 =
//! 832 channels); 288/832 is the configuration consistent with the
//! published operation and size figures, and is what we build.

use crate::graph::{ArchConfig, BlockStyle, StemKind};

fn base(
    block_counts: [usize; 4],
    reductions: [(usize, usize); 3],
    downsample_groups: usize,
) -> ArchConfig {
    ArchConfig {
        block_counts,
        growth: 64,
        reductions,
        downsample_groups,
        stem: StemKind::Grouped,
        num_classes: 1000,
        input_shape: (3, 224, 224),
        block_style: BlockStyle::Melius,
    }
}

/// Looks up a preset by its stable, case-insensitive name.
pub fn preset(name: &str) -> Option<ArchConfig> {
    let cfg = match name.to_ascii_lowercase().as_str() {
        "meliusnet22" => base(
            [4, 5, 4, 4],
            [(160, 320), (224, 480), (256, 480)],
            1,
        ),
        "meliusnet29" => base(
            [4, 6, 8, 6],
            [(128, 320), (192, 512), (256, 704)],
            1,
        ),
        "meliusnet42" => base(
            [5, 8, 14, 10],
            [(160, 384), (256, 672), (416, 1152)],
            1,
        ),
        "meliusnet59" => base(
            [6, 12, 24, 12],
            [(192, 448), (320, 960), (544, 1856)],
            1,
        ),
        "meliusneta" => base(
            [4, 5, 5, 6],
            [(160, 320), (256, 480), (288, 576)],
            4,
        ),
        "meliusnetb" => base(
            [4, 6, 8, 6],
            [(160, 320), (224, 544), (320, 736)],
            2,
        ),
        "meliusnetc" => base(
            [3, 5, 10, 6],
            [(128, 256), (192, 448), (288, 832)],
            4,
        ),
        _ => return None,
    };
    Some(cfg)
}

/// All preset names, in size order.
pub fn preset_names() -> &'static [&'static str] {
    &[
        "meliusnet22",
        "meliusnet29",
        "meliusnet42",
        "meliusnet59",
        "meliusneta",
        "meliusnetb",
        "meliusnetc",
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in preset_names() {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn lookup_is_case_insensitive() {
        assert!(preset("MeliusNetA").is_some());
        assert!(preset("nope").is_none());
    }
}
