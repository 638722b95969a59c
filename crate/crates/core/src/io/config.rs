//! Plain-text architecture configs: `key = value` lines, `#` comments.
//!
//! ```text
//! block_counts      = 4,5,4,4
//! growth            = 64
//! reductions        = 160/320, 224/480, 256/480
//! downsample_groups = 1
//! stem              = grouped          # or conv7x7
//! num_classes       = 1000
//! input             = 3x224x224
//! block_style       = melius           # or naive-residual, dense-only
//! ```
//!
//! Every key is optional except `block_counts` and `reductions`; the rest
//! default to the values shown above.

use crate::error::{Error, Result};
use crate::graph::{ArchConfig, BlockStyle, StemKind};

/// Parses the documented key = value schema into an [`ArchConfig`].
pub fn parse_arch_config(text: &str) -> Result<ArchConfig> {
    let mut block_counts: Option<[usize; 4]> = None;
    let mut reductions: Option<[(usize, usize); 3]> = None;
    let mut growth = 64usize;
    let mut downsample_groups = 1usize;
    let mut stem = StemKind::Grouped;
    let mut num_classes = 1000usize;
    let mut input_shape = (3usize, 224usize, 224usize);
    let mut block_style = BlockStyle::Melius;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::invalid_config(format!("line {}: {msg}", lineno + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "block_counts" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("block_counts: {e}")))?;
                let arr: [usize; 4] = parts
                    .try_into()
                    .map_err(|_| bad("block_counts needs exactly 4 entries".into()))?;
                block_counts = Some(arr);
            }
            "reductions" => {
                let parts: Vec<(usize, usize)> = value
                    .split(',')
                    .map(|p| {
                        let (num, den) = p
                            .trim()
                            .split_once('/')
                            .ok_or_else(|| bad(format!("reduction {p:?} is not out/in")))?;
                        let num = num.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?;
                        let den = den.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?;
                        Ok((num, den))
                    })
                    .collect::<Result<_>>()?;
                let arr: [(usize, usize); 3] = parts
                    .try_into()
                    .map_err(|_| bad("reductions needs exactly 3 entries".into()))?;
                reductions = Some(arr);
            }
            "growth" => growth = value.parse().map_err(|e| bad(format!("growth: {e}")))?,
            "downsample_groups" => {
                downsample_groups =
                    value.parse().map_err(|e| bad(format!("downsample_groups: {e}")))?
            }
            "stem" => {
                stem = match value {
                    "grouped" | "grouped-stem" => StemKind::Grouped,
                    "conv7x7" | "7x7" => StemKind::Conv7x7,
                    other => return Err(bad(format!("unknown stem {other:?}"))),
                }
            }
            "num_classes" => {
                num_classes = value.parse().map_err(|e| bad(format!("num_classes: {e}")))?
            }
            "input" => {
                let dims: Vec<usize> = value
                    .split('x')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("input: {e}")))?;
                match dims.as_slice() {
                    [c, h, w] => input_shape = (*c, *h, *w),
                    _ => return Err(bad("input must be CxHxW".into())),
                }
            }
            "block_style" => {
                block_style = match value {
                    "melius" => BlockStyle::Melius,
                    "naive-residual" => BlockStyle::NaiveResidual,
                    "dense-only" => BlockStyle::DenseOnly,
                    other => return Err(bad(format!("unknown block_style {other:?}"))),
                }
            }
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let cfg = ArchConfig {
        block_counts: block_counts
            .ok_or_else(|| Error::invalid_config("config is missing block_counts"))?,
        growth,
        reductions: reductions
            .ok_or_else(|| Error::invalid_config("config is missing reductions"))?,
        downsample_groups,
        stem,
        num_classes,
        input_shape,
        block_style,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a config back into the textual schema.
pub fn arch_config_to_text(cfg: &ArchConfig) -> String {
    let r = cfg.reductions;
    format!(
        "block_counts = {}\n\
         growth = {}\n\
         reductions = {}/{}, {}/{}, {}/{}\n\
         downsample_groups = {}\n\
         stem = {}\n\
         num_classes = {}\n\
         input = {}x{}x{}\n\
         block_style = {}\n",
        cfg.block_counts.map(|b| b.to_string()).join(","),
        cfg.growth,
        r[0].0,
        r[0].1,
        r[1].0,
        r[1].1,
        r[2].0,
        r[2].1,
        cfg.downsample_groups,
        match cfg.stem {
            StemKind::Grouped => "grouped",
            StemKind::Conv7x7 => "conv7x7",
        },
        cfg.num_classes,
        cfg.input_shape.0,
        cfg.input_shape.1,
        cfg.input_shape.2,
        match cfg.block_style {
            BlockStyle::Melius => "melius",
            BlockStyle::NaiveResidual => "naive-residual",
            BlockStyle::DenseOnly => "dense-only",
        }
    )
}
