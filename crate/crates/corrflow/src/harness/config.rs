//! Line-oriented `key = value` configuration files.
//!
//! `#` starts a comment; every train/model/data/eval field is
//! addressable by dotted key; unknown keys are hard errors so typos
//! fail loudly instead of silently using defaults.

use crate::attention::{AttentionKernel, BlockVariant};
use crate::error::{Error, Result};
use crate::harness::synth::WarpKind;
use crate::harness::train::{EvalSpec, TrainConfig};
use crate::pyramid::FusionMode;
use crate::tensor::Precision;

/// Applies a config file's assignments on top of `train` and `eval`.
pub fn apply_config(text: &str, train: &mut TrainConfig, eval: &mut EvalSpec) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::contract(format!("config line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        apply_key(key, value, train, eval)
            .map_err(|e| Error::contract(format!("config line {}: {e}", lineno + 1)))?;
    }
    Ok(())
}

fn apply_key(key: &str, value: &str, train: &mut TrainConfig, eval: &mut EvalSpec) -> Result<()> {
    let bad = |what: &str| Error::contract(format!("bad {what} value {value:?}"));
    match key {
        "train.steps" => train.steps = value.parse().map_err(|_| bad("usize"))?,
        "train.batch_size" => train.batch_size = value.parse().map_err(|_| bad("usize"))?,
        "train.lr" => train.lr_main = value.parse().map_err(|_| bad("float"))?,
        "train.backbone_lr" => train.lr_backbone = value.parse().map_err(|_| bad("float"))?,
        "train.weight_decay" => train.weight_decay = value.parse().map_err(|_| bad("float"))?,
        "train.seed" => train.seed = value.parse().map_err(|_| bad("u64"))?,
        "train.milestones" => {
            train.milestones = parse_list(value).map_err(|_| bad("fraction list"))?
        }
        "train.precision" => {
            train.precision = Precision::parse(value)
                .ok_or_else(|| Error::contract(format!("precision must be f32 or f64, got {value:?}")))?
        }
        "model.levels" => train.model.levels = value.parse().map_err(|_| bad("usize"))?,
        "model.block_depths" => {
            train.model.block_depths = parse_list(value).map_err(|_| bad("depth list"))?
        }
        "model.coarse_size" => train.model.coarse_size = value.parse().map_err(|_| bad("usize"))?,
        "model.feat_dim" => train.model.feat_dim = value.parse().map_err(|_| bad("usize"))?,
        "model.model_dim" => train.model.model_dim = value.parse().map_err(|_| bad("usize"))?,
        "model.backbone_channels" => {
            train.model.backbone_channels = value.parse().map_err(|_| bad("usize"))?
        }
        "model.kernel" => {
            train.model.kernel = AttentionKernel::parse(value)
                .ok_or_else(|| Error::contract(format!("kernel must be softmax or linear, got {value:?}")))?
        }
        "model.tau" => train.model.tau = value.parse().map_err(|_| bad("float"))?,
        "model.fusion" => {
            train.model.fusion = FusionMode::parse(value)
                .ok_or_else(|| Error::contract(format!("fusion must be average or sum, got {value:?}")))?
        }
        "model.variant" => {
            train.model.variant = BlockVariant::parse(value)
                .ok_or_else(|| Error::contract(format!("variant must be full or cost_only, got {value:?}")))?
        }
        "data.warp" => {
            train.warp.kind = WarpKind::parse(value).ok_or_else(|| {
                Error::contract(format!(
                    "warp must be translation, affine, or homography, got {value:?}"
                ))
            })?;
            eval.warp.kind = train.warp.kind;
        }
        "data.max_translation" => {
            let v = value.parse().map_err(|_| bad("float"))?;
            train.warp.max_translation = v;
            eval.warp.max_translation = v;
        }
        "data.max_linear" => {
            let v = value.parse().map_err(|_| bad("float"))?;
            train.warp.max_linear = v;
            eval.warp.max_linear = v;
        }
        "data.max_perspective" => {
            let v = value.parse().map_err(|_| bad("float"))?;
            train.warp.max_perspective = v;
            eval.warp.max_perspective = v;
        }
        "eval.pairs" => eval.pairs = value.parse().map_err(|_| bad("usize"))?,
        "eval.seed" => eval.seed = value.parse().map_err(|_| bad("u64"))?,
        "eval.keypoints" => eval.keypoints_per_pair = value.parse().map_err(|_| bad("usize"))?,
        "eval.alphas" => eval.alphas = parse_list(value).map_err(|_| bad("alpha list"))?,
        other => {
            return Err(Error::contract(format!("unknown config key {other:?}")));
        }
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, ()> {
    value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| ()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys_and_comments() {
        let mut train = TrainConfig::default();
        let mut eval = EvalSpec::default();
        let text = "\
# comment line
train.steps = 42   # trailing comment
model.block_depths = 2, 2, 2
model.kernel = linear
data.warp = affine
eval.pairs = 3
";
        apply_config(text, &mut train, &mut eval).unwrap();
        assert_eq!(train.steps, 42);
        assert_eq!(train.model.block_depths, vec![2, 2, 2]);
        assert_eq!(train.model.kernel, AttentionKernel::Linear);
        assert_eq!(train.warp.kind, WarpKind::Affine);
        assert_eq!(eval.warp.kind, WarpKind::Affine);
        assert_eq!(eval.pairs, 3);
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let mut train = TrainConfig::default();
        let mut eval = EvalSpec::default();
        let err = apply_config("train.stps = 10\n", &mut train, &mut eval).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown config key") && msg.contains("train.stps"), "{msg}");
    }

    #[test]
    fn malformed_values_fail_with_line_numbers() {
        let mut train = TrainConfig::default();
        let mut eval = EvalSpec::default();
        let err = apply_config("\ntrain.steps = many\n", &mut train, &mut eval).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err2 = apply_config("just a line\n", &mut train, &mut eval).unwrap_err();
        assert!(err2.to_string().contains("key = value"), "{err2}");
    }
}
