//! Run configuration: defaults, then a config file (JSON object or
//! `key = value` lines), then `--set` pairs, then named flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use graftkit_core::graft_trainer::FrontInit;
use graftkit_core::losses::LossTerms;
use graftkit_core::model_graph::SplitSpec;
use graftkit_core::paired_data::Remap;
use graftkit_core::{DecodeConfig, LossWeights, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train a new front end against a frozen pretrained network.
    Graft,
    /// Supervised classifier on the intensity frames.
    Pretrain,
    /// Supervised classifier on the new modality.
    Supervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Auto,
    Frame,
    Modality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Events,
    Thermal,
}

/// Every setting any subcommand reads. The merged value is echoed to
/// `config_echo.json` so a run can be repeated from that file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub crop: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_h: f64,
    pub gamma_r: f64,
    pub allow_custom_gamma_h: bool,
    pub loss_terms: String,
    pub split_front: usize,
    pub split_mid: usize,
    pub seed: u64,
    pub init: FrontInit,
    pub checkpoint_every: usize,
    pub mode: Mode,
    pub max_shift: usize,

    pub data_manifest: Option<String>,
    pub train_fraction: f64,
    pub pretrained: Option<String>,
    pub checkpoint: Option<String>,
    pub out_dir: String,

    pub repeats: usize,
    /// Comma-separated `front:mid_end` pairs; empty means all backbone variants.
    pub splits: String,

    pub boxes: Option<String>,
    pub boxes_b: Option<String>,
    pub nms_threshold: f64,
    pub view: View,
    pub eval_split: EvalSplit,

    pub iterations: usize,
    pub decode_lr: f64,
    pub tv_weight: f64,
    pub sample_index: usize,

    pub events: Option<String>,
    pub slices: usize,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub window_start: usize,
    pub window_count: Option<usize>,

    pub kind: SynthKind,
    pub mnist_dir: String,
    pub limit: Option<usize>,
    pub steps: usize,
    pub threshold: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub frame_interval_us: u64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub remap: Remap,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DecodeConfig::default();
        let w = LossWeights::default();
        Self {
            epochs: t.epochs,
            lr: t.learning_rate,
            batch_size: t.batch_size,
            crop: t.crop,
            alpha: w.alpha,
            beta: w.beta,
            gamma_h: w.gamma_h,
            gamma_r: w.gamma_r,
            allow_custom_gamma_h: false,
            loss_terms: "all".into(),
            split_front: t.split.front,
            split_mid: t.split.mid_end,
            seed: 0,
            init: FrontInit::Random,
            checkpoint_every: 0,
            mode: Mode::Graft,
            max_shift: 0,
            data_manifest: None,
            train_fraction: 0.9,
            pretrained: None,
            checkpoint: None,
            out_dir: "graftkit_out".into(),
            repeats: 5,
            splits: String::new(),
            boxes: None,
            boxes_b: None,
            nms_threshold: 0.5,
            view: View::Auto,
            eval_split: EvalSplit::Test,
            iterations: d.iterations,
            decode_lr: d.learning_rate,
            tv_weight: d.tv_weight,
            sample_index: 0,
            events: None,
            slices: 3,
            height: None,
            width: None,
            window_start: 0,
            window_count: None,
            kind: SynthKind::Events,
            mnist_dir: "data/mnist10k".into(),
            limit: None,
            steps: 6,
            threshold: 0.1,
            min_speed: 0.3,
            max_speed: 0.75,
            frame_interval_us: 1000,
            noise_sigma: 0.05,
            blur_radius: 1,
            remap: Remap::Invert,
        }
    }
}

/// Parses a scalar from a `key = value` line or a `--set` flag.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match raw {
        "none" | "null" | "" => Value::Null,
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

pub fn parse_pair(pair: &str) -> Result<(String, Value)> {
    let (k, v) = pair
        .split_once('=')
        .with_context(|| format!("expected key=value, got {pair:?}"))?;
    let k = k.trim();
    if k.is_empty() {
        bail!("empty key in {pair:?}");
    }
    Ok((k.to_string(), parse_value(v)))
}

/// Reads a config file. JSON objects are taken as is; anything else is
/// parsed as `key = value` lines with `#` comments.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        return match v {
            Value::Object(m) => Ok(m),
            _ => bail!("{} must hold a JSON object", path.display()),
        };
    }
    let mut out = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = parse_pair(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.insert(k, v);
    }
    Ok(out)
}

/// Overlays `layers` in order on the defaults; unknown keys are errors.
pub fn resolve(layers: impl IntoIterator<Item = Map<String, Value>>) -> Result<RunConfig> {
    let mut merged = match serde_json::to_value(RunConfig::default())? {
        Value::Object(m) => m,
        _ => unreachable!("RunConfig serializes to an object"),
    };
    for layer in layers {
        merged.extend(layer);
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).context("invalid configuration")?;
    Ok(cfg)
}

impl RunConfig {
    pub fn split(&self) -> SplitSpec {
        SplitSpec::new(self.split_front, self.split_mid)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let loss_terms: LossTerms = self.loss_terms.parse()?;
        let cfg = TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            crop: self.crop,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma_h: self.gamma_h,
                gamma_r: self.gamma_r,
            },
            loss_terms,
            split: self.split(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            allow_custom_gamma_h: self.allow_custom_gamma_h,
            init: self.init,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        let cfg = DecodeConfig {
            iterations: self.iterations,
            learning_rate: self.decode_lr,
            tv_weight: self.tv_weight,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The `splits` list, or `default` when it is empty.
    pub fn split_list(&self, default: Vec<SplitSpec>) -> Result<Vec<SplitSpec>> {
        if self.splits.trim().is_empty() {
            return Ok(default);
        }
        self.splits
            .split(',')
            .map(|item| {
                let (a, b) = item
                    .trim()
                    .split_once(':')
                    .with_context(|| format!("split {item:?} is not front:mid_end"))?;
                Ok(SplitSpec::new(a.trim().parse()?, b.trim().parse()?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_typed() {
        assert_eq!(parse_value("7"), Value::from(7));
        assert_eq!(parse_value(" 1e-3 "), Value::from(1e-3));
        assert_eq!(parse_value("true"), Value::from(true));
        assert_eq!(parse_value("none"), Value::Null);
        assert_eq!(parse_value("frl,fel"), Value::from("frl,fel"));
    }

    #[test]
    fn later_layers_win_and_unknown_keys_fail() {
        let mut a = Map::new();
        a.insert("epochs".into(), Value::from(3));
        let mut b = Map::new();
        b.insert("epochs".into(), Value::from(4));
        assert_eq!(resolve([a, b]).unwrap().epochs, 4);
        let mut bad = Map::new();
        bad.insert("epoch".into(), Value::from(4));
        assert!(resolve([bad]).is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let echo = serde_json::to_value(RunConfig::default()).unwrap();
        let Value::Object(m) = echo else { panic!() };
        assert_eq!(resolve([m]).unwrap(), RunConfig::default());
    }

    #[test]
    fn split_lists() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.split_list(vec![SplitSpec::new(2, 3)]).unwrap().len(), 1);
        cfg.splits = "1:2, 2:4".into();
        assert_eq!(cfg.split_list(vec![]).unwrap(), vec![SplitSpec::new(1, 2), SplitSpec::new(2, 4)]);
        cfg.splits = "1-2".into();
        assert!(cfg.split_list(vec![]).is_err());
    }
}
