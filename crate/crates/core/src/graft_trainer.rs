//! The grafting loop: trains a new front end so that its features, and the
//! frozen middle net's response to them, match those of the pretrained
//! intensity network.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Tensor;
use crate::losses::{total_loss_with_grads, LossBreakdown, LossTerms, LossWeights};
use crate::model_graph::{
    build_grafted_frontend, count_params, graft, split, BlockChain, GraftedModel, Gradients, SplitSpec,
};
use crate::optim::Adam;
use crate::paired_data::{random_crop, DatasetSplit, Image, PairedSample, SensorPair};
use crate::supervised::{predict_with, stack};
use crate::evaluation::top1_error;

/// How the new front end's weights start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontInit {
    /// Fresh uniform fan-in initialization, seeded by the run seed.
    #[default]
    Random,
    /// Exact copy of the pretrained front end; needs matching input channels.
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Square random-crop size. Images no larger than this are used whole.
    pub crop: Option<usize>,
    pub weights: LossWeights,
    pub loss_terms: LossTerms,
    pub split: SplitSpec,
    pub seed: u64,
    /// Epoch interval for checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
    pub allow_custom_gamma_h: bool,
    pub init: FrontInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 8,
            crop: Some(224),
            weights: LossWeights::default(),
            loss_terms: LossTerms::ALL,
            split: crate::model_graph::LENET_DEFAULT_SPLIT,
            seed: 0,
            checkpoint_every: 0,
            allow_custom_gamma_h: false,
            init: FrontInit::Random,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.crop == Some(0) {
            return Err(Error::Config("crop must be >= 1".into()));
        }
        if !self.loss_terms.any() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        self.weights.validate(self.allow_custom_gamma_h)
    }
}

/// One optimizer step, as written to the JSON-lines log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub frl: f64,
    pub fel: f64,
    pub fsl: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Sample-weighted epoch means of each loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub frl: f64,
    pub fel: f64,
    pub fsl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_total: f64,
    pub wall_seconds: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub final_checkpoint: Option<String>,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn curve(&self, term: &str) -> Option<Vec<f64>> {
        let pick: fn(&EpochRecord) -> f64 = match term {
            "frl" => |e| e.frl,
            "fel" => |e| e.fel,
            "fsl" => |e| e.fsl,
            "total" => |e| e.total,
            _ => return None,
        };
        Some(self.epochs.iter().map(pick).collect())
    }
}

/// Hooks into a training run. All methods default to doing nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` epochs with the current model.
    fn on_checkpoint(&mut self, _epoch: usize, _model: &GraftedModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Final model, the front end with the lowest epoch loss, and the report.
#[derive(Clone, Debug)]
pub struct TrainedGraft {
    pub model: GraftedModel,
    pub best_front: BlockChain,
    pub report: TrainReport,
}

impl TrainedGraft {
    pub fn best_model(&self) -> Result<GraftedModel> {
        graft(self.best_front.clone(), self.model.mid_shared(), self.model.last_shared())
    }
}

/// Frozen targets H = N_f(I) and R = N_mid(H).
pub fn frozen_targets(front: &BlockChain, mid: &BlockChain, frames: &Tensor) -> Result<(Tensor, Tensor)> {
    let h = front.forward(frames)?;
    let r = mid.forward(&h)?;
    Ok((h, r))
}

/// Loss and parameter gradients of `gn_front` for one batch. Gradients of
/// the middle-net terms pass back through `mid` without touching it.
pub fn graft_gradients(
    gn_front: &BlockChain,
    mid: &BlockChain,
    h: &Tensor,
    r: &Tensor,
    modality: &Tensor,
    weights: &LossWeights,
    terms: LossTerms,
) -> Result<(LossBreakdown, Gradients)> {
    let (h_hat, front_tape) = gn_front.forward_train(modality)?;
    let (r_hat, mid_tape) = mid.forward_train(&h_hat)?;
    let lg = total_loss_with_grads(h, &h_hat, r, &r_hat, weights, terms)?;
    let mut d_h_hat = lg.d_h_hat;
    if terms.fel || terms.fsl {
        d_h_hat += &mid.backward_input(&mid_tape, &lg.d_r_hat)?;
    }
    let grads = gn_front.backward(&front_tape, &d_h_hat)?;
    Ok((lg.breakdown, grads))
}

fn effective_crop(crop: Option<usize>, pair: &SensorPair) -> Option<usize> {
    let (_, h, w) = pair.frame.dim();
    crop.filter(|&c| c < h.min(w))
}

fn check_pairs(data: &[SensorPair]) -> Result<()> {
    let first = data.first().ok_or_else(|| Error::Invalid("no training pairs".into()))?;
    let (fs, ms) = (first.frame.dim(), first.modality.dim());
    if (fs.1, fs.2) != (ms.1, ms.2) {
        return Err(Error::shape("frame vs modality spatial size", &[fs.1, fs.2], &[ms.1, ms.2]));
    }
    for p in data {
        if p.frame.dim() != fs || p.modality.dim() != ms {
            return Err(Error::shape("training pair", &[fs.0, fs.1, fs.2], p.frame.shape()));
        }
    }
    Ok(())
}

/// Builds the new front end for `pretrained` split by `spec`.
pub fn init_graft(pretrained: &BlockChain, spec: SplitSpec, modality_channels: usize, cfg: &TrainConfig) -> Result<GraftedModel> {
    let parts = split(pretrained, spec)?;
    let gn_front = match cfg.init {
        FrontInit::Random => build_grafted_frontend(&parts.front, modality_channels, cfg.seed)?,
        FrontInit::Pretrained => {
            if parts.front.input_shape().channels != modality_channels {
                return Err(Error::Config(format!(
                    "pretrained init needs {} modality channels, got {modality_channels}",
                    parts.front.input_shape().channels
                )));
            }
            parts.front.clone()
        }
    };
    graft(gn_front, Arc::new(parts.mid), Arc::new(parts.last))
}

/// Trains a grafted front end on the unlabeled training pairs of `data`.
pub fn train_graft(
    pretrained: &BlockChain,
    spec: SplitSpec,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedGraft> {
    train_graft_pairs(pretrained, spec, &data.train_pairs(), cfg, observer)
}

pub fn train_graft_pairs(
    pretrained: &BlockChain,
    spec: SplitSpec,
    pairs: &[SensorPair],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedGraft> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let started = Instant::now();
    let parts = split(pretrained, spec)?;
    let front = parts.front.clone();
    let mut model = init_graft(pretrained, spec, pairs[0].modality.dim().0, cfg)?;
    let mid = model.mid_shared();
    let crop = effective_crop(cfg.crop, &pairs[0]);

    // Without cropping the targets never change, so compute them once.
    let cached: Option<Vec<(Image, Image)>> = if crop.is_none() {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(256) {
            let frames: Vec<&Image> = chunk.iter().map(|p| &p.frame).collect();
            let (h, r) = frozen_targets(&front, &mid, &stack(&frames)?)?;
            for i in 0..chunk.len() {
                out.push((h.index_axis(ndarray::Axis(0), i).to_owned(), r.index_axis(ndarray::Axis(0), i).to_owned()));
            }
        }
        Some(out)
    } else {
        None
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::INFINITY, model.gn_front.clone());

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut acc = [0.0f64; 4];
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (h, r, v) = match (&cached, crop) {
                (Some(targets), _) => {
                    let hs: Vec<&Image> = idx.iter().map(|&i| &targets[i].0).collect();
                    let rs: Vec<&Image> = idx.iter().map(|&i| &targets[i].1).collect();
                    let vs: Vec<&Image> = idx.iter().map(|&i| &pairs[i].modality).collect();
                    (stack(&hs)?, stack(&rs)?, stack(&vs)?)
                }
                (None, Some(size)) => {
                    let cropped: Vec<SensorPair> = idx
                        .iter()
                        .map(|&i| random_crop(&pairs[i], size, &mut crop_rng))
                        .collect::<Result<_>>()?;
                    let frames: Vec<&Image> = cropped.iter().map(|p| &p.frame).collect();
                    let vs: Vec<&Image> = cropped.iter().map(|p| &p.modality).collect();
                    let (h, r) = frozen_targets(&front, &mid, &stack(&frames)?)?;
                    (h, r, stack(&vs)?)
                }
                (None, None) => unreachable!("targets are cached whenever cropping is off"),
            };
            let (b, grads) = graft_gradients(&model.gn_front, &mid, &h, &r, &v, &cfg.weights, cfg.loss_terms)?;
            if !b.total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: b.total,
                });
            }
            let record = StepRecord {
                epoch,
                step,
                frl: b.frl,
                fel: b.fel,
                fsl: b.fsl,
                total: b.total,
                grad_norm: grads.l2_norm(),
            };
            adam.step(model.gn_front.params_mut(), &grads.0)?;
            observer.on_step(&record)?;
            let n = idx.len() as f64;
            for (a, v) in acc.iter_mut().zip([b.frl, b.fel, b.fsl, b.total]) {
                *a += n * v;
            }
        }
        let n = pairs.len() as f64;
        let record = EpochRecord {
            epoch,
            frl: acc[0] / n,
            fel: acc[1] / n,
            fsl: acc[2] / n,
            total: acc[3] / n,
        };
        if record.total < best.1 {
            best = (epoch, record.total, model.gn_front.clone());
        }
        observer.on_epoch(&record)?;
        epochs.push(record);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(epoch, &model)?;
        }
    }

    let report = TrainReport {
        epochs,
        best_epoch: best.0,
        best_total: best.1,
        wall_seconds: started.elapsed().as_secs_f64(),
        trainable_params: model.trainable_params(),
        total_params: model.total_params(),
        final_checkpoint: None,
        config: cfg.clone(),
    };
    Ok(TrainedGraft {
        model,
        best_front: best.2,
        report,
    })
}

/// Top-1 error (%) of a grafted classifier on the modality view of `samples`.
pub fn graft_classification_error(model: &GraftedModel, samples: &[PairedSample]) -> Result<f64> {
    let inputs: Vec<Image> = samples.iter().map(|s| s.pair.modality.clone()).collect();
    let labels = class_labels(samples)?;
    let pred = predict_with(|x| model.forward(x), &inputs, 256)?;
    top1_error(&pred, &labels)
}

pub fn class_labels(samples: &[PairedSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .as_ref()
                .and_then(|l| l.class())
                .ok_or_else(|| Error::Invalid(format!("sample at t={} has no class label", s.timestamp)))
        })
        .collect()
}

fn mean_std_median(v: &[f64]) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    let median = if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) };
    (mean, std, median)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub terms: LossTerms,
    pub metrics: Vec<f64>,
    pub final_losses: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub repeats: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, terms: LossTerms) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.terms == terms)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("terms,repeats,mean,std,median");
        for i in 0..self.repeats {
            let _ = write!(out, ",run{i}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{}", r.terms, r.metrics.len(), r.mean, r.std, r.median);
            for m in &r.metrics {
                let _ = write!(out, ",{m}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains every nonempty loss-term subset `repeats` times (seeds
/// `base.seed + k`, shared across subsets) and scores each run with
/// `evaluate`.
pub fn run_ablation<E>(
    pretrained: &BlockChain,
    data: &DatasetSplit,
    base: &TrainConfig,
    repeats: usize,
    mut evaluate: E,
) -> Result<AblationTable>
where
    E: FnMut(&GraftedModel, &DatasetSplit) -> Result<f64>,
{
    if repeats == 0 {
        return Err(Error::Config("ablation needs at least one repeat".into()));
    }
    base.validate()?;
    let mut rows = Vec::new();
    for terms in LossTerms::nonempty_subsets() {
        let mut metrics = Vec::with_capacity(repeats);
        let mut final_losses = Vec::with_capacity(repeats);
        for k in 0..repeats {
            let cfg = TrainConfig {
                loss_terms: terms,
                seed: base.seed.wrapping_add(k as u64),
                ..base.clone()
            };
            let run = train_graft(pretrained, cfg.split, data, &cfg, &mut ())?;
            final_losses.push(run.report.epochs.last().map_or(f64::NAN, |e| e.total));
            metrics.push(evaluate(&run.model, data)?);
        }
        let (mean, std, median) = mean_std_median(&metrics);
        rows.push(AblationRow {
            terms,
            metrics,
            final_losses,
            mean,
            std,
            median,
        });
    }
    Ok(AblationTable { repeats, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub split: SplitSpec,
    pub trainable_params: usize,
    pub total_params: usize,
    pub fraction: f64,
    pub metric: f64,
    pub final_loss: f64,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("split_front,split_mid,trainable_params,total_params,fraction,metric,final_loss\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.split.front, r.split.mid_end, r.trainable_params, r.total_params, r.fraction, r.metric, r.final_loss
        );
    }
    out
}

/// Trains one grafted model per split and scores each with `evaluate`.
pub fn run_split_sweep<E>(
    pretrained: &BlockChain,
    specs: &[SplitSpec],
    data: &DatasetSplit,
    cfg: &TrainConfig,
    mut evaluate: E,
) -> Result<Vec<SweepRow>>
where
    E: FnMut(&GraftedModel, &DatasetSplit) -> Result<f64>,
{
    for s in specs {
        s.validate(pretrained.len())?;
    }
    cfg.validate()?;
    let total = count_params(pretrained);
    let mut rows = Vec::with_capacity(specs.len());
    for &spec in specs {
        let c = TrainConfig { split: spec, ..cfg.clone() };
        let run = train_graft(pretrained, spec, data, &c, &mut ())?;
        let trainable = run.model.trainable_params();
        rows.push(SweepRow {
            split: spec,
            trainable_params: trainable,
            total_params: total,
            fraction: trainable as f64 / total as f64,
            metric: evaluate(&run.model, data)?,
            final_loss: run.report.epochs.last().map_or(f64::NAN, |e| e.total),
        });
    }
    Ok(rows)
}
