use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use graftkit_core::checkpoint::write_tensor_blob;
use graftkit_core::evaluation::{read_box_records, write_detections};
use graftkit_core::event_voxel::read_events;
use graftkit_core::graft_trainer::{
    graft_classification_error, run_ablation, run_split_sweep, sweep_to_csv, train_graft, EpochRecord, StepRecord,
    TrainObserver,
};
use graftkit_core::losses::LossTerms;
use graftkit_core::model_graph::{count_params, lenet_split_variants};
use graftkit_core::paired_data::{
    load_manifest, load_mnist_dir, save_png, split_temporal, synth_event_pairs, synth_thermal_pairs, write_dataset,
    DatasetSplit, PairedSample, SynthEventConfig, SynthThermalConfig,
};
use graftkit_core::supervised::{predict, predict_with, stack, train_classifier, ClassifierConfig};
use graftkit_core::{
    ap50, decode_features, graft, lenet5, nms_merge, split, top1_error, voxelize, BlockChain, Checkpoint,
    GraftedModel, LossWeights, SplitSpec,
};
use serde_json::json;

use crate::config::{EvalSplit, Mode, RunConfig, SynthKind, View};

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn required<'a>(value: &'a Option<String>, key: &str) -> Result<&'a str> {
    value
        .as_deref()
        .with_context(|| format!("missing required setting {key:?}"))
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<PairedSample>> {
    let path = required(&cfg.data_manifest, "data_manifest")?;
    let samples = load_manifest(Path::new(path)).with_context(|| format!("loading manifest {path}"))?;
    if samples.is_empty() {
        bail!("manifest {path} has no samples");
    }
    Ok(samples)
}

fn load_data(cfg: &RunConfig) -> Result<DatasetSplit> {
    Ok(split_temporal(load_samples(cfg)?, cfg.train_fraction)?)
}

fn load_pretrained(cfg: &RunConfig) -> Result<BlockChain> {
    let path = required(&cfg.pretrained, "pretrained")?;
    let ckpt = Checkpoint::load(Path::new(path)).with_context(|| format!("loading {path}"))?;
    ckpt.part("model")
        .cloned()
        .with_context(|| format!("{path} holds no pretrained model part"))
}

fn load_grafted(path: &str) -> Result<(GraftedModel, Option<SplitSpec>)> {
    let ckpt = Checkpoint::load(Path::new(path)).with_context(|| format!("loading {path}"))?;
    let part = |name: &str| {
        ckpt.part(name)
            .cloned()
            .with_context(|| format!("{path} has no {name:?} part"))
    };
    let model = graft(part("gn_front")?, Arc::new(part("mid")?), Arc::new(part("last")?))?;
    Ok((model, ckpt.split))
}

/// Writes one JSON line per step and per epoch, plus periodic checkpoints.
struct RunLog {
    steps: BufWriter<fs::File>,
    epochs: BufWriter<fs::File>,
    dir: PathBuf,
    split: SplitSpec,
    weights: LossWeights,
    terms: LossTerms,
}

impl TrainObserver for RunLog {
    fn on_step(&mut self, record: &StepRecord) -> graftkit_core::Result<()> {
        writeln!(self.steps, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    fn on_epoch(&mut self, record: &EpochRecord) -> graftkit_core::Result<()> {
        writeln!(self.epochs, "{}", serde_json::to_string(record)?)?;
        self.steps.flush()?;
        self.epochs.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, epoch: usize, model: &GraftedModel) -> graftkit_core::Result<()> {
        let path = self.dir.join(format!("epoch{epoch:04}.ckpt"));
        Checkpoint::grafted(model, self.split, self.weights, self.terms).save(&path)
    }
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    match cfg.mode {
        Mode::Graft => train_grafted(cfg, out),
        Mode::Pretrain | Mode::Supervised => train_supervised(cfg, out),
    }
}

fn has_class_labels(samples: &[PairedSample]) -> bool {
    !samples.is_empty() && samples.iter().all(|s| s.label.as_ref().and_then(|l| l.class()).is_some())
}

fn train_grafted(cfg: &RunConfig, out: &Path) -> Result<()> {
    let tc = cfg.train_config()?;
    let pretrained = load_pretrained(cfg)?;
    let data = load_data(cfg)?;
    let mut log = RunLog {
        steps: BufWriter::new(fs::File::create(out.join("steps.jsonl"))?),
        epochs: BufWriter::new(fs::File::create(out.join("epochs.jsonl"))?),
        dir: out.to_path_buf(),
        split: tc.split,
        weights: tc.weights,
        terms: tc.loss_terms,
    };
    let trained = train_graft(&pretrained, tc.split, &data, &tc, &mut log)?;
    log.steps.flush()?;
    log.epochs.flush()?;
    let best = trained.best_model()?;
    Checkpoint::grafted(&trained.model, tc.split, tc.weights, tc.loss_terms).save(&out.join("final.ckpt"))?;
    Checkpoint::grafted(&best, tc.split, tc.weights, tc.loss_terms).save(&out.join("best.ckpt"))?;
    let mut report = trained.report.clone();
    report.final_checkpoint = Some("final.ckpt".into());
    write_json(&out.join("report.json"), &report)?;
    if has_class_labels(&data.test) {
        write_json(
            &out.join("metrics.json"),
            &json!({
                "test_samples": data.test.len(),
                "final_test_error_pct": graft_classification_error(&trained.model, &data.test)?,
                "best_test_error_pct": graft_classification_error(&best, &data.test)?,
                "best_epoch": report.best_epoch,
            }),
        )?;
    }
    Ok(())
}

fn view_inputs(samples: &[PairedSample], modality: bool) -> Vec<graftkit_core::Image> {
    samples
        .iter()
        .map(|s| if modality { s.pair.modality.clone() } else { s.pair.frame.clone() })
        .collect()
}

fn train_supervised(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let modality = cfg.mode == Mode::Supervised;
    let inputs = view_inputs(&data.train, modality);
    let labels = graftkit_core::graft_trainer::class_labels(&data.train)?;
    let mut chain = lenet5(inputs[0].dim().0, cfg.seed);
    let cc = ClassifierConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.lr,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        max_shift: cfg.max_shift,
    };
    let curve = train_classifier(&mut chain, &inputs, &labels, &cc)?;
    let mut f = BufWriter::new(fs::File::create(out.join("epochs.jsonl"))?);
    for (epoch, loss) in curve.iter().enumerate() {
        writeln!(f, "{}", json!({ "epoch": epoch, "loss": loss }))?;
    }
    f.flush()?;
    Checkpoint::model(&chain).save(&out.join("model.ckpt"))?;
    let train_error = top1_error(&predict(&chain, &inputs, 256)?, &labels)?;
    let test_error = if has_class_labels(&data.test) {
        let test_inputs = view_inputs(&data.test, modality);
        let test_labels = graftkit_core::graft_trainer::class_labels(&data.test)?;
        Some(top1_error(&predict(&chain, &test_inputs, 256)?, &test_labels)?)
    } else {
        None
    };
    write_json(
        &out.join("report.json"),
        &json!({
            "mode": cfg.mode,
            "epoch_loss": curve,
            "train_error_pct": train_error,
            "test_error_pct": test_error,
            "params": count_params(&chain),
            "checkpoint": "model.ckpt",
        }),
    )
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.boxes.is_some() {
        return eval_boxes(cfg, out);
    }
    let path = required(&cfg.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(Path::new(path)).with_context(|| format!("loading {path}"))?;
    let samples = match cfg.eval_split {
        EvalSplit::All => load_samples(cfg)?,
        EvalSplit::Train => load_data(cfg)?.train,
        EvalSplit::Test => load_data(cfg)?.test,
    };
    let labels = graftkit_core::graft_trainer::class_labels(&samples)?;
    let grafted = ckpt.part("gn_front").is_some();
    let use_modality = match cfg.view {
        View::Auto => grafted,
        View::Frame => false,
        View::Modality => true,
    };
    let inputs = view_inputs(&samples, use_modality);
    let pred = if grafted {
        let (model, _) = load_grafted(path)?;
        predict_with(|x| model.forward(x), &inputs, 256)?
    } else {
        let chain = ckpt.part("model").with_context(|| format!("{path} has no model part"))?;
        predict(chain, &inputs, 256)?
    };
    let report = json!({
        "checkpoint": path,
        "view": if use_modality { "modality" } else { "frame" },
        "samples": samples.len(),
        "top1_error_pct": top1_error(&pred, &labels)?,
    });
    write_json(&out.join("eval.json"), &report)?;
    println!("{report}");
    Ok(())
}

fn eval_boxes(cfg: &RunConfig, out: &Path) -> Result<()> {
    let a_path = required(&cfg.boxes, "boxes")?;
    let (dets_a, gts_a) = read_box_records(Path::new(a_path))?;
    let mut report = serde_json::Map::new();
    let report = match &cfg.boxes_b {
        None => {
            report.insert("ap50".into(), json!(ap50(&dets_a, &gts_a)?));
            report.insert("detections".into(), json!(dets_a.len()));
            report.insert("ground_truths".into(), json!(gts_a.len()));
            report
        }
        Some(b_path) => {
            let (dets_b, gts_b) = read_box_records(Path::new(b_path))?;
            let gts = if gts_a.is_empty() { gts_b } else { gts_a };
            let merged = nms_merge(&dets_a, &dets_b, cfg.nms_threshold)?;
            write_detections(&out.join("merged_detections.jsonl"), &merged)?;
            report.insert("ap50_a".into(), json!(ap50(&dets_a, &gts)?));
            report.insert("ap50_b".into(), json!(ap50(&dets_b, &gts)?));
            report.insert("ap50_merged".into(), json!(ap50(&merged, &gts)?));
            report.insert("merged_detections".into(), json!(merged.len()));
            report.insert("ground_truths".into(), json!(gts.len()));
            report
        }
    };
    write_json(&out.join("eval.json"), &report)?;
    println!("{}", serde_json::Value::Object(report));
    Ok(())
}

pub fn decode(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dc = cfg.decode_config()?;
    let pretrained = load_pretrained(cfg)?;
    let samples = load_samples(cfg)?;
    let sample = samples.get(cfg.sample_index).with_context(|| {
        format!("sample_index {} out of range for {} samples", cfg.sample_index, samples.len())
    })?;
    let (features, split_used, source) = match &cfg.checkpoint {
        Some(path) => {
            let (model, spec) = load_grafted(path)?;
            let spec = spec.unwrap_or_else(|| cfg.split());
            (model.gn_front.forward(&stack(&[&sample.pair.modality])?)?, spec, "grafted_front")
        }
        None => {
            let spec = cfg.split();
            let front = split(&pretrained, spec)?.front;
            (front.forward(&stack(&[&sample.pair.frame])?)?, spec, "pretrained_front")
        }
    };
    let front = split(&pretrained, split_used)?.front;
    let (img, trace) = decode_features(&features, &front, &dc)?;
    let decoded = img.index_axis(ndarray::Axis(0), 0).to_owned();
    save_png(&out.join("decoded.png"), &decoded)?;
    save_png(&out.join("frame.png"), &sample.pair.frame)?;
    fs::write(out.join("trace.csv"), trace.to_csv())?;
    write_json(
        &out.join("decode.json"),
        &json!({
            "source": source,
            "sample_index": cfg.sample_index,
            "split": split_used,
            "initial_objective": trace.objective.first(),
            "final_objective": trace.final_objective,
            "final_mse": trace.final_mse,
            "final_tv": trace.final_tv,
        }),
    )
}

pub fn voxelize_events(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = required(&cfg.events, "events")?;
    let events = read_events(Path::new(path)).with_context(|| format!("reading events {path}"))?;
    let end = match cfg.window_count {
        Some(n) => cfg.window_start + n,
        None => events.len(),
    };
    if cfg.window_start > end || end > events.len() {
        bail!(
            "event window {}..{end} outside the {} events of {path}",
            cfg.window_start,
            events.len()
        );
    }
    let window = &events[cfg.window_start..end];
    let height = cfg
        .height
        .unwrap_or_else(|| events.iter().map(|e| e.y as usize + 1).max().unwrap_or(1));
    let width = cfg
        .width
        .unwrap_or_else(|| events.iter().map(|e| e.x as usize + 1).max().unwrap_or(1));
    let grid = voxelize(window, cfg.slices, height, width)?;
    write_tensor_blob(&out.join("grid.gkt"), &grid.slices.clone().into_dyn())?;
    write_json(&out.join("grid.json"), &grid.sidecar())
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut images = load_mnist_dir(Path::new(&cfg.mnist_dir))
        .with_context(|| format!("loading MNIST-format images from {}", cfg.mnist_dir))?;
    if let Some(n) = cfg.limit {
        images.truncate(n);
    }
    let (samples, stats) = match cfg.kind {
        SynthKind::Events => {
            let sc = SynthEventConfig {
                steps: cfg.steps,
                threshold: cfg.threshold,
                min_speed: cfg.min_speed,
                max_speed: cfg.max_speed,
                slices: cfg.slices,
                frame_interval_us: cfg.frame_interval_us,
                seed: cfg.seed,
            };
            let so = synth_event_pairs(&images, &sc)?;
            let stats = json!({ "skipped": so.skipped, "total_events": so.total_events });
            (so.samples, stats)
        }
        SynthKind::Thermal => {
            let tc = SynthThermalConfig {
                noise_sigma: cfg.noise_sigma,
                blur_radius: cfg.blur_radius,
                remap: cfg.remap,
                seed: cfg.seed,
            };
            (synth_thermal_pairs(&images, &tc)?, json!({}))
        }
    };
    let manifest = write_dataset(&out.join("dataset"), &samples)?;
    write_json(
        &out.join("synth.json"),
        &json!({
            "kind": cfg.kind,
            "inputs": images.len(),
            "samples": samples.len(),
            "manifest": manifest,
            "stats": stats,
        }),
    )?;
    println!("{}", manifest.display());
    Ok(())
}

fn test_error_of(model: &GraftedModel, data: &DatasetSplit) -> graftkit_core::Result<f64> {
    graft_classification_error(model, &data.test)
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let tc = cfg.train_config()?;
    let pretrained = load_pretrained(cfg)?;
    let data = load_data(cfg)?;
    let table = run_ablation(&pretrained, &data, &tc, cfg.repeats, test_error_of)?;
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    write_json(&out.join("ablation.json"), &table)
}

pub fn split_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let tc = cfg.train_config()?;
    let pretrained = load_pretrained(cfg)?;
    let data = load_data(cfg)?;
    let specs = cfg.split_list(lenet_split_variants())?;
    let rows = run_split_sweep(&pretrained, &specs, &data, &tc, test_error_of)?;
    fs::write(out.join("split_sweep.csv"), sweep_to_csv(&rows))?;
    write_json(&out.join("split_sweep.json"), &rows)
}
