//! End-to-end use of the public API on a few synthetic digits.

use std::path::Path;

use graftkit_core::graft_trainer::graft_classification_error;
use graftkit_core::paired_data::{load_manifest, load_mnist_dir, split_temporal, synth_event_pairs, write_dataset};
use graftkit_core::paired_data::SynthEventConfig;
use graftkit_core::supervised::{predict, train_classifier, ClassifierConfig};
use graftkit_core::{
    lenet5, train_graft, Checkpoint, DecodeConfig, LossTerms, LossWeights, TrainConfig, TrainObserver,
};

struct Count(usize);

impl TrainObserver for Count {
    fn on_step(&mut self, _: &graftkit_core::StepRecord) -> graftkit_core::Result<()> {
        self.0 += 1;
        Ok(())
    }
}

#[test]
fn synthesize_pretrain_graft_checkpoint_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k");
    let mut images = load_mnist_dir(&mnist).unwrap();
    images.truncate(64);
    let synth = synth_event_pairs(
        &images,
        &SynthEventConfig {
            min_speed: 0.3,
            seed: 4,
            ..SynthEventConfig::default()
        },
    )
    .unwrap();
    assert!(synth.total_events > 0);

    let manifest = write_dataset(dir.path(), &synth.samples).unwrap();
    let reloaded = load_manifest(&manifest).unwrap();
    assert_eq!(reloaded.len(), synth.samples.len());
    for (a, b) in reloaded.iter().zip(&synth.samples) {
        assert_eq!(a.pair.modality, b.pair.modality);
        assert_eq!(a.label, b.label);
        assert!((&a.pair.frame - &b.pair.frame).iter().all(|d| d.abs() <= 0.5 / 255.0 + 1e-12));
    }
    let data = split_temporal(reloaded, 0.75).unwrap();

    let frames: Vec<_> = data.train.iter().map(|s| s.pair.frame.clone()).collect();
    let labels = graftkit_core::graft_trainer::class_labels(&data.train).unwrap();
    let mut net = lenet5(1, 0);
    let curve = train_classifier(
        &mut net,
        &frames,
        &labels,
        &ClassifierConfig {
            epochs: 3,
            ..ClassifierConfig::default()
        },
    )
    .unwrap();
    assert!(curve[2] < curve[0]);
    assert_eq!(predict(&net, &frames, 16).unwrap().len(), frames.len());

    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 1e-3,
        batch_size: 16,
        crop: None,
        weights: LossWeights {
            gamma_h: 1e-6,
            ..LossWeights::default()
        },
        allow_custom_gamma_h: true,
        ..TrainConfig::default()
    };
    let mut count = Count(0);
    let trained = train_graft(&net, cfg.split, &data, &cfg, &mut count).unwrap();
    assert_eq!(count.0, 2 * data.train.len().div_ceil(16));
    assert_eq!(trained.report.epochs.len(), 2);
    assert_eq!(trained.model.gn_front.input_shape().channels, 3);
    let err = graft_classification_error(&trained.model, &data.test).unwrap();
    assert!((0.0..=100.0).contains(&err));

    let path = dir.path().join("graft.ckpt");
    Checkpoint::grafted(&trained.model, cfg.split, cfg.weights, LossTerms::ALL)
        .save(&path)
        .unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.split, Some(cfg.split));
    assert_eq!(back.part("gn_front"), Some(&trained.model.gn_front));

    let x = graftkit_core::supervised::stack(&[&data.test[0].pair.modality]).unwrap();
    let h_hat = trained.model.gn_front.forward(&x).unwrap();
    let front = graftkit_core::split(&net, cfg.split).unwrap().front;
    let (img, trace) = graftkit_core::decode_features(
        &h_hat,
        &front,
        &DecodeConfig {
            iterations: 30,
            ..DecodeConfig::default()
        },
    )
    .unwrap();
    assert_eq!(img.dim(), (1, 1, 28, 28));
    assert!(trace.final_objective < trace.objective[0]);
}
