//! Network grafting: replace the front end of a pretrained vision network
//! with one trained on a new sensor modality by matching intermediate
//! features of time-synchronized frame pairs.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod event_voxel;
pub mod feature_decoder;
pub mod graft_trainer;
pub mod layers;
pub mod losses;
pub mod model_graph;
pub mod optim;
pub mod paired_data;
pub mod supervised;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use evaluation::{ap50, iou, nms_merge, top1_error, BBox, Detection, GroundTruth};
pub use event_voxel::{voxelize, EventRecord, Polarity, VoxelGrid};
pub use feature_decoder::{decode_features, tv, DecodeConfig, DecodeTrace};
pub use graft_trainer::{
    run_ablation, run_split_sweep, train_graft, AblationTable, FrontInit, StepRecord, SweepRow, TrainConfig,
    TrainObserver, TrainReport, TrainedGraft,
};
pub use layers::{Layer, LayerSpec, Shape3, Tensor};
pub use losses::{fel, frl, fsl, gram, total_loss, FeatureMap, LossBreakdown, LossTerms, LossWeights};
pub use model_graph::{
    build_grafted_frontend, graft, lenet5, split, Block, BlockChain, BlockSpec, GraftedModel, SplitSpec,
};
pub use optim::Adam;
pub use paired_data::{DatasetSplit, Image, Label, PairedSample, SensorPair};
