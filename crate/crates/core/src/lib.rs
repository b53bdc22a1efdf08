//! Scale-aware multi-resolution pedestrian detection head.
//!
//! Candidates from a region proposal stage are routed by height to a
//! combination of CNN layers, RoI max pooled into a fixed grid, projected per
//! cell with PCA, optionally extended by histogram-pooled semantic and edge
//! channels, and rescored by a bootstrapped RealBoost forest.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod forest;
pub mod format;
pub mod geometry;
pub mod maps;
pub mod pca;
pub mod pipeline;
pub mod pooling;
pub mod routing;
pub mod synth;

pub use dataset::{Dataset, DatasetImage};
pub use error::{Error, Result};
pub use eval::{EvalProtocol, MetricsSummary};
pub use forest::{Forest, TrainConfig};
pub use geometry::{iou, nms, BBox, Candidate, Detection, EvalRegion, GroundTruthBox};
pub use maps::{EdgeMap, FeatureMap, ImageRecord, LabelMap};
pub use pca::{PcaProjector, PcaTarget};
pub use pipeline::{DetectorConfig, DetectorModel, RunManifest};
pub use pooling::{EdgePoolMode, HistNorm, PoolGrid};
pub use routing::{ChannelConfig, RoutingTable, ScaleBin, SemanticPooling};
pub use synth::{synth_generate, LayerSpec, SynthConfig};
