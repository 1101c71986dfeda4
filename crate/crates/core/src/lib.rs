//! Consensus labels from multiple bounding-box annotators.
//!
//! The crate covers the whole annotation-side pipeline:
//!
//! * [`geometry`]: corner-form boxes, IoU and weighted coordinate averaging.
//! * [`fusion`]: weighted boxes fusion of several annotators' boxes into
//!   consensus boxes carrying an agreement confidence.
//! * [`sim`]: noisy multi-expert annotation sets simulated from ground truth
//!   through per-expert transition matrices and IoU-bounded box jitter.
//! * [`loss`]: the two-term detection loss and its agreement re-weighted form,
//!   plus per-box weight export for external trainers.
//! * [`eval`]: greedy matching, 101-point interpolated AP and mAP.
//! * [`dataset`]: the versioned JSON container shared by every artifact.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod loss;
pub mod sim;

pub use dataset::{
    Category, DatasetFile, DatasetKind, LabeledBox, Parsed, SceneRecord, FORMAT_VERSION,
};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport, ScoredBox, Thresholds};
pub use fusion::{
    fuse_dataset, fuse_image, AnnotatedBox, Annotator, ConfidenceMode, FusedBox, FusionConfig,
};
pub use geometry::{area, iou, weighted_average, BBox};
pub use loss::{base_loss, earl_loss, export_weights, LossInputs, WeightExport};
pub use sim::{generate_dataset, SimConfig, SimulatedDataset, TransitionMatrix};

/// Category identifier as stored in dataset files.
pub type CategoryId = u32;
