//! Training loop, inference, evaluation and analysis tools built on the
//! model, sampling, discovery and loss modules.

pub mod config;
pub mod coverage;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod train;

pub use config::{ApMode, DataConfig, EvalConfig, InferConfig, RunConfig, TrainConfig};
pub use coverage::{
    argmax_coverage, discovery_coverage, CoverageReport, CoverageRow, DiscoveryRecord,
};
pub use eval::{evaluate, EvalReport};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckRow};
pub use infer::{
    detect, detect_all, detection_records, read_detections, write_detections, Detection,
    DetectionRecord,
};
pub use train::{discover, init_network, StepReport, Supervision, Trainer};
