//! Orchestration: configuration, the detector model, training, inference,
//! ablation, timing and density statistics.
pub mod ablate;
pub mod bench;
pub mod config;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod stats;
pub mod train;

pub use ablate::{ablate, ablation_csv, AblationRow};
pub use bench::{bench, BenchReport};
pub use config::{AblationGrid, AblationSwitches, PipelineConfig, RroiMode};
pub use infer::{evaluate_detections, infer_clouds, infer_dir, load_clouds, CloudFile};
pub use model::{InferMode, Model};
pub use stats::{density_report, DensityReport, DEFAULT_EDGE_BAND};
pub use train::{train, train_dir, Dataset, TrainOutcome};
