//! Training loops, the sampling pipeline, evaluation metrics and the cost
//! profiler.

mod config;
mod eval;
pub mod frechet;
mod generate;
mod metrics;
mod model;
pub mod plots;
mod probe;
mod profile;
mod train;

pub use config::{GenerateConfig, Seeds, TrainConfig};
pub use eval::{balanced_classes, Evaluator, SampleScores};
pub use frechet::{frechet_distance, frechet_surrogate, gaussian_fit};
pub use generate::{generate_images, Generated};
pub use metrics::{append_jsonl, read_jsonl, MetricsRecord};
pub use model::MixarModel;
pub use probe::{Probe, ProbeConfig};
pub use profile::{profile_variant, CostReport, ProfileDims, Timing};
pub use train::{
    loss_rows, mixed_guidance, train_eval_gap, train_mixar, GuidanceSource, Noise, StepInputs, TokenizedSet,
    ValidationPlan,
};
