//! Synthetic data, experiment configuration, the ablation runners and
//! their reports.

pub mod config;
pub mod dataset;
pub mod experiments;
pub mod lab;
pub mod report;

pub use config::{ExperimentConfig, MetricSpec, TokenizerSpec};
pub use dataset::{gen_dataset, generate, load_dataset, load_image_dir, DatasetSpec};
pub use experiments::{
    run_ablation_cfg, run_ablation_length, run_ablation_prompts, run_ablation_variants, run_convergence,
};
pub use lab::{EvalMetrics, Lab, Setup, TrainedModel};
pub use report::{Curve, Report, Row, SeedResult};
