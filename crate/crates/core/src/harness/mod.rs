//! Datasets, experiment orchestration and file formats for the CLI.

pub mod ablation;
pub mod dataset;
pub mod experiment;
pub mod gradcheck;
pub mod image_io;
pub mod training;

pub use ablation::{ablate, default_sweep_grid, sweep, write_rows_csv, AblationAxis, AblationRow};
pub use dataset::{dataset_image, generate_dataset, to_model_space, to_unit_space, Shape, ShapesDataset, CLASS_NAMES};
pub use experiment::{
    build_operator, build_problem, degraded_fill, run_experiment, run_seed, run_with_models, write_records_csv,
    ExperimentConfig, ExperimentOutcome, ExperimentSummary, Models, SeedRecord, Task,
};
pub use training::{run_classifier_job, run_denoiser_job, ClassifierJob, DataSpec, DenoiserJob};
