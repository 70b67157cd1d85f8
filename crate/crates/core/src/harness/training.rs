//! Training jobs over the shapes dataset, as run by the CLI.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::dataset::{generate_dataset, to_model_space};
use crate::models::{
    save_weights, train_classifier, train_denoiser, write_curve_csv, ClassifierArch, DenoiserArch, Dtype, StoredModel,
    TrainConfig, TrainedClassifier, TrainedDenoiser,
};

/// Dataset seed used for training unless configured otherwise.
pub const DEFAULT_TRAIN_DATA_SEED: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub n: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { n: 2000, seed: DEFAULT_TRAIN_DATA_SEED }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserJob {
    pub data: DataSpec,
    pub arch: DenoiserArch,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub curve: Option<PathBuf>,
    pub dtype: Dtype,
}

impl Default for DenoiserJob {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            arch: DenoiserArch::default(),
            train: TrainConfig { epochs: 20, ..TrainConfig::default() },
            out: PathBuf::from("weights/denoiser.dgw"),
            curve: None,
            dtype: Dtype::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierJob {
    pub data: DataSpec,
    pub arch: ClassifierArch,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub curve: Option<PathBuf>,
    pub dtype: Dtype,
}

impl Default for ClassifierJob {
    fn default() -> Self {
        Self {
            data: DataSpec { n: 12000, ..DataSpec::default() },
            arch: ClassifierArch::default(),
            train: TrainConfig { epochs: 20, input_noise: 0.3, ..TrainConfig::default() },
            out: PathBuf::from("weights/classifier.dgw"),
            curve: None,
            dtype: Dtype::F64,
        }
    }
}

fn prepare(path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Trains the denoiser on model-space images and writes weights (and the
/// learning curve when requested).
pub fn run_denoiser_job(job: &DenoiserJob) -> Result<TrainedDenoiser> {
    let data = generate_dataset(job.data.n, job.data.seed)?;
    let images: Vec<_> = data.images.iter().map(to_model_space).collect();
    let trained = train_denoiser(&images, job.arch.clone(), &job.train)?;
    prepare(&job.out)?;
    save_weights(&StoredModel::Denoiser(trained.model.clone()), &job.out, job.dtype)?;
    if let Some(c) = &job.curve {
        prepare(c)?;
        write_curve_csv(&trained.curve, c)?;
    }
    Ok(trained)
}

pub fn run_classifier_job(job: &ClassifierJob) -> Result<TrainedClassifier> {
    let data = generate_dataset(job.data.n, job.data.seed)?;
    let images: Vec<_> = data.images.iter().map(to_model_space).collect();
    let trained = train_classifier(&images, &data.labels, job.arch.clone(), &job.train)?;
    prepare(&job.out)?;
    save_weights(&StoredModel::Classifier(trained.model.clone()), &job.out, job.dtype)?;
    if let Some(c) = &job.curve {
        prepare(c)?;
        write_curve_csv(&trained.curve, c)?;
    }
    Ok(trained)
}
