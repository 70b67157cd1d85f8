//! Restoration and classifier-guidance experiments over many seeds.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::{
    initial_noise, sample, write_trace_csv, GuidanceConfig, DEFAULT_T0_LINEAR, DEFAULT_T0_NONLINEAR,
};
use crate::diffusion::NoiseSchedule;
use crate::harness::dataset::{dataset_image, to_model_space, to_unit_space};
use crate::harness::image_io::write_pnm;
use crate::metrics::{psnr, residual, ssim, SsimOptions, Summary};
use crate::models::{load_weights, ClassifierModel, DenoiserModel};
use crate::numerics::Tensor;
use crate::operators::{DegradationOperator, GuidanceLoss, OperatorSpec, REC601};
use crate::rng::{derive_seed, rng_for, Purpose};

/// Dataset seed of the held-out images (training uses other seeds).
pub const DEFAULT_HELDOUT_SEED: u64 = 0x5eed_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Inpaint,
    Sr4,
    Colorize,
    Deblur,
    Classify,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Inpaint => "inpaint",
            Task::Sr4 => "sr4",
            Task::Colorize => "colorize",
            Task::Deblur => "deblur",
            Task::Classify => "classify",
        }
    }

    pub fn default_operator(self) -> Option<OperatorSpec> {
        match self {
            Task::Inpaint => Some(OperatorSpec::BoxMask { box_frac: 0.25 }),
            Task::Sr4 => Some(OperatorSpec::Downsample { factor: 4 }),
            Task::Colorize => Some(OperatorSpec::Grayscale { weights: REC601 }),
            Task::Deblur => Some(OperatorSpec::GaussianBlur { size: 7, std: 1.5 }),
            Task::Classify => None,
        }
    }

    pub fn default_t0(self) -> usize {
        match self {
            Task::Classify => DEFAULT_T0_NONLINEAR,
            _ => DEFAULT_T0_LINEAR,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidParameter(format!("unknown task {s:?}")))
    }
}

/// Builds a concrete operator for `[C, h, w]` images; box masks take their
/// position from `rng`.
pub fn build_operator(spec: &OperatorSpec, h: usize, w: usize, rng: &mut impl Rng) -> Result<DegradationOperator> {
    match spec {
        OperatorSpec::BoxMask { box_frac } => {
            if !(*box_frac > 0.0 && *box_frac < 1.0) {
                return Err(Error::InvalidParameter(format!("box_frac {box_frac} not in (0, 1)")));
            }
            let bh = ((h as f64) * box_frac.sqrt()).round() as usize;
            let bw = ((w as f64) * box_frac.sqrt()).round() as usize;
            let top = rng.random_range(0..=h - bh);
            let left = rng.random_range(0..=w - bw);
            DegradationOperator::box_mask(h, w, top, left, bh, bw)
        }
        OperatorSpec::MaskFile { path } => DegradationOperator::mask_from_pgm(path),
        OperatorSpec::Downsample { factor } => DegradationOperator::downsample(*factor),
        OperatorSpec::GaussianBlur { size, std } => DegradationOperator::gaussian_blur(*size, *std),
        OperatorSpec::Grayscale { weights } => Ok(DegradationOperator::grayscale(weights)),
    }
}

/// Naive image implied by a measurement alone: the observed pixels with a
/// mid-grey hole, a pixel-replicated upsampling, the grey image in every
/// channel, or the blurred image.
pub fn degraded_fill(op: &DegradationOperator, y: &Tensor, shape: &[usize]) -> Result<Tensor> {
    match op {
        DegradationOperator::Mask(_) | DegradationOperator::GaussianBlur { .. } => Ok(y.clone()),
        DegradationOperator::Downsample { factor } => Ok(op.adjoint(y, shape)?.scale((factor * factor) as f64)),
        DegradationOperator::Grayscale { weights } => {
            let total: f64 = weights.iter().sum();
            let gray = y.scale(1.0 / total);
            let mut data = Vec::with_capacity(shape.iter().product());
            for _ in 0..shape[0] {
                data.extend_from_slice(gray.data());
            }
            Tensor::new(shape.to_vec(), data)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(rename = "T")]
    pub steps: usize,
    pub sigma_y: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seeds: Vec<u64>,
    pub heldout_seed: u64,
    /// Overrides the task's default operator.
    pub operator: Option<OperatorSpec>,
    /// Classifier target; `None` cycles through the classes by seed.
    pub target_class: Option<usize>,
    /// Overrides the task's default switch step. The default is capped at `T`;
    /// an explicit value above `T` is rejected.
    pub t0_switch: Option<usize>,
    /// Method, scales and gating; its `seed` and `augment.k` are set per run.
    pub guidance: GuidanceConfig,
    pub denoiser: PathBuf,
    pub classifier: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub write_images: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Inpaint,
            steps: 100,
            sigma_y: 0.05,
            k: 8,
            seeds: (0..20).collect(),
            heldout_seed: DEFAULT_HELDOUT_SEED,
            operator: None,
            target_class: None,
            t0_switch: None,
            guidance: GuidanceConfig::default(),
            denoiser: PathBuf::from("weights/denoiser.dgw"),
            classifier: None,
            out_dir: None,
            write_images: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Short digest of every setting that can change the results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.write_images = false;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("T must be >= 1".into()));
        }
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma_y = {}", self.sigma_y)));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("K must be >= 1".into()));
        }
        if self.task != Task::Classify && self.operator.as_ref().or(self.task.default_operator().as_ref()).is_none() {
            return Err(Error::InvalidParameter("no operator".into()));
        }
        self.guidance_for(0).validate(self.steps)
    }

    /// Guidance settings of the trajectory for `seed`.
    pub fn guidance_for(&self, seed: u64) -> GuidanceConfig {
        let mut g = self.guidance.clone();
        g.seed = derive_seed(seed, Purpose::Sampling, 0);
        g.augment.k = self.k;
        g.t0_switch = self.t0_switch.unwrap_or(self.task.default_t0().min(self.steps));
        g
    }
}

/// Trained networks shared by every trajectory.
#[derive(Clone)]
pub struct Models {
    pub denoiser: Arc<DenoiserModel>,
    pub classifier: Option<Arc<ClassifierModel>>,
}

impl Models {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        if !config.denoiser.exists() {
            return Err(Error::Missing(config.denoiser.clone()));
        }
        let denoiser = Arc::new(load_weights(&config.denoiser)?.into_denoiser()?);
        let classifier = match &config.classifier {
            Some(p) if p.exists() => Some(Arc::new(load_weights(p)?.into_classifier()?)),
            Some(p) => return Err(Error::Missing(p.clone())),
            None if config.task == Task::Classify => {
                return Err(Error::InvalidParameter("classify task needs classifier weights".into()))
            }
            None => None,
        };
        Ok(Self { denoiser, classifier })
    }
}

/// One CSV row per trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub config_hash: String,
    pub task: String,
    pub method: String,
    pub seed: u64,
    /// `ok`, or the error that stopped the trajectory.
    pub status: String,
    /// Restored vs ground truth, in `[0, 1]` space.
    pub psnr: f64,
    pub ssim: f64,
    /// Degraded-fill image vs ground truth.
    pub degraded_psnr: f64,
    pub residual: f64,
    pub target: Option<usize>,
    pub predicted: Option<usize>,
}

impl SeedRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Everything one trajectory produced.
pub struct SeedRun {
    pub record: SeedRecord,
    pub truth: Option<Tensor>,
    pub degraded: Option<Tensor>,
    pub restored: Option<Tensor>,
    pub trace: Vec<crate::guidance::TraceRow>,
}

/// Condition and reference image for `seed` (images in model space).
pub struct Problem {
    pub loss: GuidanceLoss,
    pub truth: Option<Tensor>,
    pub degraded: Option<Tensor>,
    pub target: Option<usize>,
}

pub fn build_problem(config: &ExperimentConfig, models: &Models, seed: u64) -> Result<Problem> {
    if config.task == Task::Classify {
        let model = models
            .classifier
            .clone()
            .ok_or_else(|| Error::InvalidParameter("classify task needs a classifier".into()))?;
        let target = config.target_class.unwrap_or((seed % model.num_classes() as u64) as usize);
        return Ok(Problem { loss: GuidanceLoss::classifier(model, target)?, truth: None, degraded: None, target: Some(target) });
    }
    let (img, _) = dataset_image(seed as usize, config.heldout_seed);
    let x0 = to_model_space(&img);
    let shape = x0.shape().to_vec();
    let spec = config.operator.clone().or(config.task.default_operator()).expect("validated");
    let op = build_operator(&spec, shape[1], shape[2], &mut rng_for(seed, Purpose::Task, 0))?;
    let y = op.measure(&x0, config.sigma_y, &mut rng_for(seed, Purpose::Measurement, 0))?;
    let degraded = degraded_fill(&op, &y, &shape)?;
    Ok(Problem { loss: GuidanceLoss::linear(op, y, config.sigma_y)?, truth: Some(x0), degraded: Some(degraded), target: None })
}

fn failed(config: &ExperimentConfig, hash: &str, seed: u64, err: &Error) -> SeedRun {
    SeedRun {
        record: SeedRecord {
            config_hash: hash.to_string(),
            task: config.task.name().into(),
            method: config.guidance.method.name().into(),
            seed,
            status: err.to_string(),
            psnr: f64::NAN,
            ssim: f64::NAN,
            degraded_psnr: f64::NAN,
            residual: f64::NAN,
            target: None,
            predicted: None,
        },
        truth: None,
        degraded: None,
        restored: None,
        trace: Vec::new(),
    }
}

fn run_seed_inner(config: &ExperimentConfig, models: &Models, sched: &NoiseSchedule, hash: &str, seed: u64) -> Result<SeedRun> {
    let problem = build_problem(config, models, seed)?;
    let g = config.guidance_for(seed);
    let x_t = initial_noise(g.seed, &models.denoiser.arch().image_shape());
    let out = sample(models.denoiser.as_ref(), &problem.loss, sched, &g, x_t)?;
    let restored = to_unit_space(&out.x0);
    let resid = residual(&problem.loss, &out.x0)?;
    let (mut p, mut s, mut dp) = (f64::NAN, f64::NAN, f64::NAN);
    let truth = problem.truth.as_ref().map(to_unit_space);
    let degraded = problem.degraded.as_ref().map(to_unit_space);
    if let (Some(t), Some(d)) = (&truth, &degraded) {
        p = psnr(&restored, t, 1.0)?;
        s = ssim(&restored, t, &SsimOptions::default())?;
        dp = psnr(d, t, 1.0)?;
    }
    let predicted = match (&models.classifier, problem.target) {
        (Some(c), Some(_)) => Some(c.predict(&out.x0)?),
        _ => None,
    };
    Ok(SeedRun {
        record: SeedRecord {
            config_hash: hash.to_string(),
            task: config.task.name().into(),
            method: config.guidance.method.name().into(),
            seed,
            status: "ok".into(),
            psnr: p,
            ssim: s,
            degraded_psnr: dp,
            residual: resid,
            target: problem.target,
            predicted,
        },
        truth,
        degraded,
        restored: Some(restored),
        trace: out.trace,
    })
}

/// Runs one trajectory; failures are folded into the record.
pub fn run_seed(config: &ExperimentConfig, models: &Models, seed: u64) -> SeedRun {
    let hash = config.hash();
    let sched = match NoiseSchedule::default_sampling(config.steps) {
        Ok(s) => s,
        Err(e) => return failed(config, &hash, seed, &e),
    };
    run_seed_inner(config, models, &sched, &hash, seed).unwrap_or_else(|e| failed(config, &hash, seed, &e))
}

/// Aggregates over the successful trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub psnr: Summary,
    pub ssim: Summary,
    pub degraded_psnr: Summary,
    pub residual: Summary,
    /// Fraction of trajectories whose restored PSNR beats the degraded fill.
    pub beats_degraded: f64,
    /// Classifier tasks: fraction of samples predicted as the target.
    pub hit_rate: f64,
}

impl ExperimentSummary {
    pub fn from_records(hash: &str, records: &[SeedRecord]) -> Self {
        let ok: Vec<&SeedRecord> = records.iter().filter(|r| r.ok()).collect();
        let col = |f: fn(&SeedRecord) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<_>>();
        let frac = |hits: usize| if ok.is_empty() { f64::NAN } else { hits as f64 / ok.len() as f64 };
        let classified: Vec<_> = ok.iter().filter(|r| r.target.is_some()).collect();
        Self {
            config_hash: hash.to_string(),
            n_ok: ok.len(),
            n_failed: records.len() - ok.len(),
            psnr: Summary::of(&col(|r| r.psnr)),
            ssim: Summary::of(&col(|r| r.ssim)),
            degraded_psnr: Summary::of(&col(|r| r.degraded_psnr)),
            residual: Summary::of(&col(|r| r.residual)),
            beats_degraded: frac(ok.iter().filter(|r| r.psnr > r.degraded_psnr).count()),
            hit_rate: if classified.is_empty() {
                f64::NAN
            } else {
                classified.iter().filter(|r| r.predicted == r.target).count() as f64 / classified.len() as f64
            },
        }
    }
}

pub struct ExperimentOutcome {
    pub records: Vec<SeedRecord>,
    pub summary: ExperimentSummary,
    /// Per-seed traces in seed order.
    pub traces: Vec<Vec<crate::guidance::TraceRow>>,
}

pub fn write_records_csv(records: &[SeedRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_artifacts(dir: &Path, run: &SeedRun) -> Result<()> {
    let d = dir.join(format!("seed_{:04}", run.record.seed));
    std::fs::create_dir_all(&d)?;
    for (name, img) in [("truth", &run.truth), ("degraded", &run.degraded), ("restored", &run.restored)] {
        if let Some(img) = img {
            write_pnm(img, &d.join(format!("{name}.ppm")))?;
        }
    }
    write_trace_csv(&run.trace, &d.join("trace.csv"))
}

/// All seeds of `config` with already loaded models; trajectories run in
/// parallel and results come back in seed order.
pub fn run_with_models(config: &ExperimentConfig, models: &Models) -> Result<ExperimentOutcome> {
    config.validate()?;
    let hash = config.hash();
    let runs: Vec<SeedRun> = config.seeds.par_iter().map(|&s| run_seed(config, models, s)).collect();
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
        if config.write_images {
            for run in &runs {
                write_artifacts(dir, run)?;
            }
        }
    }
    let records: Vec<SeedRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let summary = ExperimentSummary::from_records(&hash, &records);
    if let Some(dir) = &config.out_dir {
        write_records_csv(&records, &dir.join("results.csv"))?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    let traces = runs.into_iter().map(|r| r.trace).collect();
    Ok(ExperimentOutcome { records, summary, traces })
}

/// Loads the weights named in `config` and runs every seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let models = Models::load(config)?;
    run_with_models(config, &models)
}
