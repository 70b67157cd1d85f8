//! Minibatch Adam training for the denoiser and the classifier.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, make_linear_schedule, DEFAULT_BETA_END, DEFAULT_BETA_START, TRAIN_STEPS};
use crate::error::{Error, Result};
use crate::models::{ClassifierArch, ClassifierModel, DenoiserArch, DenoiserModel, Network};
use crate::numerics::Tensor;
use crate::rng::{rng_for, standard_normal, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of the data held out for validation.
    pub val_fraction: f64,
    /// Classifier only: inputs are perturbed by N(0, s²) with `s ~ U(0, input_noise)`.
    pub input_noise: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_decay: bool,
    /// Decay of the weight moving average that is validated and returned; 0 disables it.
    pub ema: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 16,
            lr: 2e-3,
            seed: 0,
            val_fraction: 0.1,
            input_noise: 0.0,
            cosine_decay: true,
            ema: 0.999,
        }
    }
}

/// One learning-curve row: training loss and the validation metric
/// (ε-MSE for the denoiser, accuracy for the classifier).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
}

pub fn write_curve_csv(rows: &[CurveRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

fn validate_config(n: usize, config: &TrainConfig) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    if !(config.lr >= 0.0) || config.batch == 0 {
        return Err(Error::InvalidParameter(format!(
            "lr must be >= 0 and batch > 0 (lr = {}, batch = {})",
            config.lr, config.batch
        )));
    }
    Ok(())
}

/// Seeded train/validation split. Tiny datasets validate on their training data.
fn split(n: usize, config: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(config.seed, Purpose::Data, 0));
    let n_val = (n as f64 * config.val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return (idx.clone(), idx);
    }
    let train = idx.split_off(n_val);
    (train, idx)
}

fn sum_grads(per_sample: Vec<(f64, Vec<Tensor>)>, scale: f64) -> (f64, Vec<Tensor>) {
    let mut iter = per_sample.into_iter();
    let (mut loss, mut acc) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            a.axpy(1.0, b).expect("matching gradient shapes");
        }
    }
    (loss * scale, acc.into_iter().map(|g| g.scale(scale)).collect())
}

/// Learning-rate schedule and weight averaging shared by both trainers.
struct Schedule {
    base_lr: f64,
    total: usize,
    cosine: bool,
    decay: f64,
    avg: Option<Vec<Tensor>>,
}

impl Schedule {
    fn new(config: &TrainConfig, steps_per_epoch: usize, params: &[Tensor]) -> Result<Self> {
        if !(0.0..1.0).contains(&config.ema) {
            return Err(Error::InvalidParameter(format!("ema decay {} outside [0, 1)", config.ema)));
        }
        Ok(Self {
            base_lr: config.lr,
            total: (config.epochs * steps_per_epoch).max(1),
            cosine: config.cosine_decay,
            decay: config.ema,
            avg: (config.ema > 0.0).then(|| params.to_vec()),
        })
    }

    fn lr(&self, step: usize) -> f64 {
        if !self.cosine {
            return self.base_lr;
        }
        let frac = step as f64 / self.total as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Folds the post-update weights into the average; early steps use a
    /// shorter horizon so the average is not dominated by the initialisation.
    fn track(&mut self, step: usize, params: &[Tensor]) {
        if let Some(avg) = &mut self.avg {
            let d = self.decay.min((1.0 + step as f64) / (10.0 + step as f64));
            for (a, p) in avg.iter_mut().zip(params) {
                for (x, &y) in a.data_mut().iter_mut().zip(p.data()) {
                    *x += (1.0 - d) * (y - *x);
                }
            }
        }
    }

    fn averaged<M: Network + Clone>(&self, model: &M) -> M {
        let mut out = model.clone();
        if let Some(avg) = &self.avg {
            out.params_mut().clone_from_slice(avg);
        }
        out
    }
}

fn divergence(epoch: usize, step: usize, loss: f64) -> Error {
    Error::Divergence { epoch, step, loss }
}

pub struct TrainedDenoiser {
    pub model: DenoiserModel,
    pub curve: Vec<CurveRow>,
}

/// Trains the ε-prediction objective on the 1000-step linear chain.
pub fn train_denoiser(images: &[Tensor], arch: DenoiserArch, config: &TrainConfig) -> Result<TrainedDenoiser> {
    validate_config(images.len(), config)?;
    let shape = arch.image_shape();
    for img in images {
        img.expect_shape("train_denoiser", &shape)?;
    }
    let sched = make_linear_schedule(TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
    let mut model = DenoiserModel::new(arch, config.seed)?;
    let (train, val) = split(images.len(), config);

    // fixed validation draws so the metric is comparable across epochs
    let mut vrng = rng_for(config.seed, Purpose::Validation, 0);
    let val_draws: Vec<(usize, usize, Tensor)> = val
        .iter()
        .map(|&i| (i, vrng.random_range(1..=TRAIN_STEPS), standard_normal(&mut vrng, &shape)))
        .collect();

    let mut adam = Adam::new(model.params(), config.lr);
    let mut sched_lr = Schedule::new(config, train.len().div_ceil(config.batch), model.params())?;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        let mut rng = rng_for(config.seed, Purpose::Training, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch) {
            let draws: Vec<(usize, usize, Tensor)> = chunk
                .iter()
                .map(|&i| (i, rng.random_range(1..=TRAIN_STEPS), standard_normal(&mut rng, &shape)))
                .collect();
            let per_sample: Vec<(f64, Vec<Tensor>)> = draws
                .par_iter()
                .map(|(i, t, noise)| -> Result<(f64, Vec<Tensor>)> {
                    let x_t = forward_diffuse(&images[*i], *t, noise, &sched)?;
                    let pred = model.predict_noise(&x_t, sched.model_time(*t))?;
                    let diff = pred.sub(noise)?;
                    let n = diff.len() as f64;
                    let (_, mut grads) = model.predict_with_vjp(&x_t, sched.model_time(*t), &diff.scale(2.0 / n))?;
                    grads.remove(0);
                    Ok((diff.norm_sq() / n, grads))
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite(_) => divergence(epoch, step, f64::NAN),
                    other => other,
                })?;
            let (loss, grads) = sum_grads(per_sample, 1.0 / chunk.len() as f64);
            if !loss.is_finite() {
                return Err(divergence(epoch, step, loss));
            }
            adam.set_lr(sched_lr.lr(step));
            adam.update(model.params_mut(), &grads);
            sched_lr.track(step, model.params());
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let eval = sched_lr.averaged(&model);
        let val_mse = val_draws
            .par_iter()
            .map(|(i, t, noise)| -> Result<f64> {
                let x_t = forward_diffuse(&images[*i], *t, noise, &sched)?;
                let pred = eval.predict_noise(&x_t, sched.model_time(*t))?;
                Ok(pred.sub(noise)?.norm_sq() / noise.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| match e {
                Error::NonFinite(_) => divergence(epoch, step, f64::NAN),
                other => other,
            })?
            .iter()
            .sum::<f64>()
            / val_draws.len() as f64;
        curve.push(CurveRow {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            metric: val_mse,
        });
    }
    Ok(TrainedDenoiser { model: sched_lr.averaged(&model), curve })
}

pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub curve: Vec<CurveRow>,
}

pub fn train_classifier(
    images: &[Tensor],
    labels: &[usize],
    arch: ClassifierArch,
    config: &TrainConfig,
) -> Result<TrainedClassifier> {
    validate_config(images.len(), config)?;
    if labels.len() != images.len() {
        return Err(Error::InvalidParameter(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= arch.num_classes) {
        return Err(Error::InvalidParameter(format!("label {bad} >= {} classes", arch.num_classes)));
    }
    let shape = arch.image_shape();
    let mut model = ClassifierModel::new(arch, config.seed)?;
    let (train, val) = split(images.len(), config);
    let mut adam = Adam::new(model.params(), config.lr);
    let mut sched_lr = Schedule::new(config, train.len().div_ceil(config.batch), model.params())?;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        let mut rng = rng_for(config.seed, Purpose::Training, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch) {
            let inputs: Vec<(Tensor, usize)> = chunk
                .iter()
                .map(|&i| {
                    let x = if config.input_noise > 0.0 {
                        let s = rng.random::<f64>() * config.input_noise;
                        let n = standard_normal(&mut rng, &shape);
                        images[i].zip_map(&n, |a, b| a + s * b).expect("same shape")
                    } else {
                        images[i].clone()
                    };
                    (x, labels[i])
                })
                .collect();
            let per_sample: Vec<(f64, Vec<Tensor>)> = inputs
                .par_iter()
                .map(|(x, y)| {
                    let (l, mut g) = model.loss_and_grads(x, *y)?;
                    g.remove(0);
                    Ok((l, g))
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite(_) => divergence(epoch, step, f64::NAN),
                    other => other,
                })?;
            let (loss, grads) = sum_grads(per_sample, 1.0 / chunk.len() as f64);
            if !loss.is_finite() {
                return Err(divergence(epoch, step, loss));
            }
            adam.set_lr(sched_lr.lr(step));
            adam.update(model.params_mut(), &grads);
            sched_lr.track(step, model.params());
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let acc = accuracy(&sched_lr.averaged(&model), &val.iter().map(|&i| (&images[i], labels[i])).collect::<Vec<_>>())?;
        curve.push(CurveRow {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            metric: acc,
        });
    }
    Ok(TrainedClassifier { model: sched_lr.averaged(&model), curve })
}

pub fn accuracy(model: &ClassifierModel, data: &[(&Tensor, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = data
        .par_iter()
        .map(|(x, y)| Ok(usize::from(model.predict(x)? == *y)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}
