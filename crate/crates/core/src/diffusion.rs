//! Noise schedules, the forward corruption process, the MMSE estimate and
//! the unguided DDPM reverse step.
//!
//! Steps are 1-based: `t = T` is the noisiest latent and `t = 0` the clean
//! image, with `ᾱ_0 = 1`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Length of the training chain that sampling schedules are respaced from.
pub const TRAIN_STEPS: usize = 1000;

/// Per-step sampler noise `σ_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_t = √β_t`
    #[default]
    Beta,
    /// `σ_t = √(β_t (1-ᾱ_{t-1}) / (1-ᾱ_t))`
    Posterior,
}

/// Which `α` enters the x̂ coefficient `c_t = c·√α_{t-1}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffMode {
    /// Cumulative product `ᾱ_{t-1}`: the weight of x̂ inside x_{t-1}.
    #[default]
    Cumulative,
    /// Per-step `α_{t-1}`.
    PerStep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    model_times: Vec<f64>,
    sigma_mode: SigmaMode,
}

impl NoiseSchedule {
    /// `betas[t-1] = β_t`; `model_times[t-1]` is the time value fed to the denoiser.
    pub fn from_betas(betas: Vec<f64>, model_times: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || model_times.len() != betas.len() {
            return Err(Error::InvalidParameter(format!(
                "schedule needs >= 2 steps and one model time per step (got {} / {})",
                betas.len(),
                model_times.len()
            )));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidParameter("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("betas must be nondecreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut s = Self {
            betas,
            alphas,
            alpha_bars,
            sigmas: Vec::new(),
            model_times,
            sigma_mode: SigmaMode::Beta,
        };
        s.set_sigma_mode(SigmaMode::Beta);
        Ok(s)
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        make_linear_schedule(steps, beta_start, beta_end)
    }

    /// The default sampling schedule: the 1000-step linear chain
    /// (β from 1e-4 to 0.02) respaced to `steps` evenly spaced steps.
    pub fn default_sampling(steps: usize) -> Result<Self> {
        make_linear_schedule(TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)?.respaced(steps)
    }

    /// Keeps every `T/steps`-th step of this chain, recomputing the betas so
    /// that `ᾱ` agrees with the original at the kept steps.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let base = self.steps();
        if steps < 2 || steps > base {
            return Err(Error::InvalidParameter(format!(
                "cannot respace {base} steps to {steps}"
            )));
        }
        let kept: Vec<usize> = (1..=steps)
            .map(|i| ((i * base) as f64 / steps as f64).round() as usize)
            .collect();
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bar(t);
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let times = kept.iter().map(|&t| self.model_time(t)).collect();
        let mut s = Self::from_betas(betas, times)?;
        s.set_sigma_mode(self.sigma_mode);
        Ok(s)
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.set_sigma_mode(mode);
        self
    }

    fn set_sigma_mode(&mut self, mode: SigmaMode) {
        self.sigma_mode = mode;
        self.sigmas = (1..=self.steps())
            .map(|t| match mode {
                SigmaMode::Beta => self.beta(t).sqrt(),
                SigmaMode::Posterior => {
                    (self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))).sqrt()
                }
            })
            .collect();
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "step {t} outside [1, {}]", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    /// `α_t`, with `α_0 = 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas[self.idx(t)]
        }
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[self.idx(t)]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[self.idx(t)]
    }

    /// `Σ_t = √(1-ᾱ_t)`
    pub fn big_sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Time value in (0, 1] passed to the denoiser at step `t`.
    pub fn model_time(&self, t: usize) -> f64 {
        self.model_times[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn to_dump(&self) -> ScheduleDump {
        ScheduleDump {
            steps: self.steps(),
            beta: self.betas.clone(),
            alpha_bar: self.alpha_bars.clone(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_dump())?)?;
        Ok(())
    }
}

/// JSON fixture form of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDump {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidParameter(format!("schedule length {steps} < 2")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let times = (1..=steps).map(|t| t as f64 / steps as f64).collect();
    NoiseSchedule::from_betas(betas, times)
}

/// One reverse-chain record.
#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub t: usize,
    pub x_t: Tensor,
    pub eps_pred: Tensor,
    pub x_hat: Tensor,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1-ᾱ_t)·noise`
pub fn forward_diffuse(x0: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("forward_diffuse", x0, noise)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(noise, |x, n| a * x + b * n)
}

/// `(x_t - √(1-ᾱ_t)·ε̂) / √ᾱ_t`
pub fn mmse_estimate(x_t: &Tensor, eps_pred: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("mmse_estimate", x_t, eps_pred)?;
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::InvalidParameter(format!("alpha_bar({t}) = 0")));
    }
    let (s, inv) = ((1.0 - ab).sqrt(), 1.0 / ab.sqrt());
    let out = x_t.zip_map(eps_pred, |x, e| (x - s * e) * inv)?;
    out.check_finite("mmse_estimate")?;
    Ok(out)
}

/// Unguided reverse step
/// `(1/√α_t)(x_t - (1-α_t)/√(1-ᾱ_t)·ε̂) + σ_t·z`; `z` is ignored at `t = 1`.
pub fn ddpm_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    same_shape("ddpm_step", x_t, eps_pred)?;
    same_shape("ddpm_step", x_t, z)?;
    let alpha = sched.alpha(t);
    let inv = 1.0 / alpha.sqrt();
    let k = (1.0 - alpha) / sched.big_sigma(t);
    let mut out = x_t.zip_map(eps_pred, |x, e| inv * (x - k * e))?;
    if t > 1 {
        out.axpy(sched.sigma(t), z)?;
    }
    out.check_finite("ddpm_step")?;
    Ok(out)
}

/// Step coefficients `(c_t, d_t)` of the two guidance terms:
/// `c_t = c·√ᾱ_{t-1}` and `d_t = -d·(1-α_t)/(√α_t·√(1-ᾱ_t))`.
pub fn guidance_coeffs(t: usize, c: f64, d: f64, sched: &NoiseSchedule, mode: CoeffMode) -> (f64, f64) {
    let prev = match mode {
        CoeffMode::Cumulative => sched.alpha_bar(t - 1),
        CoeffMode::PerStep => sched.alpha(t - 1),
    };
    let alpha = sched.alpha(t);
    let c_t = c * prev.sqrt();
    let d_t = -d * (1.0 - alpha) / (alpha.sqrt() * sched.big_sigma(t));
    (c_t, d_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, standard_normal, Purpose};

    #[test]
    fn linear_schedule_terminal_alpha_bar() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        // direct product of (1 - β_t)
        let mut prod = 1.0;
        for i in 0..100 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0);
        }
        assert!((s.alpha_bar(100) - prod).abs() < 1e-15);
        assert!((s.alpha_bar(100) - 0.36356).abs() < 1e-5);
        assert_eq!(s.big_sigma(100), (1.0 - s.alpha_bar(100)).sqrt());
    }

    #[test]
    fn two_step_hand_product() {
        let s = make_linear_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(make_linear_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.03, 0.02).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn respaced_schedule_keeps_alpha_bar() {
        let base = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let s = base.respaced(100).unwrap();
        assert_eq!(s.steps(), 100);
        for t in 1..=100 {
            assert!((s.alpha_bar(t) - base.alpha_bar(10 * t)).abs() < 1e-12);
            assert_eq!(s.model_time(t), base.model_time(10 * t));
        }
        assert!(s.alpha_bar(100) < 1e-4);
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn posterior_sigma_vanishes_at_first_step() {
        let s = make_linear_schedule(10, 1e-3, 0.05).unwrap().with_sigma_mode(SigmaMode::Posterior);
        assert_eq!(s.sigma(1), 0.0);
        assert!(s.sigma(5) < s.beta(5).sqrt());
    }

    #[test]
    fn forward_diffuse_limits() {
        let s = make_linear_schedule(10, 1e-3, 0.05).unwrap();
        let mut rng = rng_for(3, Purpose::Sampling, 0);
        let x0 = standard_normal(&mut rng, &[2, 4, 4]);
        let n = standard_normal(&mut rng, &[2, 4, 4]);
        assert_eq!(forward_diffuse(&x0, 0, &n, &s).unwrap(), x0);
        let z = forward_diffuse(&Tensor::zeros(&[2, 4, 4]), 4, &n, &s).unwrap();
        let b = (1.0 - s.alpha_bar(4)).sqrt();
        assert_eq!(z, n.scale(b));
        assert!(forward_diffuse(&x0, 1, &Tensor::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn mmse_inverts_forward_diffusion() {
        let s = NoiseSchedule::default_sampling(50).unwrap();
        let mut rng = rng_for(5, Purpose::Sampling, 1);
        for t in [1, 10, 25, 50] {
            let x0 = standard_normal(&mut rng, &[3, 8, 8]);
            let n = standard_normal(&mut rng, &[3, 8, 8]);
            let xt = forward_diffuse(&x0, t, &n, &s).unwrap();
            let back = mmse_estimate(&xt, &n, t, &s).unwrap();
            assert!(back.sub(&x0).unwrap().max_abs() < 1e-10 * 100.0_f64.max(1.0 / s.alpha_bar(t).sqrt()));
        }
    }

    #[test]
    fn mmse_formula_and_resubstitution() {
        let s = NoiseSchedule::from_betas(vec![0.75, 0.8], vec![0.5, 1.0]).unwrap();
        // ᾱ_1 = 0.25
        let x = Tensor::new(vec![2], vec![1.0, -3.0]).unwrap();
        let e = mmse_estimate(&x, &Tensor::zeros(&[2]), 1, &s).unwrap();
        assert_eq!(e.data(), &[2.0, -6.0]);

        let s = NoiseSchedule::default_sampling(100).unwrap();
        let mut rng = rng_for(9, Purpose::Sampling, 2);
        for t in [3, 40, 90] {
            let xt = standard_normal(&mut rng, &[16]);
            let eps = standard_normal(&mut rng, &[16]);
            let xh = mmse_estimate(&xt, &eps, t, &s).unwrap();
            let again = forward_diffuse(&xh, t, &eps, &s).unwrap();
            assert!(again.sub(&xt).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn ddpm_step_identities() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3], vec![0.1, 0.2, 0.3]).unwrap();
        let mut rng = rng_for(1, Purpose::Sampling, 0);
        let x = standard_normal(&mut rng, &[5]);
        let y = ddpm_step(&x, &Tensor::zeros(&[5]), 2, &s, &Tensor::zeros(&[5])).unwrap();
        let want = x.scale(1.0 / s.alpha(2).sqrt());
        assert!(y.sub(&want).unwrap().max_abs() < 1e-15);
        // noise is dropped on the last step
        let z = standard_normal(&mut rng, &[5]);
        let eps = standard_normal(&mut rng, &[5]);
        assert_eq!(
            ddpm_step(&x, &eps, 1, &s, &z).unwrap(),
            ddpm_step(&x, &eps, 1, &s, &Tensor::zeros(&[5])).unwrap()
        );
    }

    #[test]
    fn ddpm_step_approaches_identity_as_beta_vanishes() {
        // β_t = 0 lies outside the schedule domain; check the limit instead.
        let x = Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let e = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let mut prev = f64::INFINITY;
        for delta in [1e-4, 1e-8, 1e-12] {
            let s = NoiseSchedule::from_betas(vec![delta, delta], vec![0.5, 1.0]).unwrap();
            let y = ddpm_step(&x, &e, 2, &s, &Tensor::zeros(&[3])).unwrap();
            let gap = y.sub(&x).unwrap().max_abs();
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn guidance_coefficient_values() {
        let s = NoiseSchedule::default_sampling(100).unwrap();
        let (c1, _) = guidance_coeffs(1, 0.7, 0.0, &s, CoeffMode::Cumulative);
        assert_eq!(c1, 0.7);
        assert_eq!(guidance_coeffs(37, 0.0, 0.0, &s, CoeffMode::Cumulative), (0.0, 0.0));
        let lin = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let (_, d) = guidance_coeffs(100, 1.0, 2.0, &lin, CoeffMode::Cumulative);
        let b: f64 = 0.02;
        let ab: f64 = (0..100).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0)).product();
        let want = -2.0 * b / ((1.0 - b).sqrt() * (1.0 - ab).sqrt());
        assert!((d - want).abs() < 1e-14);
        let (cp, _) = guidance_coeffs(50, 1.0, 0.0, &s, CoeffMode::PerStep);
        assert_eq!(cp, s.alpha(49).sqrt());
    }

    #[test]
    fn schedule_dump_fields() {
        let s = make_linear_schedule(3, 0.1, 0.3).unwrap();
        let json = serde_json::to_value(s.to_dump()).unwrap();
        assert_eq!(json["T"], 3);
        assert_eq!(json["beta"].as_array().unwrap().len(), 3);
        assert_eq!(json["alpha_bar"].as_array().unwrap().len(), 3);
    }
}
