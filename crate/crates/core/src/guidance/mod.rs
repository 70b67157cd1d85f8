//! Guided reverse sampling.
//!
//! The Dreamguider step perturbs both parts of the DDPM update using only the
//! gradient of the guidance loss at the MMSE estimate x̂_t: a term along
//! `g_x̂` and a term along the chain-rule gradient with respect to ε̂,
//! `g_ε = -(Σ_t/√ᾱ_t)·g_x̂`. Step sizes come from [`DogState`] unless fixed
//! by hand. DPS (backpropagation through the denoiser) and MGD (x̂-only,
//! fixed scale) are provided as baselines.

mod dog;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{averaged_loss_and_grad, AugmentConfig};
use crate::diffusion::{ddpm_step, guidance_coeffs, mmse_estimate, CoeffMode, NoiseSchedule};
use crate::error::{shape_mismatch, Error, Result};
use crate::models::DenoiserModel;
use crate::numerics::Tensor;
use crate::operators::GuidanceLoss;
use crate::rng::{derive_seed, rng_for, standard_normal, Purpose};

pub use dog::{estimate_scale, DogState, INITIAL_SCALE_NUMERATOR};

/// Switch step for linear degradations (out of 100 steps).
pub const DEFAULT_T0_LINEAR: usize = 5;
/// Switch step for classifier guidance.
pub const DEFAULT_T0_NONLINEAR: usize = 30;

/// Noise predictor usable by the samplers.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor>;

    /// Prediction and the input-gradient of `⟨cotangent, ε̂(x_t)⟩`.
    fn input_vjp(&self, x_t: &Tensor, t: usize, sched: &NoiseSchedule, cotangent: &Tensor) -> Result<(Tensor, Tensor)>;
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, x_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
        DenoiserModel::predict_noise(self, x_t, sched.model_time(t))
    }

    fn input_vjp(&self, x_t: &Tensor, t: usize, sched: &NoiseSchedule, cotangent: &Tensor) -> Result<(Tensor, Tensor)> {
        DenoiserModel::input_vjp(self, x_t, sched.model_time(t), cotangent)
    }
}

/// Exact noise predictor for data `x0 ~ N(mean, std²·I)`.
///
/// `ε̂(x_t) = √(1-ᾱ)·(x_t - √ᾱ·mean) / (ᾱ·std² + 1 - ᾱ)`; being affine in
/// `x_t` it gives a cheap stand-in for a trained network in tests.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    pub mean: Tensor,
    pub std: f64,
}

impl GaussianPrior {
    fn gain(&self, t: usize, sched: &NoiseSchedule) -> (f64, f64) {
        let ab = sched.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / (ab * self.std * self.std + 1.0 - ab);
        (k, ab.sqrt())
    }
}

impl NoisePredictor for GaussianPrior {
    fn predict_noise(&self, x_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
        let (k, s) = self.gain(t, sched);
        x_t.zip_map(&self.mean, |x, m| k * (x - s * m))
    }

    fn input_vjp(&self, x_t: &Tensor, t: usize, sched: &NoiseSchedule, cotangent: &Tensor) -> Result<(Tensor, Tensor)> {
        if cotangent.shape() != x_t.shape() {
            return Err(shape_mismatch("input_vjp", x_t.shape(), cotangent.shape()));
        }
        let (k, _) = self.gain(t, sched);
        Ok((self.predict_noise(x_t, t, sched)?, cotangent.scale(k)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Dreamguider,
    Dps,
    Mgd,
    None,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dreamguider => "dreamguider",
            Method::Dps => "dps",
            Method::Mgd => "mgd",
            Method::None => "none",
        }
    }
}

/// Step scales. For `dps` and `mgd` the manual `c` is the single scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    Auto,
    Manual { c: f64, d: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    XhatOnly,
    EpsOnly,
    #[default]
    Both,
}

/// When each term is active with `components = both`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// ε term for `t > t0`, x̂ term for `t <= t0`.
    #[default]
    EpsFirst,
    /// x̂ term for `t > t0`, ε term for `t < t0`, neither at `t = t0`.
    XhatFirst,
    /// Both terms at every step.
    Simultaneous,
}

/// Which statistics feed the two scale estimators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// `c` from (x̂, g_x̂), `d` from (ε̂, g_ε).
    #[default]
    Own,
    /// `c` from (ε̂, g_ε), `d` from (x̂, g_x̂).
    Swapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub method: Method,
    pub t0_switch: usize,
    pub augment: AugmentConfig,
    pub scale_mode: ScaleMode,
    pub components: Components,
    pub gating: Gating,
    pub pairing: Pairing,
    pub coeff_mode: CoeffMode,
    /// Root of the sampler noise and augmentation streams.
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            method: Method::Dreamguider,
            t0_switch: DEFAULT_T0_LINEAR,
            augment: AugmentConfig::default(),
            scale_mode: ScaleMode::Auto,
            components: Components::Both,
            gating: Gating::EpsFirst,
            pairing: Pairing::Own,
            coeff_mode: CoeffMode::Cumulative,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn unguided(seed: u64) -> Self {
        Self { method: Method::None, seed, ..Self::default() }
    }

    /// Single-scale configuration for the `dps` and `mgd` baselines.
    pub fn baseline(method: Method, scale: f64, seed: u64) -> Self {
        Self {
            method,
            scale_mode: ScaleMode::Manual { c: scale, d: 0.0 },
            components: Components::XhatOnly,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.t0_switch > steps {
            return Err(Error::InvalidParameter(format!("t0_switch {} exceeds T = {steps}", self.t0_switch)));
        }
        if let ScaleMode::Manual { c, d } = self.scale_mode {
            if !(c >= 0.0 && d >= 0.0 && c.is_finite() && d.is_finite()) {
                return Err(Error::InvalidParameter(format!("manual scales must be finite and >= 0, got ({c}, {d})")));
            }
        } else if matches!(self.method, Method::Dps | Method::Mgd) {
            return Err(Error::InvalidParameter(format!("{} needs a manual scale", self.method.name())));
        }
        if self.augment.enabled && self.augment.k == 0 {
            return Err(Error::InvalidParameter("augmentation count K must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the (x̂, ε) terms are applied at step `t`.
    pub fn active(&self, t: usize) -> (bool, bool) {
        match self.components {
            Components::XhatOnly => (true, false),
            Components::EpsOnly => (false, true),
            Components::Both => match self.gating {
                Gating::EpsFirst => (t <= self.t0_switch, t > self.t0_switch),
                Gating::XhatFirst => (t > self.t0_switch, t < self.t0_switch),
                Gating::Simultaneous => (true, true),
            },
        }
    }
}

/// Switch step suited to the kind of loss.
pub fn default_t0(loss: &GuidanceLoss) -> usize {
    match loss {
        GuidanceLoss::Linear { .. } => DEFAULT_T0_LINEAR,
        GuidanceLoss::Classifier { .. } => DEFAULT_T0_NONLINEAR,
    }
}

/// Scale estimators of one trajectory.
#[derive(Clone, Debug, Default)]
pub struct DogPair {
    pub c: DogState,
    pub d: DogState,
}

/// One row of the per-step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub loss: f64,
    /// `‖g_x̂‖`
    pub grad_norm: f64,
    pub c: f64,
    pub d: f64,
    pub c_t: f64,
    pub d_t: f64,
    pub xhat_active: bool,
    pub eps_active: bool,
    pub c_max_dist: f64,
    pub c_grad_sq_sum: f64,
    pub d_max_dist: f64,
    pub d_grad_sq_sum: f64,
}

impl TraceRow {
    fn unguided(t: usize) -> Self {
        Self {
            t,
            loss: 0.0,
            grad_norm: 0.0,
            c: 0.0,
            d: 0.0,
            c_t: 0.0,
            d_t: 0.0,
            xhat_active: false,
            eps_active: false,
            c_max_dist: 0.0,
            c_grad_sq_sum: 0.0,
            d_max_dist: 0.0,
            d_grad_sq_sum: 0.0,
        }
    }
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Gradient `g_ε` of the loss with respect to ε̂ implied by x̂ = (x_t - Σ_t ε̂)/√ᾱ_t.
pub fn eps_gradient(g_xhat: &Tensor, t: usize, sched: &NoiseSchedule) -> Tensor {
    let k = -sched.big_sigma(t) / sched.alpha_bar(t).sqrt();
    g_xhat.scale(k)
}

fn guided_loss(loss: &GuidanceLoss, x_hat: &Tensor, t: usize, config: &GuidanceConfig) -> Result<(f64, Tensor)> {
    let seed = derive_seed(config.seed, Purpose::Augmentation, t as u64);
    let (value, g) = match averaged_loss_and_grad(loss, x_hat, &config.augment, seed) {
        Ok(v) => v,
        Err(Error::NonFinite(_)) => return Err(Error::GuidanceDiverged { t, loss: f64::NAN, grad_norm: f64::NAN }),
        Err(e) => return Err(e),
    };
    let grad_norm = g.norm();
    if !value.is_finite() || !grad_norm.is_finite() {
        return Err(Error::GuidanceDiverged { t, loss: value, grad_norm });
    }
    Ok((value, g))
}

fn finish(out: Tensor, row: &TraceRow) -> Result<Tensor> {
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::GuidanceDiverged { t: row.t, loss: row.loss, grad_norm: row.grad_norm });
    }
    Ok(out)
}

/// Unguided step; `z` is ignored at `t = 1`.
pub fn unguided_step<M: NoisePredictor + ?Sized>(
    x_t: &Tensor,
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    let eps = model.predict_noise(x_t, t, sched)?;
    ddpm_step(x_t, &eps, t, sched, z)
}

/// One Dreamguider update `x_t → x_{t-1}` with its trace row.
#[allow(clippy::too_many_arguments)]
pub fn dreamguider_step<M: NoisePredictor + ?Sized>(
    x_t: &Tensor,
    t: usize,
    model: &M,
    loss: &GuidanceLoss,
    sched: &NoiseSchedule,
    config: &GuidanceConfig,
    states: &mut DogPair,
    z: &Tensor,
) -> Result<(Tensor, TraceRow)> {
    let eps = model.predict_noise(x_t, t, sched)?;
    let x_hat = mmse_estimate(x_t, &eps, t, sched)?;
    let (value, g_x) = guided_loss(loss, &x_hat, t, config)?;
    let g_eps = eps_gradient(&g_x, t, sched);

    let (c, d) = match config.scale_mode {
        ScaleMode::Manual { c, d } => (c, d),
        ScaleMode::Auto => match config.pairing {
            Pairing::Own => (
                states.c.estimate(t, &x_hat, &g_x)?,
                states.d.estimate(t, &eps, &g_eps)?,
            ),
            Pairing::Swapped => (
                states.c.estimate(t, &eps, &g_eps)?,
                states.d.estimate(t, &x_hat, &g_x)?,
            ),
        },
    };
    let (c_t, d_t) = guidance_coeffs(t, c, d, sched, config.coeff_mode);
    let (xhat_on, eps_on) = config.active(t);

    let big_sigma = sched.big_sigma(t);
    let mut out = ddpm_step(x_t, &eps, t, sched, z)?;
    // zero coefficients are skipped so that zero guidance is exact
    if xhat_on && c_t != 0.0 {
        out.axpy(-c_t * big_sigma, &g_x)?;
    }
    if eps_on && d_t != 0.0 {
        out.axpy(-d_t * big_sigma, &g_eps)?;
    }
    let row = TraceRow {
        t,
        loss: value,
        grad_norm: g_x.norm(),
        c,
        d,
        c_t,
        d_t,
        xhat_active: xhat_on,
        eps_active: eps_on,
        c_max_dist: states.c.max_dist(),
        c_grad_sq_sum: states.c.grad_sq_sum(),
        d_max_dist: states.d.max_dist(),
        d_grad_sq_sum: states.d.grad_sq_sum(),
    };
    Ok((finish(out, &row)?, row))
}

/// MGD baseline: `ddpm_step - scale·√ᾱ_{t-1}·Σ_t·g_x̂`.
#[allow(clippy::too_many_arguments)]
pub fn mgd_step<M: NoisePredictor + ?Sized>(
    x_t: &Tensor,
    t: usize,
    model: &M,
    loss: &GuidanceLoss,
    sched: &NoiseSchedule,
    scale: f64,
    config: &GuidanceConfig,
    z: &Tensor,
) -> Result<(Tensor, TraceRow)> {
    let cfg = GuidanceConfig {
        method: Method::Mgd,
        scale_mode: ScaleMode::Manual { c: scale, d: 0.0 },
        components: Components::XhatOnly,
        coeff_mode: CoeffMode::Cumulative,
        ..config.clone()
    };
    dreamguider_step(x_t, t, model, loss, sched, &cfg, &mut DogPair::default(), z)
}

/// DPS baseline: `ddpm_step - scale·∇_{x_t} r(x̂_t(x_t))`, with the gradient
/// pulled back through the denoiser.
#[allow(clippy::too_many_arguments)]
pub fn dps_step<M: NoisePredictor + ?Sized>(
    x_t: &Tensor,
    t: usize,
    model: &M,
    loss: &GuidanceLoss,
    sched: &NoiseSchedule,
    scale: f64,
    config: &GuidanceConfig,
    z: &Tensor,
) -> Result<(Tensor, TraceRow)> {
    let eps = model.predict_noise(x_t, t, sched)?;
    let x_hat = mmse_estimate(x_t, &eps, t, sched)?;
    let (value, g_x) = guided_loss(loss, &x_hat, t, config)?;
    let mut out = ddpm_step(x_t, &eps, t, sched, z)?;
    let mut row = TraceRow::unguided(t);
    row.loss = value;
    row.grad_norm = g_x.norm();
    row.c = scale;
    row.c_t = scale;
    row.xhat_active = true;
    if scale != 0.0 {
        let g_in = dps_input_gradient(x_t, t, model, sched, &g_x)?;
        out.axpy(-scale, &g_in)?;
    }
    Ok((finish(out, &row)?, row))
}

/// `∇_{x_t} r(x̂_t(x_t))` given `g = ∇_x̂ r`: `(g - Σ_t·J_εᵀ g)/√ᾱ_t`.
pub fn dps_input_gradient<M: NoisePredictor + ?Sized>(
    x_t: &Tensor,
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    g_xhat: &Tensor,
) -> Result<Tensor> {
    let (_, jt_g) = model.input_vjp(x_t, t, sched, g_xhat)?;
    let (s, inv) = (sched.big_sigma(t), 1.0 / sched.alpha_bar(t).sqrt());
    g_xhat.zip_map(&jt_g, |g, j| (g - s * j) * inv)
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub x0: Tensor,
    pub trace: Vec<TraceRow>,
}

/// Standard-normal start for a trajectory rooted at `seed`.
pub fn initial_noise(seed: u64, shape: &[usize]) -> Tensor {
    standard_normal(&mut rng_for(seed, Purpose::Sampling, 0), shape)
}

/// Full reverse chain `t = T … 1` from `x_T`.
///
/// Sampler noise comes from one stream rooted at `config.seed` and is drawn
/// identically for every method, so methods differ only in their guidance.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    loss: &GuidanceLoss,
    sched: &NoiseSchedule,
    config: &GuidanceConfig,
    x_t: Tensor,
) -> Result<SampleOutput> {
    config.validate(sched.steps())?;
    x_t.check_finite("x_T")?;
    let mut noise = rng_for(config.seed, Purpose::Sampling, 1);
    let shape = x_t.shape().to_vec();
    let zeros = Tensor::zeros(&shape);
    let mut states = DogPair::default();
    let mut trace = Vec::with_capacity(sched.steps());
    let mut x = x_t;
    let manual_c = match config.scale_mode {
        ScaleMode::Manual { c, .. } => c,
        ScaleMode::Auto => 0.0,
    };
    for t in (1..=sched.steps()).rev() {
        let z = if t > 1 { standard_normal(&mut noise, &shape) } else { zeros.clone() };
        let (next, row) = match config.method {
            Method::None => {
                let eps = model.predict_noise(&x, t, sched)?;
                let mut row = TraceRow::unguided(t);
                row.loss = loss.value(&mmse_estimate(&x, &eps, t, sched)?)?;
                (ddpm_step(&x, &eps, t, sched, &z)?, row)
            }
            Method::Dreamguider => dreamguider_step(&x, t, model, loss, sched, config, &mut states, &z)?,
            Method::Mgd => mgd_step(&x, t, model, loss, sched, manual_c, config, &z)?,
            Method::Dps => dps_step(&x, t, model, loss, sched, manual_c, config, &z)?,
        };
        x = next;
        trace.push(row);
    }
    Ok(SampleOutput { x0: x, trace })
}
