//! Paired differentiable augmentation of the MMSE estimate and its condition.
//!
//! Each draw composes a saturation change, an integer translation with zero
//! fill, and a rectangular cutout. All three are linear in the pixels, so the
//! gradient of an augmented loss is pulled back through the exact transpose.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::operators::{linear_value_and_grad, DegradationOperator, GuidanceLoss};
use crate::rng::{rng_for, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Number of augmented copies averaged per gradient evaluation.
    #[serde(rename = "K")]
    pub k: usize,
    /// Largest cutout side as a fraction of the image side.
    pub cutout_frac: f64,
    /// Largest translation as a fraction of the image side.
    pub max_shift_frac: f64,
    pub sat_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 8,
            cutout_frac: 0.25,
            max_shift_frac: 0.125,
            sat_range: (0.5, 1.5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub cutout: Option<Rect>,
    /// `(dy, dx)`: content moves down/right by this many pixels.
    pub shift: (i64, i64),
    pub saturation: f64,
}

impl AugmentationParams {
    pub fn identity() -> Self {
        Self { cutout: None, shift: (0, 0), saturation: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.cutout.is_none() && self.shift == (0, 0) && self.saturation == 1.0
    }
}

/// `k` independent draws for images of shape `[C, H, W]`.
pub fn sample_augs(k: usize, seed: u64, image_shape: &[usize], config: &AugmentConfig) -> Result<Vec<AugmentationParams>> {
    if k == 0 {
        return Err(Error::InvalidParameter("need at least one augmentation".into()));
    }
    let &[_, h, w] = image_shape else {
        return Err(Error::InvalidParameter(format!("image shape {image_shape:?}")));
    };
    let (lo, hi) = config.sat_range;
    if !(lo <= hi) {
        return Err(Error::InvalidParameter(format!("saturation range ({lo}, {hi})")));
    }
    let mut rng = rng_for(seed, Purpose::Augmentation, 0);
    let side = h.min(w);
    let max_shift = (config.max_shift_frac * side as f64).floor() as i64;
    let max_cut = (config.cutout_frac * side as f64).floor() as usize;
    Ok((0..k)
        .map(|_| {
            let saturation = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let shift = if max_shift > 0 {
                (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift))
            } else {
                (0, 0)
            };
            let cutout = (max_cut > 0).then(|| {
                let height = rng.random_range(1..=max_cut);
                let width = rng.random_range(1..=max_cut);
                Rect {
                    top: rng.random_range(0..=h - height),
                    left: rng.random_range(0..=w - width),
                    height,
                    width,
                }
            });
            AugmentationParams { cutout, shift, saturation }
        })
        .collect())
}

/// `p -> mean + s (p - mean)`: the mean runs over channels for colour images
/// and over the whole image for single-channel ones. The map is symmetric.
fn saturate(x: &Tensor, scale: f64) -> Tensor {
    if scale == 1.0 {
        return x.clone();
    }
    let (c, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let mut out = x.clone();
    let data = out.data_mut();
    if c == 1 {
        let m = x.mean();
        data.iter_mut().for_each(|p| *p = m + scale * (*p - m));
    } else {
        for i in 0..plane {
            let m = (0..c).map(|ch| x.data()[ch * plane + i]).sum::<f64>() / c as f64;
            for ch in 0..c {
                let p = &mut data[ch * plane + i];
                *p = m + scale * (*p - m);
            }
        }
    }
    out
}

fn translate(x: &Tensor, (dy, dx): (i64, i64)) -> Tensor {
    if (dy, dx) == (0, 0) {
        return x.clone();
    }
    let &[c, h, w] = x.shape() else { unreachable!("image tensors are [C,H,W]") };
    let mut out = Tensor::zeros(x.shape());
    let data = out.data_mut();
    for ch in 0..c {
        for y in 0..h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for xx in 0..w as i64 {
                let sx = xx - dx;
                if sx >= 0 && sx < w as i64 {
                    data[(ch * h + y as usize) * w + xx as usize] = x.data()[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

fn cut(x: &Tensor, rect: Option<Rect>) -> Tensor {
    let Some(r) = rect else { return x.clone() };
    let &[c, h, w] = x.shape() else { unreachable!("image tensors are [C,H,W]") };
    let mut out = x.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for y in r.top..(r.top + r.height).min(h) {
            for xx in r.left..(r.left + r.width).min(w) {
                data[(ch * h + y) * w + xx] = 0.0;
            }
        }
    }
    out
}

fn check_image(x: &Tensor) -> Result<()> {
    if x.shape().len() != 3 {
        return Err(Error::InvalidParameter(format!("augmentation needs [C,H,W], got {:?}", x.shape())));
    }
    Ok(())
}

/// Saturation, then translation, then cutout.
pub fn apply_aug(params: &AugmentationParams, x: &Tensor) -> Result<Tensor> {
    check_image(x)?;
    Ok(cut(&translate(&saturate(x, params.saturation), params.shift), params.cutout))
}

/// Transpose of [`apply_aug`].
pub fn adjoint_aug(params: &AugmentationParams, u: &Tensor) -> Result<Tensor> {
    check_image(u)?;
    let (dy, dx) = params.shift;
    Ok(saturate(&translate(&cut(u, params.cutout), (-dy, -dx)), params.saturation))
}

/// The same draw expressed at a measurement's resolution.
fn scaled_params(params: &AugmentationParams, factor: usize) -> AugmentationParams {
    if factor == 1 {
        return *params;
    }
    let f = factor as f64;
    let (dy, dx) = params.shift;
    let cutout = params.cutout.map(|r| {
        let top = r.top / factor;
        let left = r.left / factor;
        let bottom = (r.top + r.height).div_ceil(factor);
        let right = (r.left + r.width).div_ceil(factor);
        Rect { top, left, height: bottom - top, width: right - left }
    });
    AugmentationParams {
        cutout,
        shift: ((dy as f64 / f).round() as i64, (dx as f64 / f).round() as i64),
        saturation: params.saturation,
    }
}

/// Augments a measurement `y` of `op` consistently with the image draw.
pub fn apply_aug_measurement(params: &AugmentationParams, op: &DegradationOperator, y: &Tensor) -> Result<Tensor> {
    match op {
        DegradationOperator::Downsample { factor } => apply_aug(&scaled_params(params, *factor), y),
        _ => apply_aug(params, y),
    }
}

/// The operator seen by the augmented image: masks move with the translation.
fn augmented_operator(params: &AugmentationParams, op: &DegradationOperator) -> Result<DegradationOperator> {
    match op {
        DegradationOperator::Mask(m) if params.shift != (0, 0) => {
            let (h, w) = (m.shape()[0], m.shape()[1]);
            let moved = translate(&m.clone().reshape(&[1, h, w])?, params.shift).reshape(&[h, w])?;
            DegradationOperator::mask(moved)
        }
        other => Ok(other.clone()),
    }
}

/// `r(T(x̂), T'(y))` and its gradient with respect to `x̂`.
pub fn augmented_loss_and_grad(loss: &GuidanceLoss, params: &AugmentationParams, x_hat: &Tensor) -> Result<(f64, Tensor)> {
    if params.is_identity() {
        return loss.value_and_grad(x_hat);
    }
    let xa = apply_aug(params, x_hat)?;
    let (v, g) = match loss {
        GuidanceLoss::Linear { op, y, .. } => {
            let ya = apply_aug_measurement(params, op, y)?;
            let opa = augmented_operator(params, op)?;
            linear_value_and_grad(&opa, &ya, &xa)?
        }
        GuidanceLoss::Classifier { model, target } => model.input_gradient(&xa, *target)?,
    };
    Ok((v, adjoint_aug(params, &g)?))
}

/// Average of the augmented losses and gradients over `params`.
pub fn averaged_with_params(loss: &GuidanceLoss, x_hat: &Tensor, params: &[AugmentationParams]) -> Result<(f64, Tensor)> {
    if params.is_empty() {
        return Err(Error::InvalidParameter("need at least one augmentation".into()));
    }
    let parts: Vec<(f64, Tensor)> = params
        .par_iter()
        .map(|p| augmented_loss_and_grad(loss, p, x_hat))
        .collect::<Result<_>>()?;
    let inv = 1.0 / params.len() as f64;
    let mut iter = parts.into_iter();
    let (mut value, mut grad) = iter.next().expect("nonempty");
    for (v, g) in iter {
        value += v;
        grad.axpy(1.0, &g)?;
    }
    let grad = grad.scale(inv);
    let value = value * inv;
    if !value.is_finite() {
        return Err(Error::NonFinite("augmented loss".into()));
    }
    grad.check_finite("augmented gradient")?;
    Ok((value, grad))
}

/// DiffuseAugment loss: fresh draws from `seed`, or the plain loss when
/// augmentation is disabled.
pub fn averaged_loss_and_grad(loss: &GuidanceLoss, x_hat: &Tensor, config: &AugmentConfig, seed: u64) -> Result<(f64, Tensor)> {
    if !config.enabled {
        return loss.value_and_grad(x_hat);
    }
    let params = sample_augs(config.k, seed, x_hat.shape(), config)?;
    averaged_with_params(loss, x_hat, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_rel_err};
    use crate::operators::REC601;
    use crate::rng::standard_normal;

    fn img(seed: u64, c: usize) -> Tensor {
        standard_normal(&mut rng_for(seed, Purpose::Task, 0), &[c, 16, 16])
    }

    #[test]
    fn draws_stay_in_bounds_and_are_deterministic() {
        let cfg = AugmentConfig::default();
        let a = sample_augs(64, 3, &[3, 32, 32], &cfg).unwrap();
        assert_eq!(a, sample_augs(64, 3, &[3, 32, 32], &cfg).unwrap());
        assert_ne!(a, sample_augs(64, 4, &[3, 32, 32], &cfg).unwrap());
        for p in &a {
            assert!(p.shift.0.abs() <= 4 && p.shift.1.abs() <= 4);
            assert!((0.5..=1.5).contains(&p.saturation));
            let r = p.cutout.unwrap();
            assert!(r.top + r.height <= 32 && r.left + r.width <= 32);
            assert!(r.height <= 8 && r.width <= 8);
        }
        assert_eq!(sample_augs(1, 9, &[3, 32, 32], &cfg).unwrap().len(), 1);
        assert_eq!(sample_augs(8, 9, &[3, 32, 32], &cfg).unwrap().len(), AugmentConfig::default().k);
        assert!(sample_augs(0, 9, &[3, 32, 32], &cfg).is_err());
    }

    #[test]
    fn trivial_augmentations() {
        let x = img(1, 3);
        assert_eq!(apply_aug(&AugmentationParams::identity(), &x).unwrap(), x);
        let full = AugmentationParams {
            cutout: Some(Rect { top: 0, left: 0, height: 16, width: 16 }),
            ..AugmentationParams::identity()
        };
        assert_eq!(apply_aug(&full, &x).unwrap(), Tensor::zeros(&[3, 16, 16]));
        let grey = AugmentationParams { saturation: 0.0, ..AugmentationParams::identity() };
        let out = apply_aug(&grey, &x).unwrap();
        for i in 0..256 {
            let m = (x.data()[i] + x.data()[256 + i] + x.data()[512 + i]) / 3.0;
            for ch in 0..3 {
                assert!((out.data()[ch * 256 + i] - m).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn augmentation_adjoint_identity() {
        let cfg = AugmentConfig::default();
        for c in [1, 3] {
            for (i, p) in sample_augs(50, 7, &[c, 16, 16], &cfg).unwrap().iter().enumerate() {
                let x = img(100 + i as u64, c);
                let u = img(200 + i as u64, c);
                let lhs = apply_aug(p, &x).unwrap().dot(&u).unwrap();
                let rhs = x.dot(&adjoint_aug(p, &u).unwrap()).unwrap();
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn label_conditions_are_never_augmented() {
        // classifier losses ignore the condition: only x̂ is transformed
        let p = sample_augs(1, 1, &[3, 16, 16], &AugmentConfig::default()).unwrap()[0];
        let y = img(3, 3);
        let id = AugmentationParams::identity();
        let op = DegradationOperator::grayscale(&REC601);
        let gy = op.apply(&y).unwrap();
        assert_eq!(apply_aug_measurement(&id, &op, &gy).unwrap(), gy);
        assert_ne!(apply_aug_measurement(&p, &op, &gy).unwrap(), gy);
    }

    #[test]
    fn translated_mask_keeps_exact_fit() {
        let op = DegradationOperator::box_mask(16, 16, 4, 4, 8, 8).unwrap();
        let x0 = img(5, 3);
        let y = op.apply(&x0).unwrap();
        let loss = GuidanceLoss::linear(op, y, 0.0).unwrap();
        for dy in -2..=2 {
            for dx in -2..=2 {
                let p = AugmentationParams { shift: (dy, dx), ..AugmentationParams::identity() };
                let (v, g) = augmented_loss_and_grad(&loss, &p, &x0).unwrap();
                assert_eq!(v, 0.0);
                assert_eq!(g.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn downsample_measurement_uses_scaled_draw() {
        let p = AugmentationParams {
            cutout: Some(Rect { top: 4, left: 5, height: 6, width: 3 }),
            shift: (4, -3),
            saturation: 1.2,
        };
        let s = scaled_params(&p, 4);
        assert_eq!(s.shift, (1, -1));
        assert_eq!(s.cutout, Some(Rect { top: 1, left: 1, height: 2, width: 1 }));
        let op = DegradationOperator::downsample(4).unwrap();
        let y = op.apply(&img(8, 3)).unwrap();
        assert_eq!(apply_aug_measurement(&p, &op, &y).unwrap().shape(), &[3, 4, 4]);
    }

    #[test]
    fn single_identity_draw_equals_plain_loss() {
        let op = DegradationOperator::gaussian_blur(3, 1.0).unwrap();
        let x = img(9, 3);
        let y = op.apply(&img(10, 3)).unwrap();
        let loss = GuidanceLoss::linear(op, y, 0.05).unwrap();
        let plain = loss.value_and_grad(&x).unwrap();
        let aug = averaged_with_params(&loss, &x, &[AugmentationParams::identity()]).unwrap();
        assert_eq!(plain.0.to_bits(), aug.0.to_bits());
        assert_eq!(plain.1, aug.1);
        let off = AugmentConfig { enabled: false, ..Default::default() };
        let disabled = averaged_loss_and_grad(&loss, &x, &off, 4).unwrap();
        assert_eq!(disabled.1, plain.1);
    }

    #[test]
    fn averaged_gradient_matches_finite_differences() {
        let cfg = AugmentConfig { k: 4, ..Default::default() };
        let ops = [
            DegradationOperator::box_mask(16, 16, 2, 3, 6, 6).unwrap(),
            DegradationOperator::downsample(4).unwrap(),
            DegradationOperator::gaussian_blur(5, 1.0).unwrap(),
            DegradationOperator::grayscale(&REC601),
        ];
        for (i, op) in ops.into_iter().enumerate() {
            let y = op.measure(&img(20 + i as u64, 3), 0.05, &mut rng_for(1, Purpose::Measurement, i as u64)).unwrap();
            let loss = GuidanceLoss::linear(op, y, 0.05).unwrap();
            let x = img(40 + i as u64, 3);
            let (_, g) = averaged_loss_and_grad(&loss, &x, &cfg, 17).unwrap();
            let fd = finite_diff_grad(|v| Ok(averaged_loss_and_grad(&loss, v, &cfg, 17)?.0), &x, 1e-5).unwrap();
            assert!(grad_rel_err(&g, &fd) <= 1e-4, "op {i}");
        }
    }
}
