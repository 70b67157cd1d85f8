//! Guidance distances `r(x̂, y)`: linear degradation operators with exact
//! adjoints, and a classifier cross-entropy for nonlinear conditions.
//!
//! The linear loss is the plain `‖y - A x̂‖²`; no `1/(2σ_y²)` factor is
//! applied, so any manual scale quoted for it uses that convention.

use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::models::ClassifierModel;
use crate::numerics::Tensor;
use crate::rng::standard_normal;

/// Rec.601 luma weights used for colorization.
pub const REC601: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub enum DegradationOperator {
    /// Pixelwise mask `[H, W]`, broadcast over channels.
    Mask(Tensor),
    /// `s × s` box average.
    Downsample { factor: usize },
    /// Normalised Gaussian kernel, reflect padding.
    GaussianBlur { kernel: Tensor },
    /// Channel-weighted sum to a single channel.
    Grayscale { weights: Vec<f64> },
}

fn chw(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_mismatch(op, &[0, 0, 0], x.shape())),
    }
}

/// numpy-style `reflect` index (edge not repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

impl DegradationOperator {
    pub fn mask(mask: Tensor) -> Result<Self> {
        if mask.shape().len() != 2 {
            return Err(shape_mismatch("mask", &[0, 0], mask.shape()));
        }
        Ok(Self::Mask(mask))
    }

    /// Ones everywhere except a `box_h × box_w` hole of zeros at `(top, left)`.
    pub fn box_mask(height: usize, width: usize, top: usize, left: usize, box_h: usize, box_w: usize) -> Result<Self> {
        if top + box_h > height || left + box_w > width {
            return Err(Error::InvalidParameter("box outside the image".into()));
        }
        let m = Tensor::from_fn(&[height, width], |i| {
            let (y, x) = (i / width, i % width);
            if (top..top + box_h).contains(&y) && (left..left + box_w).contains(&x) {
                0.0
            } else {
                1.0
            }
        });
        Ok(Self::Mask(m))
    }

    /// Reads a binary PGM (0 = hidden, 255 = observed).
    pub fn mask_from_pgm(path: &Path) -> Result<Self> {
        let img = crate::harness::image_io::read_pnm(path)?;
        if img.shape()[0] != 1 {
            return Err(Error::Format { path: path.to_path_buf(), reason: "mask must be a grayscale PGM".into() });
        }
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let m = img.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).reshape(&[h, w])?;
        Ok(Self::Mask(m))
    }

    pub fn downsample(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidParameter("downsample factor 0".into()));
        }
        Ok(Self::Downsample { factor })
    }

    /// `size × size` Gaussian with standard deviation `std`, normalised to sum 1.
    pub fn gaussian_blur(size: usize, std: f64) -> Result<Self> {
        if size % 2 == 0 || !(std > 0.0) {
            return Err(Error::InvalidParameter(format!("blur kernel size {size}, std {std}")));
        }
        let r = (size / 2) as f64;
        let mut k = Tensor::from_fn(&[size, size], |i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(x * x + y * y) / (2.0 * std * std)).exp()
        });
        let s = k.sum();
        k = k.scale(1.0 / s);
        Ok(Self::GaussianBlur { kernel: k })
    }

    pub fn grayscale(weights: &[f64]) -> Self {
        Self::Grayscale { weights: weights.to_vec() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Mask(_) => "mask",
            Self::Downsample { .. } => "downsample",
            Self::GaussianBlur { .. } => "gaussian_blur",
            Self::Grayscale { .. } => "grayscale",
        }
    }

    /// Measurement shape for an input of shape `[C, H, W]`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let &[c, h, w] = input else {
            return Err(shape_mismatch(self.kind(), &[0, 0, 0], input));
        };
        match self {
            Self::Mask(m) => {
                if m.shape() != [h, w] {
                    return Err(shape_mismatch("mask", &[h, w], m.shape()));
                }
                Ok(vec![c, h, w])
            }
            Self::Downsample { factor } => {
                if h % factor != 0 || w % factor != 0 {
                    return Err(Error::InvalidParameter(format!("factor {factor} does not divide {h}x{w}")));
                }
                Ok(vec![c, h / factor, w / factor])
            }
            Self::GaussianBlur { kernel } => {
                let r = kernel.shape()[0] / 2;
                if r >= h || r >= w {
                    return Err(Error::InvalidParameter("blur kernel wider than the image".into()));
                }
                Ok(vec![c, h, w])
            }
            Self::Grayscale { weights } => {
                if weights.len() != c {
                    return Err(shape_mismatch("grayscale", &[weights.len(), h, w], input));
                }
                Ok(vec![1, h, w])
            }
        }
    }

    /// `A x`
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let (c, h, w) = chw(x, "apply")?;
        let data = match self {
            Self::Mask(m) => {
                let mut out = x.clone().into_data();
                for plane in out.chunks_mut(h * w) {
                    plane.iter_mut().zip(m.data()).for_each(|(v, mv)| *v *= mv);
                }
                out
            }
            Self::Downsample { factor } => crate::numerics::kernels::mean_pool(x.data(), c, h, w, *factor),
            Self::GaussianBlur { kernel } => blur(x.data(), c, h, w, kernel, false),
            Self::Grayscale { weights } => {
                let mut out = vec![0.0; h * w];
                for (plane, wt) in x.data().chunks(h * w).zip(weights) {
                    out.iter_mut().zip(plane).for_each(|(o, p)| *o += wt * p);
                }
                out
            }
        };
        Tensor::new(out_shape, data)
    }

    /// `Aᵀ u` for an input of shape `input_shape`.
    pub fn adjoint(&self, u: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
        let out_shape = self.output_shape(input_shape)?;
        u.expect_shape("adjoint", &out_shape)?;
        let &[c, h, w] = input_shape else { unreachable!("checked by output_shape") };
        let data = match self {
            Self::Mask(_) => return self.apply(u),
            Self::Downsample { factor } => {
                let mut up = crate::numerics::kernels::upsample(u.data(), c, h / factor, w / factor, *factor);
                let inv = 1.0 / (factor * factor) as f64;
                up.iter_mut().for_each(|v| *v *= inv);
                up
            }
            Self::GaussianBlur { kernel } => blur(u.data(), c, h, w, kernel, true),
            Self::Grayscale { weights } => {
                let mut out = Vec::with_capacity(c * h * w);
                for wt in weights {
                    out.extend(u.data().iter().map(|v| wt * v));
                }
                out
            }
        };
        Tensor::new(input_shape.to_vec(), data)
    }

    /// Noisy measurement `A x0 + σ_y n`.
    pub fn measure(&self, x0: &Tensor, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let clean = self.apply(x0)?;
        if noise_std == 0.0 {
            return Ok(clean);
        }
        let n = standard_normal(rng, clean.shape());
        clean.zip_map(&n, |a, b| a + noise_std * b)
    }
}

/// Reflect-padded correlation, or its exact transpose when `transpose` is set.
fn blur(x: &[f64], c: usize, h: usize, w: usize, kernel: &Tensor, transpose: bool) -> Vec<f64> {
    let k = kernel.shape()[0];
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                for i in 0..k {
                    let ry = reflect(y as isize + i as isize - r, h);
                    for j in 0..k {
                        let rx = reflect(xx as isize + j as isize - r, w);
                        let kv = kernel.data()[i * k + j];
                        if transpose {
                            dst[ry * w + rx] += kv * src[y * w + xx];
                        } else {
                            dst[y * w + xx] += kv * src[ry * w + rx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `‖y - A x‖²` and its gradient `2 Aᵀ(A x - y)`.
pub fn linear_value_and_grad(op: &DegradationOperator, y: &Tensor, x: &Tensor) -> Result<(f64, Tensor)> {
    let resid = op.apply(x)?.sub(y)?;
    let grad = op.adjoint(&resid, x.shape())?.scale(2.0);
    Ok((resid.norm_sq(), grad))
}

/// A nonnegative guidance distance between a candidate image and its condition.
#[derive(Clone, Debug)]
pub enum GuidanceLoss {
    Linear {
        op: DegradationOperator,
        y: Tensor,
        noise_std: f64,
    },
    Classifier {
        model: Arc<ClassifierModel>,
        target: usize,
    },
}

impl GuidanceLoss {
    pub fn linear(op: DegradationOperator, y: Tensor, noise_std: f64) -> Result<Self> {
        y.check_finite("measurement")?;
        Ok(Self::Linear { op, y, noise_std })
    }

    pub fn classifier(model: Arc<ClassifierModel>, target: usize) -> Result<Self> {
        if target >= model.num_classes() {
            return Err(Error::InvalidParameter(format!(
                "target class {target} >= {}",
                model.num_classes()
            )));
        }
        Ok(Self::Classifier { model, target })
    }

    pub fn value(&self, x_hat: &Tensor) -> Result<f64> {
        let v = match self {
            Self::Linear { op, y, .. } => op.apply(x_hat)?.sub(y)?.norm_sq(),
            Self::Classifier { model, target } => model.loss(x_hat, *target)?,
        };
        if !v.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        Ok(v.max(0.0))
    }

    pub fn grad(&self, x_hat: &Tensor) -> Result<Tensor> {
        Ok(self.value_and_grad(x_hat)?.1)
    }

    pub fn value_and_grad(&self, x_hat: &Tensor) -> Result<(f64, Tensor)> {
        let (v, g) = match self {
            Self::Linear { op, y, .. } => linear_value_and_grad(op, y, x_hat)?,
            Self::Classifier { model, target } => model.input_gradient(x_hat, *target)?,
        };
        if !v.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        g.check_finite("loss gradient")?;
        Ok((v.max(0.0), g))
    }

    /// Number of measurement entries (1 for label conditions).
    pub fn measurement_len(&self) -> usize {
        match self {
            Self::Linear { y, .. } => y.len(),
            Self::Classifier { .. } => 1,
        }
    }
}

/// Convenience wrappers mirroring the operation names used elsewhere.
pub fn apply(op: &DegradationOperator, x: &Tensor) -> Result<Tensor> {
    op.apply(x)
}

pub fn adjoint(op: &DegradationOperator, u: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    op.adjoint(u, input_shape)
}

pub fn loss_value(loss: &GuidanceLoss, x_hat: &Tensor) -> Result<f64> {
    loss.value(x_hat)
}

pub fn loss_grad(loss: &GuidanceLoss, x_hat: &Tensor) -> Result<Tensor> {
    loss.grad(x_hat)
}

/// Serializable operator description for configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    /// Square hole of `box_frac` of the image area at a seeded position.
    BoxMask { box_frac: f64 },
    MaskFile { path: std::path::PathBuf },
    Downsample { factor: usize },
    GaussianBlur { size: usize, std: f64 },
    Grayscale { weights: [f64; 3] },
}
