//! Desk-scale trainable networks: the noise predictor and the shape
//! classifier used as a nonlinear guidance function.

mod classifier;
mod denoiser;
mod train;
mod weights;

pub use classifier::{ClassifierArch, ClassifierModel};
pub use denoiser::{DenoiserArch, DenoiserModel};
pub use train::{
    accuracy, write_curve_csv,
    train_classifier, train_denoiser, Adam, CurveRow, TrainConfig, TrainedClassifier, TrainedDenoiser,
};
pub use weights::{load_weights, save_weights, Dtype, StoredModel, WeightFile, WEIGHT_FORMAT_VERSION};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Graph, Tensor};

/// A network evaluated by a static graph whose trailing inputs are its weights.
pub trait Network {
    fn graph(&self) -> &Graph;
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];
    fn param_names(&self) -> Vec<String>;

    fn num_params(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }
}

pub(crate) fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("finite init")
}

/// He-normal conv kernel `[out, in, k, k]`.
pub(crate) fn conv_init(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> Tensor {
    normal_init(rng, &[out, inp, k, k], (2.0 / (inp * k * k) as f64).sqrt())
}

pub(crate) fn affine_init(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Tensor {
    normal_init(rng, &[out, inp], (1.0 / inp as f64).sqrt())
}

/// Sinusoidal embedding of a time value in (0, 1].
pub fn time_embedding(time: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let scaled = time * 1000.0;
    let mut v = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        v.push((scaled * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        v.push((scaled * freq).cos());
    }
    v.resize(dim, 0.0);
    Tensor::new(vec![dim], v).expect("finite embedding")
}
