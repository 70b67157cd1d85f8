use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{affine_init, conv_init, time_embedding, Network};
use crate::numerics::{DiffOp, Graph, NodeId, Tensor};
use crate::rng::{rng_for, Purpose};

/// Two-level convolutional encoder/decoder with skip connections and a
/// per-channel additive time embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub channels: usize,
    pub size: usize,
    /// Width at full resolution.
    pub base_width: usize,
    /// Width at the two pooled resolutions.
    pub mid_width: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub kernel: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            channels: 3,
            size: 32,
            base_width: 16,
            mid_width: 32,
            time_dim: 32,
            time_hidden: 64,
            kernel: 3,
        }
    }
}

impl DenoiserArch {
    /// A model small enough (< 200 weights) for exhaustive gradient checks.
    pub fn tiny(channels: usize) -> Self {
        Self {
            channels,
            size: 4,
            base_width: 1,
            mid_width: 1,
            time_dim: 2,
            time_hidden: 2,
            kernel: 3,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }

    fn validate(&self) -> Result<()> {
        if self.size % 4 != 0 || self.kernel % 2 == 0 || self.channels == 0 {
            return Err(Error::InvalidParameter(format!("unsupported denoiser arch {self:?}")));
        }
        Ok(())
    }

    fn conv_widths(&self) -> [(usize, usize); 6] {
        let (c, b, m) = (self.channels, self.base_width, self.mid_width);
        [(c, b), (b, m), (m, m), (2 * m, m), (m + b, b), (b, c)]
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    arch: DenoiserArch,
    params: Vec<Tensor>,
    graph: Graph,
}

impl DenoiserModel {
    /// Seeded initialisation; the output convolution starts at zero so a fresh
    /// model predicts zero noise.
    pub fn new(arch: DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, Purpose::Init, 0);
        let k = arch.kernel;
        let mut params = vec![
            affine_init(&mut rng, arch.time_hidden, arch.time_dim),
            Tensor::zeros(&[arch.time_hidden]),
        ];
        let widths = arch.conv_widths();
        for (i, &(inp, out)) in widths.iter().enumerate() {
            if i + 1 == widths.len() {
                params.push(Tensor::zeros(&[out, inp, k, k]));
                params.push(Tensor::zeros(&[out]));
            } else {
                params.push(conv_init(&mut rng, out, inp, k));
                params.push(Tensor::zeros(&[out]));
                params.push(affine_init(&mut rng, out, arch.time_hidden).scale(0.1));
                params.push(Tensor::zeros(&[out]));
            }
        }
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: DenoiserArch, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let fresh_shapes = Self::param_shapes(&arch);
        if params.len() != fresh_shapes.len() {
            return Err(Error::InvalidParameter(format!(
                "denoiser expects {} weight tensors, got {}",
                fresh_shapes.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&fresh_shapes) {
            p.expect_shape("denoiser weights", s)?;
            p.check_finite("denoiser weights")?;
        }
        let graph = build_graph(&arch);
        Ok(Self { arch, params, graph })
    }

    fn param_shapes(arch: &DenoiserArch) -> Vec<Vec<usize>> {
        let k = arch.kernel;
        let mut shapes = vec![vec![arch.time_hidden, arch.time_dim], vec![arch.time_hidden]];
        let widths = arch.conv_widths();
        for (i, &(inp, out)) in widths.iter().enumerate() {
            shapes.push(vec![out, inp, k, k]);
            shapes.push(vec![out]);
            if i + 1 < widths.len() {
                shapes.push(vec![out, arch.time_hidden]);
                shapes.push(vec![out]);
            }
        }
        shapes
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    fn check_input(&self, x_t: &Tensor) -> Result<()> {
        x_t.expect_shape("predict_noise", &self.arch.image_shape())
    }

    fn inputs<'a>(&'a self, x_t: &'a Tensor, temb: &'a Tensor) -> Vec<&'a Tensor> {
        let mut v = vec![x_t, temb];
        v.extend(self.params.iter());
        v
    }

    /// `ε_θ(x_t, time)` where `time` is the schedule's model time in (0, 1].
    pub fn predict_noise(&self, x_t: &Tensor, time: f64) -> Result<Tensor> {
        self.check_input(x_t)?;
        let temb = time_embedding(time, self.arch.time_dim);
        Ok(self.graph.forward(&self.inputs(x_t, &temb))?.into_output())
    }

    /// Prediction plus the pullback of `cotangent` to the input image and to
    /// every weight tensor (in that order).
    pub fn predict_with_vjp(&self, x_t: &Tensor, time: f64, cotangent: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(x_t)?;
        let temb = time_embedding(time, self.arch.time_dim);
        let eval = self.graph.forward(&self.inputs(x_t, &temb))?;
        let mut grads = eval.vjp(cotangent)?;
        grads.remove(1);
        Ok((eval.output().clone(), grads))
    }

    /// Input-gradient of `⟨cotangent, ε_θ(x_t)⟩`; returns the prediction too.
    pub fn input_vjp(&self, x_t: &Tensor, time: f64, cotangent: &Tensor) -> Result<(Tensor, Tensor)> {
        let (pred, mut grads) = self.predict_with_vjp(x_t, time, cotangent)?;
        Ok((pred, grads.swap_remove(0)))
    }
}

impl Network for DenoiserModel {
    fn graph(&self) -> &Graph {
        &self.graph
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["time.w".to_string(), "time.b".to_string()];
        for i in 0..5 {
            for suffix in ["conv.w", "conv.b", "temb.w", "temb.b"] {
                names.push(format!("block{i}.{suffix}"));
            }
        }
        names.push("out.w".into());
        names.push("out.b".into());
        names
    }
}

fn build_graph(arch: &DenoiserArch) -> Graph {
    let mut g = Graph::new();
    let x = g.input();
    let temb = g.input();
    let tw = g.input();
    let tb = g.input();
    let mut blocks = Vec::new();
    for _ in 0..5 {
        blocks.push([g.input(), g.input(), g.input(), g.input()]);
    }
    let ow = g.input();
    let ob = g.input();
    let pad = arch.kernel / 2;

    let th = g.push(DiffOp::Affine, &[temb, tw, tb]);
    let th = g.push(DiffOp::Relu, &[th]);
    let block = |g: &mut Graph, input: NodeId, p: [NodeId; 4]| {
        let h = g.push(DiffOp::Conv2d { pad }, &[input, p[0], p[1]]);
        let bias = g.push(DiffOp::Affine, &[th, p[2], p[3]]);
        let h = g.push(DiffOp::AddChannel, &[h, bias]);
        g.push(DiffOp::Relu, &[h])
    };
    let h1 = block(&mut g, x, blocks[0]);
    let p1 = g.push(DiffOp::MeanPool { factor: 2 }, &[h1]);
    let h2 = block(&mut g, p1, blocks[1]);
    let p2 = g.push(DiffOp::MeanPool { factor: 2 }, &[h2]);
    let h3 = block(&mut g, p2, blocks[2]);
    let u3 = g.push(DiffOp::Upsample { factor: 2 }, &[h3]);
    let c4 = g.push(DiffOp::Concat, &[u3, h2]);
    let h4 = block(&mut g, c4, blocks[3]);
    let u4 = g.push(DiffOp::Upsample { factor: 2 }, &[h4]);
    let c5 = g.push(DiffOp::Concat, &[u4, h1]);
    let h5 = block(&mut g, c5, blocks[4]);
    let out = g.push(DiffOp::Conv2d { pad }, &[h5, ow, ob]);
    g.set_output(out);
    g
}
