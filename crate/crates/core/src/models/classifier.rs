use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{affine_init, conv_init, Network};
use crate::numerics::{softmax, DiffOp, Graph, Tensor};
use crate::rng::{rng_for, Purpose};

/// Three conv/relu stages with 2× pooling, global average pooling and a
/// linear head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub channels: usize,
    pub size: usize,
    pub widths: [usize; 3],
    pub num_classes: usize,
    pub kernel: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            channels: 3,
            size: 32,
            widths: [16, 32, 64],
            num_classes: 3,
            kernel: 3,
        }
    }
}

impl ClassifierArch {
    pub fn tiny(channels: usize, num_classes: usize) -> Self {
        Self {
            channels,
            size: 4,
            widths: [2, 2, 2],
            num_classes,
            kernel: 3,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    arch: ClassifierArch,
    params: Vec<Tensor>,
    graph: Graph,
}

impl ClassifierModel {
    pub fn new(arch: ClassifierArch, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, Purpose::Init, 1);
        let k = arch.kernel;
        let mut params = Vec::new();
        let mut inp = arch.channels;
        for &w in &arch.widths {
            params.push(conv_init(&mut rng, w, inp, k));
            params.push(Tensor::zeros(&[w]));
            inp = w;
        }
        params.push(affine_init(&mut rng, arch.num_classes, inp));
        params.push(Tensor::zeros(&[arch.num_classes]));
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: ClassifierArch, params: Vec<Tensor>) -> Result<Self> {
        if arch.size % 4 != 0 || arch.num_classes == 0 || arch.kernel % 2 == 0 {
            return Err(Error::InvalidParameter(format!("unsupported classifier arch {arch:?}")));
        }
        let shapes = Self::param_shapes(&arch);
        if params.len() != shapes.len() {
            return Err(Error::InvalidParameter(format!(
                "classifier expects {} weight tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&shapes) {
            p.expect_shape("classifier weights", s)?;
            p.check_finite("classifier weights")?;
        }
        let graph = build_graph(&arch);
        Ok(Self { arch, params, graph })
    }

    fn param_shapes(arch: &ClassifierArch) -> Vec<Vec<usize>> {
        let k = arch.kernel;
        let mut shapes = Vec::new();
        let mut inp = arch.channels;
        for &w in &arch.widths {
            shapes.push(vec![w, inp, k, k]);
            shapes.push(vec![w]);
            inp = w;
        }
        shapes.push(vec![arch.num_classes, inp]);
        shapes.push(vec![arch.num_classes]);
        shapes
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn inputs<'a>(&'a self, x: &'a Tensor) -> Vec<&'a Tensor> {
        let mut v = vec![x];
        v.extend(self.params.iter());
        v
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_shape("classifier", &self.arch.image_shape())?;
        Ok(self.graph.forward(&self.inputs(x))?.into_output())
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let l = self.logits(x)?;
        Ok(argmax(l.data()))
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(self.logits(x)?.data()))
    }

    /// Cross-entropy of the logits against `target`.
    pub fn loss(&self, x: &Tensor, target: usize) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(DiffOp::CrossEntropy { target }.forward(&[&logits])?.item())
    }

    /// Cross-entropy with its gradients: input image first, then every weight.
    pub fn loss_and_grads(&self, x: &Tensor, target: usize) -> Result<(f64, Vec<Tensor>)> {
        x.expect_shape("classifier", &self.arch.image_shape())?;
        let eval = self.graph.forward(&self.inputs(x))?;
        let ce = DiffOp::CrossEntropy { target };
        let loss = ce.forward(&[eval.output()])?;
        let ct = ce.vjp(&[eval.output()], &loss, &Tensor::scalar(1.0))?;
        Ok((loss.item(), eval.vjp(&ct[0])?))
    }

    pub fn input_gradient(&self, x: &Tensor, target: usize) -> Result<(f64, Tensor)> {
        let (l, mut g) = self.loss_and_grads(x, target)?;
        Ok((l, g.swap_remove(0)))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

impl Network for ClassifierModel {
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
        let mut names = Vec::new();
        for i in 0..3 {
            names.push(format!("conv{i}.w"));
            names.push(format!("conv{i}.b"));
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }
}

fn build_graph(arch: &ClassifierArch) -> Graph {
    let mut g = Graph::new();
    let x = g.input();
    let convs: Vec<_> = (0..3).map(|_| (g.input(), g.input())).collect();
    let hw = g.input();
    let hb = g.input();
    let pad = arch.kernel / 2;
    let mut h = x;
    let mut side = arch.size;
    for (i, (w, b)) in convs.into_iter().enumerate() {
        h = g.push(DiffOp::Conv2d { pad }, &[h, w, b]);
        h = g.push(DiffOp::Relu, &[h]);
        let factor = if i < 2 { 2 } else { side };
        h = g.push(DiffOp::MeanPool { factor }, &[h]);
        side /= factor;
    }
    let out = g.push(DiffOp::Affine, &[h, hw, hb]);
    g.set_output(out);
    g
}
