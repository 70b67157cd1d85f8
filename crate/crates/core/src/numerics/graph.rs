//! A fixed vocabulary of differentiable ops composed into static graphs.
//!
//! A [`Graph`] is built once (e.g. per network architecture) and evaluated
//! many times. [`Graph::forward`] keeps every intermediate value so that
//! [`Evaluation::vjp`] can pull a cotangent back to all graph inputs.

use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::kernels::{self, ConvGeometry};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug, PartialEq)]
pub enum DiffOp {
    /// `[x, w, b] -> w·flatten(x) + b`, `w: [out, in]`, `b: [out]`.
    Affine,
    /// `[x, w, b]`, `x: [C,H,W]`, `w: [O,C,k,k]`, `b: [O]`; stride 1, zero padding.
    Conv2d { pad: usize },
    Relu,
    /// Block mean over `factor × factor` tiles of a `[C,H,W]` tensor.
    MeanPool { factor: usize },
    /// Nearest-neighbour upsampling of a `[C,H,W]` tensor.
    Upsample { factor: usize },
    /// Elementwise product of two same-shaped tensors.
    Mul,
    /// Elementwise sum of two same-shaped tensors.
    Add,
    /// `[x: [C,H,W], v: [C]] -> x + v` broadcast over space.
    AddChannel,
    /// Sum of all elements, scalar output.
    Sum,
    SquaredL2,
    /// `[logits: [C]] -> logsumexp(logits) - logits[target]`.
    CrossEntropy { target: usize },
    /// `[table: [N, D]] -> table[index]`.
    EmbeddingLookup { index: usize },
    /// Concatenation along the leading axis.
    Concat,
}

impl DiffOp {
    fn name(&self) -> &'static str {
        match self {
            DiffOp::Affine => "affine",
            DiffOp::Conv2d { .. } => "conv2d",
            DiffOp::Relu => "relu",
            DiffOp::MeanPool { .. } => "mean_pool",
            DiffOp::Upsample { .. } => "upsample",
            DiffOp::Mul => "mul",
            DiffOp::Add => "add",
            DiffOp::AddChannel => "add_channel",
            DiffOp::Sum => "sum",
            DiffOp::SquaredL2 => "squared_l2",
            DiffOp::CrossEntropy { .. } => "cross_entropy",
            DiffOp::EmbeddingLookup { .. } => "embedding_lookup",
            DiffOp::Concat => "concat",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            DiffOp::Affine | DiffOp::Conv2d { .. } => Some(3),
            DiffOp::Mul | DiffOp::Add | DiffOp::AddChannel => Some(2),
            DiffOp::Concat => None,
            _ => Some(1),
        }
    }

    /// Evaluates the op on concrete arguments.
    pub fn forward(&self, args: &[&Tensor]) -> Result<Tensor> {
        if let Some(n) = self.arity() {
            if args.len() != n {
                return Err(Error::InvalidParameter(format!(
                    "{} expects {n} arguments, got {}",
                    self.name(),
                    args.len()
                )));
            }
        }
        let out = match self {
            DiffOp::Affine => {
                let (x, w, b) = (args[0], args[1], args[2]);
                let (out_dim, in_dim) = matrix_dims(w, "affine")?;
                if x.len() != in_dim {
                    return Err(shape_mismatch("affine", &[in_dim], x.shape()));
                }
                b.expect_shape("affine", &[out_dim])?;
                let mut y = b.data().to_vec();
                kernels::gemm(out_dim, in_dim, 1, w.data(), false, x.data(), false, &mut y, true);
                Tensor::from_vec_unchecked(vec![out_dim], y)
            }
            DiffOp::Conv2d { pad } => {
                let (x, w, b) = (args[0], args[1], args[2]);
                let (geom, out_ch) = conv_geometry(x, w, *pad)?;
                b.expect_shape("conv2d", &[out_ch])?;
                let cols = kernels::im2col(x.data(), geom);
                let p = geom.out_height() * geom.out_width();
                let mut y = vec![0.0; out_ch * p];
                for (o, row) in y.chunks_mut(p).enumerate() {
                    row.fill(b.data()[o]);
                }
                kernels::gemm(out_ch, geom.patch_len(), p, w.data(), false, &cols, false, &mut y, true);
                Tensor::from_vec_unchecked(vec![out_ch, geom.out_height(), geom.out_width()], y)
            }
            DiffOp::Relu => args[0].map(|v| v.max(0.0)),
            DiffOp::MeanPool { factor } => {
                let (c, h, w) = chw(args[0], "mean_pool")?;
                check_factor(*factor, h, w)?;
                let y = kernels::mean_pool(args[0].data(), c, h, w, *factor);
                Tensor::from_vec_unchecked(vec![c, h / factor, w / factor], y)
            }
            DiffOp::Upsample { factor } => {
                let (c, h, w) = chw(args[0], "upsample")?;
                if *factor == 0 {
                    return Err(Error::InvalidParameter("upsample factor 0".into()));
                }
                let y = kernels::upsample(args[0].data(), c, h, w, *factor);
                Tensor::from_vec_unchecked(vec![c, h * factor, w * factor], y)
            }
            DiffOp::Mul => args[0].mul(args[1])?,
            DiffOp::Add => args[0].add(args[1])?,
            DiffOp::AddChannel => {
                let (c, h, w) = chw(args[0], "add_channel")?;
                args[1].expect_shape("add_channel", &[c])?;
                let mut y = args[0].clone();
                for (ch, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
                    let v = args[1].data()[ch];
                    plane.iter_mut().for_each(|p| *p += v);
                }
                y
            }
            DiffOp::Sum => Tensor::scalar(args[0].sum()),
            DiffOp::SquaredL2 => Tensor::scalar(args[0].norm_sq()),
            DiffOp::CrossEntropy { target } => {
                let logits = args[0];
                if logits.shape().len() != 1 || *target >= logits.len() {
                    return Err(Error::InvalidParameter(format!(
                        "cross_entropy target {target} for logits {:?}",
                        logits.shape()
                    )));
                }
                Tensor::scalar(log_sum_exp(logits.data()) - logits.data()[*target])
            }
            DiffOp::EmbeddingLookup { index } => {
                let (n, d) = matrix_dims(args[0], "embedding_lookup")?;
                if *index >= n {
                    return Err(Error::InvalidParameter(format!(
                        "embedding index {index} out of {n} rows"
                    )));
                }
                Tensor::from_vec_unchecked(vec![d], args[0].data()[index * d..(index + 1) * d].to_vec())
            }
            DiffOp::Concat => {
                let first = args.first().ok_or_else(|| {
                    Error::InvalidParameter("concat needs at least one argument".into())
                })?;
                if first.shape().is_empty() {
                    return Err(Error::InvalidParameter("concat of scalars".into()));
                }
                let tail = &first.shape()[1..];
                let mut lead = 0;
                let mut data = Vec::new();
                for a in args {
                    if a.shape().len() != first.shape().len() || &a.shape()[1..] != tail {
                        return Err(shape_mismatch("concat", first.shape(), a.shape()));
                    }
                    lead += a.shape()[0];
                    data.extend_from_slice(a.data());
                }
                let mut shape = vec![lead];
                shape.extend_from_slice(tail);
                Tensor::from_vec_unchecked(shape, data)
            }
        };
        out.check_finite(self.name())?;
        Ok(out)
    }

    /// Pulls `cotangent` (shaped like the output) back to every argument.
    pub fn vjp(&self, args: &[&Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        if cotangent.shape() != output.shape() {
            return Err(shape_mismatch("vjp", output.shape(), cotangent.shape()));
        }
        let ct = cotangent;
        let grads = match self {
            DiffOp::Affine => {
                let (x, w) = (args[0], args[1]);
                let (out_dim, in_dim) = matrix_dims(w, "affine")?;
                let mut gx = vec![0.0; in_dim];
                kernels::gemm(in_dim, out_dim, 1, w.data(), true, ct.data(), false, &mut gx, false);
                let mut gw = vec![0.0; out_dim * in_dim];
                kernels::gemm(out_dim, 1, in_dim, ct.data(), false, x.data(), false, &mut gw, false);
                vec![
                    Tensor::from_vec_unchecked(x.shape().to_vec(), gx),
                    Tensor::from_vec_unchecked(w.shape().to_vec(), gw),
                    ct.clone(),
                ]
            }
            DiffOp::Conv2d { pad } => {
                let (x, w) = (args[0], args[1]);
                let (geom, out_ch) = conv_geometry(x, w, *pad)?;
                let p = geom.out_height() * geom.out_width();
                let cols = kernels::im2col(x.data(), geom);
                let mut gw = vec![0.0; w.len()];
                kernels::gemm(out_ch, p, geom.patch_len(), ct.data(), false, &cols, true, &mut gw, false);
                let gb: Vec<f64> = ct.data().chunks(p).map(|r| r.iter().sum()).collect();
                let mut gcols = vec![0.0; cols.len()];
                kernels::gemm(geom.patch_len(), out_ch, p, w.data(), true, ct.data(), false, &mut gcols, false);
                let gx = kernels::col2im(&gcols, geom);
                vec![
                    Tensor::from_vec_unchecked(x.shape().to_vec(), gx),
                    Tensor::from_vec_unchecked(w.shape().to_vec(), gw),
                    Tensor::from_vec_unchecked(vec![out_ch], gb),
                ]
            }
            DiffOp::Relu => vec![args[0].zip_map(ct, |x, c| if x > 0.0 { c } else { 0.0 })?],
            DiffOp::MeanPool { factor } => {
                let (c, h, w) = chw(args[0], "mean_pool")?;
                let inv = 1.0 / (factor * factor) as f64;
                let g = kernels::upsample(ct.data(), c, h / factor, w / factor, *factor);
                vec![Tensor::from_vec_unchecked(vec![c, h, w], g).scale(inv)]
            }
            DiffOp::Upsample { factor } => {
                let (c, h, w) = chw(args[0], "upsample")?;
                let g = kernels::tile_sum(ct.data(), c, h * factor, w * factor, *factor);
                vec![Tensor::from_vec_unchecked(vec![c, h, w], g)]
            }
            DiffOp::Mul => vec![ct.mul(args[1])?, ct.mul(args[0])?],
            DiffOp::Add => vec![ct.clone(), ct.clone()],
            DiffOp::AddChannel => {
                let (c, h, w) = chw(args[0], "add_channel")?;
                let gv: Vec<f64> = ct.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                debug_assert_eq!(gv.len(), c);
                vec![ct.clone(), Tensor::from_vec_unchecked(vec![c], gv)]
            }
            DiffOp::Sum => vec![Tensor::full(args[0].shape(), ct.item())],
            DiffOp::SquaredL2 => vec![args[0].scale(2.0 * ct.item())],
            DiffOp::CrossEntropy { target } => {
                let probs = softmax(args[0].data());
                let mut g: Vec<f64> = probs.iter().map(|p| p * ct.item()).collect();
                g[*target] -= ct.item();
                vec![Tensor::from_vec_unchecked(args[0].shape().to_vec(), g)]
            }
            DiffOp::EmbeddingLookup { index } => {
                let (_, d) = matrix_dims(args[0], "embedding_lookup")?;
                let mut g = Tensor::zeros(args[0].shape());
                g.data_mut()[index * d..(index + 1) * d].copy_from_slice(ct.data());
                vec![g]
            }
            DiffOp::Concat => {
                let mut offset = 0;
                args.iter()
                    .map(|a| {
                        let g = ct.data()[offset..offset + a.len()].to_vec();
                        offset += a.len();
                        Tensor::from_vec_unchecked(a.shape().to_vec(), g)
                    })
                    .collect()
            }
        };
        for g in &grads {
            g.check_finite(self.name())?;
        }
        Ok(grads)
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(shape_mismatch(op, &[0, 0], other)),
    }
}

fn chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(shape_mismatch(op, &[0, 0, 0], other)),
    }
}

fn check_factor(factor: usize, h: usize, w: usize) -> Result<()> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidParameter(format!(
            "pool factor {factor} does not divide {h}x{w}"
        )));
    }
    Ok(())
}

fn conv_geometry(x: &Tensor, w: &Tensor, pad: usize) -> Result<(ConvGeometry, usize)> {
    let (c, h, wd) = chw(x, "conv2d")?;
    let (o, wc, k) = match w.shape() {
        &[o, wc, k, k2] if k == k2 => (o, wc, k),
        other => return Err(shape_mismatch("conv2d", &[0, c, 0, 0], other)),
    };
    if wc != c {
        return Err(shape_mismatch("conv2d", &[o, c, k, k], w.shape()));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::InvalidParameter(format!("kernel {k} larger than padded input {h}x{wd}")));
    }
    Ok((ConvGeometry { channels: c, height: h, width: wd, kernel: k, pad }, o))
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

#[derive(Clone, Debug)]
enum Node {
    Input(usize),
    Op { op: DiffOp, args: Vec<NodeId> },
}

/// A static composition of [`DiffOp`]s over numbered inputs.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    num_inputs: usize,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares the next positional input.
    pub fn input(&mut self) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node::Input(self.num_inputs));
        self.num_inputs += 1;
        id
    }

    pub fn push(&mut self, op: DiffOp, args: &[NodeId]) -> NodeId {
        debug_assert!(args.iter().all(|a| a.0 < self.nodes.len()));
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node::Op { op, args: args.to_vec() });
        id
    }

    /// Marks the graph output; defaults to the last pushed node.
    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    fn output_id(&self) -> Result<NodeId> {
        self.output
            .or_else(|| self.nodes.len().checked_sub(1).map(NodeId))
            .ok_or_else(|| Error::InvalidParameter("empty graph".into()))
    }

    pub fn forward<'g>(&'g self, inputs: &[&Tensor]) -> Result<Evaluation<'g>> {
        if inputs.len() != self.num_inputs {
            return Err(Error::InvalidParameter(format!(
                "graph expects {} inputs, got {}",
                self.num_inputs,
                inputs.len()
            )));
        }
        let output = self.output_id()?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node {
                Node::Input(i) => {
                    inputs[*i].check_finite("graph input")?;
                    inputs[*i].clone()
                }
                Node::Op { op, args } => {
                    let a: Vec<&Tensor> = args.iter().map(|id| &values[id.0]).collect();
                    op.forward(&a)?
                }
            };
            values.push(v);
        }
        Ok(Evaluation { graph: self, values, output })
    }
}

/// Values of every node from one forward pass.
#[derive(Debug)]
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
    output: NodeId,
}

impl Evaluation<'_> {
    pub fn output(&self) -> &Tensor {
        &self.values[self.output.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn into_output(mut self) -> Tensor {
        self.values.swap_remove(self.output.0)
    }

    /// One gradient per graph input: `cotangentᵀ · ∂output/∂input`.
    pub fn vjp(&self, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let nodes = &self.graph.nodes;
        let mut adjoint: Vec<Option<Tensor>> = vec![None; nodes.len()];
        adjoint[self.output.0] = Some(cotangent.clone());
        let mut grads: Vec<Option<Tensor>> = vec![None; self.graph.num_inputs];
        for idx in (0..=self.output.0).rev() {
            let Some(ct) = adjoint[idx].take() else { continue };
            match &nodes[idx] {
                Node::Input(i) => accumulate(&mut grads[*i], ct)?,
                Node::Op { op, args } => {
                    let a: Vec<&Tensor> = args.iter().map(|id| &self.values[id.0]).collect();
                    let pulled = op.vjp(&a, &self.values[idx], &ct)?;
                    for (arg, g) in args.iter().zip(pulled) {
                        accumulate(&mut adjoint[arg.0], g)?;
                    }
                }
            }
        }
        Ok(grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.input_shape(i))))
            .collect())
    }

    fn input_shape(&self, input: usize) -> &[usize] {
        self.graph
            .nodes
            .iter()
            .position(|n| matches!(n, Node::Input(i) if *i == input))
            .map(|pos| self.values[pos].shape())
            .unwrap_or(&[])
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(1.0, &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Evaluates a single op as a one-node graph.
pub fn forward(op: &DiffOp, inputs: &[&Tensor]) -> Result<Tensor> {
    op.forward(inputs)
}

/// Vector–Jacobian product of a single op.
pub fn vjp(op: &DiffOp, inputs: &[&Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
    let out = op.forward(inputs)?;
    op.vjp(inputs, &out, cotangent)
}
