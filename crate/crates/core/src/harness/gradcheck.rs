//! Finite-difference audit of every analytic gradient in the toolkit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{averaged_loss_and_grad, AugmentConfig};
use crate::diffusion::{mmse_estimate, NoiseSchedule};
use crate::error::Result;
use crate::guidance::{dps_input_gradient, NoisePredictor};
use crate::models::{ClassifierArch, ClassifierModel, DenoiserArch, DenoiserModel, Network};
use crate::numerics::{finite_diff_grad, forward, grad_rel_err, vjp, DiffOp, Tensor};
use crate::operators::{DegradationOperator, GuidanceLoss, REC601};
use crate::rng::{derive_seed, rng_for, standard_normal, Purpose};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn row(name: &str, errs: Vec<f64>) -> GradcheckRow {
    let max_rel_err = errs.iter().copied().fold(0.0, f64::max);
    GradcheckRow {
        name: name.into(),
        instances: errs.len(),
        pass: max_rel_err <= TOLERANCE && errs.iter().all(|e| e.is_finite()),
        max_rel_err,
    }
}

fn randn(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    standard_normal(rng, shape)
}

/// A random instance of op kind `kind` (`0..NUM_OP_KINDS`): name, op and inputs.
pub fn random_op_instance(kind: usize, rng: &mut rand_chacha::ChaCha8Rng) -> (&'static str, DiffOp, Vec<Tensor>) {
    match kind {
        0 => ("affine", DiffOp::Affine, vec![randn(rng, &[2, 3]), randn(rng, &[4, 6]), randn(rng, &[4])]),
        1 => (
            "conv2d",
            DiffOp::Conv2d { pad: 1 },
            vec![randn(rng, &[2, 5, 5]), randn(rng, &[3, 2, 3, 3]), randn(rng, &[3])],
        ),
        2 => {
            // keep clear of the kink
            let x = randn(rng, &[2, 3, 3]).map(|v| v.signum() * (v.abs() + 0.05));
            ("relu", DiffOp::Relu, vec![x])
        }
        3 => ("mean_pool", DiffOp::MeanPool { factor: 2 }, vec![randn(rng, &[2, 4, 4])]),
        4 => ("upsample", DiffOp::Upsample { factor: 2 }, vec![randn(rng, &[2, 2, 3])]),
        5 => ("mul", DiffOp::Mul, vec![randn(rng, &[2, 3, 3]), randn(rng, &[2, 3, 3])]),
        6 => ("add", DiffOp::Add, vec![randn(rng, &[2, 3, 3]), randn(rng, &[2, 3, 3])]),
        7 => ("add_channel", DiffOp::AddChannel, vec![randn(rng, &[2, 3, 3]), randn(rng, &[2])]),
        8 => ("sum", DiffOp::Sum, vec![randn(rng, &[3, 4])]),
        9 => ("squared_l2", DiffOp::SquaredL2, vec![randn(rng, &[3, 4])]),
        10 => {
            let target = rng.random_range(0..5);
            ("cross_entropy", DiffOp::CrossEntropy { target }, vec![randn(rng, &[5])])
        }
        11 => {
            let index = rng.random_range(0..5);
            ("embedding_lookup", DiffOp::EmbeddingLookup { index }, vec![randn(rng, &[5, 3])])
        }
        _ => ("concat", DiffOp::Concat, vec![randn(rng, &[2, 3, 3]), randn(rng, &[1, 3, 3])]),
    }
}

pub const NUM_OP_KINDS: usize = 13;

/// Largest error over every input of `⟨ct, op(inputs)⟩` for one instance.
fn op_instance_err(op: &DiffOp, inputs: &[Tensor], rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = forward(op, &refs)?;
    let ct = randn(rng, out.shape());
    let grads = vjp(op, &refs, &ct)?;
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let fd = finite_diff_grad(
            |x| {
                let mut args = refs.clone();
                args[i] = x;
                forward(op, &args)?.dot(&ct)
            },
            &inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(grad_rel_err(g, &fd));
    }
    Ok(worst)
}

fn operators() -> Vec<DegradationOperator> {
    vec![
        DegradationOperator::box_mask(8, 8, 2, 1, 4, 4).expect("valid box"),
        DegradationOperator::downsample(4).expect("valid factor"),
        DegradationOperator::gaussian_blur(5, 1.2).expect("valid kernel"),
        DegradationOperator::grayscale(&REC601),
    ]
}

fn linear_loss(op: &DegradationOperator, rng: &mut rand_chacha::ChaCha8Rng) -> Result<GuidanceLoss> {
    let y = randn(rng, &op.output_shape(&[3, 8, 8])?);
    GuidanceLoss::linear(op.clone(), y, 0.05)
}

/// A ≤200-weight denoiser with every weight nonzero.
pub fn tiny_denoiser(seed: u64) -> Result<DenoiserModel> {
    let mut model = DenoiserModel::new(DenoiserArch::tiny(1), seed)?;
    let mut rng = rng_for(seed, Purpose::Init, 99);
    for p in model.params_mut() {
        *p = randn(&mut rng, p.shape()).scale(0.4);
    }
    Ok(model)
}

/// Every check with `instances` random cases each (classifier and DPS rows use
/// a fifth as many, at least one).
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    for kind in 0..NUM_OP_KINDS {
        let mut errs = Vec::with_capacity(instances);
        let mut name = "";
        for i in 0..instances {
            let mut rng = rng_for(derive_seed(seed, Purpose::Validation, kind as u64), Purpose::Validation, i as u64);
            let (n, op, inputs) = random_op_instance(kind, &mut rng);
            name = n;
            errs.push(op_instance_err(&op, &inputs, &mut rng)?);
        }
        rows.push(row(&format!("op/{name}"), errs));
    }

    for (k, op) in operators().iter().enumerate() {
        let mut plain = Vec::with_capacity(instances);
        let mut augmented = Vec::with_capacity(instances);
        for i in 0..instances {
            let mut rng = rng_for(derive_seed(seed, Purpose::Task, k as u64), Purpose::Validation, i as u64);
            let loss = linear_loss(op, &mut rng)?;
            let x = randn(&mut rng, &[3, 8, 8]);
            let g = loss.grad(&x)?;
            let fd = finite_diff_grad(|v| loss.value(v), &x, FD_STEP)?;
            plain.push(grad_rel_err(&g, &fd));

            let cfg = AugmentConfig { k: 4, ..AugmentConfig::default() };
            let aug_seed = derive_seed(seed, Purpose::Augmentation, i as u64);
            let (_, g) = averaged_loss_and_grad(&loss, &x, &cfg, aug_seed)?;
            let fd = finite_diff_grad(|v| Ok(averaged_loss_and_grad(&loss, v, &cfg, aug_seed)?.0), &x, FD_STEP)?;
            augmented.push(grad_rel_err(&g, &fd));
        }
        rows.push(row(&format!("loss/{}", op.kind()), plain));
        rows.push(row(&format!("augmented/{}", op.kind()), augmented));
    }

    let few = (instances / 5).max(1);
    let mut errs = Vec::with_capacity(few);
    for i in 0..few {
        let model = std::sync::Arc::new(ClassifierModel::new(ClassifierArch::tiny(3, 3), derive_seed(seed, Purpose::Init, i as u64))?);
        let loss = GuidanceLoss::classifier(model, i % 3)?;
        let x = randn(&mut rng_for(seed, Purpose::Validation, 1000 + i as u64), &[3, 4, 4]);
        let fd = finite_diff_grad(|v| loss.value(v), &x, FD_STEP)?;
        errs.push(grad_rel_err(&loss.grad(&x)?, &fd));
    }
    rows.push(row("loss/classifier", errs));

    let sched = NoiseSchedule::default_sampling(10)?;
    let mut errs = Vec::with_capacity(few);
    for i in 0..few {
        let model = tiny_denoiser(derive_seed(seed, Purpose::Init, 500 + i as u64))?;
        let shape = model.arch().image_shape();
        let mut rng = rng_for(seed, Purpose::Validation, 2000 + i as u64);
        let op = DegradationOperator::box_mask(shape[1], shape[2], 1, 1, 2, 2)?;
        let loss = GuidanceLoss::linear(op, randn(&mut rng, &shape), 0.05)?;
        let x_t = randn(&mut rng, &shape);
        let t = 1 + i % sched.steps();
        let eps = NoisePredictor::predict_noise(&model, &x_t, t, &sched)?;
        let g_x = loss.grad(&mmse_estimate(&x_t, &eps, t, &sched)?)?;
        let analytic = dps_input_gradient(&x_t, t, &model, &sched, &g_x)?;
        let fd = finite_diff_grad(
            |x| {
                let e = NoisePredictor::predict_noise(&model, x, t, &sched)?;
                loss.value(&mmse_estimate(x, &e, t, &sched)?)
            },
            &x_t,
            FD_STEP,
        )?;
        errs.push(grad_rel_err(&analytic, &fd));
    }
    rows.push(row("chain/dps", errs));
    Ok(rows)
}
