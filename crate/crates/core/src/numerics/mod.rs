//! Dense tensors and reverse-mode derivatives over a closed op set.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{forward, log_sum_exp, softmax, vjp, DiffOp, Evaluation, Graph, NodeId};
pub use tensor::{max_rel_err, Tensor};

use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step {step}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let g = (plus - minus) / (2.0 * step);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at element {i}")));
        }
        grad.push(g);
    }
    Ok(Tensor::from_vec_unchecked(x.shape().to_vec(), grad))
}

/// Gradient-check error: `max_i |a_i - b_i| / max(‖a‖∞, ‖b‖∞)`.
///
/// Normalising by the largest component keeps entries that are zero in
/// exact arithmetic from dominating through rounding noise.
pub fn grad_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, standard_normal, Purpose};
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_example() {
        let y = forward(&DiffOp::Relu, &[&t(&[3], &[-1.0, 0.0, 2.0])]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn squared_l2_of_zero() {
        let y = forward(&DiffOp::SquaredL2, &[&Tensor::zeros(&[4, 4])]).unwrap();
        assert_eq!(y.item(), 0.0);
    }

    #[test]
    fn conv_impulse_response_is_kernel() {
        let mut img = Tensor::zeros(&[1, 7, 7]);
        img.data_mut()[3 * 7 + 3] = 1.0;
        let k: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w = t(&[1, 1, 3, 3], &k);
        let y = forward(&DiffOp::Conv2d { pad: 1 }, &[&img, &w, &Tensor::zeros(&[1])]).unwrap();
        // correlation: output(y,x) = Σ k(i,j) img(y+i-1, x+j-1), so the impulse
        // shows the kernel flipped about its centre
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.data()[(2 + i) * 7 + 2 + j], k[(2 - i) * 3 + (2 - j)]);
            }
        }
        assert_eq!(y.sum(), 45.0);
    }

    #[test]
    fn squared_l2_vjp_is_2x() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let g = vjp(&DiffOp::SquaredL2, &[&x], &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g[0].data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn mean_pool_vjp_spreads_over_block() {
        let x = Tensor::zeros(&[1, 8, 8]);
        let c = t(&[1, 2, 2], &[16.0, 32.0, 48.0, 64.0]);
        let g = vjp(&DiffOp::MeanPool { factor: 4 }, &[&x], &c).unwrap();
        assert_eq!(g[0].data()[0], 1.0);
        assert_eq!(g[0].data()[3 * 8 + 3], 1.0);
        assert_eq!(g[0].data()[4], 2.0);
        assert_eq!(g[0].data()[7 * 8 + 7], 4.0);
    }

    #[test]
    fn finite_diff_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        let g = finite_diff_grad(|v| Ok(v.norm_sq()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| Ok(3.0), &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    }

    #[test]
    fn two_layer_mlp_vjp_matches_finite_differences() {
        let mut g = Graph::new();
        let x = g.input();
        let w1 = g.input();
        let b1 = g.input();
        let w2 = g.input();
        let b2 = g.input();
        let h = g.push(DiffOp::Affine, &[x, w1, b1]);
        let h = g.push(DiffOp::Relu, &[h]);
        let o = g.push(DiffOp::Affine, &[h, w2, b2]);
        g.push(DiffOp::SquaredL2, &[o]);
        let mut rng = rng_for(11, Purpose::Init, 0);
        let inputs = [
            standard_normal(&mut rng, &[5]),
            standard_normal(&mut rng, &[8, 5]),
            standard_normal(&mut rng, &[8]),
            standard_normal(&mut rng, &[3, 8]),
            standard_normal(&mut rng, &[3]),
        ];
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let grads = g.forward(&refs).unwrap().vjp(&Tensor::scalar(1.0)).unwrap();
        for k in 0..inputs.len() {
            let fd = finite_diff_grad(
                |v| {
                    let mut r = refs.clone();
                    r[k] = v;
                    Ok(g.forward(&r)?.output().item())
                },
                &inputs[k],
                1e-5,
            )
            .unwrap();
            assert!(grad_rel_err(&grads[k], &fd) <= 1e-4, "input {k}");
        }
        let _ = rng.random::<u8>();
    }

    #[test]
    fn graph_rejects_wrong_input_count_and_nan() {
        let mut g = Graph::new();
        let a = g.input();
        g.push(DiffOp::Relu, &[a]);
        assert!(g.forward(&[]).is_err());
        let mut bad = Tensor::zeros(&[2]);
        bad.data_mut()[0] = f64::NAN;
        assert!(g.forward(&[&bad]).is_err());
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.input();
        let _b = g.input();
        g.push(DiffOp::Sum, &[a]);
        let x = Tensor::full(&[2], 1.0);
        let y = Tensor::full(&[3], 1.0);
        let grads = g.forward(&[&x, &y]).unwrap().vjp(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads[1], Tensor::zeros(&[3]));
    }
}
