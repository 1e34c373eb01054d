//! Finite-difference validation of the tape gradients.
//!
//! The whole check runs in f64: the same generic kernels the f32 network
//! uses, instantiated at the widest precision, so central differences are
//! limited by truncation error rather than rounding noise.

use crate::error::Result;
use crate::tape::{GradTape, TensorId};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` must produce a scalar node from the single input node it is handed;
/// it may register additional non-gradient leaves (weights) internally, but
/// must be deterministic so repeated evaluations see identical constants.
/// Returns the max over input entries of
/// `|g_analytic - g_fd| / max(1e-8, |g_analytic| + |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f32>, eps: f64) -> Result<f64>
where
    F: Fn(&mut GradTape<f64>, TensorId) -> Result<TensorId>,
{
    let x64: Tensor<f64> = x.cast();

    let mut tape = GradTape::<f64>::new();
    let id = tape.leaf(x64.clone().with_grad());
    let y = f(&mut tape, id)?;
    let _ = tape.value(y).item()?;
    tape.backward(y)?;
    let analytic: Vec<f64> = match tape.grad(id) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x64.numel()],
    };

    let mut probe = x64;
    probe.requires_grad = false;
    let mut max_rel = 0.0f64;
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut GradTape<f64>, TensorId) -> Result<TensorId>,
{
    let mut tape = GradTape::<f64>::new();
    let id = tape.leaf(x.clone());
    let y = f(&mut tape, id)?;
    tape.value(y).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::SpatialAxis;
    use crate::tape::{Activation, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Normal samples pushed at least `margin` away from zero, so finite
    /// differences never straddle a ReLU kink.
    fn randn_off_kink(shape: &[usize], rng: &mut ChaCha8Rng, margin: f32) -> Tensor<f32> {
        let mut t = randn(shape, rng);
        for v in t.data_mut() {
            if v.abs() < margin {
                *v = margin * if *v >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        t
    }

    #[test]
    fn sum_of_squares_matches_closely() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[3, 4], &mut rng);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum_all(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {}", err);
    }

    #[test]
    fn conv_inplane_kernel_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[1, 2, 4, 8, 8], &mut rng);
        let wdata: Vec<f64> = (0..3 * 2 * 9).map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * 0.5
        }).collect();
        let bdata: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let err = grad_check(
            move |t, x| {
                let w = t.leaf(Tensor::from_vec(&[3, 2, 1, 3, 3], wdata.clone()).unwrap());
                let b = t.leaf(Tensor::from_vec(&[3], bdata.clone()).unwrap());
                let y = t.conv(x, w, b, [1, 1, 1], [0, 1, 1])?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {}", err);
    }

    #[test]
    fn conv_gradients_flow_to_weights_and_bias() {
        // Same conv, but checked with the weight as the probed input.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xdata: Vec<f64> = (0..2 * 4 * 8 * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w = randn(&[3, 2, 3, 3, 3], &mut rng);
        let err = grad_check(
            move |t, w| {
                let x = t.leaf(Tensor::from_vec(&[1, 2, 4, 8, 8], xdata.clone()).unwrap());
                let b = t.leaf(Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap());
                let y = t.conv(x, w, b, [1, 1, 1], [1, 1, 1])?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &w,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {}", err);
    }

    #[test]
    fn batch_norm_train_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&[2, 2, 2, 4, 4], &mut rng);
        let err = grad_check(
            |t, x| {
                let g = t.leaf(Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap());
                let b = t.leaf(Tensor::from_vec(&[2], vec![0.1, -0.4]).unwrap());
                let rm = Tensor::zeros(&[2]);
                let rv = Tensor::full(&[2], 1.0);
                let (y, _) = t.batch_norm(x, g, b, &rm, &rv, Mode::Train)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {}", err);
    }

    #[test]
    fn activations_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [Activation::Relu, Activation::LeakyRelu, Activation::Sigmoid] {
            let x = randn_off_kink(&[2, 3, 4], &mut rng, 0.05);
            let err = grad_check(
                move |t, x| {
                    let y = t.activation(x, kind)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-3, "{:?} relative error {}", kind, err);
        }
    }

    #[test]
    fn softmax_and_pooling_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&[1, 2, 2, 4, 4], &mut rng);
        let err = grad_check(
            |t, x| {
                let p = t.softmax_channels(x)?;
                let fg = t.slice_channel(p, 1)?;
                let sq = t.mul(fg, fg)?;
                t.sum_all(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-3, "softmax relative error {}", err);

        for keep in [SpatialAxis::Depth, SpatialAxis::Height, SpatialAxis::Width] {
            let x = randn(&[1, 2, 2, 4, 4], &mut rng);
            let err = grad_check(
                move |t, x| {
                    let p = t.pool_mean_axes(x, keep)?;
                    let sq = t.mul(p, p)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-3, "{:?} relative error {}", keep, err);
        }
    }

    #[test]
    fn max_pool_matches_away_from_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Spread values far enough apart that eps never flips the argmax.
        let mut x = randn(&[1, 2, 2, 4, 4], &mut rng);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = *v * 0.01 + (i % 7) as f32;
        }
        let err = grad_check(
            |t, x| {
                let p = t.max_pool_inplane(x)?;
                let sq = t.mul(p, p)?;
                t.sum_all(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {}", err);
    }

    #[test]
    fn transposed_conv_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&[1, 3, 2, 4, 4], &mut rng);
        let wdata: Vec<f64> = (0..3 * 2 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let err = grad_check(
            move |t, x| {
                let w = t.leaf(Tensor::from_vec(&[3, 2, 1, 2, 2], wdata.clone()).unwrap());
                let b = t.leaf(Tensor::from_vec(&[2], vec![0.05, -0.1]).unwrap());
                let y = t.upsample_transposed_inplane(x, w, b)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {}", err);
    }

    #[test]
    fn broadcast_div_chain_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Keep the divisor away from zero.
        let mut x = randn(&[1, 1, 2, 1, 3], &mut rng);
        for v in x.data_mut() {
            *v = v.abs() + 1.0;
        }
        let err = grad_check(
            |t, x| {
                let wide = t.broadcast_to(x, &[2, 2, 2, 2, 3])?;
                let shifted = t.add_scalar(wide, 3.0)?;
                let ratio = t.div(wide, shifted)?;
                t.sum_all(ratio)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {}", err);
    }
}
