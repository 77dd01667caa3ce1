//! Minimal CPU neural-network kernel: conv/batch-norm/pool/linear layers with
//! hand-written backward passes, Adam, and seeded initialization.
//!
//! Everything is `f32` on `ndarray` with a fixed accumulation order, so a
//! fixed seed reproduces training bit for bit regardless of thread count.

mod layers;

pub use layers::{BatchNorm2d, Conv2d, Linear, MaxPool2d, Relu};

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Visitor over a module's parameters in a stable, declaration order.
///
/// The same order is used by the optimizer, checkpoint serialization, and the
/// inference-graph export, so parameter slot `i` always means the same tensor.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }
}

/// Adam optimizer with bias correction.
///
/// Moment slots are positional: they line up with the order in which
/// [`Parameterized::visit_params`] yields parameters.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    slots: Vec<(ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, slots: Vec::new() }
    }

    /// Applies one update step at the given learning rate.
    pub fn step<M: Parameterized>(&mut self, module: &mut M, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let slots = &mut self.slots;
        let mut idx = 0;
        module.visit_params(&mut |_, p| {
            if slots.len() == idx {
                slots.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut slots[idx];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
            idx += 1;
        });
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable logistic sigmoid, clamped to stay strictly inside
/// (0, 1) so probability contracts and log-losses hold for extreme logits.
pub fn sigmoid(z: f32) -> f32 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(1e-7, 1.0 - 1e-7)
}

/// Global average pooling: `[N, C, H, W]` feature maps to `[N, C]` vectors.
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for j in 0..c {
            let mut acc = 0.0f32;
            for y in 0..h {
                for xx in 0..w {
                    acc += x[[i, j, y, xx]];
                }
            }
            out[[i, j]] = acc * scale;
        }
    }
    out
}

/// Backward of [`global_avg_pool`]: spreads each pooled gradient uniformly.
pub fn global_avg_pool_backward(gy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = gy.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut gx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for j in 0..c {
            let g = gy[[i, j]] * scale;
            for y in 0..h {
                for xx in 0..w {
                    gx[[i, j, y, xx]] = g;
                }
            }
        }
    }
    gx
}

/// Standard normal sample via Box–Muller, deterministic under the given RNG.
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    use rand::Rng;
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// He-normal initialization for a conv/linear weight with the given fan-in.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    ArrayD::from_shape_fn(shape, |_| sample_normal(rng) * std)
}

/// Small-uniform initialization in `[-bound, bound]`.
pub fn small_uniform(shape: &[usize], bound: f32, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    use rand::Rng;
    ArrayD::from_shape_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Bias vector helper.
pub fn zeros1(n: usize) -> Array1<f32> {
    Array1::zeros(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use ndarray::{Array2, Array4};

    #[test]
    fn sigmoid_matches_closed_form() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-7);
        assert!((sigmoid(2.0) - 1.0 / (1.0 + (-2.0f32).exp())).abs() < 1e-7);
        assert!(sigmoid(-40.0) > 0.0);
        assert!(sigmoid(40.0) < 1.0);
    }

    #[test]
    fn gap_ignores_spatial_permutation() {
        let mut rng = seeded_rng(11, &["gap"]);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| sample_normal(&mut rng));
        let pooled = global_avg_pool(&x);
        // Reverse the spatial cells within each channel: pooled output is identical.
        let mut shuffled = x.clone();
        for n in 0..2 {
            for c in 0..3 {
                let mut cells: Vec<f32> = Vec::new();
                for y in 0..4 {
                    for xx in 0..4 {
                        cells.push(x[[n, c, y, xx]]);
                    }
                }
                cells.reverse();
                let mut k = 0;
                for y in 0..4 {
                    for xx in 0..4 {
                        shuffled[[n, c, y, xx]] = cells[k];
                        k += 1;
                    }
                }
            }
        }
        let pooled2 = global_avg_pool(&shuffled);
        for (a, b) in pooled.iter().zip(pooled2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        // Single linear layer fit to y = 2x with L2 loss.
        struct One(Param);
        impl Parameterized for One {
            fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
                f("w", &mut self.0);
            }
        }
        let mut m = One(Param::new(ArrayD::zeros(ndarray::IxDyn(&[1]))));
        let mut opt = Adam::new();
        let mut last = f32::INFINITY;
        for _ in 0..200 {
            let w = m.0.value[[0]];
            let loss = (w - 2.0) * (w - 2.0);
            m.0.grad[[0]] = 2.0 * (w - 2.0);
            opt.step(&mut m, 0.1);
            last = loss;
        }
        assert!(last < 1e-3, "loss after Adam steps: {last}");
    }

    #[test]
    fn gap_backward_spreads_uniformly() {
        let gy = Array2::from_shape_vec((1, 2), vec![8.0, 4.0]).unwrap();
        let gx = global_avg_pool_backward(&gy, 2, 2);
        assert!((gx[[0, 0, 0, 0]] - 2.0).abs() < 1e-7);
        assert!((gx[[0, 1, 1, 1]] - 1.0).abs() < 1e-7);
    }
}
