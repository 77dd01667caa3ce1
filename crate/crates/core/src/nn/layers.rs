//! Layer implementations with explicit forward/backward passes.
//!
//! `forward_train` caches whatever the backward pass needs; `forward_eval`
//! takes `&self` so inference can run in parallel over shared weights.

use super::{he_normal, Param, Parameterized};
use ndarray::{Array1, Array2, Array4, ArrayView2, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

/// 2-D convolution, NCHW layout, zero padding.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    cached_input: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::new(he_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng));
        let bias = Param::new(Array1::<f32>::zeros(out_ch).into_dyn());
        Self { weight, bias, stride, pad, in_ch, out_ch, kernel, cached_input: None }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn pad_sample(&self, x: &Array4<f32>, n: usize) -> Array1<f32> {
        let (_, c, h, w) = x.dim();
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        let mut padded = Array1::zeros(c * ph * pw);
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * ph + y + self.pad) * pw + self.pad;
                for xx in 0..w {
                    padded[base + xx] = x[[n, ch, y, xx]];
                }
            }
        }
        padded
    }

    /// Lowers one padded sample to a `[C*K*K, OH*OW]` matrix.
    fn im2col(&self, padded: &Array1<f32>, h: usize, w: usize) -> Array2<f32> {
        let (oh, ow) = self.out_spatial(h, w);
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        let k = self.kernel;
        let mut cols = Array2::zeros((self.in_ch * k * k, oh * ow));
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = oy * self.stride + ky;
                        let src = (c * ph + iy) * pw + kx;
                        for ox in 0..ow {
                            cols[[row, oy * ow + ox]] = padded[src + ox * self.stride];
                        }
                    }
                }
            }
        }
        cols
    }

    fn weight2d(&self) -> ArrayView2<'_, f32> {
        let k2 = self.in_ch * self.kernel * self.kernel;
        self.weight.value.view().into_shape_with_order((self.out_ch, k2)).unwrap()
    }

    fn forward_impl(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let w2 = self.weight2d().to_owned();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        for i in 0..n {
            let padded = self.pad_sample(x, i);
            let cols = self.im2col(&padded, h, w);
            let y = w2.dot(&cols);
            for oc in 0..self.out_ch {
                let b = bias[oc];
                for s in 0..oh * ow {
                    out[[i, oc, s / ow, s % ow]] = y[[oc, s]] + b;
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        self.cached_input = Some(x.clone());
        self.forward_impl(x)
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_impl(x)
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let x = self.cached_input.take().expect("backward without forward_train");
        let (n, c, h, w) = x.dim();
        let (_, _, oh, ow) = gy.dim();
        let k = self.kernel;
        let k2 = c * k * k;
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        let w2 = self.weight2d().to_owned();
        let mut dw = Array2::<f32>::zeros((self.out_ch, k2));
        let mut db = Array1::<f32>::zeros(self.out_ch);
        let mut gx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            let padded = self.pad_sample(&x, i);
            let cols = self.im2col(&padded, h, w);
            let mut gy2 = Array2::zeros((self.out_ch, oh * ow));
            for oc in 0..self.out_ch {
                for s in 0..oh * ow {
                    let g = gy[[i, oc, s / ow, s % ow]];
                    gy2[[oc, s]] = g;
                    db[oc] += g;
                }
            }
            dw = dw + gy2.dot(&cols.t());
            // dcols = W^T * gy, scattered back through the padding.
            let dcols = w2.t().dot(&gy2);
            let mut dpad = Array1::<f32>::zeros(ph * pw * c);
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ch * k + ky) * k + kx;
                        for oy in 0..oh {
                            let iy = oy * self.stride + ky;
                            let dst = (ch * ph + iy) * pw + kx;
                            for ox in 0..ow {
                                dpad[dst + ox * self.stride] += dcols[[row, oy * ow + ox]];
                            }
                        }
                    }
                }
            }
            for ch in 0..c {
                for y in 0..h {
                    let base = (ch * ph + y + self.pad) * pw + self.pad;
                    for xx in 0..w {
                        gx[[i, ch, y, xx]] = dpad[base + xx];
                    }
                }
            }
        }
        let gw = self.weight.grad.view_mut().into_shape_with_order((self.out_ch, k2)).unwrap();
        ndarray::Zip::from(gw).and(&dw).for_each(|g, &d| *g += d);
        let gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        ndarray::Zip::from(gb).and(&db).for_each(|g, &d| *g += d);
        gx
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Batch normalization over the channel axis of NCHW maps.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
    pub momentum: f32,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::<f32>::ones(channels).into_dyn()),
            beta: Param::new(Array1::<f32>::zeros(channels).into_dyn()),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f32;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = Array4::zeros((n, c, h, w));
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let mut mean = 0.0f32;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        mean += x[[i, ch, y, xx]];
                    }
                }
            }
            mean /= m;
            let mut var = 0.0f32;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let d = x[[i, ch, y, xx]] - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (x[[i, ch, y, xx]] - mean) * istd;
                        xhat[[i, ch, y, xx]] = xh;
                        out[[i, ch, y, xx]] = gamma[ch] * xh + beta[ch];
                    }
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }
        self.cache = Some(BnCache { xhat: xhat.clone(), inv_std });
        out
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let istd = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let mean = self.running_mean[ch];
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        out[[i, ch, y, xx]] = gamma[ch] * (x[[i, ch, y, xx]] - mean) * istd + beta[ch];
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let BnCache { xhat, inv_std } = self.cache.take().expect("backward without forward_train");
        let (n, c, h, w) = gy.dim();
        let m = (n * h * w) as f32;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut gx = Array4::zeros((n, c, h, w));
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let mut dg = 0.0f32;
            let mut db = 0.0f32;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let g = gy[[i, ch, y, xx]];
                        dg += g * xhat[[i, ch, y, xx]];
                        db += g;
                    }
                }
            }
            dgamma[ch] = dg;
            dbeta[ch] = db;
            let scale = gamma[ch] * inv_std[ch] / m;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        gx[[i, ch, y, xx]] = scale
                            * (m * gy[[i, ch, y, xx]] - db - xhat[[i, ch, y, xx]] * dg);
                    }
                }
            }
        }
        let gg = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        ndarray::Zip::from(gg).and(&dgamma).for_each(|g, &d| *g += d);
        let gb = self.beta.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        ndarray::Zip::from(gb).and(&dbeta).for_each(|g, &d| *g += d);
        gx
    }
}

impl Parameterized for BatchNorm2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

/// Element-wise ReLU.
#[derive(Default)]
pub struct Relu {
    mask: Option<Array4<f32>>,
}

impl Relu {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let mask = self.mask.take().expect("backward without forward_train");
        gy * &mask
    }
}

/// Max pooling with square window and zero padding.
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    argmax: Option<(Array4<usize>, (usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad, argmax: None }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn forward_impl(&self, x: &Array4<f32>) -> (Array4<f32>, Array4<usize>) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut arg = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[i, ch, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        out[[i, ch, oy, ox]] = best;
                        arg[[i, ch, oy, ox]] = best_idx;
                    }
                }
            }
        }
        (out, arg)
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (n, _, h, w) = x.dim();
        let _ = n;
        let (y, arg) = self.forward_impl(x);
        self.argmax = Some((arg, (h, w)));
        y
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_impl(x).0
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let (arg, (h, w)) = self.argmax.take().expect("backward without forward_train");
        let (n, c, oh, ow) = gy.dim();
        let mut gx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let idx = arg[[i, ch, oy, ox]];
                        gx[[i, ch, idx / w, idx % w]] += gy[[i, ch, oy, ox]];
                    }
                }
            }
        }
        gx
    }
}

/// Fully connected layer: `y = x · Wᵀ + b`.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cached_input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Param::new(he_normal(&[out_features, in_features], in_features, rng));
        let bias = Param::new(Array1::<f32>::zeros(out_features).into_dyn());
        Self { weight, bias, cached_input: None }
    }

    /// Head initialization: small uniform weights, zero bias.
    pub fn new_small_uniform(in_features: usize, out_features: usize, bound: f32, rng: &mut ChaCha8Rng) -> Self {
        let weight = Param::new(super::small_uniform(&[out_features, in_features], bound, rng));
        let bias = Param::new(Array1::<f32>::zeros(out_features).into_dyn());
        Self { weight, bias, cached_input: None }
    }

    fn forward_impl(&self, x: &Array2<f32>) -> Array2<f32> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            ndarray::Zip::from(&mut row).and(&b).for_each(|v, &bb| *v += bb);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array2<f32>) -> Array2<f32> {
        self.cached_input = Some(x.clone());
        self.forward_impl(x)
    }

    pub fn forward_eval(&self, x: &Array2<f32>) -> Array2<f32> {
        self.forward_impl(x)
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array2<f32> {
        let x = self.cached_input.take().expect("backward without forward_train");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let dw = gy.t().dot(&x);
        let gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        ndarray::Zip::from(gw).and(&dw).for_each(|g, &d| *g += d);
        let gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        for (j, g) in gb.into_iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..gy.nrows() {
                acc += gy[[i, j]];
            }
            *g += acc;
        }
        gy.dot(&w)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}
