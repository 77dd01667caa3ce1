//! Classical dense optical flow: coarse-to-fine polynomial expansion.
//!
//! Each image is approximated per pixel by a local quadratic polynomial fitted
//! under Gaussian weighting; displacement falls out of the difference between
//! the linear coefficients of the two expansions. A Gaussian image pyramid
//! with per-level fixed-point iterations handles motions larger than the
//! fitting window. CPU-only, dependency-light, and fully deterministic.

use super::{FlowError, FlowEstimator, FlowField};
use image::RgbImage;
use ndarray::{Array2, Array3};

/// Tuning knobs for the polynomial-expansion estimator.
#[derive(Debug, Clone)]
pub struct FarnebackParams {
    /// Pyramid levels; 0 picks enough levels to bring the smaller side near 24 px.
    pub levels: usize,
    /// Side of the box window that aggregates the local normal equations.
    pub window: usize,
    /// Fixed-point iterations per level.
    pub iterations: usize,
    /// Half-width of the polynomial fitting window.
    pub poly_n: usize,
    /// Gaussian sigma of the fitting applicability.
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self { levels: 0, window: 13, iterations: 3, poly_n: 3, poly_sigma: 1.1 }
    }
}

/// Dense pyramidal polynomial-expansion flow estimator.
#[derive(Debug, Clone, Default)]
pub struct FarnebackEstimator {
    pub params: FarnebackParams,
}

impl FarnebackEstimator {
    pub fn new(params: FarnebackParams) -> Self {
        Self { params }
    }
}

impl FlowEstimator for FarnebackEstimator {
    fn name(&self) -> &'static str {
        "farneback"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn estimate(&self, a: &RgbImage, b: &RgbImage) -> Result<FlowField, FlowError> {
        let g0 = to_gray(a);
        let g1 = to_gray(b);
        let (u, v) = farneback_flow(&g0, &g1, &self.params);
        FlowField::new(u, v)
    }
}

/// Rec. 601 luma in f32.
fn to_gray(img: &RgbImage) -> Array2<f32> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let p = img.get_pixel(x as u32, y as u32);
        0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
    })
}

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(2 * n + 1);
    for k in -(n as i64)..=(n as i64) {
        g.push((-(k as f64) * (k as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// 5-tap binomial downsample by 2 in each dimension.
fn downsample(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    let taps = [1.0f32, 4.0, 6.0, 4.0, 1.0];
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    // Horizontal blur.
    let mut hbuf = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, tap) in taps.iter().enumerate() {
                acc += tap * img[[y, clamp(x as i64 + t as i64 - 2, w)]];
            }
            hbuf[[y, x]] = acc / 16.0;
        }
    }
    // Vertical blur plus decimation.
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array2::zeros((nh, nw));
    for y in 0..nh {
        for x in 0..nw {
            let sy = y * 2;
            let mut acc = 0.0;
            for (t, tap) in taps.iter().enumerate() {
                acc += tap * hbuf[[clamp(sy as i64 + t as i64 - 2, h), x * 2]];
            }
            out[[y, x]] = acc / 16.0;
        }
    }
    out
}

/// Bilinear upsample of a flow component to the given size, values scaled by 2.
fn upsample_flow(flow: &Array2<f32>, nh: usize, nw: usize) -> Array2<f32> {
    let (h, w) = flow.dim();
    Array2::from_shape_fn((nh, nw), |(y, x)| {
        let fy = (y as f32 + 0.5) * h as f32 / nh as f32 - 0.5;
        let fx = (x as f32 + 0.5) * w as f32 / nw as f32 - 0.5;
        let y0 = fy.floor().clamp(0.0, (h - 1) as f32) as usize;
        let x0 = fx.floor().clamp(0.0, (w - 1) as f32) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let ty = (fy - y0 as f32).clamp(0.0, 1.0);
        let tx = (fx - x0 as f32).clamp(0.0, 1.0);
        let top = flow[[y0, x0]] * (1.0 - tx) + flow[[y0, x1]] * tx;
        let bot = flow[[y1, x0]] * (1.0 - tx) + flow[[y1, x1]] * tx;
        2.0 * (top * (1.0 - ty) + bot * ty)
    })
}

/// Per-pixel quadratic expansion coefficients, channel order
/// `[x, y, x², y², xy]` (the constant term is not needed for displacement).
fn poly_expansion(img: &Array2<f32>, n: usize, sigma: f64) -> Array3<f32> {
    let (h, w) = img.dim();
    let g = gaussian_kernel(n, sigma);
    let ni = n as i64;

    // Window moments of the separable applicability.
    let m0: f64 = g.iter().sum();
    let m2: f64 = g.iter().enumerate().map(|(i, &v)| {
        let k = i as f64 - n as f64;
        k * k * v
    }).sum();
    let m4: f64 = g.iter().enumerate().map(|(i, &v)| {
        let k = i as f64 - n as f64;
        k * k * k * k * v
    }).sum();
    // 2-D moments of a(x, y) = g(x) g(y).
    let a0 = m0 * m0;
    let a2 = m2 * m0;
    let a4 = m4 * m0;
    let a22 = m2 * m2;

    // Inverse pieces of the normal-equation matrix over basis (1, x, y, x², y², xy).
    let inv_x = 1.0 / a2;
    let inv_xy = 1.0 / a22;
    // Coupled (1, x², y²) block: solved via sum/difference decomposition.
    let diff_denom = a4 - a22;
    let sum_denom = (a4 + a22) - 2.0 * a2 * a2 / a0;

    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;

    // Horizontal pass: correlate rows with g, k·g, k²·g.
    let mut s0 = Array2::<f64>::zeros((h, w));
    let mut s1 = Array2::<f64>::zeros((h, w));
    let mut s2 = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (mut acc0, mut acc1, mut acc2) = (0.0f64, 0.0, 0.0);
            for k in -ni..=ni {
                let v = img[[y, clamp(x as i64 + k, w)]] as f64 * g[(k + ni) as usize];
                acc0 += v;
                acc1 += k as f64 * v;
                acc2 += (k * k) as f64 * v;
            }
            s0[[y, x]] = acc0;
            s1[[y, x]] = acc1;
            s2[[y, x]] = acc2;
        }
    }

    // Vertical pass assembles the six correlations and solves per pixel.
    let mut out = Array3::<f32>::zeros((5, h, w));
    for y in 0..h {
        for x in 0..w {
            let (mut t0, mut ty, mut tyy, mut tx, mut txy, mut txx) = (0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0);
            for k in -ni..=ni {
                let yy = clamp(y as i64 + k, h);
                let gk = g[(k + ni) as usize];
                let kf = k as f64;
                t0 += gk * s0[[yy, x]];
                ty += kf * gk * s0[[yy, x]];
                tyy += kf * kf * gk * s0[[yy, x]];
                tx += gk * s1[[yy, x]];
                txy += kf * gk * s1[[yy, x]];
                txx += gk * s2[[yy, x]];
            }
            let rx = tx * inv_x;
            let ry = ty * inv_x;
            let rxy = txy * inv_xy;
            let diff = (txx - tyy) / diff_denom;
            let sum = (txx + tyy - 2.0 * (a2 / a0) * t0) / sum_denom;
            let rxx = 0.5 * (sum + diff);
            let ryy = 0.5 * (sum - diff);
            out[[0, y, x]] = rx as f32;
            out[[1, y, x]] = ry as f32;
            out[[2, y, x]] = rxx as f32;
            out[[3, y, x]] = ryy as f32;
            out[[4, y, x]] = rxy as f32;
        }
    }
    out
}

/// One fixed-point flow update from the two expansions and the prior flow.
fn update_flow(
    r0: &Array3<f32>,
    r1: &Array3<f32>,
    u: &Array2<f32>,
    v: &Array2<f32>,
    window: usize,
) -> (Array2<f32>, Array2<f32>) {
    let (_, h, w) = r0.dim();
    // Normal equations per pixel: m = [g11, g12, g22, h1, h2].
    let mut m = Array3::<f32>::zeros((5, h, w));
    for y in 0..h {
        for x in 0..w {
            let du = u[[y, x]];
            let dv = v[[y, x]];
            let sx = ((x as f32 + du).round()).clamp(0.0, (w - 1) as f32) as usize;
            let sy = ((y as f32 + dv).round()).clamp(0.0, (h - 1) as f32) as usize;

            // Averaged quadratic form A and the constraint vector db.
            let axx = 0.5 * (r0[[2, y, x]] + r1[[2, sy, sx]]);
            let ayy = 0.5 * (r0[[3, y, x]] + r1[[3, sy, sx]]);
            let axy = 0.25 * (r0[[4, y, x]] + r1[[4, sy, sx]]);
            let dbx = -0.5 * (r1[[0, sy, sx]] - r0[[0, y, x]]) + axx * du + axy * dv;
            let dby = -0.5 * (r1[[1, sy, sx]] - r0[[1, y, x]]) + axy * du + ayy * dv;

            m[[0, y, x]] = axx * axx + axy * axy;
            m[[1, y, x]] = axy * (axx + ayy);
            m[[2, y, x]] = ayy * ayy + axy * axy;
            m[[3, y, x]] = axx * dbx + axy * dby;
            m[[4, y, x]] = axy * dbx + ayy * dby;
        }
    }
    for c in 0..5 {
        let blurred = box_blur(&m.index_axis(ndarray::Axis(0), c).to_owned(), window);
        m.index_axis_mut(ndarray::Axis(0), c).assign(&blurred);
    }
    let mut nu = Array2::zeros((h, w));
    let mut nv = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let g11 = m[[0, y, x]] as f64;
            let g12 = m[[1, y, x]] as f64;
            let g22 = m[[2, y, x]] as f64;
            let h1 = m[[3, y, x]] as f64;
            let h2 = m[[4, y, x]] as f64;
            let det = g11 * g22 - g12 * g12;
            if det.abs() > 1e-9 {
                nu[[y, x]] = ((g22 * h1 - g12 * h2) / det) as f32;
                nv[[y, x]] = ((g11 * h2 - g12 * h1) / det) as f32;
            }
        }
    }
    (nu, nv)
}

/// Separable box blur with replicated borders.
fn box_blur(img: &Array2<f32>, window: usize) -> Array2<f32> {
    let r = (window / 2) as i64;
    let (h, w) = img.dim();
    let norm = 1.0 / (2 * r + 1) as f32;
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in -r..=r {
                acc += img[[y, clamp(x as i64 + k, w)]];
            }
            tmp[[y, x]] = acc * norm;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in -r..=r {
                acc += tmp[[clamp(y as i64 + k, h), x]];
            }
            out[[y, x]] = acc * norm;
        }
    }
    out
}

fn farneback_flow(img0: &Array2<f32>, img1: &Array2<f32>, params: &FarnebackParams) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = img0.dim();
    let levels = if params.levels > 0 {
        params.levels
    } else {
        let mut lv = 1usize;
        let mut side = h.min(w);
        while side > 48 && lv < 6 {
            side /= 2;
            lv += 1;
        }
        lv
    };

    let mut pyr0 = vec![img0.clone()];
    let mut pyr1 = vec![img1.clone()];
    for _ in 1..levels {
        pyr0.push(downsample(pyr0.last().unwrap()));
        pyr1.push(downsample(pyr1.last().unwrap()));
    }

    let mut u = Array2::zeros(pyr0.last().unwrap().dim());
    let mut v = Array2::zeros(pyr0.last().unwrap().dim());
    for level in (0..levels).rev() {
        let (lh, lw) = pyr0[level].dim();
        if u.dim() != (lh, lw) {
            u = upsample_flow(&u, lh, lw);
            v = upsample_flow(&v, lh, lw);
        }
        let r0 = poly_expansion(&pyr0[level], params.poly_n, params.poly_sigma);
        let r1 = poly_expansion(&pyr1[level], params.poly_n, params.poly_sigma);
        for _ in 0..params.iterations {
            let (nu, nv) = update_flow(&r0, &r1, &u, &v, params.window);
            u = nu;
            v = nv;
        }
    }
    (u, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Band-limited pseudo-random texture with plenty of gradient structure.
    fn texture(w: u32, h: u32, shift_x: f32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let xf = x as f32 - shift_x;
            let yf = y as f32;
            let v = 120.0
                + 45.0 * (xf * 0.21).sin() * (yf * 0.17).cos()
                + 35.0 * (xf * 0.09 + yf * 0.23).sin()
                + 25.0 * (xf * 0.05).cos() * (yf * 0.07).sin();
            let c = v.clamp(0.0, 255.0) as u8;
            image::Rgb([c, c, c])
        })
    }

    fn median(values: &mut Vec<f32>) -> f32 {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values[values.len() / 2]
    }

    #[test]
    fn identical_frames_give_near_zero_flow() {
        let img = texture(96, 64, 0.0);
        let est = FarnebackEstimator::default();
        let field = est.estimate(&img, &img).unwrap();
        let max_mag = field
            .u
            .iter()
            .zip(field.v.iter())
            .map(|(&u, &v)| (u * u + v * v).sqrt())
            .fold(0.0f32, f32::max);
        assert!(max_mag < 1e-3, "max magnitude on identical frames: {max_mag}");
    }

    #[test]
    fn five_pixel_translation_is_recovered() {
        // frame_b is frame_a moved 5 px to the right (continuous resampling,
        // no wrap-around). Interior median u must land in [4, 6], v in [-1, 1].
        let a = texture(128, 96, 0.0);
        let b = texture(128, 96, 5.0);
        let est = FarnebackEstimator::default();
        let field = est.estimate(&a, &b).unwrap();
        // Exclude a border band where the new content slides in.
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for y in 12..84usize {
            for x in 12..116usize {
                us.push(field.u[[y, x]]);
                vs.push(field.v[[y, x]]);
            }
        }
        let mu = median(&mut us);
        let mv = median(&mut vs);
        assert!((4.0..=6.0).contains(&mu), "median u = {mu}");
        assert!((-1.0..=1.0).contains(&mv), "median v = {mv}");
    }

    #[test]
    fn estimation_is_deterministic() {
        let a = texture(64, 48, 0.0);
        let b = texture(64, 48, 2.0);
        let est = FarnebackEstimator::default();
        let f1 = est.estimate(&a, &b).unwrap();
        let f2 = est.estimate(&a, &b).unwrap();
        assert_eq!(f1.u, f2.u);
        assert_eq!(f1.v, f2.v);
    }

    #[test]
    fn downsample_halves_dimensions() {
        let img = Array2::from_shape_fn((33, 48), |(y, x)| (x + y) as f32);
        let half = downsample(&img);
        assert_eq!(half.dim(), (17, 24));
    }
}
