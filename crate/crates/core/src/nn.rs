//! Minimal CHW tensor layers with explicit forward caches and backward passes.
//!
//! Activations are `Array3<f64>` in `(channels, height, width)` order with a
//! batch of one. Every layer's `forward` takes `&self` and returns a cache;
//! `backward` takes `&mut self` and accumulates parameter gradients.

use ndarray::{s, Array2, Array3, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// A trainable tensor, stored as a matrix, with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn normal<R: Rng>(
        name: impl Into<String>,
        shape: (usize, usize),
        mean: f64,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let dist = Normal::new(mean, std).expect("valid std");
        Self::new(name, Array2::from_shape_simple_fn(shape, || dist.sample(rng)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Unfolds `(C, H, W)` patches into a `(C*k*k, Ho*Wo)` matrix.
pub fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = out_size(h, k, stride, pad).expect("kernel larger than padded input");
    let wo = out_size(w, k, stride, pad).expect("kernel larger than padded input");
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let plane = ho * wo;
    let mut cols = vec![0.0; c * k * k * plane];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, plane), cols).unwrap()
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
pub fn col2im(
    cols: &Array2<f64>,
    dims: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, h, w) = dims;
    let ho = out_size(h, k, stride, pad).unwrap();
    let wo = out_size(w, k, stride, pad).unwrap();
    let plane = ho * wo;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, v) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).unwrap()
}

fn flat(x: &Array3<f64>) -> ndarray::ArrayView2<'_, f64> {
    let (c, h, w) = x.dim();
    x.view().into_shape_with_order((c, h * w)).expect("standard layout")
}

/// Square-kernel 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `(out_channels, in_channels * k * k)`
    pub weight: Param,
    /// `(out_channels, 1)`
    pub bias: Option<Param>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = Param::normal(
            format!("{name}.weight"),
            (out_ch, in_ch * kernel * kernel),
            0.0,
            INIT_STD,
            rng,
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), Array2::zeros((out_ch, 1))));
        Self {
            weight,
            bias,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (_, h, w) = x.dim();
        let ho = out_size(h, self.kernel, self.stride, self.pad).unwrap();
        let wo = out_size(w, self.kernel, self.stride, self.pad).unwrap();
        let cols = im2col(x.view(), self.kernel, self.stride, self.pad);
        let mut y = self.weight.value.dot(&cols);
        if let Some(b) = &self.bias {
            y += &b.value;
        }
        let y = y.into_shape_with_order((self.out_channels(), ho, wo)).unwrap();
        let cache = ConvCache {
            cols,
            in_dims: x.dim(),
            out_hw: (ho, wo),
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: &Array3<f64>, need_dx: bool) -> Option<Array3<f64>> {
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_channels(), cache.out_hw.0 * cache.out_hw.1))
            .unwrap();
        ndarray::linalg::general_mat_mul(1.0, &dy2, &cache.cols.t(), 1.0, &mut self.weight.grad);
        if let Some(b) = &mut self.bias {
            b.grad += &dy2.sum_axis(Axis(1)).insert_axis(Axis(1));
        }
        need_dx.then(|| {
            let dcols = self.weight.value.t().dot(&dy2);
            col2im(&dcols, cache.in_dims, self.kernel, self.stride, self.pad)
        })
    }
}

/// Transposed convolution with kernel 4, stride 2, padding 1: doubles H and W.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    /// `(in_channels, out_channels * k * k)`
    pub weight: Param,
    pub bias: Option<Param>,
    pub out_channels: usize,
}

pub struct ConvTCache {
    input: Array2<f64>,
    in_hw: (usize, usize),
}

const UP_K: usize = 4;
const UP_S: usize = 2;
const UP_P: usize = 1;

impl ConvTranspose2d {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, bias: bool, rng: &mut R) -> Self {
        let weight = Param::normal(
            format!("{name}.weight"),
            (in_ch, out_ch * UP_K * UP_K),
            0.0,
            INIT_STD,
            rng,
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), Array2::zeros((out_ch, 1))));
        Self {
            weight,
            bias,
            out_channels: out_ch,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvTCache) {
        let (_, h, w) = x.dim();
        let input = flat(x).to_owned();
        let cols = self.weight.value.t().dot(&input);
        let mut y = col2im(&cols, (self.out_channels, 2 * h, 2 * w), UP_K, UP_S, UP_P);
        if let Some(b) = &self.bias {
            for (mut plane, bv) in y.outer_iter_mut().zip(b.value.iter()) {
                plane += *bv;
            }
        }
        (y, ConvTCache { input, in_hw: (h, w) })
    }

    pub fn backward(&mut self, cache: &ConvTCache, dy: &Array3<f64>) -> Array3<f64> {
        let dcols = im2col(dy.view(), UP_K, UP_S, UP_P);
        ndarray::linalg::general_mat_mul(1.0, &cache.input, &dcols.t(), 1.0, &mut self.weight.grad);
        if let Some(b) = &mut self.bias {
            for (g, plane) in b.grad.iter_mut().zip(dy.outer_iter()) {
                *g += plane.sum();
            }
        }
        let (h, w) = cache.in_hw;
        self.weight
            .value
            .dot(&dcols)
            .into_shape_with_order((self.weight.value.nrows(), h, w))
            .unwrap()
    }
}

/// Per-channel normalization over the spatial extent with a learned affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    /// `(channels, 1)`
    pub gamma: Param,
    pub beta: Param,
}

pub struct NormCache {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn new<R: Rng>(name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            gamma: Param::normal(format!("{name}.gamma"), (channels, 1), 1.0, INIT_STD, rng),
            beta: Param::new(format!("{name}.beta"), Array2::zeros((channels, 1))),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, NormCache) {
        let n = (x.dim().1 * x.dim().2) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.dim().0);
        for mut plane in xhat.outer_iter_mut() {
            let mean = plane.sum() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            plane.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for (c, mut plane) in y.outer_iter_mut().enumerate() {
            let (g, b) = (self.gamma.value[[c, 0]], self.beta.value[[c, 0]]);
            plane.mapv_inplace(|v| g * v + b);
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = dy.dim();
        let n = (h * w) as f64;
        let mut dx = Array3::zeros(dy.raw_dim());
        for c in 0..dy.dim().0 {
            let dyc = dy.index_axis(Axis(0), c);
            let xh = cache.xhat.index_axis(Axis(0), c);
            let sum_dy = dyc.sum();
            let sum_dy_xh: f64 = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            self.gamma.grad[[c, 0]] += sum_dy_xh;
            self.beta.grad[[c, 0]] += sum_dy;
            let g = self.gamma.value[[c, 0]];
            let k = g * cache.inv_std[c] / n;
            Zip::from(dx.index_axis_mut(Axis(0), c))
                .and(&dyc)
                .and(&xh)
                .for_each(|d, &dyv, &xhv| {
                    *d = k * (n * dyv - sum_dy - xhv * sum_dy_xh);
                });
        }
        dx
    }
}

pub fn leaky_relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu_backward(x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    });
    dx
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn tanh_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
    dx
}

/// Inverted dropout mask with keep probability 0.5: entries are 0 or 2.
pub fn dropout_mask<R: Rng>(dims: (usize, usize, usize), rng: &mut R) -> Array3<f64> {
    Array3::from_shape_simple_fn(dims, || if rng.gen::<bool>() { 2.0 } else { 0.0 })
}

pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap()
}

/// Splits a channel-concatenated gradient into its two halves.
pub fn split_channels(x: &Array3<f64>, first: usize) -> (Array3<f64>, Array3<f64>) {
    (
        x.slice(s![..first, .., ..]).to_owned(),
        x.slice(s![first.., .., ..]).to_owned(),
    )
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update to `params` (always passed in the same order).
    pub fn update(&mut self, params: Vec<&mut Param>) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Array2::zeros(p.value.raw_dim()), Array2::zeros(p.value.raw_dim())))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(dims, || rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn conv_naive(x: &Array3<f64>, conv: &Conv2d) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let k = conv.kernel;
        let ho = (h + 2 * conv.pad - k) / conv.stride + 1;
        let wo = (w + 2 * conv.pad - k) / conv.stride + 1;
        let co = conv.out_channels();
        Array3::from_shape_fn((co, ho, wo), |(o, oy, ox)| {
            let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[[o, 0]]);
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight.value[[o, (ci * k + ky) * k + kx]]
                                * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn im2col_convolution_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (stride, size) in [(2, 8), (1, 7)] {
            let mut conv = Conv2d::new("c", 3, 5, 4, stride, 1, true, &mut rng);
            conv.bias.as_mut().unwrap().value.mapv_inplace(|_| 0.3);
            let x = random3(&mut rng, (3, size, size));
            let (y, _) = conv.forward(&x);
            let expected = conv_naive(&x, &conv);
            assert_eq!(y.dim(), expected.dim());
            for (a, b) in y.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random3(&mut rng, (2, 6, 6));
        let cols = im2col(x.view(), 4, 2, 1);
        let c = Array2::from_shape_simple_fn(cols.raw_dim(), || rng.gen_range(-1.0..1.0));
        let lhs: f64 = (&cols * &c).sum();
        let rhs: f64 = (&x * &col2im(&c, (2, 6, 6), 4, 2, 1)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let up = ConvTranspose2d::new("u", 4, 3, true, &mut rng);
        let (y, _) = up.forward(&random3(&mut rng, (4, 5, 7)));
        assert_eq!(y.dim(), (3, 10, 14));
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut norm = InstanceNorm::new("n", 2, &mut rng);
        norm.gamma.value.fill(1.0);
        let (y, _) = norm.forward(&random3(&mut rng, (2, 4, 4)));
        for plane in y.outer_iter() {
            let mean = plane.sum() / 16.0;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = Param::new("w", Array2::from_elem((1, 2), 1.0));
        p.grad = Array2::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap();
        let mut adam = Adam::new(0.1, 0.5, 0.999);
        adam.update(vec![&mut p]);
        assert!((p.value[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.value[[0, 1]] - 1.1).abs() < 1e-6);
    }
}
