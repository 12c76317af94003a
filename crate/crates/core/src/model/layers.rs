//! Single-sample layers over `C × H × W` f32 feature maps with explicit
//! backward passes. Gradients are accumulated into caller-owned buffers.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type Feature = Array3<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f32 },
}

impl Activation {
    #[inline]
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative expressed through the activation's output, which has the
    /// same sign as its input for every supported variant.
    #[inline]
    fn derivative_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Relu => (y > 0.0) as u8 as f32,
            Activation::LeakyRelu { slope } => {
                if y > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    pub fn forward(self, mut x: Feature) -> Feature {
        x.mapv_inplace(|v| self.apply(v));
        x
    }

    /// `dy ⊙ act'(y)` where `y` is the forward output.
    pub fn backward(self, y: &Feature, mut dy: Feature) -> Feature {
        dy.zip_mut_with(y, |g, &o| *g *= self.derivative_from_output(o));
        dy
    }
}

/// Trainable tensor: values plus a same-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![0.0; n],
            grad: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in &mut p.value {
            *v = dist.sample(rng) as f32;
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

fn mat(data: &[f32], rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix shape")
}

fn mat_mut(data: &mut [f32], rows: usize, cols: usize) -> ArrayViewMut2<'_, f32> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix shape")
}

fn as_slice(x: &Feature) -> &[f32] {
    x.as_slice().expect("features are kept in standard layout")
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × in × 3 × 3`
    pub weight: Param,
    pub bias: Param,
}

impl Conv3x3 {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: Param::he_normal(&[out_channels, in_channels, 3, 3], in_channels * 9, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn forward(&self, x: &Feature) -> Feature {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let cols = im2col(x);
        let mut out = Array2::<f32>::zeros((self.out_channels, h * w));
        for (o, mut row) in out.outer_iter_mut().enumerate() {
            row.fill(self.bias.value[o]);
        }
        general_mat_mul(
            1.0,
            &mat(&self.weight.value, self.out_channels, c * 9),
            &cols,
            1.0,
            &mut out,
        );
        out.into_shape_with_order((self.out_channels, h, w))
            .expect("conv output shape")
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &Feature, dy: &Feature) -> Feature {
        let (c, h, w) = x.dim();
        let cols = im2col(x);
        let dy2 = mat(as_slice(dy), self.out_channels, h * w);
        general_mat_mul(
            1.0,
            &dy2,
            &cols.t(),
            1.0,
            &mut mat_mut(&mut self.weight.grad, self.out_channels, c * 9),
        );
        for (o, row) in dy2.outer_iter().enumerate() {
            self.bias.grad[o] += row.sum();
        }
        let mut dcols = Array2::<f32>::zeros((c * 9, h * w));
        general_mat_mul(
            1.0,
            &mat(&self.weight.value, self.out_channels, c * 9).t(),
            &dy2,
            0.0,
            &mut dcols,
        );
        col2im(&dcols, (c, h, w))
    }
}

/// `(C·9) × (H·W)` patch matrix; row `c·9 + ky·3 + kx` holds input channel
/// `c` shifted by `(ky − 1, kx − 1)`.
fn im2col(x: &Feature) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let src = as_slice(x);
    let mut cols = Array2::<f32>::zeros((c * 9, h * w));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut dst[(ch * 9 + ky * 3 + kx) * h * w..][..h * w];
                let (x_lo, x_hi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = x_lo + kx - 1;
                    let len = x_hi - x_lo;
                    row[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + len]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f32>, (c, h, w): (usize, usize, usize)) -> Feature {
    let src = cols.as_slice().expect("fresh array");
    let mut out = Feature::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[(ch * 9 + ky * 3 + kx) * h * w..][..h * w];
                let (x_lo, x_hi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = x_lo + kx - 1;
                    let len = x_hi - x_lo;
                    let d = &mut plane[sy * w + sx0..sy * w + sx0 + len];
                    for (a, b) in d.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *a += b;
                    }
                }
            }
        }
    }
    out
}

/// 2×2 transposed convolution with stride 2 (doubles the spatial extent).
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv2x2 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(out · 4) × in`: row `o·4 + dy·2 + dx` maps input channels to output
    /// channel `o` at sub-position `(dy, dx)`.
    pub weight: Param,
    pub bias: Param,
}

impl UpConv2x2 {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: Param::he_normal(&[out_channels * 4, in_channels], in_channels, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn forward(&self, x: &Feature) -> Feature {
        let (c, h, w) = x.dim();
        let mut m = Array2::<f32>::zeros((self.out_channels * 4, h * w));
        general_mat_mul(
            1.0,
            &mat(&self.weight.value, self.out_channels * 4, c),
            &mat(as_slice(x), c, h * w),
            0.0,
            &mut m,
        );
        let mut out = Feature::zeros((self.out_channels, 2 * h, 2 * w));
        for o in 0..self.out_channels {
            let b = self.bias.value[o];
            for sub in 0..4 {
                let (dy, dx) = (sub / 2, sub % 2);
                let row = m.row(o * 4 + sub);
                for y in 0..h {
                    for xx in 0..w {
                        out[[o, 2 * y + dy, 2 * xx + dx]] = row[y * w + xx] + b;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Feature, dy_full: &Feature) -> Feature {
        let (c, h, w) = x.dim();
        let mut dm = Array2::<f32>::zeros((self.out_channels * 4, h * w));
        for o in 0..self.out_channels {
            let mut bsum = 0.0;
            for sub in 0..4 {
                let (dy, dx) = (sub / 2, sub % 2);
                let mut row = dm.row_mut(o * 4 + sub);
                for y in 0..h {
                    for xx in 0..w {
                        let g = dy_full[[o, 2 * y + dy, 2 * xx + dx]];
                        row[y * w + xx] = g;
                        bsum += g;
                    }
                }
            }
            self.bias.grad[o] += bsum;
        }
        general_mat_mul(
            1.0,
            &dm,
            &mat(as_slice(x), c, h * w).t(),
            1.0,
            &mut mat_mut(&mut self.weight.grad, self.out_channels * 4, c),
        );
        let mut dx = Array2::<f32>::zeros((c, h * w));
        general_mat_mul(
            1.0,
            &mat(&self.weight.value, self.out_channels * 4, c).t(),
            &dm,
            0.0,
            &mut dx,
        );
        dx.into_shape_with_order((c, h, w)).expect("input shape")
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled map and the winning
/// sub-position (0..4, row-major) of every output cell.
pub fn max_pool(x: &Feature) -> (Feature, Vec<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Feature::zeros((c, oh, ow));
    let mut arg = vec![0u8; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_k = 0u8;
                for k in 0..4u8 {
                    let v = x[[ch, 2 * y + (k as usize) / 2, 2 * xx + (k as usize) % 2]];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                out[[ch, y, xx]] = best;
                arg[(ch * oh + y) * ow + xx] = best_k;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(dy: &Feature, arg: &[u8], input_dim: (usize, usize, usize)) -> Feature {
    let (c, oh, ow) = dy.dim();
    let mut dx = Feature::zeros(input_dim);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let k = arg[(ch * oh + y) * ow + xx] as usize;
                dx[[ch, 2 * y + k / 2, 2 * xx + k % 2]] += dy[[ch, y, xx]];
            }
        }
    }
    dx
}

pub fn concat(a: &Feature, b: &Feature) -> Feature {
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
        .expect("equal spatial extents")
        .as_standard_layout()
        .into_owned()
}

pub fn split(x: &Feature, first: usize) -> (Feature, Feature) {
    let a = x.slice(ndarray::s![..first, .., ..]).to_owned();
    let b = x.slice(ndarray::s![first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_feature(dim: (usize, usize, usize), seed: u64) -> Feature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Feature::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
    }

    /// Direct convolution used as an oracle for the im2col path.
    fn naive_conv(conv: &Conv3x3, x: &Feature) -> Feature {
        let (c, h, w) = x.dim();
        let mut out = Feature::zeros((conv.out_channels, h, w));
        for o in 0..conv.out_channels {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = conv.bias.value[o] as f64;
                    for i in 0..c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = conv.weight.value
                                    [((o * c + i) * 3 + ky as usize) * 3 + kx as usize];
                                acc += (wv * x[[i, sy as usize, sx as usize]]) as f64;
                            }
                        }
                    }
                    out[[o, y as usize, xx as usize]] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv3x3::new(3, 4, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
        let x = random_feature((3, 5, 6), 2);
        let fast = conv.forward(&x);
        let slow = naive_conv(&conv, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    /// Finite-difference check of a scalar `L = Σ r ⊙ layer(x)`.
    fn check_grads(
        forward: &dyn Fn(&Feature) -> Feature,
        x: &Feature,
        analytic_dx: &Feature,
        r: &Feature,
    ) {
        let loss = |x: &Feature| -> f64 {
            forward(x)
                .iter()
                .zip(r.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let step = 1e-2f32;
        for idx in [0usize, 7, 13, x.len() - 1] {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += step;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[idx] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step as f64);
            let analytic = analytic_dx.as_slice().unwrap()[idx] as f64;
            assert!(
                (numeric - analytic).abs() <= 1e-3 * (1.0 + analytic.abs()),
                "idx {idx}: numeric {numeric} analytic {analytic}"
            );
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3x3::new(2, 3, &mut rng);
        let x = random_feature((2, 4, 5), 4);
        let r = random_feature((3, 4, 5), 5);
        let dx = conv.backward(&x, &r);
        let frozen = conv.clone();
        check_grads(&|x| frozen.forward(x), &x, &dx, &r);
        // weight gradient: perturb one weight
        let idx = 11;
        let mut plus = frozen.clone();
        plus.weight.value[idx] += 1e-2;
        let mut minus = frozen.clone();
        minus.weight.value[idx] -= 1e-2;
        let l = |c: &Conv3x3| -> f64 {
            c.forward(&x).iter().zip(r.iter()).map(|(a, b)| (*a * *b) as f64).sum()
        };
        let numeric = (l(&plus) - l(&minus)) / 2e-2;
        assert!((numeric - conv.weight.grad[idx] as f64).abs() < 1e-3);
        let bias_numeric: f64 = r.index_axis(ndarray::Axis(0), 1).iter().map(|&v| v as f64).sum();
        assert!((bias_numeric - conv.bias.grad[1] as f64).abs() < 1e-4);
    }

    #[test]
    fn upconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut up = UpConv2x2::new(3, 2, &mut rng);
        let x = random_feature((3, 3, 2), 7);
        let r = random_feature((2, 6, 4), 8);
        let dx = up.backward(&x, &r);
        let frozen = up.clone();
        check_grads(&|x| frozen.forward(x), &x, &dx, &r);
        let idx = 5;
        let mut plus = frozen.clone();
        plus.weight.value[idx] += 1e-2;
        let mut minus = frozen.clone();
        minus.weight.value[idx] -= 1e-2;
        let l = |c: &UpConv2x2| -> f64 {
            c.forward(&x).iter().zip(r.iter()).map(|(a, b)| (*a * *b) as f64).sum()
        };
        let numeric = (l(&plus) - l(&minus)) / 2e-2;
        assert!((numeric - up.weight.grad[idx] as f64).abs() < 1e-3);
    }

    #[test]
    fn max_pool_routes_gradient_to_the_winner() {
        let x = random_feature((2, 4, 4), 9);
        let (y, arg) = max_pool(&x);
        assert_eq!(y.dim(), (2, 2, 2));
        let dy = Feature::from_elem((2, 2, 2), 1.0);
        let dx = max_pool_backward(&dy, &arg, x.dim());
        assert_eq!(dx.sum(), 8.0);
        for ((ch, r, c), &g) in dx.indexed_iter() {
            if g != 0.0 {
                assert_eq!(x[[ch, r, c]], y[[ch, r / 2, c / 2]]);
            }
        }
    }

    #[test]
    fn leaky_relu_derivative_from_output() {
        let act = Activation::LeakyRelu { slope: 0.1 };
        let x = Feature::from_shape_vec((1, 1, 3), vec![-2.0, 0.5, 3.0]).unwrap();
        let y = act.forward(x);
        assert_eq!(y.as_slice().unwrap(), &[-0.2, 0.5, 3.0]);
        let g = act.backward(&y, Feature::from_elem((1, 1, 3), 1.0));
        assert_eq!(g.as_slice().unwrap(), &[0.1, 1.0, 1.0]);
    }
}
