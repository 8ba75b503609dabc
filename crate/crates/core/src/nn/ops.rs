//! Differentiable primitives for the denoiser: convolution (im2col + GEMM),
//! group normalization, SiLU, linear layers, nearest-neighbor upsampling and
//! channel concatenation.
//!
//! Every forward function has a matching `*_backward` that consumes the
//! minimal cached state and returns exact reverse-mode gradients. All math is
//! f64 and single-threaded with fixed reduction order, so results are
//! bit-reproducible.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};

/// Output spatial size of a padded strided convolution.
pub fn conv_out_size(n: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (n + 2 * padding - kernel) / stride + 1
}

/// Unfold one image (C, H, W) into a (C*kh*kw, Ho*Wo) patch matrix. Samples
/// outside the padded border contribute zero.
fn im2col(
    input: &ArrayView3<f64>,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let (kh, kw) = kernel;
    let ho = conv_out_size(h, kh, stride, padding);
    let wo = conv_out_size(w, kw, stride, padding);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * wo + ox)] = input[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the image grid (transpose of
/// [`im2col`]): overlapping patches accumulate.
fn col2im(
    cols: &Array2<f64>,
    shape: (usize, usize, usize),
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Array3<f64> {
    let (c, h, w) = shape;
    let (kh, kw) = kernel;
    let ho = conv_out_size(h, kh, stride, padding);
    let wo = conv_out_size(w, kw, stride, padding);
    let mut img = Array3::<f64>::zeros(shape);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[(ci, iy as usize, ix as usize)] += cols[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    img
}

/// Batched 2-D convolution: input (B, Cin, H, W), weight (Cout, Cin, kh, kw),
/// bias (Cout). Implemented as im2col followed by one GEMM per batch item.
pub fn conv2d_forward(
    input: &Array4<f64>,
    weight: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    padding: usize,
) -> Array4<f64> {
    let (b, cin, h, w) = input.dim();
    let (cout, cin_w, kh, kw) = weight.dim();
    assert_eq!(cin, cin_w, "conv input/weight channel mismatch");
    let ho = conv_out_size(h, kh, stride, padding);
    let wo = conv_out_size(w, kw, stride, padding);

    let wmat = weight
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight is contiguous");
    let mut out = Array4::<f64>::zeros((b, cout, ho, wo));
    for bi in 0..b {
        let cols = im2col(&input.index_axis(Axis(0), bi), (kh, kw), stride, padding);
        let prod = wmat.dot(&cols); // (Cout, Ho*Wo)
        let mut out_b = out.index_axis_mut(Axis(0), bi);
        for co in 0..cout {
            let bias_v = bias[co];
            for oy in 0..ho {
                for ox in 0..wo {
                    out_b[(co, oy, ox)] = prod[(co, oy * wo + ox)] + bias_v;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]: returns (d_input, d_weight, d_bias).
/// The patch matrix is recomputed from the cached input instead of stored.
pub fn conv2d_backward(
    input: &Array4<f64>,
    weight: &Array4<f64>,
    stride: usize,
    padding: usize,
    d_out: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (b, cin, h, w) = input.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (_, _, ho, wo) = d_out.dim();

    let wmat = weight
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight is contiguous");
    let mut d_input = Array4::<f64>::zeros(input.dim());
    let mut d_weight_mat = Array2::<f64>::zeros((cout, cin * kh * kw));
    let mut d_bias = Array1::<f64>::zeros(cout);

    for bi in 0..b {
        let d_out_b = d_out.index_axis(Axis(0), bi);
        let d_out_mat = d_out_b
            .to_shape((cout, ho * wo))
            .expect("conv output is contiguous");

        let cols = im2col(&input.index_axis(Axis(0), bi), (kh, kw), stride, padding);
        d_weight_mat = d_weight_mat + d_out_mat.dot(&cols.t());

        let d_cols = wmat.t().dot(&d_out_mat); // (Cin*kh*kw, Ho*Wo)
        let d_in_b = col2im(&d_cols, (cin, h, w), (kh, kw), stride, padding);
        d_input.index_axis_mut(Axis(0), bi).assign(&d_in_b);

        for co in 0..cout {
            d_bias[co] += d_out_mat.row(co).sum();
        }
    }

    let d_weight = d_weight_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("gradient reshape");
    (d_input, d_weight, d_bias)
}

/// Numerical floor added to the per-group variance.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// State needed to backpropagate through group normalization.
pub struct GroupNormCache {
    /// Normalized activations (before scale/offset).
    pub x_hat: Array4<f64>,
    /// 1/sqrt(var + eps) per (batch, group).
    pub inv_std: Array2<f64>,
}

/// Group normalization over (B, C, H, W): channels are split into `groups`
/// equal bands, each normalized to zero mean / unit variance over its
/// channels and all pixels, then scaled by `gamma` and shifted by `beta`
/// (both per channel).
pub fn group_norm_forward(
    input: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    groups: usize,
) -> (Array4<f64>, GroupNormCache) {
    let (b, c, h, w) = input.dim();
    assert!(groups >= 1 && c % groups == 0, "channels not divisible into groups");
    let cpg = c / groups;
    let m = (cpg * h * w) as f64;

    let mut x_hat = Array4::<f64>::zeros(input.dim());
    let mut inv_std = Array2::<f64>::zeros((b, groups));
    for bi in 0..b {
        for g in 0..groups {
            let band = input.slice(s![bi, g * cpg..(g + 1) * cpg, .., ..]);
            let mean = band.sum() / m;
            let var = band.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let istd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            inv_std[(bi, g)] = istd;
            let mut out_band = x_hat.slice_mut(s![bi, g * cpg..(g + 1) * cpg, .., ..]);
            out_band.assign(&band);
            out_band.mapv_inplace(|v| (v - mean) * istd);
        }
    }

    let mut out = x_hat.clone();
    for ci in 0..c {
        let g = gamma[ci];
        let bta = beta[ci];
        out.slice_mut(s![.., ci, .., ..])
            .mapv_inplace(|v| v * g + bta);
    }
    (out, GroupNormCache { x_hat, inv_std })
}

/// Gradients of [`group_norm_forward`]: returns (d_input, d_gamma, d_beta).
pub fn group_norm_backward(
    cache: &GroupNormCache,
    gamma: &Array1<f64>,
    d_out: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (b, c, h, w) = cache.x_hat.dim();
    let groups = cache.inv_std.dim().1;
    let cpg = c / groups;
    let m = (cpg * h * w) as f64;

    let mut d_gamma = Array1::<f64>::zeros(c);
    let mut d_beta = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let douts = d_out.slice(s![.., ci, .., ..]);
        let xhats = cache.x_hat.slice(s![.., ci, .., ..]);
        d_gamma[ci] = douts.iter().zip(xhats.iter()).map(|(d, x)| d * x).sum();
        d_beta[ci] = douts.sum();
    }

    let mut d_input = Array4::<f64>::zeros(cache.x_hat.dim());
    for bi in 0..b {
        for g in 0..groups {
            let range = g * cpg..(g + 1) * cpg;
            let xhat = cache.x_hat.slice(s![bi, range.clone(), .., ..]);
            let douts = d_out.slice(s![bi, range.clone(), .., ..]);

            // d_xhat = d_out * gamma (per channel), then the two mean
            // corrections from normalizing over the group.
            let mut d_xhat = douts.to_owned();
            for (ci_local, mut plane) in d_xhat.axis_iter_mut(Axis(0)).enumerate() {
                let gmm = gamma[g * cpg + ci_local];
                plane.mapv_inplace(|v| v * gmm);
            }
            let sum_d = d_xhat.sum();
            let sum_dx = d_xhat
                .iter()
                .zip(xhat.iter())
                .map(|(d, x)| d * x)
                .sum::<f64>();
            let istd = cache.inv_std[(bi, g)];
            let mut d_in = d_input.slice_mut(s![bi, range, .., ..]);
            ndarray::Zip::from(&mut d_in)
                .and(&d_xhat)
                .and(&xhat)
                .for_each(|di, &dxh, &xh| {
                    *di = istd * (dxh - sum_d / m - xh * sum_dx / m);
                });
        }
    }
    (d_input, d_gamma, d_beta)
}

/// SiLU activation x * sigmoid(x), elementwise on any array.
pub fn silu_forward<D: ndarray::Dimension>(
    input: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    input.mapv(|x| x / (1.0 + (-x).exp()))
}

/// Gradient of SiLU given the cached *input*:
/// sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub fn silu_backward<D: ndarray::Dimension>(
    input: &ndarray::Array<f64, D>,
    d_out: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut d_in = d_out.clone();
    ndarray::Zip::from(&mut d_in).and(input).for_each(|d, &x| {
        let s = 1.0 / (1.0 + (-x).exp());
        *d *= s * (1.0 + x * (1.0 - s));
    });
    d_in
}

/// Fully connected layer: (B, In) x (In, Out) + bias.
pub fn linear_forward(input: &Array2<f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    input.dot(weight) + bias
}

/// Gradients of [`linear_forward`]: returns (d_input, d_weight, d_bias).
pub fn linear_backward(
    input: &Array2<f64>,
    weight: &Array2<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d_input = d_out.dot(&weight.t());
    let d_weight = input.t().dot(d_out);
    let d_bias = d_out.sum_axis(Axis(0));
    (d_input, d_weight, d_bias)
}

/// Nearest-neighbor 2x spatial upsample.
pub fn nearest_upsample2_forward(input: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = input.dim();
    Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(bi, ci, y, x)| {
        input[(bi, ci, y / 2, x / 2)]
    })
}

/// Gradient of [`nearest_upsample2_forward`]: each source pixel accumulates
/// its 2x2 replication block.
pub fn nearest_upsample2_backward(d_out: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = d_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut d_in = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    d_in[(bi, ci, y / 2, x / 2)] += d_out[(bi, ci, y, x)];
                }
            }
        }
    }
    d_in
}

/// Concatenate two batches along the channel axis.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat shapes")
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels(d_out: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    let a = d_out.slice(s![.., ..first, .., ..]).to_owned();
    let b = d_out.slice(s![.., first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_relative_eq;
    use ndarray::{Array, Dimension};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn<D: Dimension>(shape: impl ndarray::ShapeBuilder<Dim = D>, seed: u64) -> Array<f64, D> {
        let mut rng = derive_rng(seed, &[31]);
        let mut arr = Array::<f64, D>::zeros(shape);
        for v in arr.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        arr
    }

    /// Reference convolution: direct nested loops, no im2col.
    fn naive_conv(
        input: &Array4<f64>,
        weight: &Array4<f64>,
        bias: &Array1<f64>,
        stride: usize,
        padding: usize,
    ) -> Array4<f64> {
        let (b, cin, h, w) = input.dim();
        let (cout, _, kh, kw) = weight.dim();
        let ho = conv_out_size(h, kh, stride, padding);
        let wo = conv_out_size(w, kw, stride, padding);
        let mut out = Array4::<f64>::zeros((b, cout, ho, wo));
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += input[(bi, ci, iy as usize, ix as usize)]
                                            * weight[(co, ci, ky, kx)];
                                    }
                                }
                            }
                        }
                        out[(bi, co, oy, ox)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        for (stride, padding, kh) in [(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
            let input = randn((2, 3, 6, 5), 1);
            let weight = randn((4, 3, kh, kh), 2);
            let bias = randn(4, 3);
            let fast = conv2d_forward(&input, &weight, &bias, stride, padding);
            let slow = naive_conv(&input, &weight, &bias, stride, padding);
            let err = (&fast - &slow).mapv(f64::abs).iter().copied().fold(0.0, f64::max);
            assert!(err < 1e-12, "stride {stride} pad {padding} k {kh}: {err}");
        }
    }

    /// Central finite difference of scalar_loss at one coordinate.
    fn fd_slope<D: Dimension>(
        mut eval: impl FnMut(&Array<f64, D>) -> f64,
        at: &Array<f64, D>,
        index: usize,
        step: f64,
    ) -> f64 {
        let mut plus = at.clone();
        plus.as_slice_mut().unwrap()[index] += step;
        let mut minus = at.clone();
        minus.as_slice_mut().unwrap()[index] -= step;
        (eval(&plus) - eval(&minus)) / (2.0 * step)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let input = randn((2, 2, 5, 4), 4);
        let weight = randn((3, 2, 3, 3), 5);
        let bias = randn(3, 6);
        // Scalar loss: projection of the output onto a fixed random tensor.
        let proj = randn(
            (
                2usize,
                3usize,
                conv_out_size(5, 3, 1, 1),
                conv_out_size(4, 3, 1, 1),
            ),
            7,
        );
        let d_out = proj.clone();
        let (d_in, d_w, d_b) = conv2d_backward(&input, &weight, 1, 1, &d_out);

        let loss_of_input =
            |x: &Array4<f64>| (&conv2d_forward(x, &weight, &bias, 1, 1) * &proj).sum();
        let loss_of_weight =
            |w: &Array4<f64>| (&conv2d_forward(&input, w, &bias, 1, 1) * &proj).sum();
        let loss_of_bias =
            |b: &Array1<f64>| (&conv2d_forward(&input, &weight, b, 1, 1) * &proj).sum();

        for idx in [0usize, 7, 19, 33] {
            let fd = fd_slope(loss_of_input, &input, idx, 1e-5);
            assert_relative_eq!(d_in.as_slice().unwrap()[idx], fd, max_relative = 1e-6);
        }
        for idx in [0usize, 11, 29, 53] {
            let fd = fd_slope(loss_of_weight, &weight, idx, 1e-5);
            assert_relative_eq!(d_w.as_slice().unwrap()[idx], fd, max_relative = 1e-6);
        }
        for idx in 0..3 {
            let fd = fd_slope(loss_of_bias, &bias, idx, 1e-5);
            assert_relative_eq!(d_b[idx], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        let input = randn((1, 2, 6, 6), 8);
        let weight = randn((3, 2, 3, 3), 9);
        let bias = randn(3, 10);
        let proj = randn((1usize, 3usize, 3usize, 3usize), 11);
        let (d_in, d_w, _) = conv2d_backward(&input, &weight, 2, 1, &proj);

        let loss_of_input =
            |x: &Array4<f64>| (&conv2d_forward(x, &weight, &bias, 2, 1) * &proj).sum();
        let loss_of_weight =
            |w: &Array4<f64>| (&conv2d_forward(&input, w, &bias, 2, 1) * &proj).sum();
        for idx in [0usize, 17, 40, 71] {
            let fd = fd_slope(loss_of_input, &input, idx, 1e-5);
            assert_relative_eq!(d_in.as_slice().unwrap()[idx], fd, max_relative = 1e-6);
        }
        for idx in [3usize, 25, 50] {
            let fd = fd_slope(loss_of_weight, &weight, idx, 1e-5);
            assert_relative_eq!(d_w.as_slice().unwrap()[idx], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let input = randn((2, 4, 3, 3), 12);
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let (out, cache) = group_norm_forward(&input, &gamma, &beta, 2);
        for bi in 0..2 {
            for g in 0..2 {
                let band = out.slice(s![bi, g * 2..(g + 1) * 2, .., ..]);
                let m = band.sum() / 18.0;
                let var = band.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 18.0;
                assert_relative_eq!(m, 0.0, epsilon = 1e-12);
                assert_relative_eq!(var, 1.0, epsilon = 1e-3); // eps-regularized
            }
        }
        assert_eq!(cache.inv_std.dim(), (2, 2));
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        let input = randn((2, 4, 3, 3), 13);
        let gamma = randn(4, 14);
        let beta = randn(4, 15);
        let proj = randn((2usize, 4usize, 3usize, 3usize), 16);

        let (_, cache) = group_norm_forward(&input, &gamma, &beta, 2);
        let (d_in, d_gamma, d_beta) = group_norm_backward(&cache, &gamma, &proj);

        let loss_of_input =
            |x: &Array4<f64>| (&group_norm_forward(x, &gamma, &beta, 2).0 * &proj).sum();
        let loss_of_gamma =
            |g: &Array1<f64>| (&group_norm_forward(&input, g, &beta, 2).0 * &proj).sum();
        let loss_of_beta =
            |b: &Array1<f64>| (&group_norm_forward(&input, &gamma, b, 2).0 * &proj).sum();

        for idx in [0usize, 13, 37, 61] {
            let fd = fd_slope(loss_of_input, &input, idx, 1e-5);
            assert_relative_eq!(
                d_in.as_slice().unwrap()[idx],
                fd,
                max_relative = 1e-5,
                epsilon = 1e-9
            );
        }
        for idx in 0..4 {
            let fd_g = fd_slope(loss_of_gamma, &gamma, idx, 1e-5);
            assert_relative_eq!(d_gamma[idx], fd_g, max_relative = 1e-6);
            let fd_b = fd_slope(loss_of_beta, &beta, idx, 1e-5);
            assert_relative_eq!(d_beta[idx], fd_b, max_relative = 1e-6);
        }
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let input = randn(24, 17);
        let proj = randn(24, 18);
        let d_in = silu_backward(&input, &proj);
        let loss = |x: &Array1<f64>| (&silu_forward(x) * &proj).sum();
        for idx in [0usize, 5, 11, 23] {
            let fd = fd_slope(loss, &input, idx, 1e-6);
            assert_relative_eq!(d_in[idx], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let input = randn((3, 5), 19);
        let weight = randn((5, 4), 20);
        let bias = randn(4, 21);
        let proj = randn((3usize, 4usize), 22);
        let (d_in, d_w, d_b) = linear_backward(&input, &weight, &proj);

        let loss_of_input = |x: &Array2<f64>| (&linear_forward(x, &weight, &bias) * &proj).sum();
        let loss_of_weight = |w: &Array2<f64>| (&linear_forward(&input, w, &bias) * &proj).sum();
        let loss_of_bias = |b: &Array1<f64>| (&linear_forward(&input, &weight, b) * &proj).sum();
        for idx in [0usize, 7, 14] {
            let fd = fd_slope(loss_of_input, &input, idx, 1e-6);
            assert_relative_eq!(d_in.as_slice().unwrap()[idx], fd, max_relative = 1e-6);
            let fd = fd_slope(loss_of_weight, &weight, idx, 1e-6);
            assert_relative_eq!(d_w.as_slice().unwrap()[idx], fd, max_relative = 1e-6);
        }
        for idx in 0..4 {
            let fd = fd_slope(loss_of_bias, &bias, idx, 1e-6);
            assert_relative_eq!(d_b[idx], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn upsample_round_trip_shapes_and_gradient() {
        let input = randn((1, 2, 3, 4), 23);
        let up = nearest_upsample2_forward(&input);
        assert_eq!(up.dim(), (1, 2, 6, 8));
        for ((bi, ci, y, x), &v) in up.indexed_iter() {
            assert_eq!(v, input[(bi, ci, y / 2, x / 2)]);
        }
        // Backward of an all-ones gradient: each source pixel sums its
        // 2x2 block, giving exactly 4.
        let d_in = nearest_upsample2_backward(&Array4::ones((1, 2, 6, 8)));
        assert!(d_in.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = randn((2, 3, 4, 4), 24);
        let b = randn((2, 5, 4, 4), 25);
        let joined = concat_channels(&a, &b);
        assert_eq!(joined.dim(), (2, 8, 4, 4));
        let (a2, b2) = split_channels(&joined, 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
