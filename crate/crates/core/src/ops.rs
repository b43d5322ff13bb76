//! Forward and backward kernels for the differentiable primitives.
//!
//! These are plain functions over [`Tensor`]s. [`crate::autodiff::Tape`]
//! records them and calls the `*_backward` helpers during the reverse sweep;
//! they are also usable directly for inference.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution over a `C x H x W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// Validates the shapes and derives the output extent.
    pub fn new(input: &[usize], weights: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [c, h, w] = *input else {
            return Err(Error::shape("conv2d", format!("input must be CxHxW, got {input:?}")));
        };
        let [oc, ic, kh, kw] = *weights else {
            return Err(Error::shape(
                "conv2d",
                format!("weights must be OutC x InC x K x K, got {weights:?}"),
            ));
        };
        if ic != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weights expect {ic}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let out_h = out_extent(h, kh, stride, pad)?;
        let out_w = out_extent(w, kw, stride, pad)?;
        Ok(ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: oc,
            kernel: kh,
            stride,
            pad,
            out_height: out_h,
            out_width: out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Output extent of a convolution along one axis,
/// `floor((size + 2 pad - kernel) / stride) + 1`.
pub fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel} with stride {stride} does not fit extent {size} with pad {pad}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = if a_transposed {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let b = if b_transposed {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Unfolds input patches into a `(C*K*K) x (outH*outW)` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let p = g.positions();
    let mut out = vec![0.0; g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_bias(bias: &Tensor, n: usize, op: &'static str) -> Result<()> {
    if bias.len() != n {
        return Err(Error::shape(op, format!("bias has {} values, expected {n}", bias.len())));
    }
    Ok(())
}

/// Cross-correlation plus per-channel bias. Also returns the unfolded
/// patches, which the weight gradient needs.
pub(crate) fn conv2d_with_cols(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<f64>, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, pad)?;
    check_bias(bias, g.out_channels, "conv2d")?;
    let cols = im2col(input.data(), &g);
    let p = g.positions();
    let mut out = Vec::with_capacity(g.out_channels * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat(b).take(p));
    }
    gemm(
        g.out_channels,
        g.patch_len(),
        p,
        weights.data(),
        false,
        &cols,
        false,
        1.0,
        &mut out,
    );
    let out = Tensor::from_parts(vec![g.out_channels, g.out_height, g.out_width], out);
    out.check_finite("conv2d")?;
    Ok((out, cols, g))
}

/// 2-D cross-correlation (no kernel flip) with per-channel bias.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_with_cols(input, weights, bias, stride, pad).map(|(out, _, _)| out)
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv2d_input_grad(grad_out: &[f64], weights: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let mut dcols = vec![0.0; g.patch_len() * p];
    gemm(
        g.patch_len(),
        g.out_channels,
        p,
        weights,
        true,
        grad_out,
        false,
        0.0,
        &mut dcols,
    );
    col2im(&dcols, g)
}

/// Gradients of a convolution with respect to its weights and bias.
pub(crate) fn conv2d_param_grads(grad_out: &[f64], cols: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let p = g.positions();
    let mut dw = vec![0.0; g.out_channels * g.patch_len()];
    gemm(
        g.out_channels,
        p,
        g.patch_len(),
        grad_out,
        false,
        cols,
        true,
        0.0,
        &mut dw,
    );
    let db = grad_out.chunks_exact(p).map(|row| row.iter().sum()).collect();
    (dw, db)
}

/// `W x + b`. The input is flattened, so a `C x H x W` tensor is accepted.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [m, n] = *weights.shape() else {
        return Err(Error::shape("dense", format!("weights must be m x n, got {:?}", weights.shape())));
    };
    if input.len() != n {
        return Err(Error::shape(
            "dense",
            format!("input has {} values, weights expect {n}", input.len()),
        ));
    }
    check_bias(bias, m, "dense")?;
    let x = input.data();
    let out: Vec<f64> = weights
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    let out = Tensor::from_parts(vec![m], out);
    out.check_finite("dense")?;
    Ok(out)
}

/// Per-channel mean over the spatial extent.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *input.shape() else {
        return Err(Error::shape("global_avg_pool", format!("input must be CxHxW, got {:?}", input.shape())));
    };
    let area = (h * w) as f64;
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect();
    Ok(Tensor::from_parts(vec![c], out))
}

/// Numerically stable softmax over a flat vector.
pub fn softmax(logits: &Tensor) -> Tensor {
    let z = logits.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::from_parts(vec![z.len()], exps.into_iter().map(|e| e / total).collect())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_label(label: usize, k: usize, op: &str) -> Result<()> {
    if label >= k {
        return Err(Error::InvalidArgument(format!("{op}: label {label} out of range for {k} classes")));
    }
    Ok(())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    check_label(label, logits.len(), "cross_entropy")?;
    let z = logits.data();
    // rounding can push the difference a hair below zero for a dominant logit
    Ok((log_sum_exp(z) - z[label]).max(0.0))
}

/// Untargeted margin `max(Z_y - max_{i != y} Z_i, -kappa)` and the index of
/// the strongest competing class (lowest index on ties).
pub fn margin(logits: &Tensor, label: usize, kappa: f64) -> Result<(f64, usize)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("margin needs at least 2 classes, got {k}")));
    }
    check_label(label, k, "margin")?;
    let z = logits.data();
    let mut rival = if label == 0 { 1 } else { 0 };
    for i in 0..k {
        if i != label && z[i] > z[rival] {
            rival = i;
        }
    }
    Ok(((z[label] - z[rival]).max(-kappa), rival))
}

/// One-hot vector of the argmax (lowest index on ties).
pub fn one_hot_argmax(logits: &Tensor) -> Tensor {
    let mut out = vec![0.0; logits.len()];
    out[logits.argmax()] = 1.0;
    Tensor::from_parts(vec![logits.len()], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_multiply_add() {
        let out = conv2d(&t(&[1, 1, 1], &[2.0]), &t(&[1, 1, 1, 1], &[3.0]), &t(&[1], &[1.0]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let input = t(&[2, 3, 4], &(0..24).map(|v| v as f64 * 0.5 - 3.0).collect::<Vec<_>>());
        let mut w = vec![0.0; 2 * 2 * 9];
        // out channel o copies in channel o
        w[4] = 1.0;
        w[(2 + 1) * 9 + 4] = 1.0;
        let out = conv2d(&input, &t(&[2, 2, 3, 3], &w), &Tensor::zeros(&[2]), 1, 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_stride_subsamples() {
        let out = conv2d(&Tensor::filled(&[1, 4, 4], 1.0), &t(&[1, 1, 1, 1], &[1.0]), &Tensor::zeros(&[1]), 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[1.0; 4]);
    }

    #[test]
    fn conv_shape_errors() {
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&Tensor::zeros(&[1, 5, 5]), &w, &b, 1, 1).is_err());
        // kernel larger than the padded input
        assert!(conv2d(&Tensor::zeros(&[2, 2, 2]), &w, &b, 1, 0).is_err());
        assert!(conv2d(&Tensor::zeros(&[2, 5, 5]), &w, &Tensor::zeros(&[2]), 1, 1).is_err());
    }

    #[test]
    fn conv_matches_direct_loops() {
        let input = t(&[2, 5, 5], &(0..50).map(|v| ((v * 7) % 11) as f64 - 5.0).collect::<Vec<_>>());
        let w = t(&[3, 2, 3, 3], &(0..54).map(|v| ((v * 5) % 13) as f64 / 10.0 - 0.6).collect::<Vec<_>>());
        let b = t(&[3], &[0.1, -0.2, 0.3]);
        let out = conv2d(&input, &w, &b, 2, 1).unwrap();
        assert_eq!(out.shape(), &[3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w.data()[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * input.data()[(c * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.data()[(o * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn dense_examples() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let out = dense(&t(&[2], &[3.0, -1.0]), &eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[3.0, -1.0]);
        let out = dense(&t(&[2], &[2.0, 3.0]), &t(&[1, 2], &[1.0, 1.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
        assert!(dense(&t(&[3], &[1.0, 2.0, 3.0]), &eye, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn pool_examples() {
        assert_eq!(global_avg_pool(&t(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0])).unwrap().data(), &[4.0]);
        assert_eq!(global_avg_pool(&Tensor::filled(&[1, 3, 5], 2.5)).unwrap().data(), &[2.5]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[2], &[0.0, 0.0])).data(), &[0.5, 0.5]);
        let p = softmax(&t(&[2], &[1.0f64.ln(), 3.0f64.ln()]));
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
        let z = t(&[3], &[0.3, -1.2, 2.0]);
        let shifted = t(&[3], &[100.3, 98.8, 102.0]);
        for (a, b) in softmax(&z).data().iter().zip(softmax(&shifted).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&t(&[2], &[0.0, 0.0]), 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&t(&[2], &[100.0, 0.0]), 0).unwrap() < 1e-40);
        assert!(cross_entropy(&t(&[2], &[0.0, 0.0]), 2).is_err());
    }

    #[test]
    fn margin_examples() {
        let z = t(&[3], &[2.0, 1.0, 0.0]);
        assert_eq!(margin(&z, 0, 0.0).unwrap(), (1.0, 1));
        assert_eq!(margin(&z, 1, 0.0).unwrap(), (0.0, 0));
        assert_eq!(margin(&z, 2, 0.5).unwrap().0, -0.5);
        assert!(margin(&t(&[1], &[0.0]), 0, 0.0).is_err());
    }

    #[test]
    fn one_hot_has_single_one() {
        let h = one_hot_argmax(&t(&[4], &[0.1, 0.7, 0.7, -1.0]));
        assert_eq!(h.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
