//! Convolution kernels and elementwise activations, with their adjoints.
//!
//! Convolutions lower to GEMM through im2col. Batch items are processed
//! independently (in parallel when a rayon pool with more than one worker is
//! installed) and weight gradients are reduced in batch-index order, so the
//! result does not depend on the number of workers.

use rayon::prelude::*;

use super::tensor::{gemm, Layout, Scalar, Tensor};
use super::NeuralError;

/// Output extent of a strided convolution, `⌊(n + 2p − k)/s⌋ + 1`.
pub fn conv_out_size(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || n + 2 * pad < kernel {
        return None;
    }
    Some((n + 2 * pad - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, `(n − 1)·s − 2p + k`.
pub fn conv_transpose_out_size(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if n == 0 || stride == 0 {
        return None;
    }
    ((n - 1) * stride + kernel).checked_sub(2 * pad).filter(|&v| v > 0)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn plane(&self) -> usize {
        self.channels * self.h * self.w
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` patch matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let k = g.kernel;
    let ncols = g.cols();
    for c in 0..g.channels {
        let img = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.source(oy, ki, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &img[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kj, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `x`.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let k = g.kernel;
    let ncols = g.cols();
    for c in 0..g.channels {
        let img = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let Some(iy) = g.source(oy, ki, g.h) else {
                        continue;
                    };
                    let dst = &mut img[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            dst[ix] = dst[ix] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn weight_dims<T: Scalar>(weight: &Tensor<T>) -> Result<(usize, usize, usize), NeuralError> {
    match weight.shape()[..] {
        [a, b, kh, kw] if kh == kw => Ok((a, b, kh)),
        _ => Err(NeuralError::ShapeMismatch(format!(
            "kernel must be square rank-4, got {:?}",
            weight.shape()
        ))),
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize) -> Result<(), NeuralError> {
    match bias {
        Some(b) if b.len() != channels => Err(NeuralError::ShapeMismatch(format!(
            "bias has {} elements, expected {channels}",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let mut gb = vec![T::zero(); c];
    for i in 0..n {
        for (ch, g) in gb.iter_mut().enumerate() {
            let base = (i * c + ch) * plane;
            *g = grad_out.data()[base..base + plane]
                .iter()
                .fold(*g, |acc, &v| acc + v);
        }
    }
    Tensor::from_vec(&[c], gb)
}

/// Sums per-sample buffers in index order.
fn ordered_sum<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a = *a + v;
        }
    }
    acc
}

/// Gradients of a convolution-like op with respect to its three operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, Geometry), NeuralError> {
    let (n, ci, h, w) = input.dims4()?;
    let (co, wci, k) = weight_dims(weight)?;
    if wci != ci {
        return Err(NeuralError::ShapeMismatch(format!(
            "conv2d: input has {ci} channels, kernel expects {wci}"
        )));
    }
    let (Some(ho), Some(wo)) = (
        conv_out_size(h, k, stride, pad),
        conv_out_size(w, k, stride, pad),
    ) else {
        return Err(NeuralError::ShapeMismatch(format!(
            "conv2d: {h}×{w} input too small for kernel {k} pad {pad}"
        )));
    };
    let g = Geometry {
        channels: ci,
        h,
        w,
        kernel: k,
        stride,
        pad,
        ho,
        wo,
    };
    Ok((n, co, g))
}

/// Strided 2-D cross-correlation. `weight` is `[C_out, C_in, k, k]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NeuralError> {
    let (n, co, g) = conv_geometry(input, weight, stride, pad)?;
    check_bias(bias, co)?;
    let out_plane = co * g.cols();
    let mut out = vec![T::zero(); n * out_plane];
    out.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(i, dst)| {
            let x = &input.data()[i * g.plane()..(i + 1) * g.plane()];
            let mut cols = vec![T::zero(); g.rows() * g.cols()];
            im2col(x, &g, &mut cols);
            gemm(
                co,
                g.rows(),
                g.cols(),
                weight.data(),
                Layout::RowMajor,
                &cols,
                Layout::RowMajor,
                T::zero(),
                dst,
            );
            add_bias(dst, bias, g.cols());
        });
    Tensor::from_vec(&[n, co, g.ho, g.wo], out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>, NeuralError> {
    let (n, co, g) = conv_geometry(input, weight, stride, pad)?;
    if grad_out.shape() != [n, co, g.ho, g.wo] {
        return Err(NeuralError::ShapeMismatch(format!(
            "conv2d backward: grad {:?} vs output {:?}",
            grad_out.shape(),
            [n, co, g.ho, g.wo]
        )));
    }
    let out_plane = co * g.cols();
    let mut grad_in = vec![T::zero(); input.len()];
    let weight_parts: Vec<Vec<T>> = grad_in
        .par_chunks_mut(g.plane())
        .enumerate()
        .map(|(i, gx)| {
            let x = &input.data()[i * g.plane()..(i + 1) * g.plane()];
            let dy = &grad_out.data()[i * out_plane..(i + 1) * out_plane];
            let mut cols = vec![T::zero(); g.rows() * g.cols()];
            im2col(x, &g, &mut cols);
            let mut gw = vec![T::zero(); weight.len()];
            // dW = dY · colsᵀ
            gemm(
                co,
                g.cols(),
                g.rows(),
                dy,
                Layout::RowMajor,
                &cols,
                Layout::Transposed,
                T::zero(),
                &mut gw,
            );
            // dcols = Wᵀ · dY
            gemm(
                g.rows(),
                co,
                g.cols(),
                weight.data(),
                Layout::Transposed,
                dy,
                Layout::RowMajor,
                T::zero(),
                &mut cols,
            );
            col2im(&cols, &g, gx);
            gw
        })
        .collect();
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), grad_in)?,
        weight: Tensor::from_vec(weight.shape(), ordered_sum(weight_parts, weight.len()))?,
        bias: bias_grad(grad_out)?,
    })
}

/// Geometry of a transposed convolution expressed as the forward conv it adjoins:
/// the conv maps the (larger) output grid back to the input grid.
fn transpose_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, Geometry), NeuralError> {
    let (n, ci, h, w) = input.dims4()?;
    let (wci, co, k) = weight_dims(weight)?;
    if wci != ci {
        return Err(NeuralError::ShapeMismatch(format!(
            "conv_transpose2d: input has {ci} channels, kernel expects {wci}"
        )));
    }
    let (Some(ho), Some(wo)) = (
        conv_transpose_out_size(h, k, stride, pad),
        conv_transpose_out_size(w, k, stride, pad),
    ) else {
        return Err(NeuralError::ShapeMismatch(format!(
            "conv_transpose2d: invalid output size for {h}×{w}, kernel {k}"
        )));
    };
    if conv_out_size(ho, k, stride, pad) != Some(h) || conv_out_size(wo, k, stride, pad) != Some(w) {
        return Err(NeuralError::ShapeMismatch(
            "conv_transpose2d: geometry is not invertible".into(),
        ));
    }
    let g = Geometry {
        channels: co,
        h: ho,
        w: wo,
        kernel: k,
        stride,
        pad,
        ho: h,
        wo: w,
    };
    Ok((n, ci, co, g))
}

/// Fractionally-strided convolution, the adjoint of [`conv2d`] with the same
/// kernel tensor. `weight` is `[C_in, C_out, k, k]`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NeuralError> {
    let (n, ci, co, g) = transpose_geometry(input, weight, stride, pad)?;
    check_bias(bias, co)?;
    let in_plane = ci * g.cols();
    let mut out = vec![T::zero(); n * g.plane()];
    out.par_chunks_mut(g.plane())
        .enumerate()
        .for_each(|(i, dst)| {
            let x = &input.data()[i * in_plane..(i + 1) * in_plane];
            let mut cols = vec![T::zero(); g.rows() * g.cols()];
            // cols = Wᵀ · X
            gemm(
                g.rows(),
                ci,
                g.cols(),
                weight.data(),
                Layout::Transposed,
                x,
                Layout::RowMajor,
                T::zero(),
                &mut cols,
            );
            col2im(&cols, &g, dst);
            add_bias(dst, bias, g.h * g.w);
        });
    Tensor::from_vec(&[n, co, g.h, g.w], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>, NeuralError> {
    let (n, ci, co, g) = transpose_geometry(input, weight, stride, pad)?;
    if grad_out.shape() != [n, co, g.h, g.w] {
        return Err(NeuralError::ShapeMismatch(format!(
            "conv_transpose2d backward: grad {:?} vs output {:?}",
            grad_out.shape(),
            [n, co, g.h, g.w]
        )));
    }
    let in_plane = ci * g.cols();
    let mut grad_in = vec![T::zero(); input.len()];
    let weight_parts: Vec<Vec<T>> = grad_in
        .par_chunks_mut(in_plane)
        .enumerate()
        .map(|(i, gx)| {
            let x = &input.data()[i * in_plane..(i + 1) * in_plane];
            let dy = &grad_out.data()[i * g.plane()..(i + 1) * g.plane()];
            let mut cols = vec![T::zero(); g.rows() * g.cols()];
            im2col(dy, &g, &mut cols);
            // dX = W · cols
            gemm(
                ci,
                g.rows(),
                g.cols(),
                weight.data(),
                Layout::RowMajor,
                &cols,
                Layout::RowMajor,
                T::zero(),
                gx,
            );
            // dW = X · colsᵀ
            let mut gw = vec![T::zero(); weight.len()];
            gemm(
                ci,
                g.cols(),
                g.rows(),
                x,
                Layout::RowMajor,
                &cols,
                Layout::Transposed,
                T::zero(),
                &mut gw,
            );
            gw
        })
        .collect();
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), grad_in)?,
        weight: Tensor::from_vec(weight.shape(), ordered_sum(weight_parts, weight.len()))?,
        bias: bias_grad(grad_out)?,
    })
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Tensor<T> {
    zip_map(x, grad_out, |v, g| if v > T::zero() { g } else { g * slope })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    zip_map(x, grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Hyperbolic tangent, kept strictly inside `(−1, 1)` even where the
/// floating-point result would round to ±1.
pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let bound = T::one() - T::epsilon();
    x.map(|v| v.tanh().max(-bound).min(bound))
}

/// Takes the forward *output* `y = tanh(x)`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    zip_map(y, grad_out, |v, g| g * (T::one() - v * v))
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an independent oracle.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ki) * k + kj];
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn ones_kernel_stride_two() {
        let x = Tensor::<f32>::filled(&[1, 1, 4, 4], 1.0);
        let w = Tensor::<f32>::filled(&[1, 1, 4, 4], 1.0);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = pseudo(&[2, 3, 5, 4], 1);
        let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2)] {
            let x = pseudo(&[2, 3, 8, 6], 3);
            let w = pseudo(&[4, 3, k, k], 5);
            let fast = conv2d(&x, &w, None, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        let b = Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert!(y.data()[..16].iter().all(|&v| v == 1.5));
        assert!(y.data()[16..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1, 1), Err(NeuralError::ShapeMismatch(_))));
        let w = Tensor::<f32>::zeros(&[2, 3, 7, 7]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
        let w = Tensor::<f32>::zeros(&[2, 3, 3, 3]);
        let b = Tensor::<f32>::zeros(&[3]);
        assert!(conv2d(&x, &w, Some(&b), 1, 1).is_err());
    }

    #[test]
    fn transpose_sizes() {
        assert_eq!(conv_transpose_out_size(8, 4, 2, 1), Some(16));
        assert_eq!(conv_out_size(16, 4, 2, 1), Some(8));
        let x = Tensor::<f32>::zeros(&[1, 2, 8, 8]);
        let w = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        let y = conv_transpose2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn transpose_is_adjoint() {
        for seed in 0..5 {
            let x = pseudo(&[2, 3, 8, 8], seed);
            let w = pseudo(&[5, 3, 4, 4], seed + 11);
            let y = pseudo(&[2, 5, 4, 4], seed + 23);
            let lhs = conv2d(&x, &w, None, 2, 1).unwrap().dot(&y);
            let rhs = x.dot(&conv_transpose2d(&y, &w, None, 2, 1).unwrap());
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[-0.2, 0.0, 2.0]);
        let x = Tensor::<f32>::from_vec(&[2], vec![-3.0, 1.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 1.0]);
        let x = Tensor::<f32>::from_vec(&[3], vec![0.0, -50.0, 50.0]).unwrap();
        let y = tanh(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        let y64 = tanh(&Tensor::<f64>::from_vec(&[2], vec![-15.0, 15.0]).unwrap());
        assert!(y64.data().iter().all(|v| v.abs() < 1.0));
    }
}
