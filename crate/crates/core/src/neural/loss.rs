//! Masked L1 objective.

use super::tensor::{Scalar, Tensor};
use super::NeuralError;

/// Loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossOutput<T: Scalar> {
    pub loss: f64,
    pub grad: Tensor<T>,
    pub valid_pixels: usize,
}

/// Mean absolute error over mask-valid pixels.
///
/// `pred` is `[N, C, H, W]`; `target` is `[N, 1, H, W]` and is compared
/// against every prediction channel; `mask` holds `N·H·W` flags. Invalid
/// pixels contribute to neither the sum nor the divisor. The subgradient at a
/// zero residual is 0.
pub fn l1_masked_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
) -> Result<LossOutput<T>, NeuralError> {
    let (n, c, h, w) = pred.dims4()?;
    let (tn, tc, th, tw) = target.dims4()?;
    if (tn, tc, th, tw) != (n, 1, h, w) || mask.len() != n * h * w {
        return Err(NeuralError::ShapeMismatch(format!(
            "loss: pred {:?}, target {:?}, mask {}",
            pred.shape(),
            target.shape(),
            mask.len()
        )));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(NeuralError::EmptyMask);
    }
    let plane = h * w;
    let denom = (valid * c) as f64;
    let scale = T::from_f64(1.0 / denom);
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0f64;
    for b in 0..n {
        let t = &target.data()[b * plane..(b + 1) * plane];
        let m = &mask[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let p = &pred.data()[base..base + plane];
            let g = &mut grad.data_mut()[base..base + plane];
            for i in 0..plane {
                if !m[i] {
                    continue;
                }
                let r = p[i] - t[i];
                total += r.abs().as_f64();
                g[i] = if r > T::zero() {
                    scale
                } else if r < T::zero() {
                    -scale
                } else {
                    T::zero()
                };
            }
        }
    }
    Ok(LossOutput {
        loss: total / denom,
        grad,
        valid_pixels: valid,
    })
}
