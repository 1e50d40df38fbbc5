//! Adam with bias correction, and the flat-then-linear-decay learning rate.

use super::layers::Param;
use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One Adam update of `params` in place. `t` is the 1-based step count.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    assert!(t >= 1, "adam step count is 1-based");
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    assert_eq!(params.len(), state.v.len());
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t as f64));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t as f64));
    let eps = T::from_f64(cfg.eps);
    let lr = T::from_f64(lr);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a whole parameter list, owning one state per tensor.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub steps: u64,
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            states: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) {
        if self.states.is_empty() {
            self.states = params.iter().map(|p| AdamState::zeros(p.value.len())).collect();
        }
        assert_eq!(self.states.len(), params.len(), "parameter list changed");
        self.steps += 1;
        for (p, state) in params.into_iter().zip(&mut self.states) {
            let Param { value, grad, .. } = p;
            adam_step(value.data_mut(), grad.data(), state, self.steps, lr, &self.config);
        }
    }
}

/// `lr0` for the first `flat_epochs`, then linear decay to zero over
/// `decay_epochs`, and zero afterwards.
pub fn lr_schedule(epoch: usize, lr0: f64, flat_epochs: usize, decay_epochs: usize) -> f64 {
    if epoch < flat_epochs {
        lr0
    } else if epoch < flat_epochs + decay_epochs {
        lr0 * (1.0 - (epoch - flat_epochs) as f64 / decay_epochs as f64)
    } else {
        0.0
    }
}
