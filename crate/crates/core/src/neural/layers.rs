//! Trainable layers with cached activations for reverse-mode differentiation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops;
use super::tensor::{Scalar, Tensor};
use super::NeuralError;

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    fn gaussian(name: String, shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| T::from_f64(normal.sample(rng))).collect();
        Self::new(name, Tensor::from_vec(shape, data).expect("length matches"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Forward/backward interface shared by every layer.
///
/// `backward` consumes the cache of the most recent `forward`, accumulates
/// parameter gradients and returns the gradient with respect to the input.
pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NeuralError>;
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NeuralError>;
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    /// Appends the sign pattern of every rectifier input seen by the last
    /// forward pass. Two inputs with equal patterns lie in the same linear
    /// region of the piecewise-linear parts.
    fn kink_pattern(&self, _out: &mut Vec<bool>) {}
}

fn take_cache<T: Scalar>(cache: &mut Option<Tensor<T>>) -> Result<Tensor<T>, NeuralError> {
    cache.take().ok_or(NeuralError::MissingForward)
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Param::gaussian(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], init_std, rng),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride,
            pad,
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let y = ops::conv2d(x, &self.weight.value, Some(&self.bias.value), self.stride, self.pad)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let x = take_cache(&mut self.input)?;
        let g = ops::conv2d_backward(&x, &self.weight.value, grad_out, self.stride, self.pad)?;
        self.weight.grad.add_assign(&g.weight);
        self.bias.grad.add_assign(&g.bias);
        Ok(g.input)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution; the kernel is stored `[C_in, C_out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Param::gaussian(format!("{name}.weight"), &[in_ch, out_ch, kernel, kernel], init_std, rng),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride,
            pad,
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let y = ops::conv_transpose2d(x, &self.weight.value, Some(&self.bias.value), self.stride, self.pad)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let x = take_cache(&mut self.input)?;
        let g = ops::conv_transpose2d_backward(&x, &self.weight.value, grad_out, self.stride, self.pad)?;
        self.weight.grad.add_assign(&g.weight);
        self.bias.grad.add_assign(&g.bias);
        Ok(g.input)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    LeakyRelu(f64),
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
pub struct Activation<T: Scalar = f32> {
    pub kind: ActivationKind,
    // Input for the rectifiers, output for tanh.
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, cache: None }
    }
}

impl<T: Scalar> Layer<T> for Activation<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let y = match self.kind {
            ActivationKind::LeakyRelu(slope) => ops::leaky_relu(x, T::from_f64(slope)),
            ActivationKind::Relu => ops::relu(x),
            ActivationKind::Tanh => ops::tanh(x),
        };
        self.cache = Some(match self.kind {
            ActivationKind::Tanh => y.clone(),
            _ => x.clone(),
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let cached = take_cache(&mut self.cache)?;
        if cached.shape() != grad_out.shape() {
            return Err(NeuralError::ShapeMismatch(format!(
                "activation backward: grad {:?} vs cache {:?}",
                grad_out.shape(),
                cached.shape()
            )));
        }
        Ok(match self.kind {
            ActivationKind::LeakyRelu(slope) => ops::leaky_relu_backward(&cached, grad_out, T::from_f64(slope)),
            ActivationKind::Relu => ops::relu_backward(&cached, grad_out),
            ActivationKind::Tanh => ops::tanh_backward(&cached, grad_out),
        })
    }

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    fn kink_pattern(&self, out: &mut Vec<bool>) {
        if let (Some(x), ActivationKind::LeakyRelu(_) | ActivationKind::Relu) = (&self.cache, self.kind) {
            out.extend(x.data().iter().map(|&v| v > T::zero()));
        }
    }
}

/// `x + conv₂(relu(conv₁(x)))` with 3×3 kernels and unchanged width.
#[derive(Debug, Clone)]
pub struct ResBlock<T: Scalar = f32> {
    pub conv1: Conv2d<T>,
    pub act: Activation<T>,
    pub conv2: Conv2d<T>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(name: &str, channels: usize, init_std: f64, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), channels, channels, 3, 1, 1, init_std, rng),
            act: Activation::new(ActivationKind::Relu),
            conv2: Conv2d::new(&format!("{name}.conv2"), channels, channels, 3, 1, 1, init_std, rng),
        }
    }
}

impl<T: Scalar> Layer<T> for ResBlock<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let h = self.conv1.forward(x)?;
        let h = self.act.forward(&h)?;
        let mut y = self.conv2.forward(&h)?;
        y.add_assign(x);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let g = self.conv2.backward(grad_out)?;
        let g = self.act.backward(&g)?;
        let mut g = self.conv1.backward(&g)?;
        g.add_assign(grad_out);
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p
    }

    fn kink_pattern(&self, out: &mut Vec<bool>) {
        self.act.kink_pattern(out);
    }
}
