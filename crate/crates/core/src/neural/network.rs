//! The raw-to-depth encoder-decoder.
//!
//! Four 4×4 stride-2 convolutions (LeakyReLU) shrink the input 16×, a stack
//! of residual blocks runs at the bottleneck, and four 4×4 stride-2
//! transposed convolutions restore full resolution. Encoder outputs are
//! concatenated (channel-wise, encoder first) onto the inputs of the last
//! three decoder stages. The head is a tanh, so outputs live in `(−1, 1)`.

use rand::Rng;

use super::layers::{Activation, ActivationKind, Conv2d, ConvTranspose2d, Layer, Param, ResBlock};
use super::tensor::{Scalar, Tensor};
use super::NeuralError;

/// Number of stride-2 stages on each side.
pub const STAGES: usize = 4;
/// Spatial dimensions must be divisible by this.
pub const SPATIAL_MULTIPLE: usize = 1 << STAGES;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// 1 for a plain depth head. With 3, inference averages the channels.
    pub out_channels: usize,
    pub base_width: usize,
    pub n_resblocks: usize,
    pub leaky_slope: f64,
    /// Depth mapped to +1 by the output normalization (meters).
    pub depth_max_m: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 1,
            base_width: 64,
            n_resblocks: 9,
            leaky_slope: 0.2,
            depth_max_m: 7.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && self.base_width > 0
            && self.leaky_slope.is_finite()
            && self.leaky_slope >= 0.0
            && self.depth_max_m.is_finite()
            && self.depth_max_m > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NeuralError::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Output widths of the encoder stages: w, 2w, 4w, 4w.
    pub fn encoder_widths(&self) -> [usize; STAGES] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 4 * w]
    }

    /// `(input, output)` widths of the decoder stages.
    pub fn decoder_io(&self) -> [(usize, usize); STAGES] {
        let [e1, e2, e3, e4] = self.encoder_widths();
        [
            (e4, e3),
            (e3 + e3, e2),
            (e2 + e2, e1),
            (e1 + e1, self.out_channels),
        ]
    }
}

#[derive(Debug, Clone)]
struct Stage<T: Scalar, L> {
    conv: L,
    act: Activation<T>,
}

impl<T: Scalar, L: Layer<T>> Stage<T, L> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let h = self.conv.forward(x)?;
        self.act.forward(&h)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let g = self.act.backward(g)?;
        self.conv.backward(&g)
    }
}

/// Named intermediate shapes of one forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    down: Vec<Stage<T, Conv2d<T>>>,
    res: Vec<ResBlock<T>>,
    up: Vec<Stage<T, ConvTranspose2d<T>>>,
    skip_widths: Option<[usize; STAGES]>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with zero-mean Gaussian weights of the given std and zero biases.
    pub fn new(config: NetworkConfig, init_std: f64, rng: &mut impl Rng) -> Result<Self, NeuralError> {
        config.validate()?;
        let enc = config.encoder_widths();
        let mut down = Vec::with_capacity(STAGES);
        let mut in_ch = config.in_channels;
        for (i, &out_ch) in enc.iter().enumerate() {
            down.push(Stage {
                conv: Conv2d::new(&format!("d{}", i + 1), in_ch, out_ch, 4, 2, 1, init_std, rng),
                act: Activation::new(ActivationKind::LeakyRelu(config.leaky_slope)),
            });
            in_ch = out_ch;
        }
        let res = (0..config.n_resblocks)
            .map(|i| ResBlock::new(&format!("res{}", i + 1), enc[STAGES - 1], init_std, rng))
            .collect();
        let up = config
            .decoder_io()
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| Stage {
                conv: ConvTranspose2d::new(&format!("u{}", i + 1), ci, co, 4, 2, 1, init_std, rng),
                act: Activation::new(if i + 1 == STAGES {
                    ActivationKind::Tanh
                } else {
                    ActivationKind::Relu
                }),
            })
            .collect();
        Ok(Self {
            config,
            down,
            res,
            up,
            skip_widths: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = Vec::new();
        for s in &self.down {
            p.extend(s.conv.params());
        }
        for r in &self.res {
            p.extend(r.params());
        }
        for s in &self.up {
            p.extend(s.conv.params());
        }
        p
    }

    /// Parameters in a fixed order: encoder, residual blocks, decoder.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = Vec::new();
        for s in &mut self.down {
            p.extend(s.conv.params_mut());
        }
        for r in &mut self.res {
            p.extend(r.params_mut());
        }
        for s in &mut self.up {
            p.extend(s.conv.params_mut());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NeuralError> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(NeuralError::ShapeMismatch(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(NeuralError::ShapeMismatch(format!(
                "spatial size {h}×{w} is not a positive multiple of {SPATIAL_MULTIPLE}"
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        self.forward_inner(x, None)
    }

    /// Forward pass that also records every intermediate shape.
    pub fn forward_traced(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ShapeTrace), NeuralError> {
        let mut trace = Vec::new();
        let y = self.forward_inner(x, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn forward_inner(&mut self, x: &Tensor<T>, mut trace: Option<&mut ShapeTrace>) -> Result<Tensor<T>, NeuralError> {
        self.check_input(x)?;
        let mut record = |name: String, t: &Tensor<T>| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((name, t.shape().to_vec()));
            }
        };
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(STAGES);
        let mut h = x.clone();
        for (i, stage) in self.down.iter_mut().enumerate() {
            h = stage.forward(&h)?;
            record(format!("D{}", i + 1), &h);
            skips.push(h.clone());
        }
        for block in &mut self.res {
            h = block.forward(&h)?;
        }
        record("Res".into(), &h);
        let mut widths = [0; STAGES];
        for (i, stage) in self.up.iter_mut().enumerate() {
            if i > 0 {
                let skip = &skips[STAGES - 1 - i];
                widths[i] = skip.dims4()?.1;
                h = Tensor::concat_channels(skip, &h)?;
                record(format!("U{}.in", i + 1), &h);
            }
            h = stage.forward(&h)?;
            record(format!("U{}", i + 1), &h);
        }
        self.skip_widths = Some(widths);
        Ok(h)
    }

    /// Back-propagates `grad_out` through the last forward pass, accumulating
    /// into every parameter's gradient. Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let widths = self.skip_widths.take().ok_or(NeuralError::MissingForward)?;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; STAGES];
        let mut g = grad_out.clone();
        for i in (0..STAGES).rev() {
            g = self.up[i].backward(&g)?;
            if i > 0 {
                let (g_skip, g_rest) = g.split_channels(widths[i])?;
                skip_grads[STAGES - 1 - i] = Some(g_skip);
                g = g_rest;
            }
        }
        for block in self.res.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        for i in (0..STAGES).rev() {
            if let Some(extra) = &skip_grads[i] {
                g.add_assign(extra);
            }
            g = self.down[i].backward(&g)?;
        }
        Ok(g)
    }

    /// Rectifier sign pattern of the last forward pass, in execution order.
    pub fn kink_pattern(&self, out: &mut Vec<bool>) {
        self.down.iter().for_each(|s| s.act.kink_pattern(out));
        self.res.iter().for_each(|b| b.kink_pattern(out));
        self.up.iter().for_each(|s| s.act.kink_pattern(out));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_channel_plan() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.encoder_widths(), [64, 128, 256, 256]);
        assert_eq!(cfg.decoder_io(), [(256, 256), (512, 128), (256, 64), (128, 1)]);
        let literal = NetworkConfig {
            out_channels: 3,
            ..cfg
        };
        assert_eq!(literal.decoder_io()[3], (128, 3));
    }

    #[test]
    fn d1_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::<f32>::new(NetworkConfig::default(), 0.02, &mut rng).unwrap();
        let p = net.params();
        assert_eq!(p[0].name, "d1.weight");
        assert_eq!(p[0].value.len() + p[1].value.len(), 4 * 4 * 4 * 64 + 64);
        assert_eq!(p[0].value.len() + p[1].value.len(), 4160);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = NetworkConfig {
            base_width: 4,
            n_resblocks: 2,
            ..NetworkConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::<f32>::new(cfg, 0.02, &mut rng).unwrap();
        for p in net.params_mut() {
            p.value.fill(0.0);
        }
        let x = Tensor::filled(&[1, 4, 32, 32], 0.7);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 32, 32]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_spatial_size() {
        let cfg = NetworkConfig {
            base_width: 2,
            n_resblocks: 1,
            ..NetworkConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::<f32>::new(cfg, 0.02, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 4, 24, 32]);
        assert!(matches!(net.forward(&x), Err(NeuralError::ShapeMismatch(_))));
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let cfg = NetworkConfig {
            base_width: 2,
            n_resblocks: 1,
            ..NetworkConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::<f32>::new(cfg, 0.02, &mut rng).unwrap();
        assert!(matches!(
            net.backward(&Tensor::zeros(&[1, 1, 16, 16])),
            Err(NeuralError::MissingForward)
        ));
    }
}
