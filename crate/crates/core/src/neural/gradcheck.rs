//! Central finite-difference gradient checks in `f64`.
//!
//! Every check compares reverse-mode gradients against `(J(θ+h) − J(θ−h)) / 2h`
//! and reports `‖g_analytic − g_numeric‖ / max(‖g_analytic‖ + ‖g_numeric‖, tiny)`
//! per tensor. A coordinate whose two probes land in different linear regions
//! of a rectifier (the sign pattern of some ReLU input differs) has no
//! meaningful central difference; it is counted as skipped instead.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::{Activation, ActivationKind, Conv2d, ConvTranspose2d, Layer, Param, ResBlock};
use super::loss::l1_masked_loss;
use super::network::{Network, NetworkConfig};
use super::tensor::Tensor;
use super::NeuralError;

pub const DEFAULT_STEP: f64 = 1e-3;
/// Coordinates sampled per tensor when a check is subsampled.
pub const SAMPLED_COORDS: usize = 40;
/// Weight std of the composed-network cases. Larger values push the tanh head
/// toward saturation, where the O(h²) truncation error of a central
/// difference at h = 1e-3 alone reaches 1e-3.
const NET_STD: f64 = 0.25;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na + nn;
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Relative error of one tensor's gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub case: String,
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn skipped_fraction(&self) -> f64 {
        let skipped: usize = self.tensors.iter().map(|t| t.skipped).sum();
        let total: usize = self.tensors.iter().map(|t| t.checked + t.skipped).sum();
        skipped as f64 / total.max(1) as f64
    }
}

/// A differentiable scalar objective over an input and a parameter list.
trait Objective {
    fn value(&mut self, x: &Tensor<f64>) -> Result<f64, NeuralError>;
    /// Objective value plus analytic input gradient; parameter gradients are
    /// left in the parameters.
    fn value_and_grad(&mut self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>), NeuralError>;
    fn params_mut(&mut self) -> Vec<&mut Param<f64>>;
    /// Rectifier pattern of the most recent evaluation.
    fn pattern(&self) -> Vec<bool> {
        Vec::new()
    }
}

/// Central difference of `eval`, or `None` when the probes straddle a kink.
fn probe(obj: &mut dyn Objective, h: f64, mut eval: impl FnMut(&mut dyn Objective, f64) -> Result<f64, NeuralError>) -> Result<Option<f64>, NeuralError> {
    let up = eval(obj, h)?;
    let up_pattern = obj.pattern();
    let down = eval(obj, -h)?;
    if obj.pattern() != up_pattern {
        return Ok(None);
    }
    Ok(Some((up - down) / (2.0 * h)))
}

fn compare(name: &str, grad: &Tensor<f64>, idx: &[usize], numeric: &[Option<f64>]) -> TensorCheck {
    let (a, n): (Vec<f64>, Vec<f64>) = idx
        .iter()
        .zip(numeric)
        .filter_map(|(&i, n)| n.map(|n| (grad.data()[i], n)))
        .unzip();
    TensorCheck {
        name: name.to_string(),
        rel_error: relative_error(&a, &n),
        checked: a.len(),
        skipped: idx.len() - a.len(),
    }
}

fn coords(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

fn run_check(
    case: &str,
    obj: &mut dyn Objective,
    x: &Tensor<f64>,
    h: f64,
    limit: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<GradReport, NeuralError> {
    obj.params_mut().into_iter().for_each(|p| p.zero_grad());
    let (_, gx) = obj.value_and_grad(x)?;
    let analytic_params: Vec<(String, Tensor<f64>)> =
        obj.params_mut().into_iter().map(|p| (p.name.clone(), p.grad.clone())).collect();

    let mut tensors = Vec::new();
    let idx = coords(x.len(), limit, rng);
    let mut xp = x.clone();
    let mut numeric = Vec::with_capacity(idx.len());
    for &i in &idx {
        let orig = x.data()[i];
        numeric.push(probe(obj, h, |o, d| {
            xp.data_mut()[i] = orig + d;
            let v = o.value(&xp);
            xp.data_mut()[i] = orig;
            v
        })?);
    }
    tensors.push(compare("input", &gx, &idx, &numeric));

    for (k, (name, grad)) in analytic_params.iter().enumerate() {
        let idx = coords(grad.len(), limit, rng);
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = obj.params_mut()[k].value.data()[i];
            numeric.push(probe(obj, h, |o, d| {
                o.params_mut()[k].value.data_mut()[i] = orig + d;
                let v = o.value(x);
                o.params_mut()[k].value.data_mut()[i] = orig;
                v
            })?);
        }
        tensors.push(compare(name, grad, &idx, &numeric));
    }
    Ok(GradReport {
        case: case.to_string(),
        tensors,
    })
}

/// `J = ⟨layer(x), r⟩` for a fixed random projection `r`.
struct Projected<'a, L> {
    layer: &'a mut L,
    r: Option<Tensor<f64>>,
    seed: u64,
}

impl<L: Layer<f64>> Projected<'_, L> {
    fn projection(&mut self, shape: &[usize]) -> &Tensor<f64> {
        let seed = self.seed;
        self.r.get_or_insert_with(|| random_tensor(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
    }
}

impl<L: Layer<f64>> Objective for Projected<'_, L> {
    fn value(&mut self, x: &Tensor<f64>) -> Result<f64, NeuralError> {
        let y = self.layer.forward(x)?;
        Ok(y.dot(self.projection(y.shape())))
    }

    fn value_and_grad(&mut self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>), NeuralError> {
        let y = self.layer.forward(x)?;
        let r = self.projection(y.shape()).clone();
        let j = y.dot(&r);
        Ok((j, self.layer.backward(&r)?))
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.layer.params_mut()
    }

    fn pattern(&self) -> Vec<bool> {
        let mut v = Vec::new();
        self.layer.kink_pattern(&mut v);
        v
    }
}

/// Masked L1 of a model's output against a fixed target.
struct MaskedL1<'a, L> {
    model: &'a mut L,
    target: Tensor<f64>,
    mask: Vec<bool>,
}

impl<L: Layer<f64>> Objective for MaskedL1<'_, L> {
    fn value(&mut self, x: &Tensor<f64>) -> Result<f64, NeuralError> {
        let y = self.model.forward(x)?;
        Ok(l1_masked_loss(&y, &self.target, &self.mask)?.loss)
    }

    fn value_and_grad(&mut self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>), NeuralError> {
        let y = self.model.forward(x)?;
        let out = l1_masked_loss(&y, &self.target, &self.mask)?;
        Ok((out.loss, self.model.backward(&out.grad)?))
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.model.params_mut()
    }

    fn pattern(&self) -> Vec<bool> {
        let mut v = Vec::new();
        self.model.kink_pattern(&mut v);
        v
    }
}

/// The loss alone, differentiated with respect to the prediction.
struct LossOnly {
    target: Tensor<f64>,
    mask: Vec<bool>,
}

impl Objective for LossOnly {
    fn value(&mut self, x: &Tensor<f64>) -> Result<f64, NeuralError> {
        Ok(l1_masked_loss(x, &self.target, &self.mask)?.loss)
    }

    fn value_and_grad(&mut self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>), NeuralError> {
        let out = l1_masked_loss(x, &self.target, &self.mask)?;
        Ok((out.loss, out.grad))
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        Vec::new()
    }
}

impl Layer<f64> for Network<f64> {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>, NeuralError> {
        Network::forward(self, x)
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>, NeuralError> {
        Network::backward(self, grad_out)
    }

    fn params(&self) -> Vec<&Param<f64>> {
        Network::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        Network::params_mut(self)
    }

    fn kink_pattern(&self, out: &mut Vec<bool>) {
        Network::kink_pattern(self, out)
    }
}

/// Two-stage encoder-decoder with one residual block and one skip
/// concatenation, wired like the full network.
pub struct MiniUNet {
    d1: Conv2d<f64>,
    a1: Activation<f64>,
    d2: Conv2d<f64>,
    a2: Activation<f64>,
    res: ResBlock<f64>,
    u1: ConvTranspose2d<f64>,
    b1: Activation<f64>,
    u2: ConvTranspose2d<f64>,
    b2: Activation<f64>,
    skip_channels: usize,
}

impl MiniUNet {
    pub fn new(in_ch: usize, width: usize, out_ch: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            d1: Conv2d::new("d1", in_ch, width, 4, 2, 1, std, rng),
            a1: Activation::new(ActivationKind::LeakyRelu(0.2)),
            d2: Conv2d::new("d2", width, 2 * width, 4, 2, 1, std, rng),
            a2: Activation::new(ActivationKind::LeakyRelu(0.2)),
            res: ResBlock::new("res1", 2 * width, std, rng),
            u1: ConvTranspose2d::new("u1", 2 * width, width, 4, 2, 1, std, rng),
            b1: Activation::new(ActivationKind::Relu),
            u2: ConvTranspose2d::new("u2", 2 * width, out_ch, 4, 2, 1, std, rng),
            b2: Activation::new(ActivationKind::Tanh),
            skip_channels: width,
        }
    }
}

impl Layer<f64> for MiniUNet {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>, NeuralError> {
        let e1 = self.a1.forward(&self.d1.forward(x)?)?;
        let e2 = self.a2.forward(&self.d2.forward(&e1)?)?;
        let r = self.res.forward(&e2)?;
        let u1 = self.b1.forward(&self.u1.forward(&r)?)?;
        let cat = Tensor::concat_channels(&e1, &u1)?;
        self.b2.forward(&self.u2.forward(&cat)?)
    }

    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>, NeuralError> {
        let g_cat = self.u2.backward(&self.b2.backward(g)?)?;
        let (g_skip, g_u1) = g_cat.split_channels(self.skip_channels)?;
        let g_r = self.u1.backward(&self.b1.backward(&g_u1)?)?;
        let g_e2 = self.res.backward(&g_r)?;
        let mut g_e1 = self.d2.backward(&self.a2.backward(&g_e2)?)?;
        g_e1.add_assign(&g_skip);
        self.d1.backward(&self.a1.backward(&g_e1)?)
    }

    fn params(&self) -> Vec<&Param<f64>> {
        let mut v = self.d1.params();
        v.extend(self.d2.params());
        v.extend(self.res.params());
        v.extend(self.u1.params());
        v.extend(self.u2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut v = self.d1.params_mut();
        v.extend(self.d2.params_mut());
        v.extend(self.res.params_mut());
        v.extend(self.u1.params_mut());
        v.extend(self.u2.params_mut());
        v
    }

    fn kink_pattern(&self, out: &mut Vec<bool>) {
        for a in [&self.a1, &self.a2] {
            a.kink_pattern(out);
        }
        self.res.kink_pattern(out);
        self.b1.kink_pattern(out);
    }
}

pub fn random_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// Random values kept at least `gap` away from 0 (keeps finite differences off kinks).
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    random_tensor(shape, 1.0, rng).map(|v| v.signum() * (gap + v.abs()))
}

/// Targets outside the tanh codomain, so the L1 residual never changes sign.
fn unreachable_target(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    random_tensor(shape, 1.0, rng).map(|v| v.signum() * (1.1 + 0.4 * v.abs().min(1.0)))
}

fn random_mask(n: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    m[0] = true;
    m
}

/// Every check case for one seed.
pub fn check_all(seed: u64, h: f64) -> Result<Vec<GradReport>, NeuralError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let mut conv = Conv2d::<f64>::new("conv", 3, 4, 4, 2, 1, 0.5, &mut rng);
    randomize_bias(&mut conv, &mut rng);
    let x = random_tensor(&[2, 3, 4, 4], 1.0, &mut rng);
    reports.push(run_check("conv2d k4 s2 p1", &mut project(&mut conv, seed), &x, h, None, &mut rng)?);

    let mut conv3 = Conv2d::<f64>::new("conv3", 2, 3, 3, 1, 1, 0.5, &mut rng);
    randomize_bias(&mut conv3, &mut rng);
    let x = random_tensor(&[1, 2, 4, 4], 1.0, &mut rng);
    reports.push(run_check("conv2d k3 s1 p1", &mut project(&mut conv3, seed), &x, h, None, &mut rng)?);

    let mut deconv = ConvTranspose2d::<f64>::new("deconv", 3, 2, 4, 2, 1, 0.5, &mut rng);
    randomize_bias(&mut deconv, &mut rng);
    let x = random_tensor(&[2, 3, 3, 3], 1.0, &mut rng);
    reports.push(run_check("conv_transpose2d k4 s2 p1", &mut project(&mut deconv, seed), &x, h, None, &mut rng)?);

    for (name, kind) in [
        ("leaky_relu 0.2", ActivationKind::LeakyRelu(0.2)),
        ("relu", ActivationKind::Relu),
        ("tanh", ActivationKind::Tanh),
    ] {
        let mut act = Activation::<f64>::new(kind);
        let x = away_from_zero(&[2, 2, 4, 4], 0.05, &mut rng);
        reports.push(run_check(name, &mut project(&mut act, seed), &x, h, None, &mut rng)?);
    }

    let mut res = ResBlock::<f64>::new("res", 3, 0.4, &mut rng);
    let x = random_tensor(&[1, 3, 4, 4], 1.0, &mut rng);
    reports.push(run_check("resblock", &mut project(&mut res, seed), &x, h, None, &mut rng)?);

    let target = random_tensor(&[2, 1, 4, 4], 1.0, &mut rng);
    let offset = away_from_zero(&[2, 2, 4, 4], 0.05, &mut rng);
    let mut pred = offset.clone();
    for (i, p) in pred.data_mut().iter_mut().enumerate() {
        let (b, pix) = (i / 32, i % 16);
        *p += target.data()[b * 16 + pix];
    }
    let mut loss = LossOnly {
        target,
        mask: random_mask(32, &mut rng),
    };
    reports.push(run_check("masked l1", &mut loss, &pred, h, None, &mut rng)?);

    let mut mini = MiniUNet::new(4, 3, 1, NET_STD, &mut rng);
    let x = random_tensor(&[1, 4, 8, 8], 1.0, &mut rng);
    let mut obj = MaskedL1 {
        model: &mut mini,
        target: unreachable_target(&[1, 1, 8, 8], &mut rng),
        mask: random_mask(64, &mut rng),
    };
    reports.push(run_check("2-stage net + masked l1", &mut obj, &x, h, Some(SAMPLED_COORDS), &mut rng)?);

    let cfg = NetworkConfig {
        base_width: 2,
        n_resblocks: 2,
        ..NetworkConfig::default()
    };
    let mut net = Network::<f64>::new(cfg, NET_STD, &mut rng)?;
    let x = random_tensor(&[1, 4, 16, 16], 1.0, &mut rng);
    let mut obj = MaskedL1 {
        model: &mut net,
        target: unreachable_target(&[1, 1, 16, 16], &mut rng),
        mask: random_mask(256, &mut rng),
    };
    reports.push(run_check("full 4-stage net + masked l1", &mut obj, &x, h, Some(SAMPLED_COORDS), &mut rng)?);

    Ok(reports)
}

fn project<L: Layer<f64>>(layer: &mut L, seed: u64) -> Projected<'_, L> {
    Projected {
        layer,
        r: None,
        seed: seed ^ 0xA5A5,
    }
}

fn randomize_bias<L: Layer<f64>>(layer: &mut L, rng: &mut impl Rng) {
    for p in layer.params_mut() {
        if p.name.ends_with(".bias") {
            p.value = random_tensor(p.value.shape(), 0.3, rng);
        }
    }
}
