//! Conditional flow matching on small token latents.
//!
//! Paths interpolate linearly from prior noise `eps` (t = 0) to a data latent
//! `z` (t = 1) with constant target velocity `z - eps`. A [`VelocityField`]
//! is anything that predicts that velocity from `(z_t, condition, t)`; the
//! trainable one is [`VelocityNet`], and a few closed-form fields serve as
//! oracles. Sampling is explicit Euler with step `1 / t_bar`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::coupling::loss::{loss_projection_var, Reduction};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{apply_step, collect_grads, Linear, Module};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::{gaussian, Rng};
use crate::tensor::Tensor;
use crate::toyworld::ToyWorld;

/// `t z + (1 - t) eps`.
pub fn interpolate(z: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("interpolation time {t} outside [0, 1]")));
    }
    z.scale(t).add(&eps.scale(1.0 - t))
}

/// `z - eps`, independent of time.
pub fn target_velocity(z: &Tensor, eps: &Tensor) -> Result<Tensor> {
    z.sub(eps)
}

/// A velocity predictor `v(z, condition, t)`.
pub trait VelocityField {
    /// `[N, D]` of the latents this field acts on.
    fn latent_shape(&self) -> [usize; 2];
    fn cond_dim(&self) -> usize;

    /// Records the prediction on `tape`. `cond` is a `[cond_dim]` vector.
    fn velocity_on(&self, tape: &Tape, z: &Var, cond: &Var, t: f64) -> Result<Var>;

    fn velocity(&self, z: &Tensor, cond: &Tensor, t: f64) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.velocity_on(&tape, &tape.constant(z.detached()), &tape.constant(cond.detached()), t)?.value())
    }
}

fn check_inputs(field: &dyn VelocityField, z: &[usize], cond: &[usize]) -> Result<()> {
    let [n, d] = field.latent_shape();
    if z != [n, d] {
        return Err(Error::shape("velocity latent", &[n, d], z));
    }
    if cond != [field.cond_dim()] {
        return Err(Error::shape("velocity condition", &[field.cond_dim()], cond));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocityNetConfig {
    pub hidden: usize,
    /// Sine/cosine pairs in the time encoding.
    pub time_frequencies: usize,
}

impl Default for VelocityNetConfig {
    fn default() -> Self {
        VelocityNetConfig {
            hidden: 128,
            time_frequencies: 4,
        }
    }
}

/// Three-layer tanh MLP over `[flatten(z) | condition | time features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    pub config: VelocityNetConfig,
    pub tokens: usize,
    pub dim: usize,
    pub cond: usize,
    pub layers: [Linear; 3],
}

impl VelocityNet {
    pub fn new(rng: &mut Rng, tokens: usize, dim: usize, cond: usize, config: VelocityNetConfig) -> Self {
        let input = tokens * dim + cond + 2 * config.time_frequencies;
        let h = config.hidden;
        VelocityNet {
            config,
            tokens,
            dim,
            cond,
            layers: [
                Linear::new(rng, input, h, 1.0),
                Linear::new(rng, h, h, 1.0),
                Linear::new(rng, h, tokens * dim, 1.0),
            ],
        }
    }

    fn time_features(&self, t: f64) -> Tensor {
        let mut f = Vec::with_capacity(2 * self.config.time_frequencies);
        for k in 0..self.config.time_frequencies {
            let w = core::f64::consts::PI * (k + 1) as f64;
            f.push(math::sin(w * t));
            f.push(math::cos(w * t));
        }
        let n = f.len();
        Tensor::new(&[1, n], f).expect("1 x 2F")
    }
}

impl VelocityField for VelocityNet {
    fn latent_shape(&self) -> [usize; 2] {
        [self.tokens, self.dim]
    }

    fn cond_dim(&self) -> usize {
        self.cond
    }

    fn velocity_on(&self, tape: &Tape, z: &Var, cond: &Var, t: f64) -> Result<Var> {
        check_inputs(self, &z.shape(), &cond.shape())?;
        let flat = z.reshape(&[1, self.tokens * self.dim]);
        let x = flat
            .concat_cols(&cond.reshape(&[1, self.cond]))
            .concat_cols(&tape.constant(self.time_features(t)));
        let h = self.layers[0].forward(tape, &x).tanh();
        let h = self.layers[1].forward(tape, &h).tanh();
        Ok(self.layers[2].forward(tape, &h).reshape(&[self.tokens, self.dim]))
    }
}

impl Module for VelocityNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.push_named(&format!("velocity.{i}"), &mut out);
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.push_named_mut(&format!("velocity.{i}"), &mut out);
        }
        out
    }
}

/// Constant velocity `c`, whatever the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantField {
    pub value: Tensor,
    pub cond: usize,
}

impl VelocityField for ConstantField {
    fn latent_shape(&self) -> [usize; 2] {
        let (n, d) = self.value.dim2();
        [n, d]
    }

    fn cond_dim(&self) -> usize {
        self.cond
    }

    fn velocity_on(&self, tape: &Tape, z: &Var, cond: &Var, _t: f64) -> Result<Var> {
        check_inputs(self, &z.shape(), &cond.shape())?;
        Ok(tape.constant(self.value.clone()))
    }
}

/// Exact marginal velocity of the linear path towards `N(mu, sigma^2 I)`.
///
/// Starting from `eps`, the exact flow ends at `mu + sigma * eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPathField {
    pub mu: Tensor,
    pub sigma: f64,
    pub cond: usize,
}

impl GaussianPathField {
    pub fn exact_endpoint(&self, eps: &Tensor) -> Result<Tensor> {
        self.mu.add(&eps.scale(self.sigma))
    }
}

impl VelocityField for GaussianPathField {
    fn latent_shape(&self) -> [usize; 2] {
        let (n, d) = self.mu.dim2();
        [n, d]
    }

    fn cond_dim(&self) -> usize {
        self.cond
    }

    fn velocity_on(&self, tape: &Tape, z: &Var, cond: &Var, t: f64) -> Result<Var> {
        check_inputs(self, &z.shape(), &cond.shape())?;
        let s2 = self.sigma * self.sigma;
        let gain = (t * s2 - (1.0 - t)) / (t * t * s2 + (1.0 - t) * (1.0 - t));
        let mu = tape.constant(self.mu.clone());
        Ok(mu.add(&z.sub(&mu.scale(t)).scale(gain)))
    }
}

/// `v = a z + reshape(cond B)`: affine in the condition, so condition shifts
/// translate into velocity shifts exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConditionField {
    pub a: f64,
    /// `[cond_dim, N * D]`.
    pub b: Tensor,
    pub tokens: usize,
    pub dim: usize,
}

impl VelocityField for LinearConditionField {
    fn latent_shape(&self) -> [usize; 2] {
        [self.tokens, self.dim]
    }

    fn cond_dim(&self) -> usize {
        self.b.rows()
    }

    fn velocity_on(&self, tape: &Tape, z: &Var, cond: &Var, _t: f64) -> Result<Var> {
        check_inputs(self, &z.shape(), &cond.shape())?;
        let shift = cond
            .reshape(&[1, self.cond_dim()])
            .matmul(&tape.constant(self.b.clone()))
            .reshape(&[self.tokens, self.dim]);
        Ok(z.scale(self.a).add(&shift))
    }
}

/// Which time value the field sees at Euler step `t` (1-based).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeInput {
    /// `(t - 1) / t_bar`, in `[0, 1)`.
    #[default]
    Normalized,
    /// The raw integer `t - 1`.
    StepIndex,
}

impl TimeInput {
    pub fn at(self, step: usize, t_bar: usize) -> f64 {
        match self {
            TimeInput::Normalized => (step - 1) as f64 / t_bar as f64,
            TimeInput::StepIndex => (step - 1) as f64,
        }
    }
}

/// One point of an Euler trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub latent: Tensor,
    pub t: usize,
    pub t_bar: usize,
}

/// All `t_bar + 1` states, starting from the prior draw.
pub type Trajectory = Vec<FlowState>;

/// Euler integration from a given `eps`. `cond_at(t)` supplies the condition
/// for step `t` (1-based).
pub fn euler_from(
    field: &dyn VelocityField,
    eps: &Tensor,
    t_bar: usize,
    time: TimeInput,
    cond_at: &dyn Fn(usize) -> Tensor,
) -> Result<Trajectory> {
    if t_bar == 0 {
        return Err(Error::Contract("t_bar must be at least 1".into()));
    }
    let dt = 1.0 / t_bar as f64;
    let mut states = Vec::with_capacity(t_bar + 1);
    states.push(FlowState {
        latent: eps.detached(),
        t: 0,
        t_bar,
    });
    for step in 1..=t_bar {
        let prev = &states[step - 1].latent;
        let v = field.velocity(prev, &cond_at(step), time.at(step, t_bar))?;
        states.push(FlowState {
            latent: prev.add(&v.scale(dt))?,
            t: step,
            t_bar,
        });
    }
    Ok(states)
}

/// Draws `eps` from `rng` and integrates under a fixed condition.
pub fn euler_generate(
    field: &dyn VelocityField,
    cond: &Tensor,
    t_bar: usize,
    time: TimeInput,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let eps = gaussian(rng, &field.latent_shape());
    euler_from(field, &eps, t_bar, time, &|_| cond.clone())
}

/// `v(z, cond_plus, t) - v(z, cond_minus, t)`.
pub fn velocity_divergence(
    field: &dyn VelocityField,
    z: &Tensor,
    cond_minus: &Tensor,
    cond_plus: &Tensor,
    t: f64,
) -> Result<Tensor> {
    field.velocity(z, cond_plus, t)?.sub(&field.velocity(z, cond_minus, t)?)
}

/// Records the flow-matching loss over `batch` on `tape`: for each
/// `(z, cond)` a fresh `eps` and `t ~ U[0, 1]`, then the mean squared error
/// between the prediction at the interpolant and `z - eps`, averaged over the
/// batch.
pub fn cfm_loss_var(tape: &Tape, field: &dyn VelocityField, batch: &[(Tensor, Tensor)], rng: &mut Rng) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty flow-matching batch".into()));
    }
    let mut total: Option<Var> = None;
    for (z, cond) in batch {
        let eps = gaussian(rng, z.shape());
        let t = rng.uniform();
        let zt = interpolate(z, &eps, t)?;
        let pred = field.velocity_on(tape, &tape.constant(zt), &tape.constant(cond.detached()), t)?;
        let target = tape.constant(target_velocity(z, &eps)?);
        let l = loss_projection_var(&pred, &target, Reduction::Mean)?;
        total = Some(match total {
            Some(acc) => acc.add(&l),
            None => l,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / batch.len() as f64))
}

pub fn cfm_loss(field: &dyn VelocityField, batch: &[(Tensor, Tensor)], rng: &mut Rng) -> Result<f64> {
    let tape = Tape::new();
    Ok(cfm_loss_var(&tape, field, batch, rng)?.item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub net: VelocityNetConfig,
    pub iterations: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Size of the fixed batch the recorded evaluation loss is measured on.
    pub eval_batch: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            net: VelocityNetConfig::default(),
            iterations: 2000,
            batch: 16,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            seed: 0,
            eval_batch: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedGenerator {
    pub net: VelocityNet,
    pub records: Vec<GeneratorRecord>,
    /// Flow-matching loss on the fixed evaluation batch before and after.
    pub initial_eval: f64,
    pub final_eval: f64,
}

const STREAM_GEN_INIT: u64 = 100;
const STREAM_GEN_DATA: u64 = 101;
const STREAM_GEN_EVAL: u64 = 102;

fn eval_loss(net: &VelocityNet, batch: &[(Tensor, Tensor)], seed: u64) -> Result<f64> {
    cfm_loss(net, batch, &mut Rng::new(seed, STREAM_GEN_EVAL + 1))
}

/// Fits a [`VelocityNet`] to the world's conditional latent distributions
/// with AdamW. The returned net is frozen.
pub fn train_generator(world: &ToyWorld, config: &GeneratorConfig) -> Result<TrainedGenerator> {
    if config.batch == 0 {
        return Err(Error::config("batch", "must be positive"));
    }
    let [n, d] = world.latent_shape();
    let mut net = VelocityNet::new(&mut Rng::new(config.seed, STREAM_GEN_INIT), n, d, world.spec.cond_dim, config.net);
    let mut eval_rng = Rng::new(config.seed, STREAM_GEN_EVAL);
    let eval_set: Vec<(Tensor, Tensor)> = (0..config.eval_batch.max(1))
        .map(|_| {
            let s = world.sample_any(&mut eval_rng);
            (s.z_xi, s.cond_xi)
        })
        .collect();
    let initial_eval = eval_loss(&net, &eval_set, config.seed)?;

    let mut opt = AdamWState::new(config.optimizer);
    let mut rng = Rng::new(config.seed, STREAM_GEN_DATA);
    let mut records = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch: Vec<(Tensor, Tensor)> = (0..config.batch)
            .map(|_| {
                let s = world.sample_any(&mut rng);
                (s.z_xi, s.cond_xi)
            })
            .collect();
        let tape = Tape::new();
        let loss = cfm_loss_var(&tape, &net, &batch, &mut rng)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration,
                what: format!("flow-matching loss is {value}"),
            });
        }
        let grads = tape.backward(&loss)?;
        collect_grads(&grads, &mut net)?;
        apply_step(&mut opt, &mut net)?;
        records.push(GeneratorRecord { iteration, loss: value });
    }
    let final_eval = eval_loss(&net, &eval_set, config.seed)?;
    net.set_trainable(false);
    Ok(TrainedGenerator {
        net,
        records,
        initial_eval,
        final_eval,
    })
}

/// Mean of the terminal latents over `count` generations.
pub fn mean_terminal(
    field: &dyn VelocityField,
    cond: &Tensor,
    t_bar: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|_| Ok(euler_generate(field, cond, t_bar, TimeInput::Normalized, rng)?.pop().expect("t_bar + 1 states").latent))
        .collect()
}
