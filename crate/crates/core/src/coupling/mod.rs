//! Carrying generator latents into the semantic embedding space.
//!
//! The projector maps `(z_xi, condition)` straight to `z_omega` and is fitted
//! with squared error. The structure network re-processes a noisy
//! decode-and-re-encode estimate and is fitted with a Gram-matrix loss, so it
//! only has to get token-to-token relations right. The projection bank of the
//! sliced transport is fitted so that transporting the projector output
//! towards the structure output reproduces the ground truth.

pub mod loss;
pub mod nets;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{apply_step, collect_grads, Module};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::{gaussian, Rng};
use crate::sliced_ot::{rho_ot_forward, rho_ot_forward_var, rho_ot_loss_var, OtConfig, ProjectionBank};
use crate::tensor::Tensor;
use crate::toyworld::ToyWorld;

use self::loss::{loss_projection, loss_projection_var, loss_structure_var, Reduction};
use self::nets::{ProjectorConfig, ProjectorNet, StructureConfig, StructureNet};

/// Ground-truth map plus Gaussian noise of standard deviation `noise_scale`.
pub fn decode_reencode_baseline(world: &ToyWorld, z_xi: &Tensor, rng: &mut Rng, noise_scale: f64) -> Tensor {
    let clean = world.map_to_omega(z_xi);
    if noise_scale == 0.0 {
        return clean;
    }
    let noise = gaussian(rng, clean.shape()).scale(noise_scale);
    clean.add(&noise).expect("same shape")
}

/// What the structure network reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureInput {
    /// The noisy decode-and-re-encode estimate.
    #[default]
    DecodeReencode,
    /// The projector's (detached) output.
    ProjectorOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingConfig {
    pub projector: ProjectorConfig,
    pub structure: StructureConfig,
    pub ot: OtConfig,
    pub optimizer: AdamWConfig,
    /// Learning rate of the projection bank; the nets use `optimizer.lr`.
    pub bank_lr: f64,
    pub batch: usize,
    /// Micro-batches per optimiser step.
    pub accumulation: usize,
    /// Optimiser steps.
    pub iterations: usize,
    /// Iterations before the transport loss is switched on.
    pub warmup: usize,
    pub structure_input: StructureInput,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        CouplingConfig {
            projector: ProjectorConfig::default(),
            structure: StructureConfig::default(),
            ot: OtConfig::default(),
            optimizer: AdamWConfig::default(),
            bank_lr: 1e-3,
            batch: 8,
            accumulation: 8,
            iterations: 2000,
            warmup: 200,
            structure_input: StructureInput::DecodeReencode,
            reduction: Reduction::Mean,
            seed: 0,
        }
    }
}

impl CouplingConfig {
    pub fn validate(&self) -> Result<()> {
        self.ot.validate()?;
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.accumulation == 0 {
            return Err(Error::config("accumulation", "must be positive"));
        }
        if self.projector.hidden == 0 || self.projector.token_hidden == 0 {
            return Err(Error::config("projector", "widths must be positive"));
        }
        if self.structure.attention == 0 || self.structure.mlp_hidden == 0 {
            return Err(Error::config("structure", "widths must be positive"));
        }
        if !(self.optimizer.lr > 0.0) || !(self.bank_lr > 0.0) {
            return Err(Error::config("lr", "learning rates must be positive"));
        }
        Ok(())
    }

    /// FNV-1a over the debug rendering; stable for a given build.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(format!("{self:?}").as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The three trained pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingModel {
    pub projector: ProjectorNet,
    pub structure: StructureNet,
    pub bank: ProjectionBank,
    pub structure_input: StructureInput,
}

impl CouplingModel {
    pub fn new(world: &ToyWorld, config: &CouplingConfig) -> Result<Self> {
        config.validate()?;
        let s = &world.spec;
        let mut rng = Rng::new(config.seed, STREAM_INIT);
        Ok(CouplingModel {
            projector: ProjectorNet::new(&mut rng, s.tokens, s.xi_dim, s.cond_dim, s.omega_dim, &config.projector),
            structure: StructureNet::new(&mut rng, s.omega_dim, &config.structure),
            bank: ProjectionBank::new(&mut rng, s.omega_dim, config.ot)?,
            structure_input: config.structure_input,
        })
    }
}

impl Module for CouplingModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.projector.named_params();
        v.extend(self.structure.named_params());
        v.extend(self.bank.named_params());
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.projector.named_params_mut();
        v.extend(self.structure.named_params_mut());
        v.extend(self.bank.named_params_mut());
        v
    }
}

/// Model plus everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingCheckpoint {
    pub model: CouplingModel,
    pub projector_opt: AdamWState,
    pub structure_opt: AdamWState,
    pub bank_opt: AdamWState,
    pub iteration: usize,
    pub fingerprint: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss_mse: f64,
    pub loss_gram: f64,
    /// Absent during warm-up.
    pub loss_rho_ot: Option<f64>,
}

/// A training example with the structure-net input already drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSample {
    pub z_xi: Tensor,
    pub cond_xi: Tensor,
    pub z_omega: Tensor,
    /// Noisy decode-and-re-encode estimate.
    pub reencoded: Tensor,
}

impl CouplingSample {
    pub fn draw(world: &ToyWorld, rng: &mut Rng) -> Self {
        let s = world.sample_any(rng);
        let reencoded = decode_reencode_baseline(world, &s.z_xi, rng, world.spec.noise_scale);
        CouplingSample {
            z_xi: s.z_xi,
            cond_xi: s.cond_xi,
            z_omega: s.z_omega,
            reencoded,
        }
    }
}

/// Per-term losses of one batch on a tape, each averaged over the batch.
pub struct BatchLosses {
    pub mse: Var,
    pub gram: Var,
    pub rho_ot: Option<Var>,
}

impl BatchLosses {
    pub fn total(&self) -> Var {
        let base = self.mse.add(&self.gram);
        match &self.rho_ot {
            Some(r) => base.add(r),
            None => base,
        }
    }
}

fn structure_input_var(model: &CouplingModel, tape: &Tape, s: &CouplingSample, z1: &Var) -> Var {
    match model.structure_input {
        StructureInput::DecodeReencode => tape.constant(s.reencoded.clone()),
        StructureInput::ProjectorOutput => z1.detach(),
    }
}

/// Records the three losses over `batch`. The transport loss sees detached
/// net outputs, so only the bank learns from it.
pub fn batch_losses(
    tape: &Tape,
    model: &CouplingModel,
    batch: &[CouplingSample],
    with_transport: bool,
    reduction: Reduction,
) -> Result<BatchLosses> {
    if batch.is_empty() {
        return Err(Error::Contract("empty coupling batch".into()));
    }
    let mut mse = Vec::with_capacity(batch.len());
    let mut gram = Vec::with_capacity(batch.len());
    let mut rho = Vec::new();
    for s in batch {
        let z1 = model.projector.forward_on(tape, &tape.constant(s.z_xi.clone()), &tape.constant(s.cond_xi.clone()))?;
        let z2 = model.structure.forward_on(tape, &structure_input_var(model, tape, s, &z1))?;
        let target = tape.constant(s.z_omega.clone());
        mse.push(loss_projection_var(&z1, &target, reduction)?);
        gram.push(loss_structure_var(&z2, &target, reduction)?);
        if with_transport {
            let (zt, _) = rho_ot_forward_var(tape, &z1.detach(), &z2.detach(), &model.bank)?;
            rho.push(rho_ot_loss_var(&zt, &target, reduction)?);
        }
    }
    let k = 1.0 / batch.len() as f64;
    let avg = |v: Vec<Var>| v.into_iter().reduce(|a, b| a.add(&b)).expect("non-empty").scale(k);
    Ok(BatchLosses {
        mse: avg(mse),
        gram: avg(gram),
        rho_ot: if with_transport { Some(avg(rho)) } else { None },
    })
}

const STREAM_INIT: u64 = 200;
const STREAM_DATA: u64 = 201;

/// Freshly initialised checkpoint (iteration 0).
pub fn init_checkpoint(world: &ToyWorld, config: &CouplingConfig) -> Result<CouplingCheckpoint> {
    let model = CouplingModel::new(world, config)?;
    Ok(CouplingCheckpoint {
        model,
        projector_opt: AdamWState::new(config.optimizer),
        structure_opt: AdamWState::new(config.optimizer),
        bank_opt: AdamWState::new(AdamWConfig {
            lr: config.bank_lr,
            ..config.optimizer
        }),
        iteration: 0,
        fingerprint: config.fingerprint(),
    })
}

/// Trains all three pieces on fresh world samples. Each iteration
/// accumulates `accumulation` micro-batches of `batch` samples and then takes
/// one optimiser step per piece; the recorded losses are the micro-batch
/// averages.
pub fn train_coupling(world: &ToyWorld, config: &CouplingConfig) -> Result<(CouplingCheckpoint, Vec<LossRecord>)> {
    let mut ckpt = init_checkpoint(world, config)?;
    let mut rng = Rng::new(config.seed, STREAM_DATA);
    let mut records = Vec::with_capacity(config.iterations);
    let inv_accum = 1.0 / config.accumulation as f64;
    for iteration in 0..config.iterations {
        let with_transport = iteration >= config.warmup;
        let mut record = LossRecord {
            iteration,
            loss_mse: 0.0,
            loss_gram: 0.0,
            loss_rho_ot: with_transport.then_some(0.0),
        };
        for _ in 0..config.accumulation {
            let batch: Vec<CouplingSample> = (0..config.batch).map(|_| CouplingSample::draw(world, &mut rng)).collect();
            let tape = Tape::new();
            let losses = batch_losses(&tape, &ckpt.model, &batch, with_transport, config.reduction)?;
            let total = losses.total();
            if !total.item().is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    what: format!(
                        "mse {} gram {} transport {:?}",
                        losses.mse.item(),
                        losses.gram.item(),
                        losses.rho_ot.as_ref().map(Var::item)
                    ),
                });
            }
            record.loss_mse += losses.mse.item() * inv_accum;
            record.loss_gram += losses.gram.item() * inv_accum;
            if let (Some(acc), Some(r)) = (record.loss_rho_ot.as_mut(), losses.rho_ot.as_ref()) {
                *acc += r.item() * inv_accum;
            }
            let grads = tape.backward(&total.scale(inv_accum))?;
            collect_grads(&grads, &mut ckpt.model)?;
        }
        apply_step(&mut ckpt.projector_opt, &mut ckpt.model.projector)?;
        apply_step(&mut ckpt.structure_opt, &mut ckpt.model.structure)?;
        if with_transport {
            apply_step(&mut ckpt.bank_opt, &mut ckpt.model.bank)?;
        }
        records.push(record);
        ckpt.iteration = iteration + 1;
    }
    Ok((ckpt, records))
}

/// Which output the coupling produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoupleVariant {
    #[default]
    Full,
    Phi1Only,
    Phi2Only,
    Mean,
    InferenceOnly,
}

impl CoupleVariant {
    pub const ALL: [CoupleVariant; 5] = [
        CoupleVariant::InferenceOnly,
        CoupleVariant::Phi1Only,
        CoupleVariant::Phi2Only,
        CoupleVariant::Mean,
        CoupleVariant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CoupleVariant::Full => "full",
            CoupleVariant::Phi1Only => "phi1_only",
            CoupleVariant::Phi2Only => "phi2_only",
            CoupleVariant::Mean => "mean",
            CoupleVariant::InferenceOnly => "inference_only",
        }
    }
}

impl core::str::FromStr for CoupleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CoupleVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown coupling variant `{s}`")))
    }
}

/// Maps a generator latent into the semantic space. `rng` supplies the
/// decode-and-re-encode noise for the variants that use it.
pub fn couple(
    world: &ToyWorld,
    model: &CouplingModel,
    z_xi: &Tensor,
    cond_xi: &Tensor,
    variant: CoupleVariant,
    rng: &mut Rng,
) -> Result<Tensor> {
    let reencode = |rng: &mut Rng| decode_reencode_baseline(world, z_xi, rng, world.spec.noise_scale);
    let structure_out = |rng: &mut Rng, z1: &Tensor| match model.structure_input {
        StructureInput::DecodeReencode => model.structure.forward(&reencode(rng)),
        StructureInput::ProjectorOutput => model.structure.forward(z1),
    };
    match variant {
        CoupleVariant::InferenceOnly => Ok(reencode(rng)),
        CoupleVariant::Phi1Only => model.projector.forward(z_xi, cond_xi),
        CoupleVariant::Phi2Only => model.structure.forward(&reencode(rng)),
        CoupleVariant::Mean => {
            let z1 = model.projector.forward(z_xi, cond_xi)?;
            let z2 = structure_out(rng, &z1)?;
            Ok(mean_of(&z1, &z2))
        }
        CoupleVariant::Full => {
            let z1 = model.projector.forward(z_xi, cond_xi)?;
            let z2 = structure_out(rng, &z1)?;
            Ok(rho_ot_forward(&z1, &z2, &model.bank)?.0)
        }
    }
}

/// `(a + b) / 2`.
pub fn mean_of(a: &Tensor, b: &Tensor) -> Tensor {
    a.add(b).expect("same shape").scale(0.5)
}

/// Projector squared error on held-out samples (mean reduction).
pub fn heldout_projection_loss(model: &CouplingModel, samples: &[CouplingSample]) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        acc += loss_projection(&model.projector.forward(&s.z_xi, &s.cond_xi)?, &s.z_omega, Reduction::Mean)?;
    }
    Ok(acc / samples.len().max(1) as f64)
}

/// Mean per-sample cosine between a variant's output and the ground truth.
pub fn heldout_cosine(
    world: &ToyWorld,
    model: &CouplingModel,
    samples: &[CouplingSample],
    variant: CoupleVariant,
    rng: &mut Rng,
) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let out = couple(world, model, &s.z_xi, &s.cond_xi, variant, rng)?;
        acc += out.dot(&s.z_omega)? / (out.norm() * s.z_omega.norm()).max(f64::MIN_POSITIVE);
    }
    Ok(acc / samples.len().max(1) as f64)
}
