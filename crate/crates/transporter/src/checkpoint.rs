//! Conversions between trained models and [`Container`]s.
//!
//! Network architectures are rebuilt from the configuration stored in the
//! metadata and then filled from the tensor table. Each container also keeps
//! the world spec it was trained against; loading against another world is an
//! error.

use anyhow::{bail, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use transporter_core::concept::{ConceptBank, ConceptVector};
use transporter_core::coupling::{CouplingCheckpoint, CouplingConfig, CouplingModel};
use transporter_core::flow::{GeneratorConfig, VelocityNet};
use transporter_core::nn::Module;
use transporter_core::optim::{AdamWConfig, AdamWState};
use transporter_core::toyworld::{ToyWorld, WorldSpec};
use transporter_core::{Rng, Tensor};

use crate::container::Container;

pub const COUPLING_KIND: &str = "coupling";
pub const GENERATOR_KIND: &str = "generator";
pub const BANK_KIND: &str = "concept_bank";

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serialises")
}

fn from_meta<T: DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    serde_json::from_str(c.meta(key)?).with_context(|| format!("metadata `{key}` is malformed"))
}

fn stamp_world(c: &mut Container, spec: &WorldSpec) {
    c.set_meta("world", json(spec));
}

fn check_world(c: &Container, world: &ToyWorld) -> Result<()> {
    let stored: WorldSpec = from_meta(c, "world")?;
    ensure!(
        stored == world.spec,
        "{} checkpoint was trained on a different world spec than the configured one",
        c.kind
    );
    Ok(())
}

fn push_params<M: Module>(c: &mut Container, prefix: &str, m: &M) -> Result<()> {
    for (name, t) in m.named_params() {
        c.push(&format!("{prefix}.{name}"), t)?;
    }
    Ok(())
}

fn load_params<M: Module>(c: &Container, prefix: &str, m: &mut M) -> Result<()> {
    let table: Vec<(String, Tensor)> = c
        .tensors()
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')).map(|r| (r.to_string(), t.clone())))
        .collect();
    ensure!(
        table.len() == m.named_params().len(),
        "`{prefix}` holds {} tensors, the architecture expects {}",
        table.len(),
        m.named_params().len()
    );
    m.load_params(&table)?;
    Ok(())
}

fn push_adam(c: &mut Container, name: &str, s: &AdamWState) -> Result<()> {
    c.set_meta(&format!("opt.{name}.config"), json(&s.config));
    c.set_meta(&format!("opt.{name}.step"), s.step.to_string());
    c.set_meta(&format!("opt.{name}.slots"), s.first.len().to_string());
    for (i, (m, v)) in s.first.iter().zip(&s.second).enumerate() {
        c.push(&format!("opt.{name}.first.{i}"), &Tensor::vector(m.clone()))?;
        c.push(&format!("opt.{name}.second.{i}"), &Tensor::vector(v.clone()))?;
    }
    Ok(())
}

fn load_adam(c: &Container, name: &str) -> Result<AdamWState> {
    let config: AdamWConfig = from_meta(c, &format!("opt.{name}.config"))?;
    let mut s = AdamWState::new(config);
    s.step = c.meta(&format!("opt.{name}.step"))?.parse().context("optimizer step")?;
    let slots: usize = c.meta(&format!("opt.{name}.slots"))?.parse().context("optimizer slots")?;
    for i in 0..slots {
        s.first.push(c.get(&format!("opt.{name}.first.{i}"))?.data().to_vec());
        s.second.push(c.get(&format!("opt.{name}.second.{i}"))?.data().to_vec());
    }
    Ok(s)
}

/// Coupling model, optimiser moments and training position.
pub fn coupling_to_container(ckpt: &CouplingCheckpoint, config: &CouplingConfig, spec: &WorldSpec) -> Result<Container> {
    let mut c = Container::new(COUPLING_KIND);
    stamp_world(&mut c, spec);
    c.set_meta("config", json(config));
    c.set_meta("iteration", ckpt.iteration.to_string());
    c.set_meta("fingerprint", format!("{:016x}", ckpt.fingerprint));
    push_params(&mut c, "model", &ckpt.model)?;
    push_adam(&mut c, "projector", &ckpt.projector_opt)?;
    push_adam(&mut c, "structure", &ckpt.structure_opt)?;
    push_adam(&mut c, "bank", &ckpt.bank_opt)?;
    Ok(c)
}

pub fn coupling_from_container(c: &Container, world: &ToyWorld) -> Result<(CouplingCheckpoint, CouplingConfig)> {
    c.expect_kind(COUPLING_KIND)?;
    check_world(c, world)?;
    let config: CouplingConfig = from_meta(c, "config")?;
    let mut model = CouplingModel::new(world, &config)?;
    load_params(c, "model", &mut model)?;
    let fingerprint = u64::from_str_radix(c.meta("fingerprint")?, 16).context("fingerprint")?;
    let ckpt = CouplingCheckpoint {
        model,
        projector_opt: load_adam(c, "projector")?,
        structure_opt: load_adam(c, "structure")?,
        bank_opt: load_adam(c, "bank")?,
        iteration: c.meta("iteration")?.parse().context("iteration")?,
        fingerprint,
    };
    Ok((ckpt, config))
}

pub fn generator_to_container(net: &VelocityNet, config: &GeneratorConfig, spec: &WorldSpec) -> Result<Container> {
    let mut c = Container::new(GENERATOR_KIND);
    stamp_world(&mut c, spec);
    c.set_meta("config", json(config));
    push_params(&mut c, "net", net)?;
    Ok(c)
}

pub fn generator_from_container(c: &Container, world: &ToyWorld) -> Result<(VelocityNet, GeneratorConfig)> {
    c.expect_kind(GENERATOR_KIND)?;
    check_world(c, world)?;
    let config: GeneratorConfig = from_meta(c, "config")?;
    let [n, d] = world.latent_shape();
    // Values are overwritten below; the rng only shapes the throwaway init.
    let mut net = VelocityNet::new(&mut Rng::new(0, 0), n, d, world.spec.cond_dim, config.net);
    load_params(c, "net", &mut net)?;
    net.set_trainable(false);
    Ok((net, config))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BankEntry {
    source: String,
    target: String,
    seeds: Vec<u64>,
}

/// Concept vectors keyed by `(source, target)`; entry `i` is tensor
/// `concept.i`.
pub fn bank_to_container(bank: &ConceptBank, spec: &WorldSpec) -> Result<Container> {
    let mut c = Container::new(BANK_KIND);
    stamp_world(&mut c, spec);
    let mut entries = Vec::new();
    for (i, v) in bank.iter().enumerate() {
        entries.push(BankEntry {
            source: v.source.clone(),
            target: v.target.clone(),
            seeds: v.seeds.clone(),
        });
        c.push(&format!("concept.{i}"), &v.q)?;
    }
    c.set_meta("pairs", json(&entries));
    Ok(c)
}

pub fn bank_from_container(c: &Container, world: &ToyWorld) -> Result<ConceptBank> {
    c.expect_kind(BANK_KIND)?;
    check_world(c, world)?;
    let entries: Vec<BankEntry> = from_meta(c, "pairs")?;
    let mut bank = ConceptBank::new();
    for (i, e) in entries.into_iter().enumerate() {
        let v = ConceptVector {
            q: c.get(&format!("concept.{i}"))?.clone(),
            source: e.source,
            target: e.target,
            seeds: e.seeds,
        };
        v.validate(world.spec.cond_dim)?;
        if bank.get(&v.source, &v.target).is_ok() {
            bail!("bank lists ({}, {}) twice", v.source, v.target);
        }
        bank.insert(v);
    }
    Ok(bank)
}
