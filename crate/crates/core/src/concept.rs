//! Logit divergences and concept vectors.
//!
//! A concept vector `q` lives in the generator's condition space. Generating
//! under `cond_minus + delta * q` should move the velocity field the same way
//! as swapping `cond_minus` for `cond_plus`, scaled by `delta`. Training
//! fits `q` against a frozen generator; `delta` during training is the
//! seed-averaged Hellinger divergence between the toy VLM's two-slot logits
//! for generations under the two conditions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::coupling::loss::{loss_projection_var, Reduction};
use crate::coupling::{couple, CoupleVariant, CouplingModel};
use crate::error::{Error, Result};
use crate::flow::{euler_from, FlowState, TimeInput, Trajectory, VelocityField};
use crate::math;
use crate::nn::Module;
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::{gaussian, Rng};
use crate::tensor::Tensor;
use crate::toyworld::ToyWorld;

/// Two-slot probability vector `[p_neg, p_pos]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitPair {
    neg: f64,
    pos: f64,
}

const PAIR_TOL: f64 = 1e-9;

impl LogitPair {
    pub fn new(neg: f64, pos: f64) -> Result<Self> {
        if !(neg >= 0.0 && pos >= 0.0) {
            return Err(Error::NumericDomain(format!("negative probability in [{neg}, {pos}]")));
        }
        if (neg + pos - 1.0).abs() > PAIR_TOL {
            return Err(Error::NumericDomain(format!("[{neg}, {pos}] does not sum to 1")));
        }
        Ok(LogitPair { neg, pos })
    }

    /// Softmax over two raw scores.
    pub fn from_scores(neg: f64, pos: f64) -> Self {
        let m = neg.max(pos);
        let (a, b) = (math::exp(neg - m), math::exp(pos - m));
        LogitPair {
            neg: a / (a + b),
            pos: b / (a + b),
        }
    }

    pub fn neg(&self) -> f64 {
        self.neg
    }

    pub fn pos(&self) -> f64 {
        self.pos
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.neg, self.pos]
    }
}

/// Hellinger distance, in `[0, 1]`.
pub fn hellinger(p: &LogitPair, q: &LogitPair) -> f64 {
    let a = math::sqrt(p.neg) - math::sqrt(q.neg);
    let b = math::sqrt(p.pos) - math::sqrt(q.pos);
    math::sqrt(a * a + b * b) / core::f64::consts::SQRT_2
}

/// Hellinger distance on raw components, rejecting negative entries.
pub fn hellinger_raw(p: [f64; 2], q: [f64; 2]) -> Result<f64> {
    Ok(hellinger(&LogitPair::new(p[0], p[1])?, &LogitPair::new(q[0], q[1])?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    #[default]
    Hellinger,
    Kl,
    Js,
}

impl core::str::FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hellinger" => Ok(Divergence::Hellinger),
            "kl" => Ok(Divergence::Kl),
            "js" => Ok(Divergence::Js),
            other => Err(Error::Unknown {
                kind: "divergence",
                name: other.into(),
            }),
        }
    }
}

/// A divergence value; KL can be infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceValue {
    Finite(f64),
    Infinite,
}

impl DivergenceValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            DivergenceValue::Finite(v) => Some(v),
            DivergenceValue::Infinite => None,
        }
    }

    /// The value, with `Infinite` mapped to `f64::INFINITY`.
    pub fn value(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

fn kl_terms(p: [f64; 2], q: [f64; 2]) -> DivergenceValue {
    let mut acc = 0.0;
    for (pi, qi) in p.into_iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return DivergenceValue::Infinite;
        }
        acc += pi * math::ln(pi / qi);
    }
    DivergenceValue::Finite(acc)
}

/// Raw Jensen-Shannon divergence in nats, at most `ln 2`.
pub fn js_nats(p: &LogitPair, q: &LogitPair) -> f64 {
    let (p, q) = (p.as_array(), q.as_array());
    let m = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
    0.5 * kl_terms(p, m).value() + 0.5 * kl_terms(q, m).value()
}

/// Hellinger, KL(p || q), or Jensen-Shannon divided by `ln 2`.
pub fn divergence_variant(p: &LogitPair, q: &LogitPair, kind: Divergence) -> DivergenceValue {
    match kind {
        Divergence::Hellinger => DivergenceValue::Finite(hellinger(p, q)),
        Divergence::Kl => kl_terms(p.as_array(), q.as_array()),
        Divergence::Js => DivergenceValue::Finite(js_nats(p, q) / core::f64::consts::LN_2),
    }
}

/// A learned shift in condition space for one `(source, target)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVector {
    pub q: Tensor,
    pub source: String,
    pub target: String,
    pub seeds: Vec<u64>,
}

impl ConceptVector {
    pub fn zeros(dim: usize, source: &str, target: &str) -> Self {
        ConceptVector {
            q: Tensor::zeros(&[dim]),
            source: source.to_string(),
            target: target.to_string(),
            seeds: Vec::new(),
        }
    }

    pub fn validate(&self, cond_dim: usize) -> Result<()> {
        if self.q.shape() != [cond_dim] {
            return Err(Error::shape("concept vector", &[cond_dim], self.q.shape()));
        }
        if !self.q.is_finite() {
            return Err(Error::NumericDomain(format!(
                "concept vector ({}, {}) has non-finite entries",
                self.source, self.target
            )));
        }
        Ok(())
    }
}

/// Concept vectors keyed by `(source label, target label)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConceptBank {
    entries: BTreeMap<(String, String), ConceptVector>,
}

impl ConceptBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, v: ConceptVector) {
        self.entries.insert((v.source.clone(), v.target.clone()), v);
    }

    pub fn get(&self, source: &str, target: &str) -> Result<&ConceptVector> {
        self.entries.get(&(source.to_string(), target.to_string())).ok_or_else(|| Error::Unknown {
            kind: "concept pair",
            name: format!("({source}, {target}); available: {}", self.describe_pairs()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConceptVector> {
        self.entries.values()
    }

    fn describe_pairs(&self) -> String {
        if self.entries.is_empty() {
            return "none".into();
        }
        self.entries.keys().map(|(a, b)| format!("({a}, {b})")).collect::<Vec<_>>().join(", ")
    }
}

/// `cond_minus + sum_i delta_i q_i`.
pub fn compose_condition(cond_minus: &Tensor, shifts: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut out = cond_minus.detached();
    for (delta, q) in shifts {
        if *delta != 0.0 {
            out = out.add(&q.scale(*delta))?;
        }
    }
    Ok(out)
}

/// The pieces of one concept-loss evaluation, kept for inspection.
pub struct ConceptLoss {
    pub loss: Var,
    /// The target before the stop-gradient.
    pub target_raw: Var,
    /// The shifted condition the prediction was made under.
    pub shifted: Var,
}

/// Records `|sg(G(z, c-, t) + delta (G(z, c+, t) - G(z, c-, t))) - G(z, c- + delta q, t)|^2`
/// (mean over entries). `q` must already be on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn concept_loss_on(
    tape: &Tape,
    field: &dyn VelocityField,
    q: &Var,
    z_t: &Tensor,
    cond_minus: &Tensor,
    cond_plus: &Tensor,
    t: f64,
    delta: f64,
) -> Result<ConceptLoss> {
    let z = tape.constant(z_t.detached());
    let cm = tape.constant(cond_minus.detached());
    let cp = tape.constant(cond_plus.detached());
    let v_minus = field.velocity_on(tape, &z, &cm, t)?;
    let v_plus = field.velocity_on(tape, &z, &cp, t)?;
    let target_raw = v_minus.add(&v_plus.sub(&v_minus).scale(delta));
    let shifted = cm.try_add(&q.scale(delta))?;
    let pred = field.velocity_on(tape, &z, &shifted, t)?;
    let loss = loss_projection_var(&pred, &target_raw.detach(), Reduction::Mean)?;
    Ok(ConceptLoss {
        loss,
        target_raw,
        shifted,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn concept_loss(
    field: &dyn VelocityField,
    q: &Tensor,
    z_t: &Tensor,
    cond_minus: &Tensor,
    cond_plus: &Tensor,
    t: f64,
    delta: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let qv = tape.constant(q.detached());
    Ok(concept_loss_on(&tape, field, &qv, z_t, cond_minus, cond_plus, t, delta)?.loss.item())
}

/// Sampling settings shared by divergence measurement, training and
/// steering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerSettings {
    pub t_bar: usize,
    pub time_input: TimeInput,
    pub variant: CoupleVariant,
}

impl Default for SteerSettings {
    fn default() -> Self {
        SteerSettings {
            t_bar: 16,
            time_input: TimeInput::Normalized,
            variant: CoupleVariant::Full,
        }
    }
}

/// The frozen pieces a concept is measured and trained against.
pub struct Frozen<'a> {
    pub world: &'a ToyWorld,
    pub generator: &'a dyn VelocityField,
    pub coupling: &'a CouplingModel,
    pub settings: SteerSettings,
}

const STREAM_PRIOR: u64 = 300;
const STREAM_COUPLE: u64 = 301;
const STREAM_TRAIN: u64 = 302;

/// The prior draw used for `seed` everywhere in this module.
pub fn prior_for_seed(world: &ToyWorld, seed: u64) -> Tensor {
    gaussian(&mut Rng::new(seed, STREAM_PRIOR), &world.latent_shape())
}

impl Frozen<'_> {
    /// Euler trajectory from the seed's prior under `cond` (optionally only on
    /// the masked steps; unmasked steps use `fallback`).
    pub fn trajectory(&self, seed: u64, cond: &Tensor, fallback: Option<(&Tensor, &[bool])>) -> Result<Trajectory> {
        let eps = prior_for_seed(self.world, seed);
        let s = self.settings;
        match fallback {
            None => euler_from(self.generator, &eps, s.t_bar, s.time_input, &|_| cond.clone()),
            Some((base, mask)) => {
                if mask.len() != s.t_bar {
                    return Err(Error::shape("step mask", &[s.t_bar], &[mask.len()]));
                }
                euler_from(self.generator, &eps, s.t_bar, s.time_input, &|step| {
                    if mask[step - 1] {
                        cond.clone()
                    } else {
                        base.clone()
                    }
                })
            }
        }
    }

    /// Couples a terminal latent and reads the two-slot logits.
    pub fn logits(&self, seed: u64, terminal: &Tensor, cond: &Tensor, slots: (usize, usize)) -> Result<LogitPair> {
        let mut rng = Rng::new(seed, STREAM_COUPLE);
        let z_omega = couple(self.world, self.coupling, terminal, cond, self.settings.variant, &mut rng)?;
        self.world.vlm.toy_logits(&z_omega, slots)
    }

    fn slots(&self, source: &str, target: &str) -> Result<(usize, usize)> {
        Ok((self.world.condition_index(source)?, self.world.condition_index(target)?))
    }

    /// Identical labels query the source slot against the furthest
    /// condition's slot, since the head needs two distinct slots.
    fn query_slots(&self, (a, b): (usize, usize)) -> (usize, usize) {
        if a == b {
            (a, self.world.farthest_condition(a))
        } else {
            (a, b)
        }
    }
}

/// Mean over seeds of the Hellinger distance between the logits of
/// generations under `source` and under `target` (same prior per seed).
pub fn measure_delta_omega(frozen: &Frozen<'_>, source: &str, target: &str, seeds: &[u64]) -> Result<f64> {
    measure_divergence(frozen, source, target, seeds, Divergence::Hellinger)
}

/// [`measure_delta_omega`] under another divergence. An infinite KL term is
/// a domain error.
pub fn measure_divergence(
    frozen: &Frozen<'_>,
    source: &str,
    target: &str,
    seeds: &[u64],
    kind: Divergence,
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::Contract("no seeds to average over".into()));
    }
    let slots = frozen.slots(source, target)?;
    let (cm, cp) = (&frozen.world.cond_xi[slots.0], &frozen.world.cond_xi[slots.1]);
    let query = frozen.query_slots(slots);
    let mut acc = 0.0;
    for &seed in seeds {
        let zm = frozen.trajectory(seed, cm, None)?.pop().expect("terminal").latent;
        let zp = frozen.trajectory(seed, cp, None)?.pop().expect("terminal").latent;
        let pm = frozen.logits(seed, &zm, cm, query)?;
        let pp = frozen.logits(seed, &zp, cp, query)?;
        acc += divergence_variant(&pm, &pp, kind)
            .finite()
            .ok_or_else(|| Error::NumericDomain(format!("{kind:?} divergence is infinite for seed {seed}")))?;
    }
    Ok(acc / seeds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptConfig {
    pub iterations: usize,
    pub lr: f64,
    /// `(seed, step)` branch points per optimiser step.
    pub batch: usize,
    /// Seeds whose trajectories are retained and averaged over.
    pub seeds: Vec<u64>,
    pub seed: u64,
    /// How the target divergence `delta` is measured.
    pub divergence: Divergence,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        ConceptConfig {
            iterations: 1000,
            lr: 1e-2,
            batch: 8,
            seeds: (0..8).collect(),
            seed: 0,
            divergence: Divergence::Hellinger,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedConcept {
    pub vector: ConceptVector,
    /// The seed-averaged divergence used as `delta`.
    pub delta: f64,
    pub records: Vec<ConceptRecord>,
    /// Loss averaged over every retained `(seed, step)` before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct BranchPoint<'a> {
    state: &'a FlowState,
}

fn full_expectation(
    frozen: &Frozen<'_>,
    q: &Tensor,
    points: &[BranchPoint<'_>],
    cm: &Tensor,
    cp: &Tensor,
    delta: f64,
) -> Result<f64> {
    let s = frozen.settings;
    let mut acc = 0.0;
    for p in points {
        let t = s.time_input.at(p.state.t + 1, s.t_bar);
        acc += concept_loss(frozen.generator, q, &p.state.latent, cm, cp, t, delta)?;
    }
    Ok(acc / points.len() as f64)
}

/// Fits a concept vector for `(source, target)` against the frozen models.
pub fn train_concept(frozen: &Frozen<'_>, source: &str, target: &str, config: &ConceptConfig) -> Result<TrainedConcept> {
    if config.seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    if config.batch == 0 {
        return Err(Error::config("batch", "must be positive"));
    }
    let delta = measure_divergence(frozen, source, target, &config.seeds, config.divergence)?;
    if delta == 0.0 {
        return Err(Error::DegeneratePair {
            source_label: source.into(),
            target_label: target.into(),
        });
    }
    let slots = frozen.slots(source, target)?;
    let (cm, cp) = (&frozen.world.cond_xi[slots.0], &frozen.world.cond_xi[slots.1]);
    let trajectories: Vec<Trajectory> =
        config.seeds.iter().map(|&seed| frozen.trajectory(seed, cm, None)).collect::<Result<_>>()?;
    // Branch at the state feeding each Euler step.
    let points: Vec<BranchPoint<'_>> = trajectories
        .iter()
        .flat_map(|tr| tr[..tr.len() - 1].iter().map(|state| BranchPoint { state }))
        .collect();

    let mut vector = ConceptVector::zeros(frozen.generator.cond_dim(), source, target);
    vector.seeds = config.seeds.clone();
    vector.q.set_requires_grad(true);
    let initial_loss = full_expectation(frozen, &vector.q, &points, cm, cp, delta)?;

    let mut opt = AdamWState::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::with_lr(config.lr)
    });
    let mut rng = Rng::new(config.seed, STREAM_TRAIN);
    let s = frozen.settings;
    let mut records = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let tape = Tape::new();
        let qv = tape.param(&vector.q);
        let mut total: Option<Var> = None;
        for _ in 0..config.batch {
            let p = &points[rng.below(points.len())];
            let t = s.time_input.at(p.state.t + 1, s.t_bar);
            let l = concept_loss_on(&tape, frozen.generator, &qv, &p.state.latent, cm, cp, t, delta)?.loss;
            total = Some(match total {
                Some(acc) => acc.add(&l),
                None => l,
            });
        }
        let loss = total.expect("batch > 0").scale(1.0 / config.batch as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration,
                what: format!("concept loss is {value}"),
            });
        }
        let grads = tape.backward(&loss)?;
        grads.accumulate_into(&mut vector.q)?;
        let mut params = [(String::from("q"), &mut vector.q)];
        opt.step(&mut params)?;
        vector.q.zero_grad();
        records.push(ConceptRecord { iteration, loss: value });
    }
    vector.q.set_requires_grad(false);
    let final_loss = full_expectation(frozen, &vector.q, &points, cm, cp, delta)?;
    vector.validate(frozen.generator.cond_dim())?;
    Ok(TrainedConcept {
        vector,
        delta,
        records,
        initial_loss,
        final_loss,
    })
}

/// A trajectory under a shifted condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulated {
    pub states: Trajectory,
    /// Set when some `delta` lies outside `[0, 1]`.
    pub extrapolated: bool,
}

/// Euler generation under `cond_minus + sum delta_i q_i`, from the given
/// prior. With every `delta` zero the condition is `cond_minus` itself. A
/// step mask restricts the shift to the marked steps.
pub fn modulated_generate(
    field: &dyn VelocityField,
    cond_minus: &Tensor,
    shifts: &[(f64, &Tensor)],
    eps: &Tensor,
    t_bar: usize,
    time: TimeInput,
    mask: Option<&[bool]>,
) -> Result<Modulated> {
    let cond = compose_condition(cond_minus, shifts)?;
    if let Some(m) = mask {
        if m.len() != t_bar {
            return Err(Error::shape("step mask", &[t_bar], &[m.len()]));
        }
    }
    let states = euler_from(field, eps, t_bar, time, &|step| match mask {
        Some(m) if !m[step - 1] => cond_minus.clone(),
        _ => cond.clone(),
    })?;
    Ok(Modulated {
        states,
        extrapolated: shifts.iter().any(|(d, _)| !(0.0..=1.0).contains(d)),
    })
}

/// One cell of a steering sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub seed: u64,
    pub delta_omega: f64,
    pub terminal_mean: f64,
    pub terminal_norm: f64,
}

/// For every `(delta, seed)`: modulated generation, coupling, logits, and
/// the Hellinger distance to the `delta = 0` generation of the same seed.
/// Rows are ordered by delta, then seed.
pub fn steering_sweep(frozen: &Frozen<'_>, vector: &ConceptVector, deltas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    vector.validate(frozen.generator.cond_dim())?;
    let pair = frozen.slots(&vector.source, &vector.target)?;
    let cm = &frozen.world.cond_xi[pair.0];
    let slots = frozen.query_slots(pair);
    let s = frozen.settings;
    let mut baselines = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let eps = prior_for_seed(frozen.world, seed);
        let base = modulated_generate(frozen.generator, cm, &[], &eps, s.t_bar, s.time_input, None)?;
        let z = base.states.last().expect("terminal").latent.clone();
        baselines.push(frozen.logits(seed, &z, cm, slots)?);
    }
    let mut rows = Vec::with_capacity(deltas.len() * seeds.len());
    for &delta in deltas {
        for (k, &seed) in seeds.iter().enumerate() {
            let eps = prior_for_seed(frozen.world, seed);
            let shifts = [(delta, &vector.q)];
            let m = modulated_generate(frozen.generator, cm, &shifts, &eps, s.t_bar, s.time_input, None)?;
            let z = &m.states.last().expect("terminal").latent;
            let cond = compose_condition(cm, &shifts)?;
            let p = frozen.logits(seed, z, &cond, slots)?;
            rows.push(SweepRow {
                delta,
                seed,
                delta_omega: hellinger(&baselines[k], &p),
                terminal_mean: z.mean(),
                terminal_norm: z.norm(),
            });
        }
    }
    Ok(rows)
}

/// Seed-averaged divergence per delta, in the order the deltas first appear.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(d, _, _)| *d == r.delta) {
            Some(e) => {
                e.1 += r.delta_omega;
                e.2 += 1;
            }
            None => out.push((r.delta, r.delta_omega, 1)),
        }
    }
    out.into_iter().map(|(d, s, n)| (d, s / n as f64)).collect()
}

/// Parameter fingerprint of a frozen module.
pub fn module_digest<M: Module + ?Sized>(m: &M) -> u64 {
    let mut bytes = Vec::new();
    for (name, t) in m.named_params() {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::coupling::fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingConfig;
    use crate::flow::{LinearConditionField, VelocityNet, VelocityNetConfig};
    use crate::nn::collect_grads;
    use crate::oracle::{central_difference, relative_error};
    use crate::sliced_ot::OtConfig;
    use crate::toyworld::{make_world, WorldSpec};

    fn lp(a: f64) -> LogitPair {
        LogitPair::new(a, 1.0 - a).unwrap()
    }

    #[test]
    fn hellinger_examples() {
        assert_eq!(hellinger(&lp(0.5), &lp(0.5)), 0.0);
        assert!((hellinger(&lp(1.0), &lp(0.0)) - 1.0).abs() < 1e-15);
        // (1/sqrt2) sqrt((sqrt.9 - sqrt.4)^2 + (sqrt.1 - sqrt.6)^2)
        let d = hellinger(&lp(0.9), &lp(0.4));
        assert!((d - 0.3938).abs() < 1e-4, "{d}");
    }

    #[test]
    fn negative_component_is_domain_error() {
        assert!(matches!(hellinger_raw([-0.1, 1.1], [0.5, 0.5]), Err(Error::NumericDomain(_))));
        assert!(LogitPair::new(0.5, 0.6).is_err());
        assert!(LogitPair::new(0.5, 0.5 + 5e-10).is_ok());
    }

    #[test]
    fn hellinger_properties_on_random_pairs() {
        let mut rng = Rng::new(0, 0);
        for _ in 0..10_000 {
            let (p, q, r) = (lp(rng.uniform()), lp(rng.uniform()), lp(rng.uniform()));
            let d = hellinger(&p, &q);
            assert!((0.0..=1.0).contains(&d));
            assert_eq!(d, hellinger(&q, &p));
            assert_eq!(hellinger(&p, &p), 0.0);
            if p != q {
                assert!(d > 0.0);
            }
            assert!(hellinger(&p, &r) <= d + hellinger(&q, &r) + 1e-12);
        }
    }

    #[test]
    fn divergence_variant_examples() {
        for kind in [Divergence::Hellinger, Divergence::Kl, Divergence::Js] {
            assert_eq!(divergence_variant(&lp(0.3), &lp(0.3), kind).value(), 0.0);
        }
        let js = js_nats(&lp(1.0), &lp(0.0));
        assert!((js - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((divergence_variant(&lp(1.0), &lp(0.0), Divergence::Js).value() - 1.0).abs() < 1e-15);
        let kl = divergence_variant(&lp(0.9), &lp(0.5), Divergence::Kl).value();
        let direct = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl - direct).abs() < 1e-12);
        assert!((kl - 0.3681).abs() < 1e-4);
        assert_eq!(divergence_variant(&lp(0.5), &lp(1.0), Divergence::Kl), DivergenceValue::Infinite);
        assert_eq!("js".parse::<Divergence>().unwrap(), Divergence::Js);
        assert!("tv".parse::<Divergence>().is_err());
    }

    #[test]
    fn from_scores_is_shift_invariant() {
        let a = LogitPair::from_scores(1.0, 3.0);
        let b = LogitPair::from_scores(101.0, 103.0);
        assert!((a.pos() - b.pos()).abs() < 1e-15);
        assert!((a.neg() + a.pos() - 1.0).abs() < 1e-15);
    }

    fn linear_field(rng: &mut Rng) -> LinearConditionField {
        LinearConditionField {
            a: -0.5,
            b: gaussian(rng, &[3, 6]),
            tokens: 2,
            dim: 3,
        }
    }

    #[test]
    fn zero_delta_gives_zero_loss() {
        let mut rng = Rng::new(1, 0);
        let net = VelocityNet::new(&mut rng, 2, 3, 3, VelocityNetConfig::default());
        let z = gaussian(&mut rng, &[2, 3]);
        let (a, b, q) = (gaussian(&mut rng, &[3]), gaussian(&mut rng, &[3]), gaussian(&mut rng, &[3]));
        assert_eq!(concept_loss(&net, &q, &z, &a, &b, 0.4, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn linear_generator_recovers_condition_difference() {
        let mut rng = Rng::new(2, 0);
        let field = linear_field(&mut rng);
        let (cm, cp) = (gaussian(&mut rng, &[3]), gaussian(&mut rng, &[3]));
        let delta = 0.6;
        let mut q = Tensor::zeros(&[3]).with_requires_grad(true);
        let mut opt = AdamWState::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.05)
        });
        for _ in 0..3000 {
            let z = gaussian(&mut rng, &[2, 3]);
            let tape = Tape::new();
            let qv = tape.param(&q);
            let l = concept_loss_on(&tape, &field, &qv, &z, &cm, &cp, rng.uniform(), delta).unwrap().loss;
            tape.backward(&l).unwrap().accumulate_into(&mut q).unwrap();
            opt.step(&mut [(String::from("q"), &mut q)]).unwrap();
            q.zero_grad();
        }
        let expected = cp.sub(&cm).unwrap();
        assert!(q.detached().sub(&expected).unwrap().max_abs() < 1e-3, "{q:?} vs {expected:?}");
    }

    #[test]
    fn gradient_wrt_q_matches_finite_differences() {
        let mut rng = Rng::new(3, 0);
        let mut net = VelocityNet::new(&mut rng, 2, 3, 3, VelocityNetConfig { hidden: 8, time_frequencies: 2 });
        net.set_trainable(false);
        let z = gaussian(&mut rng, &[2, 3]);
        let (cm, cp) = (gaussian(&mut rng, &[3]), gaussian(&mut rng, &[3]));
        for _ in 0..5 {
            let q = gaussian(&mut rng, &[3]);
            let tape = Tape::new();
            let qv = tape.leaf(q.clone(), true);
            let l = concept_loss_on(&tape, &net, &qv, &z, &cm, &cp, 0.3, 0.7).unwrap().loss;
            let g = tape.backward(&l).unwrap();
            let f = |x: &Tensor| concept_loss(&net, x, &z, &cm, &cp, 0.3, 0.7).unwrap();
            assert!(relative_error(g.wrt(&qv).unwrap(), &central_difference(&f, &q, 1e-5)) <= 1e-4);
        }
    }

    #[test]
    fn gradient_reaches_only_q() {
        let mut rng = Rng::new(4, 0);
        let mut net = VelocityNet::new(&mut rng, 2, 3, 3, VelocityNetConfig::default());
        net.set_trainable(false);
        let z = gaussian(&mut rng, &[2, 3]);
        let (cm, cp) = (gaussian(&mut rng, &[3]), gaussian(&mut rng, &[3]));
        let tape = Tape::new();
        let qv = tape.leaf(Tensor::zeros(&[3]), true);
        let parts = concept_loss_on(&tape, &net, &qv, &z, &cm, &cp, 0.5, 0.8).unwrap();
        let g = tape.backward(&parts.loss).unwrap();
        assert!(g.wrt(&parts.target_raw).is_none());
        assert!(g.wrt(&parts.shifted).is_some());
        assert!(g.wrt(&qv).is_some());
        collect_grads(&g, &mut net).unwrap();
        assert!(net.named_params().iter().all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn modulation_identities() {
        let mut rng = Rng::new(5, 0);
        let net = VelocityNet::new(&mut rng, 2, 3, 3, VelocityNetConfig::default());
        let (cm, cp) = (gaussian(&mut rng, &[3]), gaussian(&mut rng, &[3]));
        let q = gaussian(&mut rng, &[3]);
        for seed in 0..4 {
            let eps = gaussian(&mut Rng::new(seed, 0), &[2, 3]);
            let plain = euler_from(&net, &eps, 8, TimeInput::Normalized, &|_| cm.clone()).unwrap();
            let m = modulated_generate(&net, &cm, &[(0.0, &q)], &eps, 8, TimeInput::Normalized, None).unwrap();
            assert_eq!(m.states, plain);
            assert!(!m.extrapolated);
        }

        let field = linear_field(&mut rng);
        let diff = cp.sub(&cm).unwrap();
        let eps = gaussian(&mut rng, &[2, 3]);
        let m = modulated_generate(&field, &cm, &[(1.0, &diff)], &eps, 8, TimeInput::Normalized, None).unwrap();
        let target = euler_from(&field, &eps, 8, TimeInput::Normalized, &|_| cp.clone()).unwrap();
        for (a, b) in m.states.iter().zip(&target) {
            assert!(a.latent.sub(&b.latent).unwrap().max_abs() < 1e-12);
        }

        assert!(modulated_generate(&field, &cm, &[(1.5, &diff)], &eps, 8, TimeInput::Normalized, None).unwrap().extrapolated);
        let off = [false; 8];
        let masked = modulated_generate(&field, &cm, &[(1.0, &diff)], &eps, 8, TimeInput::Normalized, Some(&off)).unwrap();
        let plain = euler_from(&field, &eps, 8, TimeInput::Normalized, &|_| cm.clone()).unwrap();
        assert_eq!(masked.states, plain);
        assert!(modulated_generate(&field, &cm, &[], &eps, 8, TimeInput::Normalized, Some(&off[..3])).is_err());
    }

    #[test]
    fn summed_composition() {
        let c = Tensor::vector(alloc::vec![1.0, 0.0]);
        let q1 = Tensor::vector(alloc::vec![0.0, 1.0]);
        let q2 = Tensor::vector(alloc::vec![2.0, 2.0]);
        let out = compose_condition(&c, &[(0.5, &q1), (0.25, &q2)]).unwrap();
        assert_eq!(out.data(), &[1.5, 1.0]);
    }

    #[test]
    fn bank_lookup_lists_available_pairs() {
        let mut bank = ConceptBank::new();
        bank.insert(ConceptVector::zeros(3, "red", "blue"));
        assert!(bank.get("red", "blue").is_ok());
        let msg = alloc::format!("{}", bank.get("hit", "miss").unwrap_err());
        assert!(msg.contains("(red, blue)"), "{msg}");
    }

    struct Small {
        world: ToyWorld,
        net: VelocityNet,
        coupling: CouplingModel,
    }

    fn small() -> Small {
        let world = make_world(WorldSpec::default()).unwrap();
        let mut net = VelocityNet::new(&mut Rng::new(6, 0), 4, 8, 8, VelocityNetConfig::default());
        net.set_trainable(false);
        let cfg = CouplingConfig {
            ot: OtConfig {
                slices: 8,
                ..OtConfig::default()
            },
            ..CouplingConfig::default()
        };
        let coupling = CouplingModel::new(&world, &cfg).unwrap();
        Small { world, net, coupling }
    }

    fn frozen(s: &Small) -> Frozen<'_> {
        Frozen {
            world: &s.world,
            generator: &s.net,
            coupling: &s.coupling,
            settings: SteerSettings {
                t_bar: 4,
                ..SteerSettings::default()
            },
        }
    }

    #[test]
    fn measured_divergence_properties() {
        let s = small();
        let f = frozen(&s);
        assert_eq!(measure_delta_omega(&f, "red", "red", &[0, 1, 2]).unwrap(), 0.0);
        let d = measure_delta_omega(&f, "red", "thick", &[0, 1, 2]).unwrap();
        assert!((0.0..=1.0).contains(&d));
        assert!(measure_delta_omega(&f, "red", "blue", &[]).is_err());
        assert!(measure_delta_omega(&f, "red", "mauve", &[0]).is_err());
        let seeds = [0, 1, 2];
        let h = measure_delta_omega(&f, "red", "blue", &seeds).unwrap();
        assert_eq!(measure_divergence(&f, "red", "blue", &seeds, Divergence::Hellinger).unwrap(), h);
        let js = measure_divergence(&f, "red", "blue", &seeds, Divergence::Js).unwrap();
        assert!((0.0..=1.0).contains(&js));
        assert_eq!(measure_divergence(&f, "red", "red", &seeds, Divergence::Kl).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_pair_and_zero_iterations() {
        let s = small();
        let f = frozen(&s);
        let cfg = ConceptConfig {
            iterations: 0,
            seeds: alloc::vec![0, 1],
            ..ConceptConfig::default()
        };
        assert!(matches!(train_concept(&f, "red", "red", &cfg), Err(Error::DegeneratePair { .. })));
        let out = train_concept(&f, "red", "blue", &cfg).unwrap();
        assert_eq!(out.vector.q, Tensor::zeros(&[8]));
        assert!(out.records.is_empty());
        assert_eq!(out.initial_loss, out.final_loss);
        let d = module_digest(&s.net);
        let cfg = ConceptConfig {
            iterations: 20,
            ..cfg
        };
        let a = train_concept(&f, "red", "blue", &cfg).unwrap();
        let b = train_concept(&f, "red", "blue", &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(module_digest(&s.net), d);
    }

    #[test]
    fn sweep_zero_delta_is_exactly_zero() {
        let s = small();
        let f = frozen(&s);
        let mut v = ConceptVector::zeros(8, "red", "blue");
        v.q = gaussian(&mut Rng::new(7, 0), &[8]);
        let rows = steering_sweep(&f, &v, &[0.0, 0.5, 1.0], &[0, 1, 2, 3]).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows[..4].iter().all(|r| r.delta_omega == 0.0));
        let means = sweep_means(&rows);
        assert_eq!(means.len(), 3);
        assert_eq!(means[0], (0.0, 0.0));
    }
}
