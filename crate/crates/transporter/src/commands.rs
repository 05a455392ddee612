//! Subcommand bodies. Each one reads a resolved [`ExperimentConfig`], writes
//! its files through a [`RunDir`] and finishes with a manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::json;
use transporter_core::concept::{
    modulated_generate, module_digest, prior_for_seed, steering_sweep, sweep_means, train_concept, ConceptBank,
    ConceptConfig, ConceptRecord, Frozen,
};
use transporter_core::coupling::{
    couple, heldout_cosine, train_coupling, CoupleVariant, CouplingConfig, CouplingModel, CouplingSample,
};
use transporter_core::flow::{train_generator, VelocityNet};
use transporter_core::metrics::MetricReport;
use transporter_core::nn::Module;
use transporter_core::oracle::spearman;
use transporter_core::rng::gaussian;
use transporter_core::sliced_ot::{rho_ot_forward, OtConfig, ProjectionBank};
use transporter_core::toyworld::{make_world, ToyWorld};
use transporter_core::Rng;

use crate::checkpoint::{
    bank_from_container, bank_to_container, coupling_from_container, coupling_to_container, generator_from_container,
    generator_to_container,
};
use crate::config::{Arm, ConfigError, ExperimentConfig};
use crate::container::Container;
use crate::run::{Manifest, RunDir};
use crate::suites::{self, Check};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    /// Bad flags, config or names; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Anything that went wrong while running; exit code 1.
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Usage(_) => 2,
            CommandError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        CommandError::Usage(e.0)
    }
}

impl From<anyhow::Error> for CommandError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<transporter_core::Error>() {
            Some(transporter_core::Error::Config { .. } | transporter_core::Error::Unknown { .. }) => {
                CommandError::Usage(format!("{e:#}"))
            }
            _ => CommandError::Runtime(e),
        }
    }
}

impl From<transporter_core::Error> for CommandError {
    fn from(e: transporter_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Result<T, E = CommandError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    TrainCoupling,
    TrainGenerator,
    TrainConcepts,
    Generate,
    Ablate,
    Oracle,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Subcommand::TrainCoupling,
        Subcommand::TrainGenerator,
        Subcommand::TrainConcepts,
        Subcommand::Generate,
        Subcommand::Ablate,
        Subcommand::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::TrainCoupling => "train-coupling",
            Subcommand::TrainGenerator => "train-generator",
            Subcommand::TrainConcepts => "train-concepts",
            Subcommand::Generate => "generate",
            Subcommand::Ablate => "ablate",
            Subcommand::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcommand {
    type Err = CommandError;

    fn from_str(s: &str) -> Result<Self> {
        Subcommand::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CommandError::Usage(format!("unknown subcommand `{s}`")))
    }
}

/// Result of one subcommand run.
#[derive(Debug)]
pub struct Report {
    pub manifest: Manifest,
    pub out: PathBuf,
    /// False when the run finished but reported failures (oracle checks).
    pub ok: bool,
}

/// Runs `cmd`. `cfg.out` must already be resolved.
pub fn execute(cmd: Subcommand, mut cfg: ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let out = cfg.out.clone().ok_or_else(|| CommandError::Usage("no output directory".into()))?;
    cfg.resolve_inputs(&out).map_err(|e| anyhow!(e))?;
    let mut run = RunDir::create(&out)?;
    let (summary, ok) = match cmd {
        Subcommand::TrainCoupling => (cmd_train_coupling(&cfg, &mut run)?, true),
        Subcommand::TrainGenerator => (cmd_train_generator(&cfg, &mut run)?, true),
        Subcommand::TrainConcepts => (cmd_train_concepts(&cfg, &mut run)?, true),
        Subcommand::Generate => (cmd_generate(&cfg, &mut run)?, true),
        Subcommand::Ablate => (cmd_ablate(&cfg, &mut run)?, true),
        Subcommand::Oracle => cmd_oracle(&cfg, &mut run)?,
    };
    let manifest = run.finish(cmd.name(), &cfg, summary)?;
    Ok(Report { manifest, out, ok })
}

fn world(cfg: &ExperimentConfig) -> Result<ToyWorld> {
    Ok(make_world(cfg.world.clone())?)
}

fn read_container(run: &mut RunDir, path: &Path, what: &str) -> Result<Container> {
    if !path.exists() {
        return Err(CommandError::Runtime(anyhow!("{what} checkpoint not found: {}", path.display())));
    }
    run.input(path)?;
    Ok(Container::load(path).with_context(|| format!("cannot load {what} checkpoint {}", path.display()))?)
}

fn input_path<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CommandError::Usage(format!("inputs.{what} is not set")))
}

fn load_generator(cfg: &ExperimentConfig, world: &ToyWorld, run: &mut RunDir) -> Result<VelocityNet> {
    let c = read_container(run, input_path(&cfg.inputs.generator, "generator")?, "generator")?;
    Ok(generator_from_container(&c, world)?.0)
}

fn load_coupling(cfg: &ExperimentConfig, world: &ToyWorld, run: &mut RunDir) -> Result<CouplingModel> {
    let c = read_container(run, input_path(&cfg.inputs.coupling, "coupling")?, "coupling")?;
    let mut model = coupling_from_container(&c, world)?.0.model;
    model.set_trainable(false);
    Ok(model)
}

const HELDOUT_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const TIMING_STREAM: u64 = 2;

fn heldout(world: &ToyWorld, cfg: &ExperimentConfig) -> Vec<CouplingSample> {
    let mut rng = Rng::new(cfg.ablate.seed, HELDOUT_STREAM);
    (0..cfg.ablate.heldout).map(|_| CouplingSample::draw(world, &mut rng)).collect()
}

fn cmd_train_coupling(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<serde_json::Value> {
    let world = world(cfg)?;
    let (ckpt, records) = run.timed("train", || train_coupling(&world, &cfg.coupling))?;
    run.container("coupling.ckpt", &coupling_to_container(&ckpt, &cfg.coupling, &world.spec)?)?;
    run.table("coupling_curve", &records)?;
    let samples = heldout(&world, cfg);
    let mut cosines = serde_json::Map::new();
    for v in [CoupleVariant::Full, CoupleVariant::InferenceOnly] {
        let c = heldout_cosine(&world, &ckpt.model, &samples, v, &mut Rng::new(cfg.ablate.seed, NOISE_STREAM))?;
        println!("held-out cosine {:<15} {c:.6}", v.name());
        cosines.insert(v.name().into(), json!(c));
    }
    let last = records.last();
    Ok(json!({
        "iterations": ckpt.iteration,
        "final_loss_mse": last.map(|r| r.loss_mse),
        "final_loss_gram": last.map(|r| r.loss_gram),
        "final_loss_rho_ot": last.and_then(|r| r.loss_rho_ot),
        "heldout_cosine": cosines,
    }))
}

fn cmd_train_generator(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<serde_json::Value> {
    let world = world(cfg)?;
    let trained = run.timed("train", || train_generator(&world, &cfg.generator))?;
    run.container("generator.ckpt", &generator_to_container(&trained.net, &cfg.generator, &world.spec)?)?;
    run.table("generator_curve", &trained.records)?;
    println!("flow-matching eval loss {:.6} -> {:.6}", trained.initial_eval, trained.final_eval);
    Ok(json!({
        "initial_eval_loss": trained.initial_eval,
        "final_eval_loss": trained.final_eval,
    }))
}

#[derive(Serialize)]
struct ConceptRow {
    source: String,
    target: String,
    delta: f64,
    initial_loss: f64,
    final_loss: f64,
    q_norm: f64,
}

#[derive(Serialize)]
struct ConceptCurveRow {
    source: String,
    target: String,
    #[serde(flatten)]
    record: ConceptRecord,
}

/// Parameter digests of everything concept training must leave untouched.
fn frozen_digests(world: &ToyWorld, net: &VelocityNet, coupling: &CouplingModel) -> [u64; 3] {
    [module_digest(net), module_digest(coupling), module_digest(&world.vlm)]
}

fn cmd_train_concepts(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<serde_json::Value> {
    let world = world(cfg)?;
    let net = load_generator(cfg, &world, run)?;
    let coupling = load_coupling(cfg, &world, run)?;
    let before = frozen_digests(&world, &net, &coupling);
    let frozen = Frozen {
        world: &world,
        generator: &net,
        coupling: &coupling,
        settings: cfg.steer,
    };
    let mut bank = ConceptBank::new();
    let (mut rows, mut curve) = (Vec::new(), Vec::new());
    for (s, t) in cfg.concept_pairs() {
        let trained = run.timed("train", || train_concept(&frozen, &s, &t, &cfg.concept))?;
        println!(
            "{s} -> {t}: delta {:.6}, loss {:.3e} -> {:.3e}",
            trained.delta, trained.initial_loss, trained.final_loss
        );
        rows.push(ConceptRow {
            source: s.clone(),
            target: t.clone(),
            delta: trained.delta,
            initial_loss: trained.initial_loss,
            final_loss: trained.final_loss,
            q_norm: trained.vector.q.norm(),
        });
        curve.extend(trained.records.iter().map(|&record| ConceptCurveRow {
            source: s.clone(),
            target: t.clone(),
            record,
        }));
        bank.insert(trained.vector);
    }
    if frozen_digests(&world, &net, &coupling) != before {
        return Err(CommandError::Runtime(anyhow!("a frozen model changed during concept training")));
    }
    run.container("bank.ckpt", &bank_to_container(&bank, &world.spec)?)?;
    run.table("concepts", &rows)?;
    run.jsonl("concept_curve.jsonl", &curve)?;
    Ok(json!({
        "pairs": rows.len(),
        "frozen_digests": before.map(|d| format!("{d:016x}")),
    }))
}

fn first_pair(cfg: &ExperimentConfig, explicit: &Option<(String, String)>) -> Result<(String, String)> {
    explicit
        .clone()
        .or_else(|| cfg.concept_pairs().into_iter().next())
        .ok_or_else(|| CommandError::Usage("no concept pair configured".into()))
}

#[derive(Serialize)]
struct TrajectoryRow {
    delta: f64,
    seed: u64,
    t: usize,
    latent: Vec<f64>,
}

fn cmd_generate(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<serde_json::Value> {
    let world = world(cfg)?;
    let net = load_generator(cfg, &world, run)?;
    let coupling = load_coupling(cfg, &world, run)?;
    let bank_path = input_path(&cfg.inputs.bank, "bank")?;
    let bank = bank_from_container(&read_container(run, bank_path, "concept bank")?, &world)?;
    let (s, t) = first_pair(cfg, &cfg.generate.pair)?;
    let vector = bank.get(&s, &t)?;
    let frozen = Frozen {
        world: &world,
        generator: &net,
        coupling: &coupling,
        settings: cfg.steer,
    };
    let g = &cfg.generate;
    let rows = run.timed("sweep", || steering_sweep(&frozen, vector, &g.deltas, &g.seeds))?;
    run.table("sweep", &rows)?;
    if g.trajectories {
        let cm = &world.cond_xi[world.condition_index(&s)?];
        let mut traj = Vec::new();
        for &delta in &g.deltas {
            for &seed in &g.seeds {
                let eps = prior_for_seed(&world, seed);
                let m = modulated_generate(
                    &net,
                    cm,
                    &[(delta, &vector.q)],
                    &eps,
                    cfg.steer.t_bar,
                    cfg.steer.time_input,
                    None,
                )?;
                traj.extend(m.states.into_iter().map(|st| TrajectoryRow {
                    delta,
                    seed,
                    t: st.t,
                    latent: st.latent.into_data(),
                }));
            }
        }
        run.jsonl("trajectories.jsonl", &traj)?;
    }
    let means = sweep_means(&rows);
    for (d, m) in &means {
        println!("delta {d:>6.3}  mean delta_omega {m:.6}");
    }
    let (ds, ws): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.delta, r.delta_omega)).unzip();
    Ok(json!({
        "pair": [s, t],
        "rows": rows.len(),
        "mean_delta_omega": means,
        "spearman": if rows.len() > 1 { Some(spearman(&ds, &ws)) } else { None },
    }))
}

#[derive(Debug, Default, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub cosine: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub kl: Option<f64>,
    pub samples: Option<usize>,
    /// Divergence arms: the measured target divergence.
    pub target_delta: Option<f64>,
    pub loss_ratio: Option<f64>,
    pub q_norm: Option<f64>,
    /// Rank correlation of Hellinger shift against delta in the sweep.
    pub sweep_spearman: Option<f64>,
    pub max_delta_omega: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingRow {
    pub slices: usize,
    pub tokens: usize,
    pub dim: usize,
    pub repeats: usize,
    pub median_seconds: f64,
    pub min_seconds: f64,
}

/// Wall time of the transport forward pass for each slice count, on random
/// `[tokens, dim]` inputs.
pub fn time_forward(
    ot: OtConfig,
    slices: &[usize],
    tokens: usize,
    dim: usize,
    repeats: usize,
    seed: u64,
) -> anyhow::Result<Vec<TimingRow>> {
    let mut rng = Rng::new(seed, TIMING_STREAM);
    let (z1, z2) = (gaussian(&mut rng, &[tokens, dim]), gaussian(&mut rng, &[tokens, dim]));
    slices
        .iter()
        .map(|&p| {
            let bank = ProjectionBank::new(&mut rng, dim, OtConfig { slices: p, ..ot })?;
            for _ in 0..2 {
                rho_ot_forward(&z1, &z2, &bank)?;
            }
            let mut times: Vec<f64> = (0..repeats)
                .map(|_| {
                    let start = Instant::now();
                    let r = rho_ot_forward(&z1, &z2, &bank);
                    let dt = start.elapsed().as_secs_f64();
                    r.map(|_| dt)
                })
                .collect::<transporter_core::Result<_>>()?;
            times.sort_by(f64::total_cmp);
            Ok(TimingRow {
                slices: p,
                tokens,
                dim,
                repeats,
                median_seconds: times[times.len() / 2],
                min_seconds: times[0],
            })
        })
        .collect()
}

fn metric_row(
    world: &ToyWorld,
    model: &CouplingModel,
    samples: &[CouplingSample],
    variant: CoupleVariant,
    cfg: &ExperimentConfig,
    coupling: &CouplingConfig,
    arm: String,
) -> Result<AblationRow> {
    // Same noise draws for every arm.
    let mut rng = Rng::new(cfg.ablate.seed, NOISE_STREAM);
    let pairs = samples
        .iter()
        .map(|s| Ok((couple(world, model, &s.z_xi, &s.cond_xi, variant, &mut rng)?, s.z_omega.clone())))
        .collect::<Result<Vec<_>>>()?;
    let fp = format!("{:016x}", coupling.fingerprint());
    let r = MetricReport::compute(&pairs, cfg.metrics, &fp, &[cfg.ablate.seed])?;
    Ok(AblationRow {
        arm,
        cosine: Some(r.cosine),
        l1: Some(r.l1),
        l2: Some(r.l2),
        kl: Some(r.kl),
        samples: Some(r.samples),
        ..AblationRow::default()
    })
}

fn cmd_ablate(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<serde_json::Value> {
    let arms = cfg.arms()?;
    let world = world(cfg)?;
    let samples = heldout(&world, cfg);
    let mut base: Option<CouplingModel> = None;
    let mut generator: Option<VelocityNet> = None;
    let mut rows = Vec::with_capacity(arms.len());
    for (arm, name) in arms.iter().zip(&cfg.ablate.arms) {
        println!("arm {name}");
        let row = match *arm {
            Arm::Variant(v) => {
                if base.is_none() {
                    base = Some(run.timed("train_coupling", || train_coupling(&world, &cfg.coupling))?.0.model);
                }
                let model = base.as_ref().expect("trained above");
                metric_row(&world, model, &samples, v, cfg, &cfg.coupling, name.clone())?
            }
            Arm::Slices(p) => {
                let mut c = cfg.coupling.clone();
                c.ot.slices = p;
                let model = run.timed("train_coupling", || train_coupling(&world, &c))?.0.model;
                metric_row(&world, &model, &samples, CoupleVariant::Full, cfg, &c, name.clone())?
            }
            Arm::Divergence(kind) => {
                if base.is_none() {
                    base = Some(run.timed("train_coupling", || train_coupling(&world, &cfg.coupling))?.0.model);
                }
                if generator.is_none() {
                    generator = Some(run.timed("train_generator", || train_generator(&world, &cfg.generator))?.net);
                }
                let frozen = Frozen {
                    world: &world,
                    generator: generator.as_ref().expect("trained above"),
                    coupling: base.as_ref().expect("trained above"),
                    settings: cfg.steer,
                };
                let (s, t) = first_pair(cfg, &cfg.ablate.concept_pair)?;
                let concept = ConceptConfig {
                    divergence: kind,
                    ..cfg.concept.clone()
                };
                let trained = run.timed("train_concept", || train_concept(&frozen, &s, &t, &concept))?;
                let g = &cfg.generate;
                let sweep = steering_sweep(&frozen, &trained.vector, &g.deltas, &g.seeds)?;
                let (ds, ws): (Vec<f64>, Vec<f64>) = sweep.iter().map(|r| (r.delta, r.delta_omega)).unzip();
                AblationRow {
                    arm: name.clone(),
                    target_delta: Some(trained.delta),
                    loss_ratio: Some(trained.final_loss / trained.initial_loss),
                    q_norm: Some(trained.vector.q.norm()),
                    sweep_spearman: (sweep.len() > 1).then(|| spearman(&ds, &ws)),
                    max_delta_omega: sweep_means(&sweep).iter().map(|&(_, m)| m).reduce(f64::max),
                    ..AblationRow::default()
                }
            }
        };
        rows.push(row);
    }
    run.table("ablation", &rows)?;
    let s = &world.spec;
    let timings = time_forward(
        cfg.coupling.ot,
        &cfg.ablate.timing_slices,
        s.tokens,
        s.omega_dim,
        cfg.ablate.timing_repeats,
        cfg.ablate.seed,
    )?;
    for t in &timings {
        println!("P = {:>4}: median forward {:.3e} s", t.slices, t.median_seconds);
    }
    run.timing_table("timings", &timings)?;
    Ok(json!({ "arms": rows.len(), "rows": rows }))
}

fn cmd_oracle(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<(serde_json::Value, bool)> {
    let mut checks: Vec<Check> = Vec::new();
    for suite in &cfg.oracle.suites {
        checks.extend(run.timed(suite, || suites::run(suite, &cfg.oracle))?);
    }
    for c in &checks {
        let bound = match (c.lower, c.upper) {
            (Some(l), Some(u)) => format!("in [{l:e}, {u:e}]"),
            (Some(l), None) => format!(">= {l:e}"),
            (None, Some(u)) => format!("<= {u:e}"),
            (None, None) => String::new(),
        };
        println!(
            "{} {}/{}: {:e} {bound}",
            if c.pass { "PASS" } else { "FAIL" },
            c.suite,
            c.check,
            c.value
        );
    }
    run.table("oracle", &checks)?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    Ok((json!({ "checks": checks.len(), "failed": failed }), failed == 0))
}

#[derive(Debug)]
pub struct ReplayReport {
    pub report: Report,
    /// Output files whose digest differs from the manifest (or went missing).
    pub mismatches: Vec<String>,
}

/// Reruns the subcommand recorded in `manifest_path` from its config
/// snapshot and compares output digests. Defaults to `<manifest dir>/replay`.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<ReplayReport> {
    let m = Manifest::load(manifest_path).map_err(|e| CommandError::Usage(format!("{e:#}")))?;
    let cmd: Subcommand = m.subcommand.parse()?;
    let mut cfg = ExperimentConfig::from_toml(&m.config)?;
    let dir = out.unwrap_or_else(|| manifest_path.parent().unwrap_or(Path::new(".")).join("replay"));
    cfg.out = Some(std::path::absolute(dir).map_err(|e| anyhow!(e))?);
    let report = execute(cmd, cfg)?;
    let mismatches = m
        .outputs
        .iter()
        .filter(|o| !report.manifest.outputs.iter().any(|n| n == *o))
        .map(|o| o.path.clone())
        .collect();
    Ok(ReplayReport { report, mismatches })
}
