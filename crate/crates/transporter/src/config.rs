//! Experiment configuration: one TOML document covering the world, every
//! training stage and every subcommand. All fields have defaults and unknown
//! keys are rejected at any depth.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use transporter_core::concept::{ConceptConfig, Divergence, SteerSettings};
use transporter_core::coupling::{CoupleVariant, CouplingConfig};
use transporter_core::flow::GeneratorConfig;
use transporter_core::metrics::MetricConfig;
use transporter_core::toyworld::WorldSpec;

/// Raised for anything the user can fix by editing the config or flags.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    /// Defaults to `<out>/coupling.ckpt`.
    pub coupling: Option<PathBuf>,
    /// Defaults to `<out>/generator.ckpt`.
    pub generator: Option<PathBuf>,
    /// Defaults to `<out>/bank.ckpt`.
    pub bank: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// Defaults to the first configured pair.
    pub pair: Option<(String, String)>,
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Also dump every Euler state.
    pub trajectories: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            pair: None,
            deltas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: (0..8).collect(),
            trajectories: true,
        }
    }
}

/// One row of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Arm {
    Variant(CoupleVariant),
    /// Full model retrained with this many slices.
    Slices(usize),
    /// Concept trained with this divergence as its target.
    Divergence(Divergence),
}

impl Arm {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        if let Some(p) = s.strip_prefix("p=") {
            return p
                .parse()
                .ok()
                .filter(|&p: &usize| p > 0)
                .map(Arm::Slices)
                .ok_or_else(|| bad(format!("ablate.arms: bad slice count in `{s}`")));
        }
        if let Ok(v) = s.parse::<CoupleVariant>() {
            return Ok(Arm::Variant(v));
        }
        if let Ok(d) = s.parse::<Divergence>() {
            return Ok(Arm::Divergence(d));
        }
        Err(bad(format!(
            "ablate.arms: unknown arm `{s}` (expected a coupling variant, `p=<slices>`, hellinger, kl or js)"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub arms: Vec<String>,
    /// Held-out samples scored per arm.
    pub heldout: usize,
    pub seed: u64,
    /// Pair used by the divergence arms; defaults to the first pair.
    pub concept_pair: Option<(String, String)>,
    /// Slice counts for the forward-time table.
    pub timing_slices: Vec<usize>,
    pub timing_repeats: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        let mut arms: Vec<String> = CoupleVariant::ALL.iter().map(|v| v.name().to_string()).collect();
        arms.extend(["p=50", "p=100", "p=400", "hellinger", "kl", "js"].map(String::from));
        AblateConfig {
            arms,
            heldout: 256,
            seed: 1000,
            concept_pair: None,
            timing_slices: vec![50, 100, 400],
            timing_repeats: 30,
        }
    }
}

pub const SUITES: [&str; 4] = ["gradients", "sinkhorn", "hellinger", "euler"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub suites: Vec<String>,
    /// Random points per differentiable loss.
    pub gradient_points: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            suites: SUITES.map(String::from).to_vec(),
            gradient_points: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Output directory; `--out`, then this, then `$TRANSPORTER_OUT`, then
    /// `runs`.
    pub out: Option<PathBuf>,
    /// Concept pairs to train; empty means the world's pairs.
    pub pairs: Vec<(String, String)>,
    pub world: WorldSpec,
    pub generator: GeneratorConfig,
    pub coupling: CouplingConfig,
    pub concept: ConceptConfig,
    pub steer: SteerSettings,
    pub metrics: MetricConfig,
    pub inputs: Inputs,
    pub generate: GenerateConfig,
    pub ablate: AblateConfig,
    pub oracle: OracleConfig,
}

pub const OUT_ENV: &str = "TRANSPORTER_OUT";

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| bad(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| bad(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| bad(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Sets every stage's seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.generator.seed = seed;
        self.coupling.seed = seed;
        self.concept.seed = seed;
        self.ablate.seed = seed;
        self.oracle.seed = seed;
    }

    pub fn concept_pairs(&self) -> Vec<(String, String)> {
        if self.pairs.is_empty() {
            self.world.concept_pairs.clone()
        } else {
            self.pairs.clone()
        }
    }

    pub fn arms(&self) -> Result<Vec<Arm>, ConfigError> {
        if self.ablate.arms.is_empty() {
            return Err(bad("ablate.arms: the arm list is empty"));
        }
        self.ablate.arms.iter().map(|a| Arm::parse(a)).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |what: &str, r: transporter_core::Result<()>| r.map_err(|e| bad(format!("{what}: {e}")));
        core("world", self.world.validate())?;
        core("coupling", self.coupling.validate())?;
        core("coupling.ot", self.coupling.ot.validate())?;
        if self.generator.batch == 0 || self.generator.iterations == 0 {
            return Err(bad("generator: batch and iterations must be positive"));
        }
        if self.concept.seeds.is_empty() || self.concept.batch == 0 || self.concept.lr.is_nan() || self.concept.lr <= 0.0 {
            return Err(bad("concept: seeds must be non-empty, batch and lr positive"));
        }
        if self.steer.t_bar == 0 {
            return Err(bad("steer.t_bar must be at least 1"));
        }
        if self.generate.deltas.iter().any(|d| !d.is_finite()) {
            return Err(bad("generate.deltas must be finite"));
        }
        if self.generate.seeds.is_empty() {
            return Err(bad("generate.seeds must not be empty"));
        }
        for (s, t) in self.concept_pairs().iter().chain(&self.generate.pair).chain(&self.ablate.concept_pair) {
            for label in [s, t] {
                if !self.world.vocab.contains(label) {
                    return Err(bad(format!("concept pair ({s}, {t}): `{label}` is not in world.vocab")));
                }
            }
        }
        self.ablate.arms.iter().try_for_each(|a| Arm::parse(a).map(|_| ()))?;
        if self.ablate.heldout == 0 || self.ablate.timing_repeats == 0 {
            return Err(bad("ablate.heldout and ablate.timing_repeats must be positive"));
        }
        if self.ablate.timing_slices.contains(&0) {
            return Err(bad("ablate.timing_slices entries must be positive"));
        }
        for s in &self.oracle.suites {
            if !SUITES.contains(&s.as_str()) {
                return Err(bad(format!("oracle.suites: unknown suite `{s}` (known: {})", SUITES.join(", "))));
            }
        }
        if self.oracle.gradient_points == 0 {
            return Err(bad("oracle.gradient_points must be positive"));
        }
        Ok(())
    }

    /// `--out`, then `out`, then the environment default, then `runs`.
    pub fn resolve_out(&mut self, flag: Option<PathBuf>) -> std::io::Result<PathBuf> {
        let dir = flag
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let dir = std::path::absolute(dir)?;
        self.out = Some(dir.clone());
        Ok(dir)
    }

    /// Fills unset input paths from the output directory and makes all of
    /// them absolute, so a config snapshot still finds them from elsewhere.
    pub fn resolve_inputs(&mut self, out: &Path) -> std::io::Result<()> {
        for (slot, name) in [
            (&mut self.inputs.coupling, "coupling.ckpt"),
            (&mut self.inputs.generator, "generator.ckpt"),
            (&mut self.inputs.bank, "bank.ckpt"),
        ] {
            let p = slot.take().unwrap_or_else(|| out.join(name));
            *slot = Some(std::path::absolute(p)?);
        }
        Ok(())
    }
}

/// `a.b.c=value`. The value is read as a TOML literal when it parses as one
/// and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| bad(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("at least one part");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| bad(format!("override `{key}`: `{}` is not a table", parts[..=i].join("."))))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
