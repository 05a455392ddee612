//! Output directories and reproducibility manifests.
//!
//! Every file a subcommand writes goes through [`RunDir`], which keeps the
//! list of numeric outputs (hashed into the manifest and expected to be
//! bit-identical on rerun) apart from timing outputs (wall clock, never
//! compared).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::container::Container;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CODE_FINGERPRINT: &str = env!("TRANSPORTER_CODE_FINGERPRINT");

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub tool_version: String,
    pub code_fingerprint: String,
    /// Resolved configuration, TOML. Rerunning from it reproduces `outputs`.
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    /// Absolute paths of files read.
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub timing_outputs: Vec<String>,
    pub wall_seconds: BTreeMap<String, f64>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn file_name(subcommand: &str) -> String {
        format!("{subcommand}.manifest.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
    }
}

pub struct RunDir {
    root: PathBuf,
    outputs: Vec<String>,
    timing: Vec<String>,
    inputs: Vec<FileDigest>,
    wall: BTreeMap<String, f64>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            outputs: Vec::new(),
            timing: Vec::new(),
            inputs: Vec::new(),
            wall: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn note(&mut self, name: &str, timing: bool) {
        let list = if timing { &mut self.timing } else { &mut self.outputs };
        if !list.iter().any(|n| n == name) {
            list.push(name.to_string());
        }
    }

    /// Records a file that was read, with its digest.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Runs `f` and adds its wall time under `label`.
    pub fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.wall.entry(label.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn container(&mut self, name: &str, c: &Container) -> Result<()> {
        c.save(&self.path(name)).with_context(|| format!("cannot write {name}"))?;
        self.note(name, false);
        Ok(())
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        write_jsonl(&self.path(name), rows)?;
        self.note(name, false);
        Ok(())
    }

    /// `stem.jsonl` and `stem.csv`.
    pub fn table<T: Serialize>(&mut self, stem: &str, rows: &[T]) -> Result<()> {
        self.write_table(stem, rows, false)
    }

    /// Like [`RunDir::table`], but excluded from reproducibility checks.
    pub fn timing_table<T: Serialize>(&mut self, stem: &str, rows: &[T]) -> Result<()> {
        self.write_table(stem, rows, true)
    }

    fn write_table<T: Serialize>(&mut self, stem: &str, rows: &[T], timing: bool) -> Result<()> {
        let (j, c) = (format!("{stem}.jsonl"), format!("{stem}.csv"));
        write_jsonl(&self.path(&j), rows)?;
        write_csv(&self.path(&c), rows)?;
        self.note(&j, timing);
        self.note(&c, timing);
        Ok(())
    }

    /// Writes the config snapshot and the manifest; returns the manifest.
    pub fn finish(self, subcommand: &str, config: &ExperimentConfig, summary: serde_json::Value) -> Result<Manifest> {
        let snapshot = config.to_toml();
        let config_name = format!("{subcommand}.config.toml");
        fs::write(self.path(&config_name), &snapshot)?;
        let outputs = self
            .outputs
            .iter()
            .map(|n| {
                Ok(FileDigest {
                    path: n.clone(),
                    sha256: sha256_file(&self.path(n))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let seeds = BTreeMap::from([
            ("world".to_string(), config.world.seed),
            ("generator".to_string(), config.generator.seed),
            ("coupling".to_string(), config.coupling.seed),
            ("concept".to_string(), config.concept.seed),
            ("ablate".to_string(), config.ablate.seed),
            ("oracle".to_string(), config.oracle.seed),
        ]);
        let manifest = Manifest {
            subcommand: subcommand.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            code_fingerprint: CODE_FINGERPRINT.to_string(),
            config: snapshot,
            seeds,
            inputs: self.inputs,
            outputs,
            timing_outputs: self.timing,
            wall_seconds: self.wall,
            summary,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.root.join(Manifest::file_name(subcommand)), text + "\n")?;
        Ok(manifest)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
