use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use transporter::checkpoint::{bank_from_container, bank_to_container};
use transporter::container::Container;
use transporter::run::Manifest;
use transporter_core::toyworld::{make_world, WorldSpec};

const SHORT: [&str; 6] = [
    "--override",
    "coupling.iterations=100",
    "--override",
    "generator.iterations=100",
    "--override",
    "concept.iterations=50",
];

fn bin(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transporter"))
        .arg("--out")
        .arg(out)
        .args(SHORT)
        .args(args)
        .env_remove("TRANSPORTER_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = bin(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed\n{}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

/// Trained coupling, generator and bank shared by the read-only tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("fixture");
        for sub in ["train-coupling", "train-generator", "train-concepts"] {
            ok(&dir, &[sub]);
        }
        dir
    })
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn short_coupling_run_writes_checkpoint_curve_and_manifest() {
    let dir = scratch("short");
    ok(&dir, &["train-coupling"]);
    for f in ["coupling.ckpt", "coupling_curve.jsonl", "coupling_curve.csv", "train-coupling.manifest.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let m = Manifest::load(&dir.join("train-coupling.manifest.json")).unwrap();
    assert_eq!(m.subcommand, "train-coupling");
    assert_eq!(m.seeds["coupling"], 0);
    assert_eq!(csv_rows(&dir.join("coupling_curve.csv")).len(), 100);
    let ckpt = Container::load(&dir.join("coupling.ckpt")).unwrap();
    assert_eq!(ckpt.kind, "coupling");
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (scratch("rerun_a"), scratch("rerun_b"));
    for d in [&a, &b] {
        ok(d, &["train-coupling", "--seed", "7"]);
    }
    let m = Manifest::load(&a.join("train-coupling.manifest.json")).unwrap();
    assert!(!m.outputs.is_empty());
    for o in &m.outputs {
        assert_eq!(fs::read(a.join(&o.path)).unwrap(), fs::read(b.join(&o.path)).unwrap(), "{}", o.path);
    }
    assert_eq!(m.seeds["world"], 7);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = scratch("unknown_key");
    let o = bin(&dir, &["train-coupling", "--override", "coupling.learning_rat=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("bad.toml");
    fs::write(&cfg, "[generator]\nwidth = 3\n").unwrap();
    let o = bin(&dir, &["train-generator", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

#[test]
fn bank_survives_a_save_load_cycle() {
    let path = fixture().join("bank.ckpt");
    let c = Container::load(&path).unwrap();
    let world = make_world(WorldSpec::default()).unwrap();
    let bank = bank_from_container(&c, &world).unwrap();
    assert_eq!(bank.len(), world.spec.concept_pairs.len());
    let again = bank_to_container(&bank, &world.spec).unwrap();
    assert_eq!(again.to_bytes(), fs::read(&path).unwrap());
    let back = bank_from_container(&Container::from_bytes(&again.to_bytes()).unwrap(), &world).unwrap();
    assert!(bank.iter().eq(back.iter()));
}

#[test]
fn degenerate_pair_fails() {
    let dir = scratch("degenerate");
    for f in ["coupling.ckpt", "generator.ckpt"] {
        fs::create_dir_all(&dir).unwrap();
        fs::copy(fixture().join(f), dir.join(f)).unwrap();
    }
    let o = bin(&dir, &["train-concepts", "--override", r#"pairs=[["red", "red"]]"#]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("red"));
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = scratch("missing");
    let o = bin(&dir, &["train-concepts"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("generator.ckpt"));
}

fn generate(name: &str, args: &[&str]) -> PathBuf {
    let dir = scratch(name);
    let f = fixture().display().to_string();
    let inputs = [
        format!("inputs.coupling={f}/coupling.ckpt"),
        format!("inputs.generator={f}/generator.ckpt"),
        format!("inputs.bank={f}/bank.ckpt"),
    ];
    let mut all: Vec<&str> = vec!["generate"];
    for i in &inputs {
        all.extend(["--override", i]);
    }
    all.extend(args);
    ok(&dir, &all);
    dir
}

#[test]
fn generate_writes_one_row_per_delta_and_seed() {
    let dir = generate("generate24", &["--deltas", "0,0.5,1", "--pair", "hit:miss"]);
    let rows = csv_rows(&dir.join("sweep.csv"));
    assert_eq!(rows.len(), 24);
    let traj = fs::read_to_string(dir.join("trajectories.jsonl")).unwrap();
    assert!(traj.lines().count() >= 24);
}

#[test]
fn zero_delta_grid_leaves_output_unchanged() {
    let dir = generate("generate_zero", &["--deltas", "0"]);
    let rows = csv_rows(&dir.join("sweep.csv"));
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn unknown_pair_lists_vocabulary() {
    let dir = scratch("unknown_pair");
    let o = bin(&dir, &["generate", "--pair", "red:mauve"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mauve"));
}

#[test]
fn empty_arm_list_exits_2() {
    let dir = scratch("empty_arms");
    let o = bin(&dir, &["ablate", "--override", "ablate.arms=[]"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let dir = scratch("replay");
    ok(&dir, &["oracle", "hellinger"]);
    let manifest = dir.join("oracle.manifest.json");
    let o = Command::new(env!("CARGO_BIN_EXE_transporter")).arg("replay").arg(&manifest).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("replay/oracle.jsonl").is_file());

    let mut m = Manifest::load(&manifest).unwrap();
    m.outputs[0].sha256 = "0".repeat(64);
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_transporter")).arg("replay").arg(&manifest).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(&m.outputs[0].path));
}
