//! A synthetic universe with known ground truth.
//!
//! A [`ToyWorld`] holds
//!
//! - a condition vocabulary with embeddings in the generator's condition
//!   space and in the semantic space,
//! - per-condition Gaussian mixtures over `N x D_xi` generator latents,
//! - a fixed cross-space map `z_omega = tanh(k z_xi M) / k` where `M` has
//!   orthonormal rows (so the map is injective), and
//! - a frozen [`ToyVlm`] head that scores pooled semantic embeddings against
//!   every vocabulary slot.
//!
//! Worlds are pure functions of their [`WorldSpec`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::concept::LogitPair;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Module;
use crate::rng::{gaussian, Rng};
use crate::tensor::Tensor;

/// How per-condition latent centres are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Centre is a fixed random linear image of the condition embedding.
    #[default]
    Linear,
    /// Two conditions with centres `+scale * 1` and `-scale * 1`.
    Antipodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    pub tokens: usize,
    pub xi_dim: usize,
    pub omega_dim: usize,
    pub cond_dim: usize,
    pub vocab: Vec<String>,
    pub concept_pairs: Vec<(String, String)>,
    pub center_mode: CenterMode,
    pub latent_scale: f64,
    pub latent_std: f64,
    pub mixture_components: usize,
    pub mixture_spread: f64,
    /// Curvature `k` of the cross-space map; zero makes it linear.
    pub map_severity: f64,
    /// Forces `M = I` (requires `xi_dim == omega_dim`).
    pub identity_map: bool,
    /// Noise standard deviation of the decode-and-re-encode stand-in.
    pub noise_scale: f64,
    pub vlm_hidden: usize,
    pub vlm_temperature: f64,
    pub vlm_calibration_samples: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let vocab = ["red", "blue", "hit", "miss", "one", "two", "thin", "thick"];
        WorldSpec {
            seed: 0,
            tokens: 4,
            xi_dim: 8,
            omega_dim: 16,
            cond_dim: 8,
            vocab: vocab.iter().map(|s| s.to_string()).collect(),
            concept_pairs: vocab.chunks(2).map(|p| (p[0].to_string(), p[1].to_string())).collect(),
            center_mode: CenterMode::Linear,
            latent_scale: 2.0,
            latent_std: 0.2,
            mixture_components: 2,
            mixture_spread: 0.15,
            map_severity: 0.5,
            identity_map: false,
            noise_scale: 0.5,
            vlm_hidden: 32,
            vlm_temperature: 0.5,
            vlm_calibration_samples: 128,
        }
    }
}

impl WorldSpec {
    /// Two antipodal conditions, `pos` and `neg`.
    pub fn two_condition(seed: u64, scale: f64) -> Self {
        WorldSpec {
            seed,
            vocab: vec!["pos".into(), "neg".into()],
            concept_pairs: vec![("pos".into(), "neg".into())],
            center_mode: CenterMode::Antipodal,
            latent_scale: scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.xi_dim == 0 || self.tokens == 0 || self.cond_dim == 0 {
            return Err(Error::config("xi_dim", "tokens, xi_dim and cond_dim must be positive"));
        }
        if self.omega_dim < self.xi_dim {
            return Err(Error::config(
                "omega_dim",
                format!("need omega_dim >= xi_dim, got {} < {}", self.omega_dim, self.xi_dim),
            ));
        }
        if self.vocab.len() < 2 {
            return Err(Error::config("vocab", "need at least two conditions"));
        }
        for (i, a) in self.vocab.iter().enumerate() {
            if self.vocab[..i].contains(a) {
                return Err(Error::config("vocab", format!("duplicate label `{a}`")));
            }
        }
        if self.identity_map && self.xi_dim != self.omega_dim {
            return Err(Error::config("identity_map", "requires xi_dim == omega_dim"));
        }
        if self.center_mode == CenterMode::Antipodal && self.vocab.len() != 2 {
            return Err(Error::config("center_mode", "antipodal centres need exactly two conditions"));
        }
        if self.mixture_components == 0 {
            return Err(Error::config("mixture_components", "must be positive"));
        }
        if !(self.vlm_temperature > 0.0) {
            return Err(Error::config("vlm_temperature", "must be positive"));
        }
        if self.map_severity < 0.0 || self.noise_scale < 0.0 || self.latent_std < 0.0 {
            return Err(Error::config("map_severity", "severity, noise and std must be nonnegative"));
        }
        for (a, b) in &self.concept_pairs {
            for l in [a, b] {
                if !self.vocab.contains(l) {
                    return Err(Error::config("concept_pairs", format!("label `{l}` not in vocabulary")));
                }
            }
        }
        Ok(())
    }
}

/// One paired draw from the world.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub condition: usize,
    pub z_xi: Tensor,
    pub cond_xi: Tensor,
    pub z_omega: Tensor,
    pub cond_omega: Tensor,
}

/// Frozen scoring head: `logits = (h M^T - |m|^2 / 2) / T` with
/// `h = tanh(mean_tokens(z) W + c)` and `M` the calibrated class prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyVlm {
    pub w: Tensor,
    pub c: Tensor,
    pub prototypes: Tensor,
    pub bias: Tensor,
    pub temperature: f64,
}

impl ToyVlm {
    pub fn vocab_size(&self) -> usize {
        self.prototypes.rows()
    }

    fn hidden(&self, z_omega: &Tensor) -> Tensor {
        let pooled = z_omega.mean_rows();
        let n = pooled.len();
        let h = pooled.reshape(&[1, n]).and_then(|p| p.matmul(&self.w)).expect("vlm input width");
        let hv: Vec<f64> = h.data().iter().zip(self.c.data()).map(|(a, b)| math::tanh(a + b)).collect();
        Tensor::vector(hv)
    }

    /// Raw logits over every slot.
    pub fn logits(&self, z_omega: &Tensor) -> Vec<f64> {
        let h = self.hidden(z_omega);
        (0..self.vocab_size())
            .map(|v| {
                let dot: f64 = h.data().iter().zip(self.prototypes.row(v)).map(|(a, b)| a * b).sum();
                (dot + self.bias.data()[v]) / self.temperature
            })
            .collect()
    }

    /// Two-slot softmax over `(slot_neg, slot_pos)`.
    pub fn toy_logits(&self, z_omega: &Tensor, slots: (usize, usize)) -> Result<LogitPair> {
        let v = self.vocab_size();
        if slots.0 >= v || slots.1 >= v {
            return Err(Error::Contract(format!("slot out of range: {slots:?} with {v} slots")));
        }
        if slots.0 == slots.1 {
            return Err(Error::Contract(format!("slots must differ: {slots:?}")));
        }
        let l = self.logits(z_omega);
        Ok(LogitPair::from_scores(l[slots.0], l[slots.1]))
    }
}

impl Module for ToyVlm {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("vlm.w".into(), &self.w),
            ("vlm.c".into(), &self.c),
            ("vlm.prototypes".into(), &self.prototypes),
            ("vlm.bias".into(), &self.bias),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("vlm.w".into(), &mut self.w),
            ("vlm.c".into(), &mut self.c),
            ("vlm.prototypes".into(), &mut self.prototypes),
            ("vlm.bias".into(), &mut self.bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld {
    pub spec: WorldSpec,
    /// `[xi_dim, omega_dim]`, orthonormal rows.
    pub map: Tensor,
    pub cond_xi: Vec<Tensor>,
    pub cond_omega: Vec<Tensor>,
    /// Mixture component means, `[condition][component]`, each `[N, xi_dim]`.
    pub means: Vec<Vec<Tensor>>,
    pub vlm: ToyVlm,
}

// Independent streams per world component.
const STREAM_MAP: u64 = 1;
const STREAM_COND_XI: u64 = 2;
const STREAM_COND_OMEGA: u64 = 3;
const STREAM_CENTERS: u64 = 4;
const STREAM_VLM: u64 = 5;
const STREAM_CALIBRATION: u64 = 6;

/// Rows of a Gaussian matrix, orthonormalised by Gram-Schmidt.
fn orthonormal_rows(rng: &mut Rng, rows: usize, dim: usize) -> Tensor {
    assert!(rows <= dim);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v = rng.normals(dim);
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = math::sqrt(v.iter().map(|x| x * x).sum());
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::new(&[rows, dim], out.concat()).expect("rows x dim")
}

/// `count` unit vectors with pairwise cosine at most 0.5.
fn separated_embeddings(rng: &mut Rng, count: usize, dim: usize) -> Result<Vec<Tensor>> {
    if count <= dim {
        let m = orthonormal_rows(rng, count, dim);
        return Ok((0..count).map(|i| Tensor::vector(m.row(i).to_vec())).collect());
    }
    let mut out: Vec<Tensor> = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::config("cond_dim", format!("cannot separate {count} conditions in {dim} dimensions")));
        }
        let v = gaussian(rng, &[dim]);
        let v = v.scale(1.0 / v.norm());
        if out.iter().all(|u| u.dot(&v).unwrap() <= 0.5) {
            out.push(v);
        }
    }
    Ok(out)
}

impl ToyWorld {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        make_world(spec)
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab.len()
    }

    pub fn condition_index(&self, label: &str) -> Result<usize> {
        self.spec.vocab.iter().position(|l| l == label).ok_or_else(|| Error::Unknown {
            kind: "condition",
            name: label.to_string(),
        })
    }

    pub fn label(&self, condition: usize) -> &str {
        &self.spec.vocab[condition]
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.spec.tokens, self.spec.xi_dim]
    }

    /// Mixture mean of a condition (average of its component means).
    pub fn mixture_mean(&self, condition: usize) -> Tensor {
        let comps = &self.means[condition];
        let mut acc = Tensor::zeros(comps[0].shape());
        for c in comps {
            acc = acc.add(c).expect("same shape");
        }
        acc.scale(1.0 / comps.len() as f64)
    }

    /// The ground-truth cross-space map, token by token.
    pub fn map_to_omega(&self, z_xi: &Tensor) -> Tensor {
        let lin = z_xi.matmul(&self.map).expect("latent width matches map");
        let k = self.spec.map_severity;
        if k == 0.0 {
            lin
        } else {
            lin.map(|x| math::tanh(k * x) / k)
        }
    }

    /// The same map recorded on a tape.
    pub fn map_to_omega_var(&self, tape: &Tape, z_xi: &Var) -> Var {
        let lin = z_xi.matmul(&tape.constant(self.map.clone()));
        let k = self.spec.map_severity;
        if k == 0.0 {
            lin
        } else {
            lin.scale(k).tanh().scale(1.0 / k)
        }
    }

    pub fn sample_latent(&self, condition: usize, rng: &mut Rng) -> Result<Tensor> {
        if condition >= self.vocab_size() {
            return Err(Error::Unknown {
                kind: "condition",
                name: format!("#{condition}"),
            });
        }
        let comps = &self.means[condition];
        let k = rng.below(comps.len());
        let noise = gaussian(rng, comps[k].shape()).scale(self.spec.latent_std);
        comps[k].add(&noise)
    }

    pub fn sample_pair(&self, condition: usize, rng: &mut Rng) -> Result<Sample> {
        let z_xi = self.sample_latent(condition, rng)?;
        let z_omega = self.map_to_omega(&z_xi);
        Ok(Sample {
            condition,
            z_xi,
            cond_xi: self.cond_xi[condition].clone(),
            z_omega,
            cond_omega: self.cond_omega[condition].clone(),
        })
    }

    /// A pair under a uniformly drawn condition.
    pub fn sample_any(&self, rng: &mut Rng) -> Sample {
        let c = rng.below(self.vocab_size());
        self.sample_pair(c, rng).expect("condition in range")
    }

    /// The condition whose mixture mean lies furthest from `condition`'s.
    pub fn farthest_condition(&self, condition: usize) -> usize {
        let m = self.mixture_mean(condition);
        (0..self.vocab_size())
            .filter(|&c| c != condition)
            .max_by(|&a, &b| {
                let da = self.mixture_mean(a).sub(&m).unwrap().sq_norm();
                let db = self.mixture_mean(b).sub(&m).unwrap().sq_norm();
                da.total_cmp(&db)
            })
            .expect("at least two conditions")
    }
}

/// Builds the world deterministically from its spec.
pub fn make_world(spec: WorldSpec) -> Result<ToyWorld> {
    spec.validate()?;
    let root = Rng::new(spec.seed, 0);
    let (n, dx, dw, dc, v) = (spec.tokens, spec.xi_dim, spec.omega_dim, spec.cond_dim, spec.vocab.len());

    let map = if spec.identity_map {
        Tensor::eye(dx)
    } else {
        orthonormal_rows(&mut root.fork(STREAM_MAP), dx, dw)
    };
    let cond_xi = separated_embeddings(&mut root.fork(STREAM_COND_XI), v, dc)?;
    let cond_omega = separated_embeddings(&mut root.fork(STREAM_COND_OMEGA), v, dw)?;

    let mut rng = root.fork(STREAM_CENTERS);
    let lift = gaussian(&mut rng, &[n * dx, dc]);
    let means = (0..v)
        .map(|c| {
            let center = match spec.center_mode {
                CenterMode::Linear => {
                    let col = cond_xi[c].reshape(&[dc, 1]).expect("cond column");
                    lift.matmul(&col).expect("lift").reshape(&[n, dx]).expect("center").scale(spec.latent_scale)
                }
                CenterMode::Antipodal => {
                    let sign = if c == 0 { 1.0 } else { -1.0 };
                    Tensor::full(&[n, dx], sign * spec.latent_scale)
                }
            };
            (0..spec.mixture_components)
                .map(|_| center.add(&gaussian(&mut rng, &[n, dx]).scale(spec.mixture_spread)).expect("same shape"))
                .collect()
        })
        .collect();

    let mut world = ToyWorld {
        map,
        cond_xi,
        cond_omega,
        means,
        vlm: ToyVlm {
            w: Tensor::zeros(&[dw, spec.vlm_hidden]),
            c: Tensor::zeros(&[spec.vlm_hidden]),
            prototypes: Tensor::zeros(&[v, spec.vlm_hidden]),
            bias: Tensor::zeros(&[v]),
            temperature: spec.vlm_temperature,
        },
        spec,
    };
    calibrate_vlm(&mut world);
    Ok(world)
}

/// Draws the head's random features, then sets each slot's prototype to the
/// mean hidden feature of its condition.
fn calibrate_vlm(world: &mut ToyWorld) {
    let (dw, h, v) = (world.spec.omega_dim, world.spec.vlm_hidden, world.vocab_size());
    let root = Rng::new(world.spec.seed, 0);
    let mut rng = root.fork(STREAM_VLM);
    world.vlm.w = gaussian(&mut rng, &[dw, h]).scale(2.0 / math::sqrt(dw as f64));
    world.vlm.c = gaussian(&mut rng, &[h]).scale(0.1);
    let mut rng = root.fork(STREAM_CALIBRATION);
    let m = world.spec.vlm_calibration_samples.max(1);
    let mut protos = Vec::with_capacity(v * h);
    let mut bias = Vec::with_capacity(v);
    for c in 0..v {
        let mut acc = vec![0.0; h];
        for _ in 0..m {
            let s = world.sample_pair(c, &mut rng).expect("condition in range");
            let hid = world.vlm.hidden(&s.z_omega);
            acc.iter_mut().zip(hid.data()).for_each(|(a, b)| *a += b / m as f64);
        }
        bias.push(-0.5 * acc.iter().map(|x| x * x).sum::<f64>());
        protos.extend(acc);
    }
    world.vlm.prototypes = Tensor::new(&[v, h], protos).expect("v x h");
    world.vlm.bias = Tensor::vector(bias);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &Tensor, b: &Tensor) -> f64 {
        a.dot(b).unwrap() / (a.norm() * b.norm())
    }

    #[test]
    fn same_seed_same_world() {
        let a = make_world(WorldSpec::default()).unwrap();
        let b = make_world(WorldSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = make_world(WorldSpec { seed: 1, ..WorldSpec::default() }).unwrap();
        assert_ne!(a.map, c.map);
    }

    #[test]
    fn identity_map_is_pure_nonlinearity() {
        let spec = WorldSpec {
            omega_dim: 8,
            identity_map: true,
            ..WorldSpec::default()
        };
        let w = make_world(spec).unwrap();
        let mut rng = Rng::new(0, 9);
        let z = gaussian(&mut rng, &[4, 8]);
        let k = w.spec.map_severity;
        assert_eq!(w.map_to_omega(&z), z.map(|x| math::tanh(k * x) / k));
    }

    #[test]
    fn dimension_constraints() {
        let bad = WorldSpec {
            omega_dim: 4,
            ..WorldSpec::default()
        };
        assert!(matches!(make_world(bad), Err(Error::Config { field: "omega_dim", .. })));
        let bad = WorldSpec {
            vocab: vec!["a".into()],
            concept_pairs: vec![],
            ..WorldSpec::default()
        };
        assert!(make_world(bad).is_err());
        let bad = WorldSpec {
            identity_map: true,
            ..WorldSpec::default()
        };
        assert!(make_world(bad).is_err());
    }

    #[test]
    fn condition_embeddings_separated() {
        for seed in 0..20 {
            let w = make_world(WorldSpec { seed, ..WorldSpec::default() }).unwrap();
            for embs in [&w.cond_xi, &w.cond_omega] {
                for i in 0..embs.len() {
                    for j in 0..i {
                        assert!(cosine(&embs[i], &embs[j]) <= 0.5);
                    }
                }
            }
        }
        // More conditions than dimensions goes through rejection sampling.
        let spec = WorldSpec {
            cond_dim: 6,
            ..WorldSpec::default()
        };
        let w = make_world(spec).unwrap();
        for i in 0..8 {
            for j in 0..i {
                assert!(cosine(&w.cond_xi[i], &w.cond_xi[j]) <= 0.5);
            }
        }
    }

    #[test]
    fn pairs_follow_the_map() {
        let w = make_world(WorldSpec::default()).unwrap();
        let mut rng = Rng::new(5, 0);
        for c in 0..w.vocab_size() {
            let s = w.sample_pair(c, &mut rng).unwrap();
            assert_eq!(s.z_omega, w.map_to_omega(&s.z_xi));
            assert_eq!(s.cond_xi, w.cond_xi[c]);
        }
        assert!(w.sample_pair(99, &mut rng).is_err());
        let a = w.sample_pair(1, &mut Rng::new(5, 3)).unwrap();
        let b = w.sample_pair(1, &mut Rng::new(5, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_converges_to_mixture_mean() {
        let w = make_world(WorldSpec::default()).unwrap();
        let mut rng = Rng::new(6, 0);
        for c in [0, 3] {
            let target = w.mixture_mean(c);
            let mut acc = Tensor::zeros(target.shape());
            for _ in 0..1000 {
                acc = acc.add(&w.sample_latent(c, &mut rng).unwrap()).unwrap();
            }
            let mean = acc.scale(1e-3);
            let rel = mean.sub(&target).unwrap().norm() / target.norm();
            assert!(rel <= 0.05, "condition {c}: rel {rel}");
        }
    }

    #[test]
    fn map_is_injective_on_random_pairs() {
        let w = make_world(WorldSpec::default()).unwrap();
        let mut rng = Rng::new(7, 0);
        for _ in 0..10_000 {
            let a = gaussian(&mut rng, &[1, 8]).scale(2.0);
            let b = gaussian(&mut rng, &[1, 8]).scale(2.0);
            if a.sub(&b).unwrap().norm() < 1e-3 {
                continue;
            }
            assert!(w.map_to_omega(&a).sub(&w.map_to_omega(&b)).unwrap().norm() > 0.0);
        }
    }

    #[test]
    fn logit_pair_properties() {
        let w = make_world(WorldSpec::default()).unwrap();
        let mut rng = Rng::new(8, 0);
        let s = w.sample_pair(2, &mut rng).unwrap();
        let p = w.vlm.toy_logits(&s.z_omega, (2, 3)).unwrap();
        assert!((p.neg() + p.pos() - 1.0).abs() < 1e-12);
        assert!(w.vlm.toy_logits(&s.z_omega, (2, 8)).is_err());
        assert!(w.vlm.toy_logits(&s.z_omega, (2, 2)).is_err());
        let raw = w.vlm.logits(&s.z_omega);
        let shifted = LogitPair::from_scores(raw[2] + 7.5, raw[3] + 7.5);
        assert!((shifted.neg() - p.neg()).abs() < 1e-12);
    }

    #[test]
    fn vlm_prefers_the_sampled_condition() {
        let w = make_world(WorldSpec::default()).unwrap();
        let mut rng = Rng::new(9, 0);
        for c in 0..w.vocab_size() {
            let far = w.farthest_condition(c);
            let mut wins = 0;
            for _ in 0..1000 {
                let own = w.sample_pair(c, &mut rng).unwrap();
                let other = w.sample_pair(far, &mut rng).unwrap();
                let p_own = w.vlm.toy_logits(&own.z_omega, (c, far)).unwrap().neg();
                let p_other = w.vlm.toy_logits(&other.z_omega, (c, far)).unwrap().neg();
                if p_own > p_other {
                    wins += 1;
                }
            }
            assert!(wins >= 900, "condition {c}: {wins}/1000");
        }
    }
}
