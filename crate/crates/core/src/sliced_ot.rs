//! Learnable sliced entropic transport.
//!
//! Two banks of `P` projection vectors map the source and target token sets
//! onto scalars. Each slice gets a 1-D cost `-|a_i - b_j| / tau`, a row
//! softmax (with per-row max subtraction), and a blend with the uniform plan.
//! The slice plans are averaged and pushed towards doubly stochastic form by
//! `K` Sinkhorn-Knopp sweeps (row then column). The transported embedding is
//! `T z_source`.
//!
//! Every step is recorded on the autodiff tape and differentiated through,
//! including the unrolled Sinkhorn sweeps. The plain-tensor functions run the
//! same code on a throwaway tape.
//!
//! [`exact_entropic_oracle`] solves the full doubly constrained entropic
//! problem on a dense cost in the log domain. It exists to check the sliced
//! path and is limited to small `N`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::coupling::loss::{loss_projection_var, loss_structure_var, Reduction};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Module;
use crate::rng::{gaussian, Rng};
use crate::tensor::Tensor;

/// Hyper-parameters of the transport module.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtConfig {
    /// Number of projection slices `P`.
    pub slices: usize,
    /// Cost temperature `tau > 0`.
    pub temperature: f64,
    /// Uniform-plan blend weight `lambda` in `[0, 1]`.
    pub reg_strength: f64,
    /// Sinkhorn-Knopp sweeps `K`; zero skips normalisation.
    pub sinkhorn_iters: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            slices: 100,
            temperature: 0.1,
            reg_strength: 0.05,
            sinkhorn_iters: 3,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 {
            return Err(Error::config("slices", "need at least one projection"));
        }
        check_tau(self.temperature)?;
        check_lambda(self.reg_strength)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config("temperature", alloc::format!("must be positive, got {tau}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("reg_strength", alloc::format!("must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Source and target projection banks, one row per slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBank {
    pub source: Tensor,
    pub target: Tensor,
    pub config: OtConfig,
}

impl ProjectionBank {
    /// Unit-normalised Gaussian rows.
    pub fn new(rng: &mut Rng, dim: usize, config: OtConfig) -> Result<Self> {
        config.validate()?;
        let mut unit_rows = || {
            let mut t = gaussian(rng, &[config.slices, dim]);
            for i in 0..config.slices {
                let row = &mut t.data_mut()[i * dim..(i + 1) * dim];
                let n = math::sqrt(row.iter().map(|x| x * x).sum());
                row.iter_mut().for_each(|x| *x /= n);
            }
            t.with_requires_grad(true)
        };
        let source = unit_rows();
        let target = unit_rows();
        Ok(ProjectionBank { source, target, config })
    }

    pub fn from_parts(source: Tensor, target: Tensor, config: OtConfig) -> Result<Self> {
        config.validate()?;
        if source.shape() != target.shape() || source.shape().len() != 2 {
            return Err(Error::shape("ProjectionBank", source.shape(), target.shape()));
        }
        if source.rows() != config.slices {
            return Err(Error::config("slices", alloc::format!("bank has {} rows", source.rows())));
        }
        Ok(ProjectionBank {
            source: source.with_requires_grad(true),
            target: target.with_requires_grad(true),
            config,
        })
    }

    pub fn slices(&self) -> usize {
        self.source.rows()
    }

    pub fn dim(&self) -> usize {
        self.source.cols()
    }
}

impl Module for ProjectionBank {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("bank.source".into(), &self.source), ("bank.target".into(), &self.target)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("bank.source".into(), &mut self.source), ("bank.target".into(), &mut self.target)]
    }
}

/// A square nonnegative matrix of transported mass.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan(Tensor);

impl TransportPlan {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let s = matrix.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("TransportPlan", s, &[]));
        }
        if matrix.data().iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::NumericDomain("transport plan entries must be nonnegative".into()));
        }
        Ok(TransportPlan(matrix.detached()))
    }

    pub fn uniform(n: usize) -> Self {
        TransportPlan(Tensor::full(&[n, n], 1.0 / n as f64))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn into_matrix(self) -> Tensor {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.0.row_sums()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.0.col_sums()
    }

    /// `max(|row sums - 1|, |col sums - 1|)`.
    pub fn marginal_residual(&self) -> f64 {
        self.row_sums()
            .into_iter()
            .chain(self.col_sums())
            .fold(0.0, |m, s| m.max(math::abs(s - 1.0)))
    }

    /// `sum p log(p / q)` over entries; zero entries of `self` contribute 0.
    pub fn kl_to(&self, other: &TransportPlan) -> f64 {
        self.0
            .data()
            .iter()
            .zip(other.0.data())
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * math::ln(p / q))
            .sum()
    }
}

fn single(tape_fn: impl FnOnce(&Tape) -> Result<Var>) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(tape_fn(&tape)?.value())
}

/// Inner product of every token with `p`.
pub fn project(z: &Tensor, p: &Tensor) -> Result<Tensor> {
    single(|t| project_var(&t.constant(z.detached()), &t.constant(p.detached())))
}

pub fn project_var(z: &Var, p: &Var) -> Result<Var> {
    let (zs, ps) = (z.shape(), p.shape());
    if zs.len() != 2 || ps.iter().product::<usize>() != zs[1] {
        return Err(Error::shape("project", &zs, &ps));
    }
    Ok(z.try_matmul(&p.try_reshape(&[zs[1], 1])?)?.reshape(&[zs[0]]))
}

/// `[i, j] -> -|a_i - b_j| / tau`.
pub fn slice_cost(a: &Tensor, b: &Tensor, tau: f64) -> Result<Tensor> {
    single(|t| slice_cost_var(&t.constant(a.detached()), &t.constant(b.detached()), tau))
}

pub fn slice_cost_var(a: &Var, b: &Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    a.try_neg_abs_diff(b, tau)
}

/// `(1 - lambda) softmax_rows(m) + lambda U`.
pub fn slice_plan(m: &Tensor, lambda: f64) -> Result<TransportPlan> {
    TransportPlan::new(single(|t| slice_plan_var(&t.constant(m.detached()), lambda))?)
}

pub fn slice_plan_var(m: &Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("slice_plan", &s, &[]));
    }
    let n = s[0] as f64;
    Ok(m.row_softmax().scale(1.0 - lambda).add_scalar(lambda / n))
}

/// Entrywise mean of equally sized plans.
pub fn average_plans(plans: &[TransportPlan]) -> Result<TransportPlan> {
    let tape = Tape::new();
    let vars: Vec<Var> = plans.iter().map(|p| tape.constant(p.0.clone())).collect();
    TransportPlan::new(average_plans_var(&vars)?.value())
}

pub fn average_plans_var(plans: &[Var]) -> Result<Var> {
    let (first, rest) = plans
        .split_first()
        .ok_or_else(|| Error::Contract("average_plans needs at least one plan".into()))?;
    let mut acc = first.clone();
    for p in rest {
        acc = acc.try_add(p)?;
    }
    Ok(acc.scale(1.0 / plans.len() as f64))
}

/// `k` alternating row and column normalisations.
pub fn sinkhorn(plan: &TransportPlan, k: usize) -> Result<TransportPlan> {
    TransportPlan::new(single(|t| sinkhorn_var(&t.constant(plan.0.clone()), k))?)
}

pub fn sinkhorn_var(t: &Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Ok(t.clone());
    }
    let v = t.value();
    if let Some(x) = v.data().iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::NumericDomain(alloc::format!("sinkhorn needs a strictly positive matrix, found {x}")));
    }
    let mut cur = t.clone();
    for _ in 0..k {
        cur = cur.row_normalize().col_normalize();
    }
    Ok(cur)
}

/// Full forward pass: returns `(T z1, T)`.
pub fn rho_ot_forward(z1: &Tensor, z2: &Tensor, bank: &ProjectionBank) -> Result<(Tensor, TransportPlan)> {
    let tape = Tape::new();
    let (zt, plan) = rho_ot_forward_var(&tape, &tape.constant(z1.detached()), &tape.constant(z2.detached()), bank)?;
    Ok((zt.value(), TransportPlan::new(plan.value())?))
}

pub fn rho_ot_forward_var(tape: &Tape, z1: &Var, z2: &Var, bank: &ProjectionBank) -> Result<(Var, Var)> {
    let cfg = bank.config;
    cfg.validate()?;
    let (s1, s2) = (z1.shape(), z2.shape());
    if s1 != s2 || s1.len() != 2 || s1[1] != bank.dim() {
        return Err(Error::shape("rho_ot_forward", &s1, &s2));
    }
    let source = tape.param(&bank.source);
    let target = tape.param(&bank.target);
    // All slice projections at once: column rho of z1 p1^T is a_rho.
    let a_all = z1.matmul(&source.transpose()).transpose();
    let b_all = z2.matmul(&target.transpose()).transpose();
    let plans = (0..bank.slices())
        .map(|rho| {
            let cost = slice_cost_var(&a_all.select_row(rho), &b_all.select_row(rho), cfg.temperature)?;
            slice_plan_var(&cost, cfg.reg_strength)
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = sinkhorn_var(&average_plans_var(&plans)?, cfg.sinkhorn_iters)?;
    Ok((plan.matmul(z1), plan))
}

/// Squared error plus Gram-matrix error between the transported and target
/// embeddings.
pub fn rho_ot_loss(z_tilde: &Tensor, z_target: &Tensor, reduction: Reduction) -> Result<f64> {
    let tape = Tape::new();
    Ok(rho_ot_loss_var(&tape.constant(z_tilde.detached()), &tape.constant(z_target.detached()), reduction)?.item())
}

pub fn rho_ot_loss_var(z_tilde: &Var, z_target: &Var, reduction: Reduction) -> Result<Var> {
    if z_tilde.shape() != z_target.shape() {
        return Err(Error::shape("rho_ot_loss", &z_tilde.shape(), &z_target.shape()));
    }
    Ok(loss_projection_var(z_tilde, z_target, reduction)?.add(&loss_structure_var(z_tilde, z_target, reduction)?))
}

/// Largest `N` the dense oracle accepts.
pub const ORACLE_MAX_N: usize = 32;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_MAX_ITERS: usize = 10_000;

/// Dense entropic transport on `exp(-cost / tau)` with every row and column
/// summing to one, solved by log-domain Sinkhorn to a marginal residual of
/// `1e-10`.
pub fn exact_entropic_oracle(cost: &Tensor, tau: f64) -> Result<TransportPlan> {
    check_tau(tau)?;
    let s = cost.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("exact_entropic_oracle", s, &[]));
    }
    let n = s[0];
    if n > ORACLE_MAX_N {
        return Err(Error::Contract(alloc::format!("oracle limited to N <= {ORACLE_MAX_N}, got {n}")));
    }
    let log_k: Vec<f64> = cost.data().iter().map(|c| -c / tau).collect();
    let (mut f, mut g) = (vec![0.0; n], vec![0.0; n]);
    let lse = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + math::ln(v.iter().map(|x| math::exp(x - m)).sum())
    };
    let mut residual = f64::INFINITY;
    for _ in 0..ORACLE_MAX_ITERS {
        for i in 0..n {
            f[i] = -lse(&mut (0..n).map(|j| log_k[i * n + j] + g[j]));
        }
        for j in 0..n {
            g[j] = -lse(&mut (0..n).map(|i| log_k[i * n + j] + f[i]));
        }
        residual = (0..n)
            .map(|i| math::abs((0..n).map(|j| math::exp(log_k[i * n + j] + f[i] + g[j])).sum::<f64>() - 1.0))
            .fold(0.0, f64::max);
        if residual <= ORACLE_TOL {
            let data = (0..n * n).map(|k| math::exp(log_k[k] + f[k / n] + g[k % n])).collect();
            return TransportPlan::new(Tensor::new(&[n, n], data)?);
        }
    }
    Err(Error::NonConvergence {
        iterations: ORACLE_MAX_ITERS,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn cfg(p: usize, tau: f64, lambda: f64, k: usize) -> OtConfig {
        OtConfig {
            slices: p,
            temperature: tau,
            reg_strength: lambda,
            sinkhorn_iters: k,
        }
    }

    fn positive(rng: &mut Rng, n: usize) -> TransportPlan {
        let d = (0..n * n).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        TransportPlan::new(Tensor::new(&[n, n], d).unwrap()).unwrap()
    }

    #[test]
    fn project_examples() {
        let p = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(project(&Tensor::eye(2), &p).unwrap().data(), &[1.0, 0.0]);
        let mut rng = Rng::new(1, 0);
        let z = gaussian(&mut rng, &[5, 3]);
        assert_eq!(project(&z, &Tensor::zeros(&[3])).unwrap().data(), &[0.0; 5]);
        let p = gaussian(&mut rng, &[3]);
        let out = project(&z, &p).unwrap();
        for i in 0..5 {
            let d: f64 = z.row(i).iter().zip(p.data()).map(|(a, b)| a * b).sum();
            assert!((out.data()[i] - d).abs() <= 1e-12);
        }
        assert!(project(&z, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn slice_cost_examples() {
        let a = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let m = slice_cost(&a, &a, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(m.get(i, j), 0.0);
                } else {
                    assert!(m.get(i, j) <= 0.0);
                }
            }
        }
        let m = slice_cost(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![3.0]), 1.0).unwrap();
        assert_eq!(m.data(), &[-3.0]);
        let b = Tensor::vector(vec![1.0, 0.0, -0.5]);
        let m1 = slice_cost(&a, &b, 0.4).unwrap();
        let m2 = slice_cost(&a, &b, 0.8).unwrap();
        for (x, y) in m1.data().iter().zip(m2.data()) {
            assert!((x / 2.0 - y).abs() < 1e-15);
        }
        assert!(matches!(slice_cost(&a, &b, 0.0), Err(Error::Config { .. })));
        assert!(matches!(slice_cost(&a, &b, -1.0), Err(Error::Config { .. })));
    }

    #[test]
    fn slice_plan_examples() {
        let mut rng = Rng::new(2, 0);
        let m = gaussian(&mut rng, &[4, 4]);
        let u = slice_plan(&m, 1.0).unwrap();
        assert!(u.matrix().data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let a = Tensor::vector(vec![0.0, 1.0, 2.0, 3.0]);
        let sharp = slice_plan(&slice_cost(&a, &a, 1e-3).unwrap(), 0.0).unwrap();
        for i in 0..4 {
            assert!(sharp.matrix().get(i, i) > 1.0 - 1e-12);
        }
        for lambda in [0.0, 0.05, 0.5, 1.0] {
            let p = slice_plan(&m, lambda).unwrap();
            for s in p.row_sums() {
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
        assert!(slice_plan(&m, 1.5).is_err());
        assert!(slice_plan(&m, -0.1).is_err());
    }

    #[test]
    fn row_softmax_examples() {
        let ln2 = core::f64::consts::LN_2;
        let m = Tensor::from_rows(&[&[0.0, 0.0], &[ln2, 0.0], &[1000.0, 999.0]]).unwrap();
        let tape = Tape::new();
        let s = tape.constant(m).row_softmax().value();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15 && (s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        let ref_ = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap()).row_softmax().value();
        assert!((s.get(2, 0) - ref_.get(0, 0)).abs() < 1e-15);
    }

    #[test]
    fn average_examples() {
        let mut rng = Rng::new(3, 0);
        let p = positive(&mut rng, 4);
        assert_eq!(average_plans(core::slice::from_ref(&p)).unwrap(), p);
        let i = TransportPlan::new(Tensor::eye(3)).unwrap();
        let u = TransportPlan::uniform(3);
        let avg = average_plans(&[i.clone(), u.clone()]).unwrap();
        let expect = Tensor::eye(3).add(u.matrix()).unwrap().scale(0.5);
        assert_eq!(avg.matrix(), &expect);
        let plans: Vec<_> = (0..7).map(|_| positive(&mut rng, 4)).collect();
        let avg = average_plans(&plans).unwrap();
        for k in 0..16 {
            let s: f64 = plans.iter().map(|p| p.matrix().data()[k]).sum();
            assert!((avg.matrix().data()[k] - s / 7.0).abs() <= 1e-12);
        }
        assert!(matches!(average_plans(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn sinkhorn_fixed_points() {
        let i = TransportPlan::new(Tensor::eye(4)).unwrap();
        assert_eq!(sinkhorn(&i, 0).unwrap(), i);
        let u = TransportPlan::uniform(5);
        for k in [0, 1, 3, 10] {
            let s = sinkhorn(&u, k).unwrap();
            for (a, b) in s.matrix().data().iter().zip(u.matrix().data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        // Identity has zeros, so k >= 1 is a domain error.
        assert!(matches!(sinkhorn(&i, 1), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn sinkhorn_converges_on_random_8x8() {
        let mut rng = Rng::new(4, 0);
        let p = positive(&mut rng, 8);
        let s = sinkhorn(&p, 50).unwrap();
        assert!(s.marginal_residual() <= 1e-6, "{}", s.marginal_residual());
    }

    #[test]
    fn sinkhorn_residual_non_increasing() {
        let mut rng = Rng::new(5, 0);
        for _ in 0..50 {
            let mut p = positive(&mut rng, 6);
            let mut prev = f64::INFINITY;
            for _ in 0..30 {
                p = sinkhorn(&p, 1).unwrap();
                let r = p.marginal_residual();
                assert!(r <= prev + 1e-15, "{r} > {prev}");
                prev = r;
            }
        }
    }

    #[test]
    fn forward_identity_when_sharp() {
        let mut rng = Rng::new(6, 0);
        let z = gaussian(&mut rng, &[5, 4]);
        let row = gaussian(&mut rng, &[1, 4]);
        let bank = ProjectionBank::from_parts(row.clone(), row, cfg(1, 1e-4, 0.0, 0)).unwrap();
        let (zt, plan) = rho_ot_forward(&z, &z, &bank).unwrap();
        for i in 0..5 {
            assert!(plan.matrix().get(i, i) > 1.0 - 1e-9);
        }
        assert!(zt.sub(&z).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn forward_uniform_averages_tokens() {
        let mut rng = Rng::new(7, 0);
        let z1 = gaussian(&mut rng, &[6, 4]);
        let z2 = gaussian(&mut rng, &[6, 4]);
        let bank = ProjectionBank::new(&mut rng, 4, cfg(10, 0.1, 1.0, 3)).unwrap();
        let (zt, _) = rho_ot_forward(&z1, &z2, &bank).unwrap();
        let mean = z1.mean_rows();
        for i in 0..6 {
            for j in 0..4 {
                assert!((zt.get(i, j) - mean.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slice_plans_row_stochastic_and_positive() {
        let mut rng = Rng::new(8, 0);
        for _ in 0..20 {
            let a = gaussian(&mut rng, &[6]);
            let b = gaussian(&mut rng, &[6]);
            let p = slice_plan(&slice_cost(&a, &b, 0.1).unwrap(), 0.05).unwrap();
            for s in p.row_sums() {
                assert!((s - 1.0).abs() <= 1e-12);
            }
            assert!(p.matrix().data().iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn default_plan_marginals_close_to_oracle() {
        let mut rng = Rng::new(9, 0);
        let z1 = gaussian(&mut rng, &[6, 4]);
        let z2 = gaussian(&mut rng, &[6, 4]);
        let bank = ProjectionBank::new(&mut rng, 4, OtConfig::default()).unwrap();
        let (_, plan) = rho_ot_forward(&z1, &z2, &bank).unwrap();
        // Oracle plans have unit marginals by construction.
        let mut cost = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            for j in 0..6 {
                cost.data_mut()[i * 6 + j] = z1.row(i).iter().zip(z2.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            }
        }
        let oracle = exact_entropic_oracle(&cost, 0.1).unwrap();
        let (r, c) = (plan.row_sums(), plan.col_sums());
        let (ro, co) = (oracle.row_sums(), oracle.col_sums());
        for k in 0..6 {
            assert!((r[k] - ro[k]).abs() <= 0.05, "row {k}: {} vs {}", r[k], ro[k]);
            assert!((c[k] - co[k]).abs() <= 0.05);
        }
    }

    #[test]
    fn oracle_examples() {
        let n = 4;
        let mut cost = Tensor::full(&[n, n], 10.0);
        for i in 0..n {
            cost.data_mut()[i * n + i] = 0.0;
        }
        let p = exact_entropic_oracle(&cost, 0.05).unwrap();
        for i in 0..n {
            assert!(p.matrix().get(i, i) > 1.0 - 1e-12);
        }
        let p = exact_entropic_oracle(&Tensor::zeros(&[5, 5]), 0.3).unwrap();
        assert!(p.matrix().data().iter().all(|&x| (x - 0.2).abs() < 1e-12));
        assert!(exact_entropic_oracle(&Tensor::zeros(&[33, 33]), 1.0).is_err());
    }

    #[test]
    fn oracle_agrees_with_long_single_slice() {
        let mut rng = Rng::new(10, 0);
        for _ in 0..5 {
            let z1 = gaussian(&mut rng, &[5, 3]);
            let z2 = gaussian(&mut rng, &[5, 3]);
            let bank = ProjectionBank::new(&mut rng, 3, cfg(1, 0.5, 0.0, 500)).unwrap();
            let (_, plan) = rho_ot_forward(&z1, &z2, &bank).unwrap();
            let a = project(&z1, &Tensor::vector(bank.source.row(0).to_vec())).unwrap();
            let b = project(&z2, &Tensor::vector(bank.target.row(0).to_vec())).unwrap();
            let cost = slice_cost(&a, &b, 1.0).unwrap().scale(-1.0);
            let oracle = exact_entropic_oracle(&cost, 0.5).unwrap();
            let kl = oracle.kl_to(&plan);
            assert!(kl <= 1e-6, "kl {kl}");
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = Rng::new(11, 0);
        let x = gaussian(&mut rng, &[4, 3]);
        assert_eq!(rho_ot_loss(&x, &x, Reduction::Sum).unwrap(), 0.0);
        let l = rho_ot_loss(&x, &Tensor::zeros(&[4, 3]), Reduction::Sum).unwrap();
        let expect = x.sq_norm() + crate::coupling::loss::gram(&x).sq_norm();
        assert!((l - expect).abs() <= 1e-12 * expect);
        assert!(rho_ot_loss(&x, &Tensor::zeros(&[3, 4]), Reduction::Sum).is_err());
    }

    #[test]
    fn diagonal_mass_grows_as_tau_shrinks() {
        let mut rng = Rng::new(12, 0);
        let z = gaussian(&mut rng, &[5, 4]);
        let row = gaussian(&mut rng, &[3, 4]);
        let mut prev = 0.0;
        for tau in [1.0, 0.3, 0.1, 0.03, 0.003] {
            let bank = ProjectionBank::from_parts(row.clone(), row.clone(), cfg(3, tau, 0.0, 0)).unwrap();
            let (_, plan) = rho_ot_forward(&z, &z, &bank).unwrap();
            let diag: f64 = (0..5).map(|i| plan.matrix().get(i, i)).sum::<f64>() / 5.0;
            assert!(diag >= prev - 1e-12);
            prev = diag;
        }
        assert!(prev > 0.999);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_equivariant(seed in 0u64..10_000, shift in 1usize..5) {
            let mut rng = Rng::new(seed, 0);
            let n = 5;
            let z1 = gaussian(&mut rng, &[n, 3]);
            let z2 = gaussian(&mut rng, &[n, 3]);
            let bank = ProjectionBank::new(&mut rng, 3, cfg(8, 0.2, 0.05, 3)).unwrap();
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let permute = |z: &Tensor| {
                let rows: Vec<&[f64]> = perm.iter().map(|&p| z.row(p)).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let (zt, _) = rho_ot_forward(&z1, &z2, &bank).unwrap();
            let (zp, _) = rho_ot_forward(&permute(&z1), &permute(&z2), &bank).unwrap();
            let expect = permute(&zt);
            prop_assert!(zp.sub(&expect).unwrap().max_abs() < 1e-12);
        }

        #[test]
        fn plans_positive_with_reg(seed in 0u64..10_000, lambda in 0.001f64..1.0) {
            let mut rng = Rng::new(seed, 0);
            let z1 = gaussian(&mut rng, &[4, 3]).scale(30.0);
            let z2 = gaussian(&mut rng, &[4, 3]).scale(30.0);
            let bank = ProjectionBank::new(&mut rng, 3, cfg(4, 0.01, lambda, 3)).unwrap();
            let (_, plan) = rho_ot_forward(&z1, &z2, &bank).unwrap();
            prop_assert!(plan.matrix().data().iter().all(|&x| x > 0.0));
        }
    }
}
