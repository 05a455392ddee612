//! Oracle suites behind `transporter oracle`.
//!
//! Each check compares an implementation value with an independent
//! reference: central finite differences for gradients, a dense log-domain
//! solver for transport plans, closed forms for Hellinger distances and the
//! exact endpoint of a Gaussian probability path for Euler sampling.

use anyhow::Result;
use serde::Serialize;
use transporter_core::concept::{concept_loss, concept_loss_on, hellinger, LogitPair};
use transporter_core::coupling::loss::{
    loss_projection, loss_projection_var, loss_structure, loss_structure_var, Reduction,
};
use transporter_core::flow::{
    cfm_loss, cfm_loss_var, euler_generate, GaussianPathField, TimeInput, VelocityNet, VelocityNetConfig,
};
use transporter_core::nn::{collect_grads, Module};
use transporter_core::oracle::central_difference;
use transporter_core::rng::gaussian;
use transporter_core::sliced_ot::{
    exact_entropic_oracle, project, rho_ot_forward, rho_ot_forward_var, rho_ot_loss, rho_ot_loss_var, sinkhorn,
    slice_cost, OtConfig, ProjectionBank, TransportPlan,
};
use transporter_core::{Rng, Tape, Tensor};

use crate::config::OracleConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    pub check: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub pass: bool,
}

impl Check {
    fn new(suite: &str, check: &str, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let pass = value.is_finite() && lower.is_none_or(|l| value >= l) && upper.is_none_or(|u| value <= u);
        Check {
            suite: suite.into(),
            check: check.into(),
            value,
            lower,
            upper,
            pass,
        }
    }

    fn at_most(suite: &str, check: &str, value: f64, upper: f64) -> Self {
        Self::new(suite, check, value, None, Some(upper))
    }
}

pub const GRADIENT_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

pub fn run(suite: &str, cfg: &OracleConfig) -> Result<Vec<Check>> {
    match suite {
        "gradients" => gradients(cfg.gradient_points, cfg.seed),
        "sinkhorn" => sinkhorn_suite(cfg.seed),
        "hellinger" => hellinger_suite(cfg.seed),
        "euler" => euler_suite(cfg.seed),
        other => anyhow::bail!("unknown oracle suite `{other}`"),
    }
}

fn flat<M: Module>(m: &M) -> Tensor {
    Tensor::vector(m.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect())
}

fn set_flat<M: Module>(m: &mut M, x: &Tensor) {
    let mut off = 0;
    for (_, p) in m.named_params_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&x.data()[off..off + n]);
        off += n;
    }
}

fn flat_grad<M: Module>(m: &M) -> Vec<f64> {
    m.named_params()
        .iter()
        .flat_map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

fn worst(points: usize, mut one: impl FnMut() -> Result<f64>) -> Result<f64> {
    let mut max = 0.0f64;
    for _ in 0..points {
        let e = one()?;
        // NaN must not be swallowed by max.
        if !e.is_finite() {
            return Ok(f64::NAN);
        }
        max = max.max(e);
    }
    Ok(max)
}

/// Gradient norms below this are judged absolutely: the error is
/// `|a - b| / (max(|a|, |b|) + GRAD_FLOOR)`, so a pass means
/// `|a - b| <= tol * max(|a|, |b|) + tol * GRAD_FLOOR`. Where the true
/// gradient vanishes, a pure ratio is finite-difference roundoff over roundoff.
pub const GRAD_FLOOR: f64 = 1e-4;

fn grad_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / (norm(a).max(norm(b)) + GRAD_FLOOR)
}

/// Largest relative error between tape gradients and central differences,
/// per differentiable loss, over `points` random parameter points each.
pub fn gradients(points: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed, 1);
    let mut out = Vec::new();
    let s = "gradients";

    let e = worst(points, || {
        let (a, b) = (gaussian(&mut rng, &[4, 3]), gaussian(&mut rng, &[4, 3]));
        let tape = Tape::new();
        let av = tape.leaf(a.clone(), true);
        let g = tape.backward(&loss_projection_var(&av, &tape.constant(b.clone()), Reduction::Mean)?)?;
        let f = |x: &Tensor| loss_projection(x, &b, Reduction::Mean).expect("shapes match");
        Ok(grad_error(g.wrt(&av).expect("leaf"), &central_difference(&f, &a, FD_STEP)))
    })?;
    out.push(Check::at_most(s, "projection_loss", e, GRADIENT_TOL));

    let e = worst(points, || {
        let (a, b) = (gaussian(&mut rng, &[4, 3]), gaussian(&mut rng, &[4, 3]));
        let tape = Tape::new();
        let av = tape.leaf(a.clone(), true);
        let g = tape.backward(&loss_structure_var(&av, &tape.constant(b.clone()), Reduction::Mean)?)?;
        let f = |x: &Tensor| loss_structure(x, &b, Reduction::Mean).expect("shapes match");
        Ok(grad_error(g.wrt(&av).expect("leaf"), &central_difference(&f, &a, FD_STEP)))
    })?;
    out.push(Check::at_most(s, "gram_loss", e, GRADIENT_TOL));

    let ot = OtConfig {
        slices: 5,
        temperature: 0.5,
        reg_strength: 0.1,
        sinkhorn_iters: 3,
    };
    let e = worst(points, || {
        let (z1, z2, target) =
            (gaussian(&mut rng, &[4, 3]), gaussian(&mut rng, &[4, 3]), gaussian(&mut rng, &[4, 3]));
        let mut bank = ProjectionBank::new(&mut rng, 3, ot)?;
        let tape = Tape::new();
        let z1v = tape.leaf(z1.clone(), true);
        let (zt, _) = rho_ot_forward_var(&tape, &z1v, &tape.constant(z2.clone()), &bank)?;
        let loss = rho_ot_loss_var(&zt, &tape.constant(target.clone()), Reduction::Mean)?;
        let g = tape.backward(&loss)?;
        let analytic_z = g.wrt(&z1v).expect("leaf").to_vec();
        collect_grads(&g, &mut bank)?;
        let analytic_bank = flat_grad(&bank);

        let total = |z: &Tensor, b: &ProjectionBank| {
            rho_ot_loss(&rho_ot_forward(z, &z2, b).expect("forward").0, &target, Reduction::Mean).expect("loss")
        };
        let fz = |x: &Tensor| total(x, &bank);
        let ez = grad_error(&analytic_z, &central_difference(&fz, &z1, FD_STEP));
        let fb = |x: &Tensor| {
            let mut b = bank.clone();
            set_flat(&mut b, x);
            total(&z1, &b)
        };
        let eb = grad_error(&analytic_bank, &central_difference(&fb, &flat(&bank), FD_STEP));
        Ok(ez.max(eb))
    })?;
    out.push(Check::at_most(s, "transport_loss", e, GRADIENT_TOL));

    let tiny = VelocityNetConfig {
        hidden: 5,
        time_frequencies: 1,
    };
    let e = worst(points, || {
        let mut net = VelocityNet::new(&mut rng, 2, 2, 2, tiny);
        let batch: Vec<_> = (0..3).map(|_| (gaussian(&mut rng, &[2, 2]), gaussian(&mut rng, &[2]))).collect();
        let draw = rng.next_u64();
        let tape = Tape::new();
        let loss = cfm_loss_var(&tape, &net, &batch, &mut Rng::new(draw, 0))?;
        let g = tape.backward(&loss)?;
        collect_grads(&g, &mut net)?;
        let analytic = flat_grad(&net);
        let base = net.clone();
        let f = |x: &Tensor| {
            let mut n = base.clone();
            set_flat(&mut n, x);
            cfm_loss(&n, &batch, &mut Rng::new(draw, 0)).expect("loss")
        };
        Ok(grad_error(&analytic, &central_difference(&f, &flat(&base), FD_STEP)))
    })?;
    out.push(Check::at_most(s, "flow_matching_loss", e, GRADIENT_TOL));

    let e = worst(points, || {
        let mut net = VelocityNet::new(&mut rng, 2, 3, 3, tiny);
        net.set_trainable(false);
        let z = gaussian(&mut rng, &[2, 3]);
        let (cm, cp, q) = (gaussian(&mut rng, &[3]), gaussian(&mut rng, &[3]), gaussian(&mut rng, &[3]));
        let (t, delta) = (rng.uniform(), rng.uniform());
        let tape = Tape::new();
        let qv = tape.leaf(q.clone(), true);
        let g = tape.backward(&concept_loss_on(&tape, &net, &qv, &z, &cm, &cp, t, delta)?.loss)?;
        let f = |x: &Tensor| concept_loss(&net, x, &z, &cm, &cp, t, delta).expect("loss");
        Ok(grad_error(g.wrt(&qv).expect("leaf"), &central_difference(&f, &q, FD_STEP)))
    })?;
    out.push(Check::at_most(s, "concept_loss", e, GRADIENT_TOL));
    Ok(out)
}

/// Residual changes below this are floating-point noise around 1.
pub const ROUNDOFF: f64 = 4.0 * f64::EPSILON;

fn positive_plan(rng: &mut Rng, n: usize) -> Result<TransportPlan> {
    let d = (0..n * n).map(|_| rng.uniform_range(0.05, 1.0)).collect();
    Ok(TransportPlan::new(Tensor::new(&[n, n], d)?)?)
}

/// Marginal convergence and monotonicity on random 16x16 plans, and the
/// single-slice plan against the dense entropic solver.
pub fn sinkhorn_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed, 2);
    let s = "sinkhorn";
    let (mut worst_final, mut worst_rise) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let mut p = positive_plan(&mut rng, 16)?;
        let mut prev = p.marginal_residual();
        for _ in 0..50 {
            p = sinkhorn(&p, 1)?;
            let r = p.marginal_residual();
            worst_rise = worst_rise.max(r - prev);
            prev = r;
        }
        worst_final = worst_final.max(prev);
    }
    let mut out = vec![
        Check::at_most(s, "residual_after_50_sweeps_16x16", worst_final, 1e-6),
        // Once converged the residual sits at a few ulps of 1 and jitters.
        Check::at_most(s, "largest_residual_rise", worst_rise, ROUNDOFF),
    ];

    let mut worst_kl = 0.0f64;
    for _ in 0..5 {
        let (z1, z2) = (gaussian(&mut rng, &[5, 3]), gaussian(&mut rng, &[5, 3]));
        let tau = 0.5;
        let bank = ProjectionBank::new(
            &mut rng,
            3,
            OtConfig {
                slices: 1,
                temperature: tau,
                reg_strength: 0.0,
                sinkhorn_iters: 500,
            },
        )?;
        let (_, plan) = rho_ot_forward(&z1, &z2, &bank)?;
        let a = project(&z1, &Tensor::vector(bank.source.row(0).to_vec()))?;
        let b = project(&z2, &Tensor::vector(bank.target.row(0).to_vec()))?;
        // |a_i - b_j| as a dense cost at temperature tau.
        let cost = slice_cost(&a, &b, 1.0)?.scale(-1.0);
        let dense = exact_entropic_oracle(&cost, tau)?;
        worst_kl = worst_kl.max(dense.kl_to(&plan));
    }
    out.push(Check::at_most(s, "single_slice_vs_dense_kl_5x5", worst_kl, 1e-6));
    Ok(out)
}

fn pair(a: f64) -> LogitPair {
    LogitPair::new(a, 1.0 - a).expect("valid pair")
}

pub fn hellinger_suite(seed: u64) -> Result<Vec<Check>> {
    let s = "hellinger";
    let mut out = vec![
        Check::at_most(s, "equal_halves_is_zero", hellinger(&pair(0.5), &pair(0.5)), 0.0),
        Check::at_most(s, "disjoint_is_one", (hellinger(&pair(1.0), &pair(0.0)) - 1.0).abs(), 1e-12),
    ];
    let x = LogitPair::new(0.9, 0.1)?;
    let y = LogitPair::new(0.4, 0.6)?;
    // Closed form, written out independently.
    let reference = ((0.9f64.sqrt() - 0.4f64.sqrt()).powi(2) + (0.1f64.sqrt() - 0.6f64.sqrt()).powi(2)).sqrt()
        / std::f64::consts::SQRT_2;
    out.push(Check::at_most(s, "example_0.9_0.4_vs_0.3938", (hellinger(&x, &y) - 0.3938).abs(), 1e-4));
    out.push(Check::at_most(s, "example_vs_closed_form", (hellinger(&x, &y) - reference).abs(), 1e-12));

    let mut rng = Rng::new(seed, 3);
    let (mut out_of_range, mut asym, mut self_max, mut distinct_min, mut triangle) =
        (0usize, 0.0f64, 0.0f64, f64::INFINITY, 0usize);
    for _ in 0..10_000 {
        let (p, q, r) = (pair(rng.uniform()), pair(rng.uniform()), pair(rng.uniform()));
        let d = hellinger(&p, &q);
        if !(0.0..=1.0).contains(&d) {
            out_of_range += 1;
        }
        asym = asym.max((d - hellinger(&q, &p)).abs());
        self_max = self_max.max(hellinger(&p, &p));
        if p != q {
            distinct_min = distinct_min.min(d);
        }
        if hellinger(&p, &r) > d + hellinger(&q, &r) + 1e-12 {
            triangle += 1;
        }
    }
    out.push(Check::at_most(s, "outside_unit_interval", out_of_range as f64, 0.0));
    out.push(Check::at_most(s, "asymmetry", asym, 0.0));
    out.push(Check::at_most(s, "self_distance", self_max, 0.0));
    out.push(Check::new(s, "distinct_pairs_positive", distinct_min, Some(f64::MIN_POSITIVE), None));
    out.push(Check::at_most(s, "triangle_violations", triangle as f64, 0.0));
    Ok(out)
}

/// Mean terminal error of Euler sampling against the exact Gaussian-path
/// endpoint, for each step count.
pub fn euler_errors(seed: u64, t_bars: &[usize]) -> Result<Vec<f64>> {
    let mu = gaussian(&mut Rng::new(seed, 4), &[4, 8]);
    let field = GaussianPathField { mu, sigma: 0.5, cond: 1 };
    let cond = Tensor::zeros(&[1]);
    t_bars
        .iter()
        .map(|&tb| {
            let mut total = 0.0;
            for k in 0..16 {
                let traj = euler_generate(&field, &cond, tb, TimeInput::Normalized, &mut Rng::new(seed, 10 + k))?;
                total += traj[tb].latent.sub(&field.exact_endpoint(&traj[0].latent)?)?.norm();
            }
            Ok(total / 16.0)
        })
        .collect()
}

pub fn euler_suite(seed: u64) -> Result<Vec<Check>> {
    let e = euler_errors(seed, &[8, 16, 32])?;
    Ok(vec![
        Check::new("euler", "error_ratio_8_to_16", e[0] / e[1], Some(1.6), Some(2.4)),
        Check::new("euler", "error_ratio_16_to_32", e[1] / e[2], Some(1.6), Some(2.4)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_error_is_relative_above_the_floor() {
        let e = grad_error(&[3.0, 4.0], &[3.0, 4.0005]);
        assert!((e / 1e-4 - 1.0).abs() < 1e-3, "{e}");
        assert_eq!(grad_error(&[1.0], &[1.0]), 0.0);
        // Vanishing gradient with roundoff-sized disagreement.
        assert!(grad_error(&[4e-16], &[6e-10]) < 1e-5);
        // A missing gradient against a real one is still caught.
        assert!(grad_error(&[0.0, 0.0], &[1e-3, 0.0]) > 0.9);
    }

    #[test]
    fn every_suite_passes() {
        let cfg = OracleConfig {
            gradient_points: 3,
            ..OracleConfig::default()
        };
        for suite in crate::config::SUITES {
            for c in run(suite, &cfg).unwrap() {
                assert!(c.pass, "{c:?}");
            }
        }
        assert!(run("nope", &cfg).is_err());
    }

    #[test]
    fn check_bounds() {
        assert!(Check::at_most("s", "c", 1.0, 1.0).pass);
        assert!(!Check::at_most("s", "c", 1.5, 1.0).pass);
        assert!(!Check::at_most("s", "c", f64::NAN, 1.0).pass);
        assert!(!Check::new("s", "c", 0.5, Some(1.0), None).pass);
    }
}
