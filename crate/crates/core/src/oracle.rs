//! Independent reference computations used by tests and the `oracle` CLI
//! suite: central finite differences and a relative-error measure.
//!
//! Nothing here touches the autodiff engine; every value comes from plain
//! forward evaluations.

use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Vec<f64> {
    let mut probe = x.detached();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let hi = f(&probe);
            probe.data_mut()[i] = orig - step;
            let lo = f(&probe);
            probe.data_mut()[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, with an absolute floor of `1e-12` so that
/// two vanishing gradients compare as equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    let denom = math::sqrt(na).max(math::sqrt(nb));
    if denom < 1e-12 {
        return math::sqrt(diff);
    }
    math::sqrt(diff) / denom
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = alloc::vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / math::sqrt(vx * vy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_quadratic() {
        let x = Tensor::vector(alloc::vec![1.0, -2.0]);
        let g = central_difference(&|t: &Tensor| t.sq_norm(), &x, 1e-5);
        assert!(relative_error(&g, &[2.0, -4.0]) < 1e-9);
    }

    #[test]
    fn spearman_monotone_and_ties() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 1.0, 2.0]);
        assert!(s > 0.9 && s < 1.0, "{s}");
    }
}
