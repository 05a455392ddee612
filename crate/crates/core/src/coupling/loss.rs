//! Gram matrices and the two reconstruction losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a squared-error sum is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sum of squares.
    Sum,
    /// Sum divided by the number of compared entries (`N*D` for embeddings,
    /// `N*N` for Gram matrices).
    #[default]
    Mean,
}

impl Reduction {
    fn apply(self, v: &Var) -> Var {
        match self {
            Reduction::Sum => v.sum(),
            Reduction::Mean => v.mean(),
        }
    }
}

/// Token-by-token inner products, `z z^T`.
pub fn gram(z: &Tensor) -> Tensor {
    let tape = Tape::new();
    gram_var(&tape.constant(z.detached())).value()
}

pub fn gram_var(z: &Var) -> Var {
    z.matmul(&z.transpose())
}

/// Squared error between projected and target embeddings.
pub fn loss_projection(pred: &Tensor, target: &Tensor, reduction: Reduction) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_projection_var(&tape.constant(pred.detached()), &tape.constant(target.detached()), reduction)?.item())
}

pub fn loss_projection_var(pred: &Var, target: &Var, reduction: Reduction) -> Result<Var> {
    let diff = target.try_sub(pred)?;
    Ok(reduction.apply(&diff.square()))
}

/// Squared Frobenius distance between Gram matrices.
pub fn loss_structure(pred: &Tensor, target: &Tensor, reduction: Reduction) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_structure_var(&tape.constant(pred.detached()), &tape.constant(target.detached()), reduction)?.item())
}

pub fn loss_structure_var(pred: &Var, target: &Var, reduction: Reduction) -> Result<Var> {
    let (ps, ts) = (pred.shape(), target.shape());
    if ps.len() != 2 || ts.len() != 2 || ps[0] != ts[0] {
        return Err(Error::shape("loss_structure", &ps, &ts));
    }
    let diff = gram_var(target).sub(&gram_var(pred));
    Ok(reduction.apply(&diff.square()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::relative_error;
    use crate::rng::{gaussian, Rng};

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&Tensor::eye(2)), Tensor::eye(2));
        let z = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        assert_eq!(gram(&z), Tensor::ones(&[2, 2]));
    }

    #[test]
    fn gram_symmetric_psd() {
        let mut rng = Rng::new(3, 0);
        for _ in 0..20 {
            let z = gaussian(&mut rng, &[5, 3]);
            let g = gram(&z);
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(g.get(i, j), g.get(j, i));
                }
            }
            let x = gaussian(&mut rng, &[5]);
            let q: f64 = (0..5).map(|i| (0..5).map(|j| x.data()[i] * g.get(i, j) * x.data()[j]).sum::<f64>()).sum();
            assert!(q >= -1e-12);
        }
    }

    #[test]
    fn projection_loss_examples() {
        let mut rng = Rng::new(4, 0);
        let z = gaussian(&mut rng, &[3, 4]);
        assert_eq!(loss_projection(&z, &z, Reduction::Sum).unwrap(), 0.0);
        let c = 0.7;
        let shifted = z.map(|x| x + c);
        let l = loss_projection(&shifted, &z, Reduction::Sum).unwrap();
        assert!((l - c * c * 12.0).abs() < 1e-12);
        let lm = loss_projection(&shifted, &z, Reduction::Mean).unwrap();
        assert!((lm - c * c).abs() < 1e-12);
        assert!(loss_projection(&z, &Tensor::zeros(&[4, 3]), Reduction::Sum).is_err());
    }

    #[test]
    fn projection_loss_gradient_is_analytic() {
        let mut rng = Rng::new(5, 0);
        let pred = gaussian(&mut rng, &[3, 4]);
        let target = gaussian(&mut rng, &[3, 4]);
        let tape = Tape::new();
        let p = tape.leaf(pred.clone(), true);
        let loss = loss_projection_var(&p, &tape.constant(target.clone()), Reduction::Sum).unwrap();
        let g = tape.backward(&loss).unwrap();
        let analytic = pred.sub(&target).unwrap().scale(2.0);
        assert!(relative_error(g.wrt(&p).unwrap(), analytic.data()) < 1e-10);
    }

    #[test]
    fn structure_loss_matches_double_loop() {
        let mut rng = Rng::new(6, 0);
        let a = gaussian(&mut rng, &[4, 3]);
        let b = gaussian(&mut rng, &[4, 5]);
        let (ga, gb) = (gram(&a), gram(&b));
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let d = gb.get(i, j) - ga.get(i, j);
                brute += d * d;
            }
        }
        let l = loss_structure(&a, &b, Reduction::Sum).unwrap();
        assert!((l - brute).abs() <= 1e-12 * brute.max(1.0));
        let lm = loss_structure(&a, &b, Reduction::Mean).unwrap();
        assert!((lm - brute / 16.0).abs() <= 1e-12 * brute.max(1.0));
        assert!(loss_structure(&a, &Tensor::zeros(&[3, 3]), Reduction::Sum).is_err());
    }

    #[test]
    fn gram_loss_rotation_invariant_projection_loss_not() {
        let mut rng = Rng::new(7, 0);
        let z = gaussian(&mut rng, &[4, 2]);
        let (s, c) = (0.6_f64, 0.8_f64);
        let q = Tensor::from_rows(&[&[c, -s], &[s, c]]).unwrap();
        let rotated = z.matmul(&q).unwrap();
        assert!(loss_structure(&rotated, &z, Reduction::Sum).unwrap() < 1e-20);
        assert!(loss_projection(&rotated, &z, Reduction::Sum).unwrap() > 1e-3);
    }
}
