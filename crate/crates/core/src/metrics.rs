//! Similarity metrics between embeddings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Cosine similarity of the flattened tensors. Zero when exactly one side is
/// zero; undefined when both are.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("cosine", a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 && nb == 0.0 {
        return Err(Error::NumericDomain("cosine of two zero tensors is undefined".into()));
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((a.dot(b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// `sum |a - b|` for `p = 1`, Euclidean distance for `p = 2`.
pub fn lp_distance(a: &Tensor, b: &Tensor, p: u32) -> Result<f64> {
    same_shape("lp_distance", a, b)?;
    let diffs = a.data().iter().zip(b.data()).map(|(x, y)| x - y);
    match p {
        1 => Ok(diffs.map(math::abs).sum()),
        2 => Ok(math::sqrt(diffs.map(|d| d * d).sum())),
        _ => Err(Error::config("p", format!("only p = 1 or 2 is supported, got {p}"))),
    }
}

/// How raw embeddings become distributions for KL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlNormalization {
    #[default]
    Softmax,
    /// Shift by the minimum, add a small floor, divide by the total.
    ShiftedSum,
}

fn to_distribution(x: &Tensor, norm: KlNormalization) -> Vec<f64> {
    let d = x.data();
    match norm {
        KlNormalization::Softmax => {
            let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = d.iter().map(|v| math::exp(v - m)).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        KlNormalization::ShiftedSum => {
            let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let e: Vec<f64> = d.iter().map(|v| v - m + 1e-6).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    }
}

/// `KL(softmax(a) || softmax(b))` over the flattened tensors.
pub fn kl_embeddings(a: &Tensor, b: &Tensor) -> Result<f64> {
    kl_embeddings_with(a, b, KlNormalization::Softmax)
}

pub fn kl_embeddings_with(a: &Tensor, b: &Tensor, norm: KlNormalization) -> Result<f64> {
    same_shape("kl_embeddings", a, b)?;
    let (p, q) = (to_distribution(a, norm), to_distribution(b, norm));
    let kl: f64 = p.iter().zip(&q).map(|(pi, qi)| if *pi == 0.0 { 0.0 } else { pi * math::ln(pi / qi) }).sum();
    // Round-off can leave tiny negatives.
    Ok(kl.max(0.0))
}

/// Whether metrics compare samples one by one or compare the set means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average of the per-sample metric values.
    #[default]
    PerSample,
    /// Metrics between the mean prediction and the mean target.
    MeanEncoding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cosine: f64,
    pub l1: f64,
    pub l2: f64,
    pub kl: f64,
    pub samples: usize,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub pooling: Pooling,
    pub kl_normalization: KlNormalization,
}

fn mean_tensor(ts: &[&Tensor]) -> Result<Tensor> {
    let mut acc = Tensor::zeros(ts[0].shape());
    for t in ts {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / ts.len() as f64))
}

impl MetricReport {
    /// Metrics over `(prediction, target)` pairs.
    pub fn compute(pairs: &[(Tensor, Tensor)], config: MetricConfig, fingerprint: &str, seeds: &[u64]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("no samples to score".into()));
        }
        let score = |a: &Tensor, b: &Tensor| -> Result<[f64; 4]> {
            Ok([
                cosine(a, b)?,
                lp_distance(a, b, 1)?,
                lp_distance(a, b, 2)?,
                kl_embeddings_with(a, b, config.kl_normalization)?,
            ])
        };
        let values = match config.pooling {
            Pooling::PerSample => {
                let mut acc = [0.0; 4];
                for (a, b) in pairs {
                    let v = score(a, b)?;
                    acc.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                }
                acc.map(|s| s / pairs.len() as f64)
            }
            Pooling::MeanEncoding => {
                let preds: Vec<&Tensor> = pairs.iter().map(|(a, _)| a).collect();
                let targets: Vec<&Tensor> = pairs.iter().map(|(_, b)| b).collect();
                score(&mean_tensor(&preds)?, &mean_tensor(&targets)?)?
            }
        };
        Ok(MetricReport {
            cosine: values[0],
            l1: values[1],
            l2: values[2],
            kl: values[3],
            samples: pairs.len(),
            fingerprint: fingerprint.into(),
            seeds: seeds.to_vec(),
        })
    }
}
