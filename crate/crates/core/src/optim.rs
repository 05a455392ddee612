//! AdamW with decoupled weight decay.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig { lr, ..Self::default() }
    }
}

/// Moment accumulators for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update over `params`, which must be given in the same order on
    /// every call. Gradient slots are read, not cleared.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad().is_none() {
                return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| alloc::vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - math::powi(c.beta1, t);
        let bc2 = 1.0 - math::powi(c.beta2, t);
        for (k, (name, p)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            if m.len() != p.len() {
                return Err(Error::shape("adamw_step", &[m.len()], p.shape()));
            }
            let g = p.grad().map(<[f64]>::to_vec).ok_or_else(|| Error::Contract(format!("`{name}` lost its gradient")))?;
            let data = p.data_mut();
            for i in 0..data.len() {
                data[i] -= c.lr * c.weight_decay * data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= c.lr * mh / (math::sqrt(vh) + c.eps);
            }
        }
        Ok(())
    }
}

/// Clears every gradient slot.
pub fn zero_grads(params: &mut [(String, &mut Tensor)]) {
    for (_, p) in params.iter_mut() {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn named(t: &mut Tensor) -> Vec<(String, &mut Tensor)> {
        vec![("w".to_string(), t)]
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut w = Tensor::vector(vec![0.3, -1.2]).with_requires_grad(true);
        w.accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut st = AdamWState::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        st.step(&mut named(&mut w)).unwrap();
        assert_eq!(w.data(), &[0.3, -1.2]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps).
        let mut w = Tensor::vector(vec![0.0]).with_requires_grad(true);
        w.accumulate_grad(&[1.0]).unwrap();
        let mut st = AdamWState::new(AdamWConfig::default());
        st.step(&mut named(&mut w)).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((w.data()[0] - expected).abs() < 1e-15);
        assert!((w.data()[0] + 1e-3).abs() < 1e-6);
        assert_eq!(w.grad().unwrap(), &[1.0], "grads untouched");
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut w = Tensor::vector(vec![0.0]);
        let mut st = AdamWState::new(AdamWConfig::default());
        let err = st.step(&mut named(&mut w)).unwrap_err();
        assert!(format!("{err}").contains("`w`"));
    }

    #[test]
    fn quadratic_descends() {
        let mut w = Tensor::vector(vec![1.0]).with_requires_grad(true);
        let mut st = AdamWState::new(AdamWConfig::with_lr(1e-2));
        let mut trace = vec![1.0];
        for _ in 0..100 {
            w.zero_grad();
            let g = 2.0 * w.data()[0];
            w.accumulate_grad(&[g]).unwrap();
            st.step(&mut named(&mut w)).unwrap();
            trace.push(w.data()[0].abs());
        }
        for win in trace.chunks(10).collect::<Vec<_>>().windows(2) {
            let a: f64 = win[0].iter().sum::<f64>() / win[0].len() as f64;
            let b: f64 = win[1].iter().sum::<f64>() / win[1].len() as f64;
            assert!(b < a, "{a} -> {b}");
        }
        assert!(trace[100] < 1.0);
        assert_eq!(st.step, 100);
        assert_eq!(st.first[0].len(), 1);
    }
}
