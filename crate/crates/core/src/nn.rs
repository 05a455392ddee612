//! Small building blocks shared by the networks: parameter enumeration,
//! dense layers and initialisation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, Tape, Var};
use crate::optim::AdamWState;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{gaussian, Rng};
use crate::tensor::Tensor;

/// Anything that owns named parameter tensors.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn set_trainable(&mut self, on: bool) {
        for (_, p) in self.named_params_mut() {
            p.set_requires_grad(on);
            if !on {
                p.zero_grad();
            }
        }
    }

    fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Copies values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape.
    fn load_params(&mut self, table: &[(String, Tensor)]) -> Result<()> {
        for (name, p) in self.named_params_mut() {
            let src = table
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if src.shape() != p.shape() {
                return Err(Error::shape("load_params", p.shape(), src.shape()));
            }
            p.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    fn export_params(&self) -> Vec<(String, Tensor)> {
        self.named_params().into_iter().map(|(n, t)| (n, t.detached())).collect()
    }
}

/// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
pub fn init_weight(rng: &mut Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    gaussian(rng, &[fan_in, fan_out])
        .scale(gain / math::sqrt(fan_in as f64))
        .with_requires_grad(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        Linear {
            weight: init_weight(rng, fan_in, fan_out, gain),
            bias: Tensor::zeros(&[fan_out]).with_requires_grad(true),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        x.matmul(&tape.param(&self.weight)).add_row(&tape.param(&self.bias))
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Adds the gradients recorded on a tape into every trainable parameter of
/// `m`.
pub fn collect_grads<M: Module + ?Sized>(grads: &Gradients, m: &mut M) -> Result<()> {
    grads.accumulate_all(m.named_params_mut().into_iter().map(|(_, t)| t))
}

/// One optimiser step over the trainable parameters of `m`, then clears
/// their gradients.
pub fn apply_step<M: Module + ?Sized>(opt: &mut AdamWState, m: &mut M) -> Result<()> {
    let mut params: Vec<(String, &mut Tensor)> =
        m.named_params_mut().into_iter().filter(|(_, t)| t.requires_grad()).collect();
    opt.step(&mut params)?;
    for (_, t) in params.iter_mut() {
        t.zero_grad();
    }
    Ok(())
}
