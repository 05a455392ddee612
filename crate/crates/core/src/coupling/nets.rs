//! The projector (mixer blocks) and the structure network (attention blocks).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{init_weight, Linear, Module};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub depth: usize,
    pub hidden: usize,
    pub token_hidden: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            depth: 4,
            hidden: 32,
            token_hidden: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerBlock {
    /// `[N, M]` and `[M, N]`, acting on the token axis.
    pub token_in: Tensor,
    pub token_out: Tensor,
    pub channel_in: Linear,
    pub channel_out: Linear,
}

impl MixerBlock {
    fn new(rng: &mut Rng, tokens: usize, cfg: &ProjectorConfig) -> Self {
        MixerBlock {
            token_in: init_weight(rng, tokens, cfg.token_hidden, 1.0),
            token_out: init_weight(rng, cfg.token_hidden, tokens, 0.5),
            channel_in: Linear::new(rng, cfg.hidden, 2 * cfg.hidden, 1.0),
            channel_out: Linear::new(rng, 2 * cfg.hidden, cfg.hidden, 0.5),
        }
    }

    fn forward(&self, tape: &Tape, x: &Var) -> Var {
        // Token mixing on x^T, so the token weights right-multiply.
        let xt = x.transpose();
        let mixed = xt.matmul(&tape.param(&self.token_in)).tanh().matmul(&tape.param(&self.token_out));
        let y = x.add(&mixed.transpose());
        let h = self.channel_in.forward(tape, &y).tanh();
        y.add(&self.channel_out.forward(tape, &h))
    }

    fn push<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.token_in"), &self.token_in));
        out.push((format!("{prefix}.token_out"), &self.token_out));
        self.channel_in.push_named(&format!("{prefix}.channel_in"), out);
        self.channel_out.push_named(&format!("{prefix}.channel_out"), out);
    }

    fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.token_in"), &mut self.token_in));
        out.push((format!("{prefix}.token_out"), &mut self.token_out));
        self.channel_in.push_named_mut(&format!("{prefix}.channel_in"), out);
        self.channel_out.push_named_mut(&format!("{prefix}.channel_out"), out);
    }
}

/// Maps `(z_xi [N, D_xi], condition [C])` to `[N, D_omega]`. The condition is
/// appended to every token before the input layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorNet {
    pub tokens: usize,
    pub in_dim: usize,
    pub cond_dim: usize,
    pub out_dim: usize,
    pub input: Linear,
    pub blocks: Vec<MixerBlock>,
    pub output: Linear,
}

impl ProjectorNet {
    pub fn new(rng: &mut Rng, tokens: usize, in_dim: usize, cond_dim: usize, out_dim: usize, cfg: &ProjectorConfig) -> Self {
        ProjectorNet {
            tokens,
            in_dim,
            cond_dim,
            out_dim,
            input: Linear::new(rng, in_dim + cond_dim, cfg.hidden, 1.0),
            blocks: (0..cfg.depth).map(|_| MixerBlock::new(rng, tokens, cfg)).collect(),
            output: Linear::new(rng, cfg.hidden, out_dim, 1.0),
        }
    }

    pub fn forward_on(&self, tape: &Tape, z: &Var, cond: &Var) -> Result<Var> {
        if z.shape() != [self.tokens, self.in_dim] {
            return Err(Error::shape("projector input", &[self.tokens, self.in_dim], &z.shape()));
        }
        if cond.shape().iter().product::<usize>() != self.cond_dim {
            return Err(Error::shape("projector condition", &[self.cond_dim], &cond.shape()));
        }
        let x = z.concat_cols(&cond.repeat_rows(self.tokens));
        let mut h = self.input.forward(tape, &x);
        for b in &self.blocks {
            h = b.forward(tape, &h);
        }
        Ok(self.output.forward(tape, &h))
    }

    pub fn forward(&self, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward_on(&tape, &tape.constant(z.detached()), &tape.constant(cond.detached()))?.value())
    }
}

impl Module for ProjectorNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.input.push_named("projector.input", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.push(&format!("projector.block{i}"), &mut out);
        }
        self.output.push_named("projector.output", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.input.push_named_mut("projector.input", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.push_mut(&format!("projector.block{i}"), &mut out);
        }
        self.output.push_named_mut("projector.output", &mut out);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureConfig {
    pub depth: usize,
    /// Width of the single attention head.
    pub attention: usize,
    pub mlp_hidden: usize,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig {
            depth: 2,
            attention: 16,
            mlp_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub proj: Tensor,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl AttentionBlock {
    fn new(rng: &mut Rng, dim: usize, cfg: &StructureConfig) -> Self {
        AttentionBlock {
            query: init_weight(rng, dim, cfg.attention, 1.0),
            key: init_weight(rng, dim, cfg.attention, 1.0),
            value: init_weight(rng, dim, cfg.attention, 1.0),
            proj: init_weight(rng, cfg.attention, dim, 0.5),
            mlp_in: Linear::new(rng, dim, cfg.mlp_hidden, 1.0),
            mlp_out: Linear::new(rng, cfg.mlp_hidden, dim, 0.5),
        }
    }

    fn forward(&self, tape: &Tape, x: &Var) -> Var {
        let a = self.query.cols();
        let q = x.matmul(&tape.param(&self.query));
        let k = x.matmul(&tape.param(&self.key));
        let v = x.matmul(&tape.param(&self.value));
        let attn = q.matmul(&k.transpose()).scale(1.0 / math::sqrt(a as f64)).row_softmax();
        let y = x.add(&attn.matmul(&v).matmul(&tape.param(&self.proj)));
        let h = self.mlp_in.forward(tape, &y).tanh();
        y.add(&self.mlp_out.forward(tape, &h))
    }

    fn push<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.query"), &self.query));
        out.push((format!("{prefix}.key"), &self.key));
        out.push((format!("{prefix}.value"), &self.value));
        out.push((format!("{prefix}.proj"), &self.proj));
        self.mlp_in.push_named(&format!("{prefix}.mlp_in"), out);
        self.mlp_out.push_named(&format!("{prefix}.mlp_out"), out);
    }

    fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.query"), &mut self.query));
        out.push((format!("{prefix}.key"), &mut self.key));
        out.push((format!("{prefix}.value"), &mut self.value));
        out.push((format!("{prefix}.proj"), &mut self.proj));
        self.mlp_in.push_named_mut(&format!("{prefix}.mlp_in"), out);
        self.mlp_out.push_named_mut(&format!("{prefix}.mlp_out"), out);
    }
}

/// Shape-preserving `[N, D] -> [N, D]` stack of residual attention blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureNet {
    pub dim: usize,
    pub blocks: Vec<AttentionBlock>,
}

impl StructureNet {
    pub fn new(rng: &mut Rng, dim: usize, cfg: &StructureConfig) -> Self {
        StructureNet {
            dim,
            blocks: (0..cfg.depth).map(|_| AttentionBlock::new(rng, dim, cfg)).collect(),
        }
    }

    pub fn forward_on(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::shape("structure input", &[0, self.dim], &s));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(tape, &h);
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward_on(&tape, &tape.constant(x.detached()))?.value())
    }
}

impl Module for StructureNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            b.push(&format!("structure.block{i}"), &mut out);
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.push_mut(&format!("structure.block{i}"), &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{central_difference, relative_error};
    use crate::rng::gaussian;

    #[test]
    fn projector_shapes_and_determinism() {
        let mut rng = Rng::new(0, 0);
        let net = ProjectorNet::new(&mut rng, 4, 8, 8, 16, &ProjectorConfig::default());
        let z = gaussian(&mut rng, &[4, 8]);
        let c = gaussian(&mut rng, &[8]);
        let y = net.forward(&z, &c).unwrap();
        assert_eq!(y.shape(), &[4, 16]);
        assert_eq!(y, net.forward(&z, &c).unwrap());
        assert!(net.forward(&gaussian(&mut rng, &[3, 8]), &c).is_err());
        assert!(net.forward(&z, &gaussian(&mut rng, &[7])).is_err());
    }

    #[test]
    fn structure_preserves_shape() {
        let mut rng = Rng::new(1, 0);
        let net = StructureNet::new(&mut rng, 16, &StructureConfig::default());
        let x = gaussian(&mut rng, &[4, 16]);
        assert_eq!(net.forward(&x).unwrap().shape(), &[4, 16]);
        assert!(net.forward(&gaussian(&mut rng, &[4, 8])).is_err());
    }

    #[test]
    fn parameter_names_unique() {
        let mut rng = Rng::new(2, 0);
        let p = ProjectorNet::new(&mut rng, 4, 8, 8, 16, &ProjectorConfig::default());
        let s = StructureNet::new(&mut rng, 16, &StructureConfig::default());
        let mut names: Vec<String> = p.named_params().into_iter().chain(s.named_params()).map(|(n, _)| n).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(3, 0);
        let small = ProjectorConfig {
            depth: 2,
            hidden: 5,
            token_hidden: 3,
        };
        let net = ProjectorNet::new(&mut rng, 3, 2, 2, 4, &small);
        let z = gaussian(&mut rng, &[3, 2]);
        let c = gaussian(&mut rng, &[2]);
        let f = |t: &Tensor| net.forward(t, &c).unwrap().map(|v| v * v).sum();
        let tape = Tape::new();
        let zv = tape.leaf(z.clone(), true);
        let out = net.forward_on(&tape, &zv, &tape.constant(c.clone())).unwrap().square().sum();
        let g = tape.backward(&out).unwrap();
        assert!(relative_error(g.wrt(&zv).unwrap(), &central_difference(&f, &z, 1e-5)) <= 1e-4);

        let snet = StructureNet::new(
            &mut rng,
            4,
            &StructureConfig {
                depth: 2,
                attention: 3,
                mlp_hidden: 5,
            },
        );
        let x = gaussian(&mut rng, &[3, 4]);
        let f = |t: &Tensor| snet.forward(t).unwrap().map(|v| v * v).sum();
        let tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = snet.forward_on(&tape, &xv).unwrap().square().sum();
        let g = tape.backward(&out).unwrap();
        assert!(relative_error(g.wrt(&xv).unwrap(), &central_difference(&f, &x, 1e-5)) <= 1e-4);
    }
}
