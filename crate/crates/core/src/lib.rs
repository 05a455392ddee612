//! Numerical core for logits-to-latent steering experiments.
//!
//! Everything here is pure computation over `alloc` collections so the crate
//! builds under `#![no_std]`. File formats, configuration files, timing and
//! the command line live in the companion `transporter` crate.
//!
//! The pipeline, bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`rng`], [`optim`]: dense float64 arrays, a
//!   recorded-graph reverse-mode engine, counter-based seeded randomness and
//!   AdamW.
//! - [`sliced_ot`]: learnable sliced entropic transport with uniform
//!   regularisation and a few Sinkhorn-Knopp sweeps, plus a dense log-domain
//!   solver used as an oracle.
//! - [`coupling`]: the projector / structure networks that carry generator
//!   latents into the semantic embedding space.
//! - [`flow`]: conditional flow matching and Euler sampling.
//! - [`concept`]: Hellinger logit divergence and concept-vector training.
//! - [`toyworld`]: the synthetic universe with a known cross-space map and a
//!   frozen toy language head.
//! - [`metrics`]: cosine, l1, l2 and KL between embeddings.
#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod concept;
pub mod coupling;
mod error;
pub mod flow;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod sliced_ot;
pub mod tensor;
pub mod toyworld;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
