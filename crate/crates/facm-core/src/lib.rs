//! Desk-scale laboratory for flow-anchored consistency training on 2D
//! synthetic distributions.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — f64 tensors, a recording tape for reverse-mode gradients,
//!   and a dual-number forward sweep for directional derivatives.
//! * [`flow`] — linear-interpolant flow construction, the arctan time
//!   schedule, and the two conditioning schemes.
//! * [`data`] — analytic 2D distributions (eight Gaussians, two moons,
//!   checkerboard) with closed-form normalization.
//! * [`network`] — a conditioned MLP velocity model with sinusoidal time
//!   features, plus binary checkpoints.
//! * [`objectives`] — the anchored training loss (flow-matching anchor +
//!   shortcut-consistency term), guidance mixing, and reference targets for
//!   two related shortcut objectives.
//! * [`optim`] / [`trainer`] — AdamW, EMA, and the three training loops
//!   (teacher pretraining, distillation, from-scratch).
//! * [`sampler`] — few-step stochastic sampling and ODE reference solves.
//! * [`eval`] — energy distance, sliced Wasserstein-2, and report plumbing.
//! * [`config`] — flat key = value run configuration with strict parsing.
//! * [`verify`] — the hermetic self-check suite behind `facm-lab verify`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DualTensor, Gradients, Tape, Tensor, ValueId};
