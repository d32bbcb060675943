//! Geometric-context volume contrast pre-training.
//!
//! The crate generates synthetic phantom volumes whose organs keep a
//! consistent relative layout, derives overlap-proportion position labels
//! from a grid of base crops, and trains a small volumetric encoder to
//! predict those labels from cosine similarities. An EMA teacher projector,
//! an inter-volume consistency term and a two-stage omni-supervised
//! pipeline (supervised + self-supervised + confidence-filtered pseudo
//! labels) complete the method.
//!
//! Everything runs on a small reverse-mode differentiation engine
//! ([`autodiff`]) so that every loss can be checked against finite
//! differences.
//!
//! Runnable walkthroughs live in `examples/`; the `voco` binary wires the
//! same pieces into a command line.

// NaN must fail the positivity checks, hence `!(x > 0)` over `x <= 0`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod crop;
pub mod eval;
pub mod losses;
pub mod model;
pub mod omni;
pub mod real;
pub mod rng;
pub mod trainer;
pub mod volume;

pub use autodiff::{Tape, Tensor, Var};
pub use crop::{BaseGrid, CropBox, PositionLabelSet};
pub use losses::LossBreakdown;

pub use real::{Precision, Real};
pub use volume::{PhantomSpec, Region, Volume};
