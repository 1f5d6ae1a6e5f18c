//! Multi-vehicle coordination at unsignalized intersections.
//!
//! The crate bundles everything needed to study a return-conditioned
//! sequence model as an intersection controller:
//!
//! - [`world`]: intersection geometry, fixed vehicle paths, longitudinal
//!   kinematics and collision detection.
//! - [`episode`]: scenario sampling, rewards, returns-to-go and the episode
//!   loop shared by every policy.
//! - [`aim`]: the space-time reservation coordinator used as the teacher.
//! - [`oracle`]: exhaustive crossing-order scheduling (the optimal baseline).
//! - [`datagen`]: corpus generation, mixing and the on-disk dataset format.
//! - [`model`]: the Decision Transformer, its training loop and rollouts.
//! - [`eval`]: metrics and the evaluation suites.
//! - [`plot`]: SVG rendering of episodes.

// Validation is written as `!(x > y)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aim;
pub mod config;
pub mod datagen;
pub mod episode;
pub mod error;
pub mod eval;
pub mod model;
pub mod oracle;
pub mod plot;
pub mod rng;
pub mod world;

pub use config::{Environment, RunConfig};
pub use error::{Error, Result};
