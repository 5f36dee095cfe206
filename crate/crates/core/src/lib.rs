//! Photo-finishing parameter tuning.
//!
//! A nine-slider image pipeline treated as a black box, plus tuners that
//! search for slider settings reproducing a goal image: CMA-ES, random and
//! greedy search, and a goal-conditioned TD3 policy.

pub mod data;
pub mod error;
pub mod features;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod rewards;
pub mod rl;
pub mod stats;
pub mod tuners;
pub mod util;

pub use error::{Error, Result};
