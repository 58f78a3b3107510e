//! Preference-based VCG resource allocation.
//!
//! The planner never sees cost functions. It asks each agent pairwise
//! preference questions chosen by a D-optimal design, fits a linear cost model
//! to the answers by norm-constrained Bradley–Terry maximum likelihood, and
//! then allocates and pays with the VCG rule on the learned costs.
//!
//! Module map:
//!
//! - [`domain`]: allocation spaces, linear costs, utilities, preference samplers
//! - [`design`]: D-optimal query design (Frank–Wolfe, pruning, rounding)
//! - [`estimation`]: constrained MLE and the confidence radius / error bound calculators
//! - [`mechanism`]: VCG and pay-as-bid outcomes over cost tables
//! - [`protocol`]: one-shot and multi-round protocols, rationality estimation

pub mod design;
pub mod domain;
pub mod error;
pub mod estimation;
pub mod math;
pub mod mechanism;
pub mod protocol;
pub mod seed;

pub use error::{Error, Result};
