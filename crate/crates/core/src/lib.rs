//! Few-shot meta-learning over task distributions whose tasks differ in which
//! input modalities are present.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation with gradient-of-gradient support.
//! - [`nn`]: the multi-channel backbone, the task-aware aggregation network and
//!   the classifier head.
//! - [`tasks`]: heterogeneous task distributions, configuration vectors,
//!   synthetic episodes and the on-disk feature format.
//! - [`hetmaml`]: the bilevel meta-learner and its baselines.
//! - [`harness`]: experiment configuration and the command-line front end.

pub mod autodiff;
pub mod gradcheck;
pub mod harness;
pub mod hetmaml;
pub mod nn;
pub mod tasks;
