//! Clustering and mixture modeling for binary categorical data.
//!
//! `catmix` implements two complementary ways of finding subgroups in a
//! dataset of binary indicators, together with everything needed to choose
//! between candidate solutions and to relate the subgroups to other
//! variables:
//!
//! * [`kmodes`] — Huang-style k-modes clustering under simple-matching
//!   distance, with multi-restart fitting, within-cluster cost and
//!   silhouette validation, and a k-sweep for elbow plots.
//! * [`lca`] — latent class analysis (a finite mixture of Bernoulli
//!   distributions) estimated by EM, with two-stage multi-start
//!   orchestration, posterior class probabilities, and parametric
//!   simulation.
//! * [`selection`] — information criteria (BIC, aBIC, CAIC, AWE), the
//!   bootstrapped likelihood ratio test, and a class-enumeration sweep.
//! * [`diagnostics`] — posterior classification diagnostics: relative
//!   entropy, modal assignment, mcaP, AvePP, OCC, and bootstrap
//!   class-proportion intervals.
//! * [`threestep`] — ML three-step auxiliary-variable analysis relating
//!   latent classes to a covariate and a distal outcome while accounting
//!   for classification error.
//! * [`compare`] — cross-tabulation and agreement scoring between any two
//!   hard partitions.
//! * [`dataset`] — CSV ingestion, validation, summaries, and response
//!   pattern collapsing.
//! * [`report`] — run orchestration and plot-ready artifact emission for
//!   the `catmix` command-line tool.
//!
//! Every stochastic entry point takes an explicit `u64` seed and derives
//! independent per-task streams from it, so results are reproducible down
//! to the byte.
//!
//! ```
//! use catmix::lca::{self, LcaParams, StartPolicy};
//!
//! // Simulate 300 observations from a well-separated two-class model,
//! // then recover it.
//! let truth = LcaParams::new(
//!     vec![0.5, 0.5],
//!     vec![vec![0.9, 0.9, 0.9, 0.9], vec![0.1, 0.1, 0.1, 0.1]],
//! )
//! .unwrap();
//! let (data, _labels) = lca::simulate(&truth, 300, 42).unwrap();
//! let report = lca::fit_multistart(&data, 2, StartPolicy::new(20, 5).unwrap(), 7).unwrap();
//! assert!(report.best_fit.converged);
//! ```

pub mod compare;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod kmodes;
pub mod lca;
pub mod report;
pub mod selection;
pub mod threestep;

pub(crate) mod rng;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
