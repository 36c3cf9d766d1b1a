//! Latent class analysis: a finite mixture of independent Bernoulli
//! indicators estimated by maximum likelihood.
//!
//! A K-class model has structural parameters π (class proportions) and
//! measurement parameters ρ, where `ρ[k][j]` is the probability that a
//! member of class k endorses item j. Items are conditionally independent
//! given class, so the likelihood of response pattern u under class k is
//! `Π_j ρ_kj^u_j (1−ρ_kj)^(1−u_j)` and the data log-likelihood is
//!
//! ```text
//! log L = Σ_i log Σ_k π_k Π_j ρ_kj^u_ij (1−ρ_kj)^(1−u_ij)
//! ```
//!
//! Estimation alternates E-steps (posterior class probabilities given
//! current parameters) and M-steps (weighted-mean updates of π and ρ)
//! until the log-likelihood is stable. Because EM only finds local
//! optima, [`fit_multistart`] runs a two-stage random-starts scheme and
//! reports how often the best solution converged and replicated.
//!
//! All likelihood work runs over collapsed response patterns, which is
//! exact and much faster than per-row evaluation when N ≫ 2^J.

mod em;
mod multistart;
mod simulate;

pub use em::{e_step, fit_em, fit_em_from, log_likelihood, m_step};
pub use multistart::{fit_multistart, fit_multistart_tol, MultistartReport, StartPolicy, REPLICATION_TOL};
pub use simulate::simulate;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Item probabilities are clamped to `[RHO_EPS, 1 − RHO_EPS]` so boundary
/// estimates (items endorsed by everyone or no one in a class) stay
/// representable without driving the log-likelihood to −∞.
pub const RHO_EPS: f64 = 1e-6;

/// Class proportions π and item-endorsement probabilities ρ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct LcaParams {
    pi: Vec<f64>,
    rho: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawParams {
    pi: Vec<f64>,
    rho: Vec<Vec<f64>>,
}

impl TryFrom<RawParams> for LcaParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        LcaParams::new(raw.pi, raw.rho)
    }
}

impl LcaParams {
    /// Validate and wrap parameter vectors: Σπ = 1 (within 1e-10), every
    /// π_k ∈ (0,1], every ρ_kj ∈ [ε, 1−ε].
    pub fn new(pi: Vec<f64>, rho: Vec<Vec<f64>>) -> Result<Self> {
        if pi.is_empty() || rho.len() != pi.len() {
            return Err(Error::InvalidParams {
                context: format!("{} proportions but {} rho rows", pi.len(), rho.len()),
            });
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParams {
                context: format!("class proportions sum to {sum}, expected 1"),
            });
        }
        for (k, &p) in pi.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidParams {
                    context: format!("pi[{k}] = {p} outside (0, 1]"),
                });
            }
        }
        let j = rho[0].len();
        if j == 0 {
            return Err(Error::InvalidParams {
                context: "rho has no items".into(),
            });
        }
        for (k, row) in rho.iter().enumerate() {
            if row.len() != j {
                return Err(Error::InvalidParams {
                    context: format!("rho[{k}] has {} items, expected {j}", row.len()),
                });
            }
            for (jj, &r) in row.iter().enumerate() {
                if !(r >= RHO_EPS && r <= 1.0 - RHO_EPS) {
                    return Err(Error::InvalidParams {
                        context: format!("rho[{k}][{jj}] = {r} outside [{RHO_EPS}, {}]", 1.0 - RHO_EPS),
                    });
                }
            }
        }
        Ok(Self { pi, rho })
    }

    pub fn n_classes(&self) -> usize {
        self.pi.len()
    }

    pub fn n_items(&self) -> usize {
        self.rho[0].len()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn rho(&self) -> &[Vec<f64>] {
        &self.rho
    }

    /// Free parameter count: K−1 proportions plus K·J item probabilities.
    pub fn npar(&self) -> usize {
        self.n_classes() - 1 + self.n_classes() * self.n_items()
    }

    /// The same model with classes reordered by `perm` (new index k holds
    /// old class `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_classes() {
            return Err(Error::InvalidParams {
                context: format!("permutation of length {} for {} classes", perm.len(), self.n_classes()),
            });
        }
        let pi = perm.iter().map(|&k| self.pi[k]).collect();
        let rho = perm.iter().map(|&k| self.rho[k].clone()).collect();
        Self::new(pi, rho)
    }
}

/// A fitted latent class model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LcaFit {
    pub params: LcaParams,
    /// Final log-likelihood, equal to `log_likelihood(&params, ds)`.
    pub loglik: f64,
    /// N×K posterior class probabilities; each row sums to 1.
    pub posteriors: Vec<Vec<f64>>,
    /// EM iterations performed (one per E-step).
    pub iterations: usize,
    /// Whether the log-likelihood stabilized before the iteration cap.
    pub converged: bool,
    /// Free parameter count, K−1 + K·J.
    pub npar: usize,
    /// Log-likelihood after each E-step (non-decreasing).
    pub ll_trace: Vec<f64>,
}

impl LcaFit {
    pub fn n_classes(&self) -> usize {
        self.params.n_classes()
    }
}

/// Numerically stable log(Σ exp(x)).
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
