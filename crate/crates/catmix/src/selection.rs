//! Choosing the number of classes: information criteria, the bootstrapped
//! likelihood ratio test, and the class-enumeration sweep.
//!
//! The four criteria all penalize −2·LL, differing only in the price per
//! parameter; lower is better. The BLRT compares a K-class model to the
//! (K−1)-class model by parametric bootstrap: the likelihood ratio
//! statistic observed on the data is ranked against statistics from data
//! simulated under the fitted (K−1)-class model.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::CategoricalDataset;
use crate::diagnostics::modal_assignment;
use crate::error::Error;
use crate::lca::{fit_multistart, simulate, LcaParams, StartPolicy};
use crate::rng;
use crate::Result;

/// Bayesian information criterion: −2·LL + npar·ln N.
pub fn bic(loglik: f64, npar: usize, n: usize) -> f64 {
    -2.0 * loglik + npar as f64 * (n as f64).ln()
}

/// Sample-size adjusted BIC: −2·LL + npar·ln((N+2)/24).
pub fn abic(loglik: f64, npar: usize, n: usize) -> f64 {
    -2.0 * loglik + npar as f64 * ((n as f64 + 2.0) / 24.0).ln()
}

/// Consistent Akaike information criterion: −2·LL + npar·(ln N + 1).
pub fn caic(loglik: f64, npar: usize, n: usize) -> f64 {
    -2.0 * loglik + npar as f64 * ((n as f64).ln() + 1.0)
}

/// Approximate weight of evidence criterion: −2·LL + 2·npar·(ln N + 1.5).
pub fn awe(loglik: f64, npar: usize, n: usize) -> f64 {
    -2.0 * loglik + 2.0 * npar as f64 * ((n as f64).ln() + 1.5)
}

/// Bootstrapped likelihood ratio test result.
#[derive(Debug, Clone, Serialize)]
pub struct BlrtResult {
    /// Observed statistic 2·(LL_K − LL_{K−1}).
    pub statistic: f64,
    /// (1 + #{T_b ≥ T}) / (B_used + 1).
    pub p_value: f64,
    /// Replicates requested.
    pub b_requested: usize,
    /// Replicates that produced a usable statistic.
    pub b_used: usize,
    /// Replicates excluded after one retry for non-convergence.
    pub n_excluded: usize,
    /// Bootstrap statistics, in replicate order.
    pub replicate_stats: Vec<f64>,
}

/// Start counts used when refitting bootstrap replicates. The full
/// observed-data policy would make each replicate as expensive as the
/// original fit, so replicates run a reduced 20/5 scheme.
pub fn replicate_policy() -> StartPolicy {
    StartPolicy::reduced()
}

/// Bootstrapped likelihood ratio test of K classes against K−1.
///
/// Fits both models on `ds` under `start_policy`, then simulates `b`
/// datasets of the same size from the fitted (K−1)-class model and refits
/// both models on each replicate under the reduced policy. A replicate
/// whose refits do not converge is retried once with fresh fit seeds and
/// excluded (counted) if it still fails.
pub fn blrt(
    ds: &CategoricalDataset,
    k: usize,
    b: usize,
    seed: u64,
    start_policy: StartPolicy,
) -> Result<BlrtResult> {
    if k < 2 {
        return Err(Error::InvalidConfig {
            context: format!("BLRT needs K >= 2, got {k}"),
        });
    }
    if b == 0 {
        return Err(Error::InvalidConfig {
            context: "BLRT needs at least one bootstrap replicate".into(),
        });
    }

    let null = fit_multistart(ds, k - 1, start_policy, rng::derive_seed(seed, 0))?;
    let alt = fit_multistart(ds, k, start_policy, rng::derive_seed(seed, 1))?;
    let statistic = 2.0 * (alt.best_fit.loglik - null.best_fit.loglik);

    blrt_with_observed(ds, k, b, seed, statistic, &null.best_fit.params)
}

/// The bootstrap half of the BLRT, reusing an already-computed observed
/// statistic and fitted null model (the enumeration sweep calls this so
/// the observed fits are not repeated).
pub(crate) fn blrt_with_observed(
    ds: &CategoricalDataset,
    k: usize,
    b: usize,
    seed: u64,
    statistic: f64,
    null_params: &LcaParams,
) -> Result<BlrtResult> {
    // Simulate from a canonical class ordering so the p-value cannot
    // depend on the arbitrary labeling of the fitted null model.
    let null_params = canonical_order(null_params)?;
    let n = ds.n();
    let policy = replicate_policy();

    let replicates: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let rep_seed = rng::derive_seed(seed, 100 + r as u64);
            let (sim, _) = match simulate(&null_params, n, rng::derive_seed(rep_seed, 0)) {
                Ok(s) => s,
                Err(_) => return None,
            };
            for attempt in 0..2u64 {
                let null_fit = fit_multistart(
                    &sim,
                    k - 1,
                    policy,
                    rng::derive_seed(rep_seed, 1 + 10 * attempt),
                );
                let alt_fit = fit_multistart(
                    &sim,
                    k,
                    policy,
                    rng::derive_seed(rep_seed, 2 + 10 * attempt),
                );
                if let (Ok(nf), Ok(af)) = (null_fit, alt_fit) {
                    if nf.best_fit.converged && af.best_fit.converged {
                        return Some(2.0 * (af.best_fit.loglik - nf.best_fit.loglik));
                    }
                }
            }
            None
        })
        .collect();

    let replicate_stats: Vec<f64> = replicates.iter().filter_map(|&t| t).collect();
    let b_used = replicate_stats.len();
    let n_excluded = b - b_used;
    if b_used == 0 {
        return Err(Error::AllStartsFailed {
            attempted: b,
            detail: "every bootstrap replicate failed to converge".into(),
        });
    }

    let exceed = replicate_stats.iter().filter(|&&t| t >= statistic).count();
    let p_value = (1 + exceed) as f64 / (b_used + 1) as f64;

    Ok(BlrtResult {
        statistic,
        p_value,
        b_requested: b,
        b_used,
        n_excluded,
        replicate_stats,
    })
}

/// Classes sorted by descending proportion (ties by item profile) so two
/// label permutations of the same model simulate identically.
fn canonical_order(params: &LcaParams) -> Result<LcaParams> {
    let k = params.n_classes();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        params.pi()[b]
            .partial_cmp(&params.pi()[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                params.rho()[a]
                    .iter()
                    .zip(&params.rho()[b])
                    .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    params.permuted(&order)
}

/// One row of the class-enumeration table.
#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub k: usize,
    pub npar: usize,
    pub loglik: f64,
    pub pct_converged: f64,
    pub pct_replicated: f64,
    pub bic: f64,
    pub abic: f64,
    pub caic: f64,
    pub awe: f64,
    /// BLRT p-value for K vs K−1; absent for K = 1 or when not requested.
    pub blrt_p: Option<f64>,
    /// Size of the smallest class under modal assignment.
    pub smallest_class_n: usize,
    pub smallest_class_pct: f64,
}

/// Per-K fit summaries for K = 1..=K_max.
#[derive(Debug, Clone, Serialize)]
pub struct EnumerationTable {
    pub rows: Vec<FitSummary>,
    /// Ks whose multi-start fit failed outright, with the error text.
    pub failures: Vec<(usize, String)>,
    /// Ks whose log-likelihood fell below the previous K's — a local
    /// optimum warning, not an error.
    pub ll_decrease_at: Vec<usize>,
    /// The start policy the sweep actually ran.
    pub policy: StartPolicy,
}

/// Fit K = 1..=`k_max` by multi-start EM and summarize model fit.
///
/// A hard failure at one K is recorded and the sweep continues. With
/// `blrt_b = Some(b)`, each K ≥ 2 row gets a BLRT p-value against K−1
/// (reusing the sweep's own fits for the observed statistic).
pub fn enumerate_classes(
    ds: &CategoricalDataset,
    k_max: usize,
    start_policy: StartPolicy,
    blrt_b: Option<usize>,
    seed: u64,
) -> Result<EnumerationTable> {
    if k_max == 0 {
        return Err(Error::InvalidConfig {
            context: "k_max must be at least 1".into(),
        });
    }
    let n = ds.n();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut ll_decrease_at = Vec::new();
    let mut prev: Option<(f64, LcaParams)> = None; // (loglik, params) of previous K

    for k in 1..=k_max {
        let report = match fit_multistart(ds, k, start_policy, rng::derive_seed(seed, k as u64)) {
            Ok(r) => r,
            Err(e) => {
                failures.push((k, e.to_string()));
                prev = None;
                continue;
            }
        };
        let fit = &report.best_fit;

        if let Some((prev_ll, _)) = &prev {
            if fit.loglik < prev_ll - 1e-8 {
                ll_decrease_at.push(k);
            }
        }

        let blrt_p = match (blrt_b, &prev) {
            (Some(b), Some((prev_ll, prev_params))) if k >= 2 => {
                let statistic = 2.0 * (fit.loglik - prev_ll);
                let res = blrt_with_observed(
                    ds,
                    k,
                    b,
                    rng::derive_seed(seed, 1000 + k as u64),
                    statistic,
                    prev_params,
                )?;
                Some(res.p_value)
            }
            _ => None,
        };

        let labels = modal_assignment(&fit.posteriors)?;
        let mut sizes = vec![0usize; k];
        for &c in &labels {
            sizes[c] += 1;
        }
        let smallest = sizes.iter().copied().min().unwrap_or(0);

        rows.push(FitSummary {
            k,
            npar: fit.npar,
            loglik: fit.loglik,
            pct_converged: report.pct_converged,
            pct_replicated: report.pct_replicated,
            bic: bic(fit.loglik, fit.npar, n),
            abic: abic(fit.loglik, fit.npar, n),
            caic: caic(fit.loglik, fit.npar, n),
            awe: awe(fit.loglik, fit.npar, n),
            blrt_p,
            smallest_class_n: smallest,
            smallest_class_pct: 100.0 * smallest as f64 / n as f64,
        });
        prev = Some((fit.loglik, fit.params.clone()));
    }

    if rows.is_empty() {
        let detail = failures
            .iter()
            .map(|(k, e)| format!("K={k}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::AllStartsFailed {
            attempted: k_max,
            detail,
        });
    }

    Ok(EnumerationTable {
        rows,
        failures,
        ll_decrease_at,
        policy: start_policy,
    })
}
