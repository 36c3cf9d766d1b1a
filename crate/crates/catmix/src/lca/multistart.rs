//! Two-stage multi-start orchestration.
//!
//! Stage 1 runs `n_initial` random starts for a short iteration budget;
//! stage 2 fully iterates the `n_final` starts with the best stage-1
//! log-likelihoods. The report carries the convergence and best-LL
//! replication rates that flag unstable solutions: a best log-likelihood
//! that few starts reproduce is probably a local optimum.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::CategoricalDataset;
use crate::error::Error;
use crate::rng;
use crate::Result;

use super::em::{fit_em, fit_em_from};
use super::LcaFit;

/// Stage-1 iteration budget per start.
const STAGE1_MAX_ITER: usize = 20;
/// Full-iteration budget for stage-2 starts. Overspecified models creep
/// toward convergence in thousands of small steps, so this is much larger
/// than a single-fit default; iterations on collapsed patterns are cheap.
const STAGE2_MAX_ITER: usize = 10_000;
/// Log-likelihood convergence tolerance.
const EM_TOL: f64 = 1e-6;

/// A run replicates the best solution when its final log-likelihood is
/// within this absolute distance of the best.
pub const REPLICATION_TOL: f64 = 1e-4;

/// Start counts for the two-stage scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StartPolicy {
    /// Random starts run for the short stage-1 budget.
    pub n_initial: usize,
    /// Best stage-1 starts carried to full iteration.
    pub n_final: usize,
}

impl StartPolicy {
    pub fn new(n_initial: usize, n_final: usize) -> Result<Self> {
        if n_final == 0 || n_final > n_initial {
            return Err(Error::InvalidConfig {
                context: format!("start policy {n_initial}/{n_final} needs 1 <= n_final <= n_initial"),
            });
        }
        Ok(Self { n_initial, n_final })
    }

    /// The reduced 20/5 policy used for bootstrap replicate fits.
    pub fn reduced() -> Self {
        Self {
            n_initial: 20,
            n_final: 5,
        }
    }
}

impl Default for StartPolicy {
    fn default() -> Self {
        Self {
            n_initial: 200,
            n_final: 100,
        }
    }
}

/// Outcome of a multi-start fit.
#[derive(Debug, Clone, Serialize)]
pub struct MultistartReport {
    pub n_initial: usize,
    pub n_final: usize,
    /// Percent of the `n_final` full-iteration starts that converged.
    pub pct_converged: f64,
    /// Percent of converged starts whose log-likelihood replicated the
    /// best within [`REPLICATION_TOL`].
    pub pct_replicated: f64,
    /// The winning fit: highest log-likelihood among converged starts
    /// (ties broken by lowest start index). Falls back to the best
    /// non-converged start, flagged, when nothing converged.
    pub best_fit: LcaFit,
    /// Final log-likelihood of each completed stage-2 start, in start
    /// order.
    pub ll_values: Vec<f64>,
    /// Starts discarded for degenerate classes, both stages.
    pub n_failed_starts: usize,
}

/// Two-stage multi-start EM fit. Start r draws its initialization from a
/// stream derived from (master_seed, r), so reports are reproducible and
/// starts can run in parallel.
pub fn fit_multistart(
    ds: &CategoricalDataset,
    k: usize,
    policy: StartPolicy,
    master_seed: u64,
) -> Result<MultistartReport> {
    fit_multistart_tol(ds, k, policy, master_seed, EM_TOL)
}

/// [`fit_multistart`] with an explicit log-likelihood tolerance.
pub fn fit_multistart_tol(
    ds: &CategoricalDataset,
    k: usize,
    policy: StartPolicy,
    master_seed: u64,
    tol: f64,
) -> Result<MultistartReport> {
    if policy.n_final == 0 || policy.n_final > policy.n_initial {
        return Err(Error::InvalidConfig {
            context: format!(
                "start policy {}/{} needs 1 <= n_final <= n_initial",
                policy.n_initial, policy.n_final
            ),
        });
    }

    // Stage 1: short runs from random starts.
    let stage1: Vec<(usize, Result<LcaFit>)> = (0..policy.n_initial)
        .into_par_iter()
        .map(|r| {
            let seed = rng::derive_seed(master_seed, r as u64);
            (r, fit_em(ds, k, seed, STAGE1_MAX_ITER, tol))
        })
        .collect();

    let mut stage1_failures = 0usize;
    let mut survivors: Vec<(usize, LcaFit)> = Vec::new();
    for (r, res) in stage1 {
        match res {
            Ok(fit) => survivors.push((r, fit)),
            Err(Error::DegenerateClass { .. }) => stage1_failures += 1,
            Err(e) => return Err(e),
        }
    }
    if survivors.is_empty() {
        return Err(Error::AllStartsFailed {
            attempted: policy.n_initial,
            detail: format!("{stage1_failures} stage-1 starts hit degenerate classes"),
        });
    }

    // Keep the n_final best stage-1 log-likelihoods, ties to lower index.
    survivors.sort_by(|(ra, fa), (rb, fb)| {
        fb.loglik
            .partial_cmp(&fa.loglik)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ra.cmp(rb))
    });
    survivors.truncate(policy.n_final);
    survivors.sort_by_key(|(r, _)| *r);

    // Stage 2: full iteration.
    let stage2: Vec<(usize, Result<LcaFit>)> = survivors
        .into_par_iter()
        .map(|(r, fit)| (r, fit_em_from(ds, fit.params, STAGE2_MAX_ITER, tol)))
        .collect();

    let mut stage2_failures = 0usize;
    let mut completed: Vec<(usize, LcaFit)> = Vec::new();
    for (r, res) in stage2 {
        match res {
            Ok(fit) => completed.push((r, fit)),
            Err(Error::DegenerateClass { .. }) => stage2_failures += 1,
            Err(e) => return Err(e),
        }
    }
    if completed.is_empty() {
        return Err(Error::AllStartsFailed {
            attempted: policy.n_initial,
            detail: format!(
                "{stage1_failures} stage-1 and {stage2_failures} stage-2 starts hit degenerate classes"
            ),
        });
    }

    let ll_values: Vec<f64> = completed.iter().map(|(_, f)| f.loglik).collect();
    let converged: Vec<&(usize, LcaFit)> =
        completed.iter().filter(|(_, f)| f.converged).collect();
    let n_converged = converged.len();

    let best_index = if n_converged > 0 {
        converged
            .iter()
            .max_by(|(ra, fa), (rb, fb)| {
                fa.loglik
                    .partial_cmp(&fb.loglik)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(rb.cmp(ra))
            })
            .map(|(r, _)| *r)
            .expect("nonempty")
    } else {
        completed
            .iter()
            .max_by(|(ra, fa), (rb, fb)| {
                fa.loglik
                    .partial_cmp(&fb.loglik)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(rb.cmp(ra))
            })
            .map(|(r, _)| *r)
            .expect("nonempty")
    };
    let best_ll = completed
        .iter()
        .find(|(r, _)| *r == best_index)
        .map(|(_, f)| f.loglik)
        .expect("best index present");

    let n_replicated = converged
        .iter()
        .filter(|(_, f)| (f.loglik - best_ll).abs() <= REPLICATION_TOL)
        .count();

    let pct_converged = 100.0 * n_converged as f64 / policy.n_final as f64;
    let pct_replicated = if n_converged > 0 {
        100.0 * n_replicated as f64 / n_converged as f64
    } else {
        0.0
    };

    let best_fit = completed
        .into_iter()
        .find(|(r, _)| *r == best_index)
        .map(|(_, f)| f)
        .expect("best index present");

    Ok(MultistartReport {
        n_initial: policy.n_initial,
        n_final: policy.n_final,
        pct_converged,
        pct_replicated,
        best_fit,
        ll_values,
        n_failed_starts: stage1_failures + stage2_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CategoricalDataset;
    use crate::lca::{simulate, LcaParams};

    fn ds_from(rows: Vec<Vec<u8>>) -> CategoricalDataset {
        let j = rows[0].len();
        let names = (0..j).map(|c| format!("u{}", c + 1)).collect();
        CategoricalDataset::new(names, rows, vec![], vec![]).unwrap()
    }

    #[test]
    fn single_class_always_converges_and_replicates() {
        let ds = ds_from(vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![0, 0]]);
        let report =
            fit_multistart(&ds, 1, StartPolicy::new(20, 10).unwrap(), 11).unwrap();
        assert_eq!(report.pct_converged, 100.0);
        assert_eq!(report.pct_replicated, 100.0);
        assert!(report.best_fit.converged);
    }

    #[test]
    fn well_separated_two_class_replicates() {
        let truth = LcaParams::new(
            vec![0.5, 0.5],
            vec![vec![0.9; 5], vec![0.1; 5]],
        )
        .unwrap();
        let (ds, _) = simulate(&truth, 500, 77).unwrap();
        let report =
            fit_multistart(&ds, 2, StartPolicy::new(40, 20).unwrap(), 5).unwrap();
        assert!(
            report.pct_replicated >= 95.0,
            "replication {}%",
            report.pct_replicated
        );
        assert!(report.best_fit.converged);
    }

    #[test]
    fn report_is_byte_identical_for_same_seed() {
        let ds = ds_from(vec![
            vec![1, 0, 1],
            vec![0, 1, 0],
            vec![1, 1, 1],
            vec![0, 0, 0],
            vec![1, 0, 0],
            vec![0, 1, 1],
        ]);
        let policy = StartPolicy::new(10, 4).unwrap();
        let a = fit_multistart(&ds, 2, policy, 99).unwrap();
        let b = fit_multistart(&ds, 2, policy, 99).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn best_fit_has_max_ll_over_converged() {
        let ds = ds_from(vec![
            vec![1, 0, 1, 0],
            vec![0, 1, 0, 1],
            vec![1, 1, 0, 0],
            vec![0, 0, 1, 1],
            vec![1, 0, 0, 1],
        ]);
        let report =
            fit_multistart(&ds, 2, StartPolicy::new(15, 8).unwrap(), 3).unwrap();
        for &ll in &report.ll_values {
            assert!(report.best_fit.loglik >= ll - 1e-12);
        }
    }

    #[test]
    fn invalid_policy_rejected() {
        assert!(StartPolicy::new(5, 6).is_err());
        assert!(StartPolicy::new(5, 0).is_err());
    }
}
