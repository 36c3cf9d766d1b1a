//! Log-likelihood, E/M steps, and the EM driver.

use rand::Rng;

use crate::dataset::{collapse_patterns, CategoricalDataset, PatternTable};
use crate::error::Error;
use crate::rng;
use crate::Result;

use super::{log_sum_exp, LcaFit, LcaParams, RHO_EPS};

/// Exact data log-likelihood, evaluated over collapsed response patterns:
/// Σ_p w_p · log Σ_k π_k Π_j ρ_kj^u_pj (1−ρ_kj)^(1−u_pj).
pub fn log_likelihood(params: &LcaParams, ds: &CategoricalDataset) -> Result<f64> {
    check_items(params, ds)?;
    let pt = collapse_patterns(ds);
    Ok(pattern_log_mix(params, &pt.patterns)
        .iter()
        .zip(&pt.weights)
        .map(|(lm, &w)| w as f64 * lm)
        .sum())
}

/// Posterior class probabilities for every observation; each row sums
/// to 1. Work happens in log space, so no row can underflow to zero.
pub fn e_step(params: &LcaParams, ds: &CategoricalDataset) -> Result<Vec<Vec<f64>>> {
    check_items(params, ds)?;
    let pt = collapse_patterns(ds);
    let (pattern_post, _) = pattern_posteriors(params, &pt);
    Ok(pt
        .row_to_pattern
        .iter()
        .map(|&p| pattern_post[p].clone())
        .collect())
}

/// Maximization step: π_k is the mean posterior mass of class k and
/// ρ_kj the posterior-weighted mean of item j, clamped to
/// `[RHO_EPS, 1−RHO_EPS]`.
///
/// A class with zero total posterior mass has no maximizer and yields
/// [`Error::DegenerateClass`]; multi-start fitting discards such runs.
pub fn m_step(posteriors: &[Vec<f64>], ds: &CategoricalDataset) -> Result<LcaParams> {
    if posteriors.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            context: format!("{} posterior rows for {} observations", posteriors.len(), ds.n()),
        });
    }
    let k = posteriors
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::DimensionMismatch {
            context: "empty posterior matrix".into(),
        })?;
    for (i, row) in posteriors.iter().enumerate() {
        if row.len() != k {
            return Err(Error::DimensionMismatch {
                context: format!("posterior row {i} has {} classes, expected {k}", row.len()),
            });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidParams {
                context: format!("posterior row {i} sums to {s}"),
            });
        }
    }
    m_step_rows(posteriors, ds.rows())
}

fn m_step_rows(posteriors: &[Vec<f64>], rows: &[Vec<u8>]) -> Result<LcaParams> {
    let n = rows.len();
    let k = posteriors[0].len();
    let j = rows[0].len();

    let mut mass = vec![0.0f64; k];
    let mut weighted_ones = vec![vec![0.0f64; j]; k];
    for (post, row) in posteriors.iter().zip(rows) {
        for (c, &p) in post.iter().enumerate() {
            mass[c] += p;
            if p > 0.0 {
                for (jj, &u) in row.iter().enumerate() {
                    if u == 1 {
                        weighted_ones[c][jj] += p;
                    }
                }
            }
        }
    }

    finish_m_step(&mass, &weighted_ones, n)
}

fn m_step_patterns(pattern_post: &[Vec<f64>], pt: &PatternTable) -> Result<LcaParams> {
    let n = pt.n();
    let k = pattern_post[0].len();
    let j = pt.patterns[0].len();

    let mut mass = vec![0.0f64; k];
    let mut weighted_ones = vec![vec![0.0f64; j]; k];
    for ((post, pattern), &w) in pattern_post.iter().zip(&pt.patterns).zip(&pt.weights) {
        let w = w as f64;
        for (c, &p) in post.iter().enumerate() {
            let wp = w * p;
            mass[c] += wp;
            if wp > 0.0 {
                for (jj, &u) in pattern.iter().enumerate() {
                    if u == 1 {
                        weighted_ones[c][jj] += wp;
                    }
                }
            }
        }
    }

    finish_m_step(&mass, &weighted_ones, n)
}

fn finish_m_step(mass: &[f64], weighted_ones: &[Vec<f64>], n: usize) -> Result<LcaParams> {
    // Zero (or denormal-small) class mass would put pi outside (0, 1].
    for (c, &m) in mass.iter().enumerate() {
        if !(m > 0.0) || m / n as f64 == 0.0 {
            return Err(Error::DegenerateClass { class: c });
        }
    }
    let pi: Vec<f64> = mass.iter().map(|&m| m / n as f64).collect();
    let rho: Vec<Vec<f64>> = mass
        .iter()
        .zip(weighted_ones)
        .map(|(&m, ones)| {
            ones.iter()
                .map(|&o| (o / m).clamp(RHO_EPS, 1.0 - RHO_EPS))
                .collect()
        })
        .collect();
    LcaParams::new(pi, rho)
}

/// Fit by EM from a random start: each observation gets a random
/// posterior row (independent uniforms, normalized), one M-step turns
/// those into parameters, and EM iterates from there.
///
/// Stops when the absolute log-likelihood change falls below `tol`
/// (converged) or after `max_iter` E-steps (flagged, not an error).
pub fn fit_em(
    ds: &CategoricalDataset,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<LcaFit> {
    if k == 0 || k > ds.n() {
        return Err(Error::InvalidConfig {
            context: format!("class count {k} outside 1..={}", ds.n()),
        });
    }
    check_em_options(max_iter, tol)?;

    let mut rng = rng::stream(seed, 0);
    let mut init = Vec::with_capacity(ds.n());
    for _ in 0..ds.n() {
        let mut row: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
        init.push(row);
    }
    let params = m_step_rows(&init, ds.rows())?;
    fit_em_from(ds, params, max_iter, tol)
}

/// Continue EM from explicit starting parameters (used for warm starts
/// and for the second stage of multi-start fitting).
pub fn fit_em_from(
    ds: &CategoricalDataset,
    params: LcaParams,
    max_iter: usize,
    tol: f64,
) -> Result<LcaFit> {
    check_items(&params, ds)?;
    check_em_options(max_iter, tol)?;
    let pt = collapse_patterns(ds);

    let mut params = params;
    let mut ll_trace = Vec::new();
    let mut converged = false;
    let mut ll = f64::NEG_INFINITY;
    let mut pattern_post: Vec<Vec<f64>>;
    let mut iterations = 0;

    loop {
        iterations += 1;
        let (post, new_ll) = pattern_posteriors(&params, &pt);
        pattern_post = post;
        let prev = ll;
        ll = new_ll;
        ll_trace.push(ll);
        if iterations > 1 && (ll - prev).abs() < tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        params = m_step_patterns(&pattern_post, &pt)?;
    }

    let npar = params.npar();
    let posteriors = pt
        .row_to_pattern
        .iter()
        .map(|&p| pattern_post[p].clone())
        .collect();
    Ok(LcaFit {
        params,
        loglik: ll,
        posteriors,
        iterations,
        converged,
        npar,
        ll_trace,
    })
}

fn check_em_options(max_iter: usize, tol: f64) -> Result<()> {
    if max_iter == 0 {
        return Err(Error::InvalidConfig {
            context: "max_iter must be at least 1".into(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig {
            context: format!("tolerance must be positive, got {tol}"),
        });
    }
    Ok(())
}

fn check_items(params: &LcaParams, ds: &CategoricalDataset) -> Result<()> {
    if params.n_items() != ds.n_items() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "parameters cover {} items, dataset has {}",
                params.n_items(),
                ds.n_items()
            ),
        });
    }
    Ok(())
}

/// Per-pattern log mixture density: log Σ_k π_k Π_j Bernoulli(u_pj; ρ_kj).
fn pattern_log_mix(params: &LcaParams, patterns: &[Vec<u8>]) -> Vec<f64> {
    pattern_log_cells(params, patterns)
        .iter()
        .map(|cells| log_sum_exp(cells))
        .collect()
}

/// P×K matrix of log(π_k) + log Bernoulli cell for each pattern.
fn pattern_log_cells(params: &LcaParams, patterns: &[Vec<u8>]) -> Vec<Vec<f64>> {
    let k = params.n_classes();
    let log_pi: Vec<f64> = params.pi().iter().map(|p| p.ln()).collect();
    let log_rho: Vec<Vec<f64>> = params
        .rho()
        .iter()
        .map(|row| row.iter().map(|r| r.ln()).collect())
        .collect();
    let log_1m_rho: Vec<Vec<f64>> = params
        .rho()
        .iter()
        .map(|row| row.iter().map(|r| (1.0 - r).ln()).collect())
        .collect();

    patterns
        .iter()
        .map(|pattern| {
            (0..k)
                .map(|c| {
                    let mut acc = log_pi[c];
                    for (jj, &u) in pattern.iter().enumerate() {
                        acc += if u == 1 {
                            log_rho[c][jj]
                        } else {
                            log_1m_rho[c][jj]
                        };
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Pattern-level posteriors plus the data log-likelihood.
fn pattern_posteriors(params: &LcaParams, pt: &PatternTable) -> (Vec<Vec<f64>>, f64) {
    let cells = pattern_log_cells(params, &pt.patterns);
    let mut ll = 0.0;
    let post = cells
        .iter()
        .zip(&pt.weights)
        .map(|(row, &w)| {
            let lse = log_sum_exp(row);
            ll += w as f64 * lse;
            row.iter().map(|c| (c - lse).exp()).collect()
        })
        .collect();
    (post, ll)
}
