//! Posterior classification diagnostics for a fitted latent class model.
//!
//! Everything here is computable from the posterior matrix and the
//! estimated class proportions alone: relative entropy, modal class
//! assignment, modal assignment proportions (mcaP), average posterior
//! probabilities (AvePP), odds of correct classification (OCC), and
//! bootstrap percentile intervals for the class proportions.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::dataset::CategoricalDataset;
use crate::error::Error;
use crate::lca::{fit_em_from, LcaFit};
use crate::rng;
use crate::Result;

use rand::Rng;

/// Relative entropy of a posterior matrix:
/// `1 − [Σ_i Σ_k −p_ik ln p_ik] / (N ln K)`, with 0·ln 0 taken as 0.
///
/// 1 means every row is degenerate (perfectly certain assignment), 0
/// means every row is uniform. Values within numerical noise (relative
/// 1e-12) of the endpoints snap to exactly 0 or 1.
pub fn entropy(posteriors: &[Vec<f64>]) -> Result<f64> {
    let k = check_posteriors(posteriors)?;
    if k < 2 {
        return Err(Error::InvalidConfig {
            context: "entropy requires K >= 2".into(),
        });
    }
    let n = posteriors.len() as f64;
    let total: f64 = posteriors
        .iter()
        .map(|row| {
            row.iter()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum::<f64>()
        })
        .sum();
    let denom = n * (k as f64).ln();
    if (total - denom).abs() <= 1e-12 * denom {
        return Ok(0.0);
    }
    Ok((1.0 - total / denom).clamp(0.0, 1.0))
}

/// Highest-posterior class per observation, ties to the lowest index.
pub fn modal_assignment(posteriors: &[Vec<f64>]) -> Result<Vec<usize>> {
    check_posteriors(posteriors)?;
    Ok(posteriors
        .iter()
        .map(|row| {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Modal class assignment proportion: the share of the sample assigned
/// to each of the `k` classes.
pub fn mcap(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig {
            context: "mcaP needs at least one observation".into(),
        });
    }
    let mut counts = vec![0usize; k];
    for &c in labels {
        if c >= k {
            return Err(Error::DimensionMismatch {
                context: format!("label {c} outside 0..{k}"),
            });
        }
        counts[c] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Mean own-class posterior among the observations modally assigned to
/// each class; `None` for a class nobody is assigned to.
pub fn avepp(posteriors: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Option<f64>>> {
    let k = check_posteriors(posteriors)?;
    if labels.len() != posteriors.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: posteriors.len(),
        });
    }
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (row, &c) in posteriors.iter().zip(labels) {
        if c >= k {
            return Err(Error::DimensionMismatch {
                context: format!("label {c} outside 0..{k}"),
            });
        }
        sums[c] += row[c];
        counts[c] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect())
}

/// Odds of correct classification:
/// `[AvePP/(1−AvePP)] / [π/(1−π)]`, +∞ when AvePP = 1.
///
/// A value of 1 means modal assignment is no better than assigning by
/// class size alone; ≥ 5 conventionally indicates good separation.
pub fn occ(avepp_k: f64, pi_k: f64) -> Result<f64> {
    if !(pi_k > 0.0 && pi_k < 1.0) {
        return Err(Error::InvalidParams {
            context: format!("OCC needs pi in (0,1), got {pi_k}"),
        });
    }
    if !(0.0..=1.0).contains(&avepp_k) {
        return Err(Error::InvalidParams {
            context: format!("OCC needs AvePP in [0,1], got {avepp_k}"),
        });
    }
    if avepp_k == 1.0 {
        return Ok(f64::INFINITY);
    }
    let assignment_odds = avepp_k / (1.0 - avepp_k);
    let chance_odds = pi_k / (1.0 - pi_k);
    Ok(assignment_odds / chance_odds)
}

/// Bootstrap percentile intervals for the class proportions.
#[derive(Debug, Clone, Serialize)]
pub struct ProportionCis {
    /// Per-class (lower, upper) at the requested level.
    pub intervals: Vec<(f64, f64)>,
    /// Replicates that converged and entered the percentiles.
    pub b_used: usize,
    /// Replicates excluded for non-convergence.
    pub n_excluded: usize,
    pub level: f64,
}

/// Nonparametric bootstrap intervals for π̂.
///
/// Each replicate resamples rows with replacement, refits by EM warm
/// started from `fit.params`, and matches its class labels back to the
/// original fit by minimizing the summed item-wise |Δρ| over label
/// permutations (exhaustive for K ≤ 8, greedy beyond). Non-convergent
/// replicates are excluded and counted.
pub fn class_proportion_ci(
    ds: &CategoricalDataset,
    fit: &LcaFit,
    b: usize,
    seed: u64,
    level: f64,
) -> Result<ProportionCis> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig {
            context: format!("confidence level must be in (0,1), got {level}"),
        });
    }
    if b == 0 {
        return Err(Error::InvalidConfig {
            context: "bootstrap needs at least one replicate".into(),
        });
    }
    if fit.posteriors.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            context: format!("fit covers {} rows, dataset has {}", fit.posteriors.len(), ds.n()),
        });
    }
    let n = ds.n();
    let k = fit.n_classes();

    let replicate_pis: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, r as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = ds.select_rows(&idx).ok()?;
            let refit = fit_em_from(&resampled, fit.params.clone(), 500, 1e-6).ok()?;
            if !refit.converged {
                return None;
            }
            let perm = match_labels(fit.params.rho(), refit.params.rho());
            Some((0..k).map(|c| refit.params.pi()[perm[c]]).collect())
        })
        .collect();

    let used: Vec<&Vec<f64>> = replicate_pis.iter().flatten().collect();
    let b_used = used.len();
    let n_excluded = b - b_used;
    if b_used == 0 {
        return Err(Error::AllStartsFailed {
            attempted: b,
            detail: "every bootstrap replicate failed to converge".into(),
        });
    }

    let alpha = 1.0 - level;
    let intervals = (0..k)
        .map(|c| {
            let mut vals: Vec<f64> = used.iter().map(|pi| pi[c]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (percentile(&vals, alpha / 2.0), percentile(&vals, 1.0 - alpha / 2.0))
        })
        .collect();

    Ok(ProportionCis {
        intervals,
        b_used,
        n_excluded,
        level,
    })
}

/// Permutation `perm` such that replicate class `perm[c]` is the best
/// match for original class `c`, by total |Δρ| across items.
fn match_labels(reference: &[Vec<f64>], candidate: &[Vec<f64>]) -> Vec<usize> {
    let k = reference.len();
    let cost = |orig: usize, cand: usize| -> f64 {
        reference[orig]
            .iter()
            .zip(&candidate[cand])
            .map(|(a, b)| (a - b).abs())
            .sum()
    };
    if k <= 8 {
        (0..k)
            .permutations(k)
            .min_by(|pa, pb| {
                let ca: f64 = pa.iter().enumerate().map(|(o, &c)| cost(o, c)).sum();
                let cb: f64 = pb.iter().enumerate().map(|(o, &c)| cost(o, c)).sum();
                ca.partial_cmp(&cb).unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("k >= 1")
    } else {
        // Greedy fallback: repeatedly take the cheapest unused pair.
        let mut pairs: Vec<(f64, usize, usize)> = (0..k)
            .flat_map(|o| (0..k).map(move |c| (o, c)))
            .map(|(o, c)| (cost(o, c), o, c))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut perm = vec![usize::MAX; k];
        let mut used = vec![false; k];
        for (_, o, c) in pairs {
            if perm[o] == usize::MAX && !used[c] {
                perm[o] = c;
                used[c] = true;
            }
        }
        perm
    }
}

/// Linear-interpolation percentile of pre-sorted values, q in [0,1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
}

/// Everything in one report, shaped like a classification-diagnostics
/// table: one row per class plus the whole-sample entropy.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub entropy: f64,
    pub classes: Vec<ClassDiagnostics>,
    /// Modal class label (0-based) per observation.
    pub modal: Vec<usize>,
    /// Bootstrap bookkeeping when intervals were requested.
    pub ci_b_used: Option<usize>,
    pub ci_excluded: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassDiagnostics {
    /// 0-based class index.
    pub class: usize,
    /// Estimated class proportion π̂.
    pub proportion: f64,
    /// Bootstrap percentile interval for π̂, when requested.
    pub ci: Option<(f64, f64)>,
    pub mcap: f64,
    pub avepp: Option<f64>,
    /// Odds of correct classification; +∞ serializes as the string "Inf".
    #[serde(serialize_with = "serialize_occ")]
    pub occ: Option<f64>,
}

fn serialize_occ<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        None => s.serialize_none(),
        Some(x) if x.is_infinite() => s.serialize_str("Inf"),
        Some(x) => s.serialize_f64(*x),
    }
}

/// Assemble the full diagnostics report for a fitted model. With
/// `bootstrap_b > 0`, class-proportion intervals are added from that many
/// resampling replicates at the given confidence level.
pub fn diagnose(
    ds: &CategoricalDataset,
    fit: &LcaFit,
    bootstrap_b: usize,
    seed: u64,
    level: f64,
) -> Result<DiagnosticsReport> {
    let k = fit.n_classes();
    let ent = entropy(&fit.posteriors)?;
    let modal = modal_assignment(&fit.posteriors)?;
    let mcap_values = mcap(&modal, k)?;
    let avepp_values = avepp(&fit.posteriors, &modal)?;

    let cis = if bootstrap_b > 0 {
        Some(class_proportion_ci(ds, fit, bootstrap_b, seed, level)?)
    } else {
        None
    };

    let classes = (0..k)
        .map(|c| {
            let pi_c = fit.params.pi()[c];
            let occ_c = match avepp_values[c] {
                Some(a) if pi_c < 1.0 => Some(occ(a, pi_c)?),
                _ => None,
            };
            Ok(ClassDiagnostics {
                class: c,
                proportion: pi_c,
                ci: cis.as_ref().map(|cis| cis.intervals[c]),
                mcap: mcap_values[c],
                avepp: avepp_values[c],
                occ: occ_c,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DiagnosticsReport {
        entropy: ent,
        classes,
        modal,
        ci_b_used: cis.as_ref().map(|c| c.b_used),
        ci_excluded: cis.as_ref().map(|c| c.n_excluded),
    })
}

/// Validate shape and row normalization; returns K.
fn check_posteriors(posteriors: &[Vec<f64>]) -> Result<usize> {
    let k = posteriors
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::DimensionMismatch {
            context: "empty posterior matrix".into(),
        })?;
    if k == 0 {
        return Err(Error::DimensionMismatch {
            context: "posterior rows have no classes".into(),
        });
    }
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
    Ok(k)
}
