//! ML three-step auxiliary-variable analysis.
//!
//! Relating latent classes to other variables by hard-assigning each
//! observation and regressing ignores classification error. The ML
//! three-step method corrects for it:
//!
//! 1. fit the unconditional latent class model (step 1, module [`crate::lca`]);
//! 2. compute the classification error matrix `q[k][s] = P(W = s | C = k)`
//!    from the step-1 posteriors and modal assignments W;
//! 3. fit a structural model in which W is the *only* indicator of the
//!    latent class, with its measurement logits fixed at log(q[k][s]/q[k][K]),
//!    so the known error rates are baked in.
//!
//! The structural model here is a multinomial logit of class membership
//! on one binary covariate plus a normal distal outcome with
//! class-specific means, a common covariate slope (the direct effect),
//! and a common residual variance. Estimation is EM; standard errors come
//! from the observed-information Hessian by central finite differences.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::dataset::CategoricalDataset;
use crate::diagnostics::modal_assignment;
use crate::error::Error;
use crate::lca::LcaFit;
use crate::Result;

/// Floor for q entries before taking logits.
const Q_FLOOR: f64 = 1e-10;
/// Cap on fixed measurement logits.
const LOGIT_CAP: f64 = 15.0;
/// Floor for structural multinomial cells in the M-step.
const CELL_FLOOR: f64 = 1e-12;
/// Absolute LL tolerance for the step-3 EM.
const EM_TOL: f64 = 1e-8;
const EM_MAX_ITER: usize = 2000;
/// Relative step for finite-difference second derivatives.
const FD_STEP: f64 = 1e-4;
/// A structural logit this large in magnitude signals separation.
const SEPARATION_LIMIT: f64 = 10.0;

/// Classification error rates of the modal assignment, and the fixed
/// logits derived from them.
#[derive(Debug, Clone, Serialize)]
pub struct ClassificationErrorMatrix {
    /// `q[k][s] = P(W = s | C = k)`; each row sums to 1.
    pub q: Vec<Vec<f64>>,
    /// `log(q[k][s] / q[k][K−1])` for s < K−1, entries floored at 1e-10
    /// before the logit and the result capped at ±15.
    pub fixed_logits: Vec<Vec<f64>>,
}

impl ClassificationErrorMatrix {
    /// Measurement probabilities implied by the capped logits (softmax
    /// of each row with an implicit 0 for the last class). These are what
    /// the step-3 likelihood actually uses.
    pub fn effective_measurement(&self) -> Vec<Vec<f64>> {
        let k = self.q.len();
        self.fixed_logits
            .iter()
            .map(|logits| {
                let mut row: Vec<f64> = logits.iter().copied().chain(std::iter::once(0.0)).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|l| (l - m).exp()).sum();
                row.iter_mut().for_each(|l| *l = (*l - m).exp() / z);
                debug_assert_eq!(row.len(), k);
                row
            })
            .collect()
    }
}

/// `q[k][s] = Σ_{i: W_i = s} p_ik / Σ_i p_ik` from step-1 posteriors and
/// modal labels.
pub fn classification_error_matrix(
    posteriors: &[Vec<f64>],
    labels: &[usize],
) -> Result<ClassificationErrorMatrix> {
    let k = posteriors
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::DimensionMismatch {
            context: "empty posterior matrix".into(),
        })?;
    if labels.len() != posteriors.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: posteriors.len(),
        });
    }

    let mut mass = vec![0.0f64; k];
    let mut joint = vec![vec![0.0f64; k]; k]; // joint[k][s]
    for (row, &w) in posteriors.iter().zip(labels) {
        if row.len() != k {
            return Err(Error::DimensionMismatch {
                context: "ragged posterior matrix".into(),
            });
        }
        if w >= k {
            return Err(Error::DimensionMismatch {
                context: format!("label {w} outside 0..{k}"),
            });
        }
        for (c, &p) in row.iter().enumerate() {
            mass[c] += p;
            joint[c][w] += p;
        }
    }

    let mut q = Vec::with_capacity(k);
    for (c, &m) in mass.iter().enumerate() {
        if !(m > 0.0) {
            return Err(Error::DegenerateClass { class: c });
        }
        q.push(joint[c].iter().map(|&j| j / m).collect::<Vec<f64>>());
    }

    let fixed_logits = q
        .iter()
        .map(|row: &Vec<f64>| {
            let last = row[k - 1].max(Q_FLOOR);
            (0..k - 1)
                .map(|s| (row[s].max(Q_FLOOR) / last).ln().clamp(-LOGIT_CAP, LOGIT_CAP))
                .collect()
        })
        .collect();

    Ok(ClassificationErrorMatrix { q, fixed_logits })
}

/// One covariate coefficient (a class contrasted against the reference).
#[derive(Debug, Clone, Serialize)]
pub struct CovariateEffect {
    /// The non-reference class this row contrasts with the reference.
    pub class: usize,
    pub intercept: f64,
    pub intercept_se: Option<f64>,
    /// Log-odds change of membership per unit covariate.
    pub logit: f64,
    pub se: Option<f64>,
    pub p: Option<f64>,
    /// exp(logit), exactly.
    pub odds_ratio: f64,
}

/// The covariate's direct effect on the outcome.
#[derive(Debug, Clone, Serialize)]
pub struct OutcomeEffect {
    pub coef: f64,
    pub se: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairwiseDiff {
    pub a: usize,
    pub b: usize,
    pub diff: f64,
    pub se: f64,
    pub p: f64,
}

/// Everything estimated by the step-3 model.
#[derive(Debug, Clone, Serialize)]
pub struct ThreeStepResult {
    /// Reference class of the multinomial logit (largest step-1 class).
    pub reference_class: usize,
    pub covariate_logits: Vec<CovariateEffect>,
    /// Adjusted class means of the outcome at covariate = 0.
    pub class_means: Vec<f64>,
    /// Class means evaluated at the sample covariate mean.
    pub class_means_at_covariate_mean: Vec<f64>,
    pub covariate_mean: f64,
    pub direct_effect: OutcomeEffect,
    pub residual_variance: f64,
    /// Omnibus test of equal class means (df = K−1).
    pub wald: WaldTest,
    /// All ordered pairs (a, b): mean difference M_a − M_b with z-test.
    pub pairwise: Vec<PairwiseDiff>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Observed log-likelihood after each E-step (non-decreasing).
    pub ll_trace: Vec<f64>,
    /// Set when the observed-information matrix was not positive
    /// definite; estimates stand but SEs and test p-values are unusable.
    pub hessian_warning: bool,
    /// Set when a structural logit exceeds ±10.
    pub separation_warning: bool,
    pub error_matrix: ClassificationErrorMatrix,
}

/// Free-parameter layout of the structural model.
#[derive(Debug, Clone)]
struct Layout {
    k: usize,
    reference: usize,
    has_covariate: bool,
}

impl Layout {
    fn non_ref(&self) -> Vec<usize> {
        (0..self.k).filter(|&c| c != self.reference).collect()
    }

    fn len(&self) -> usize {
        let slopes = if self.has_covariate { self.k - 1 + 1 } else { 0 };
        (self.k - 1) + slopes + self.k + 1
    }

    fn idx_alpha(&self, pos: usize) -> usize {
        pos
    }

    fn idx_gamma(&self, pos: usize) -> usize {
        debug_assert!(self.has_covariate);
        (self.k - 1) + pos
    }

    fn idx_mean(&self, class: usize) -> usize {
        let base = if self.has_covariate { 2 * (self.k - 1) } else { self.k - 1 };
        base + class
    }

    fn idx_beta(&self) -> usize {
        debug_assert!(self.has_covariate);
        2 * (self.k - 1) + self.k
    }

    fn idx_ln_sigma(&self) -> usize {
        self.len() - 1
    }
}

/// Structural parameters in natural form.
#[derive(Debug, Clone)]
struct Structural {
    /// (intercept, slope) per class; the reference row is (0, 0).
    prior_coef: Vec<(f64, f64)>,
    means: Vec<f64>,
    beta: f64,
    sigma2: f64,
}

impl Structural {
    fn pack(&self, layout: &Layout) -> Vec<f64> {
        let mut theta = vec![0.0; layout.len()];
        for (pos, &c) in layout.non_ref().iter().enumerate() {
            theta[layout.idx_alpha(pos)] = self.prior_coef[c].0;
            if layout.has_covariate {
                theta[layout.idx_gamma(pos)] = self.prior_coef[c].1;
            }
        }
        for c in 0..layout.k {
            theta[layout.idx_mean(c)] = self.means[c];
        }
        if layout.has_covariate {
            theta[layout.idx_beta()] = self.beta;
        }
        theta[layout.idx_ln_sigma()] = 0.5 * self.sigma2.ln();
        theta
    }

    fn unpack(theta: &[f64], layout: &Layout) -> Self {
        let mut prior_coef = vec![(0.0, 0.0); layout.k];
        for (pos, &c) in layout.non_ref().iter().enumerate() {
            prior_coef[c].0 = theta[layout.idx_alpha(pos)];
            if layout.has_covariate {
                prior_coef[c].1 = theta[layout.idx_gamma(pos)];
            }
        }
        let means = (0..layout.k).map(|c| theta[layout.idx_mean(c)]).collect();
        let beta = if layout.has_covariate {
            theta[layout.idx_beta()]
        } else {
            0.0
        };
        let sigma2 = (2.0 * theta[layout.idx_ln_sigma()]).exp();
        Self {
            prior_coef,
            means,
            beta,
            sigma2,
        }
    }

    /// log P(C = k | X = x) for both covariate levels: [x=0, x=1] rows.
    fn log_priors(&self) -> [Vec<f64>; 2] {
        let mut out = [vec![], vec![]];
        for (x, slot) in out.iter_mut().enumerate() {
            let logits: Vec<f64> = self
                .prior_coef
                .iter()
                .map(|&(a, g)| a + g * x as f64)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            *slot = logits.iter().map(|l| l - lse).collect();
        }
        out
    }
}

struct StepData<'a> {
    x: &'a [u8],
    y: &'a [f64],
    w: &'a [usize],
    /// log of the effective measurement probabilities, K×K.
    log_meas: Vec<Vec<f64>>,
}

impl StepData<'_> {
    fn n(&self) -> usize {
        self.x.len()
    }

    fn k(&self) -> usize {
        self.log_meas.len()
    }

    fn loglik(&self, s: &Structural) -> f64 {
        let log_priors = s.log_priors();
        let half_log_2pi_sigma2 = 0.5 * (2.0 * std::f64::consts::PI * s.sigma2).ln();
        let inv_2sigma2 = 0.5 / s.sigma2;
        let k = self.k();
        let mut ll = 0.0;
        let mut cell = vec![0.0f64; k];
        for i in 0..self.n() {
            let lp = &log_priors[self.x[i] as usize];
            for c in 0..k {
                let mu = s.means[c] + s.beta * self.x[i] as f64;
                let resid = self.y[i] - mu;
                cell[c] = lp[c] + self.log_meas[c][self.w[i]]
                    - half_log_2pi_sigma2
                    - resid * resid * inv_2sigma2;
            }
            let m = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            ll += m + cell.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        }
        ll
    }

    /// E-step: posterior class weights given the structural parameters.
    fn e_step(&self, s: &Structural) -> Vec<Vec<f64>> {
        let log_priors = s.log_priors();
        let half_log_2pi_sigma2 = 0.5 * (2.0 * std::f64::consts::PI * s.sigma2).ln();
        let inv_2sigma2 = 0.5 / s.sigma2;
        let k = self.k();
        (0..self.n())
            .map(|i| {
                let lp = &log_priors[self.x[i] as usize];
                let cell: Vec<f64> = (0..k)
                    .map(|c| {
                        let mu = s.means[c] + s.beta * self.x[i] as f64;
                        let resid = self.y[i] - mu;
                        lp[c] + self.log_meas[c][self.w[i]]
                            - half_log_2pi_sigma2
                            - resid * resid * inv_2sigma2
                    })
                    .collect();
                let m = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + cell.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                cell.iter().map(|v| (v - lse).exp()).collect()
            })
            .collect()
    }

    /// M-step. The covariate is binary, so the multinomial logit part is
    /// saturated and maximized in closed form by the posterior cell
    /// means; the outcome part is a weighted least squares solve.
    fn m_step(&self, post: &[Vec<f64>], layout: &Layout) -> Result<Structural> {
        let k = self.k();
        let n = self.n();

        // class probabilities per covariate level
        let mut cell_mass = [vec![0.0f64; k], vec![0.0f64; k]];
        let mut level_count = [0.0f64; 2];
        for i in 0..n {
            let x = self.x[i] as usize;
            level_count[x] += 1.0;
            for c in 0..k {
                cell_mass[x][c] += post[i][c];
            }
        }
        let mut prior_coef = vec![(0.0, 0.0); k];
        if layout.has_covariate {
            let p0: Vec<f64> = cell_mass[0]
                .iter()
                .map(|&m| (m / level_count[0]).max(CELL_FLOOR))
                .collect();
            let p1: Vec<f64> = cell_mass[1]
                .iter()
                .map(|&m| (m / level_count[1]).max(CELL_FLOOR))
                .collect();
            for c in 0..k {
                if c == layout.reference {
                    continue;
                }
                let alpha = (p0[c] / p0[layout.reference]).ln();
                let logit1 = (p1[c] / p1[layout.reference]).ln();
                prior_coef[c] = (alpha, logit1 - alpha);
            }
        } else {
            let total: Vec<f64> = (0..k)
                .map(|c| ((cell_mass[0][c] + cell_mass[1][c]) / n as f64).max(CELL_FLOOR))
                .collect();
            for c in 0..k {
                if c != layout.reference {
                    prior_coef[c] = ((total[c] / total[layout.reference]).ln(), 0.0);
                }
            }
        }

        // outcome part: weighted least squares for (M_1..M_K [, beta])
        let dim = if layout.has_covariate { k + 1 } else { k };
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for i in 0..n {
            let x = self.x[i] as f64;
            for c in 0..k {
                let wgt = post[i][c];
                if wgt == 0.0 {
                    continue;
                }
                a[(c, c)] += wgt;
                b[c] += wgt * self.y[i];
                if layout.has_covariate {
                    a[(c, k)] += wgt * x;
                    a[(k, c)] += wgt * x;
                    a[(k, k)] += wgt * x * x;
                    b[k] += wgt * x * self.y[i];
                }
            }
        }
        let sol = a.lu().solve(&b).ok_or_else(|| Error::SingularMatrix {
            context: "step-3 weighted least squares".into(),
        })?;
        let means: Vec<f64> = (0..k).map(|c| sol[c]).collect();
        let beta = if layout.has_covariate { sol[k] } else { 0.0 };

        let mut rss = 0.0;
        for i in 0..n {
            let x = self.x[i] as f64;
            for c in 0..k {
                let resid = self.y[i] - means[c] - beta * x;
                rss += post[i][c] * resid * resid;
            }
        }
        let sigma2 = (rss / n as f64).max(1e-12);

        Ok(Structural {
            prior_coef,
            means,
            beta,
            sigma2,
        })
    }
}

/// Fit the step-3 structural model.
///
/// `covariate` must name a binary column and `outcome` a real column of
/// `ds`; the step-1 `fit` must have converged with K ≥ 2 classes. The
/// reference class is the largest class by step-1 π̂. A covariate with no
/// variance contributes nothing: its logits and the direct effect are
/// reported as exactly 0 with no standard errors.
pub fn fit_threestep(
    ds: &CategoricalDataset,
    fit: &LcaFit,
    covariate: &str,
    outcome: &str,
) -> Result<ThreeStepResult> {
    let x = ds.covariate(covariate)?;
    let y = ds.outcome(outcome)?;
    if fit.posteriors.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            context: format!("fit covers {} rows, dataset has {}", fit.posteriors.len(), ds.n()),
        });
    }
    if !fit.converged {
        return Err(Error::InvalidConfig {
            context: "step-1 fit did not converge".into(),
        });
    }
    let k = fit.n_classes();
    if k < 2 {
        return Err(Error::InvalidConfig {
            context: "three-step analysis needs K >= 2".into(),
        });
    }

    let labels = modal_assignment(&fit.posteriors)?;
    let error_matrix = classification_error_matrix(&fit.posteriors, &labels)?;
    let log_meas: Vec<Vec<f64>> = error_matrix
        .effective_measurement()
        .iter()
        .map(|row| row.iter().map(|p| p.ln()).collect())
        .collect();

    let has_covariate = x.iter().any(|&v| v != x[0]);
    let reference = fit
        .params
        .pi()
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.partial_cmp(b)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ib.cmp(ia))
        })
        .map(|(i, _)| i)
        .expect("K >= 2");
    let layout = Layout {
        k,
        reference,
        has_covariate,
    };

    let data = StepData {
        x,
        y,
        w: &labels,
        log_meas,
    };

    // Deterministic start from the modal cross-tabulation.
    let start = initial_structural(&data, &layout);

    let mut current = start;
    let mut ll_trace = Vec::new();
    let mut ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let new_ll = data.loglik(&current);
        ll_trace.push(new_ll);
        if iterations > 1 && (new_ll - ll).abs() < EM_TOL {
            ll = new_ll;
            converged = true;
            break;
        }
        ll = new_ll;
        if iterations >= EM_MAX_ITER {
            break;
        }
        let post = data.e_step(&current);
        current = data.m_step(&post, &layout)?;
    }

    // Observed information by finite differences.
    let theta = current.pack(&layout);
    let covariance = observed_information_covariance(&data, &layout, &theta);
    let hessian_warning = covariance.is_none();

    let se_of = |idx: usize| -> Option<f64> {
        covariance.as_ref().map(|cov| cov[(idx, idx)].sqrt())
    };
    let z_p = |coef: f64, se: Option<f64>| -> Option<f64> {
        let se = se?;
        if !(se > 0.0) || !se.is_finite() {
            return None;
        }
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        Some(2.0 * (1.0 - normal.cdf((coef / se).abs())))
    };

    let mut covariate_logits = Vec::new();
    let mut separation_warning = false;
    for (pos, &c) in layout.non_ref().iter().enumerate() {
        let (alpha, gamma) = current.prior_coef[c];
        if gamma.abs() > SEPARATION_LIMIT {
            separation_warning = true;
        }
        let (se, intercept_se, p) = if has_covariate {
            let se = se_of(layout.idx_gamma(pos));
            (se, se_of(layout.idx_alpha(pos)), z_p(gamma, se))
        } else {
            (None, se_of(layout.idx_alpha(pos)), None)
        };
        covariate_logits.push(CovariateEffect {
            class: c,
            intercept: alpha,
            intercept_se,
            logit: gamma,
            se,
            p,
            odds_ratio: gamma.exp(),
        });
    }

    let beta_se = if has_covariate {
        se_of(layout.idx_beta())
    } else {
        None
    };
    let direct_effect = OutcomeEffect {
        coef: current.beta,
        se: beta_se,
        p: if has_covariate {
            z_p(current.beta, beta_se)
        } else {
            None
        },
    };

    let mean_cov: Vec<Vec<f64>> = match &covariance {
        Some(cov) => (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| cov[(layout.idx_mean(a), layout.idx_mean(b))])
                    .collect()
            })
            .collect(),
        None => vec![vec![f64::NAN; k]; k],
    };
    let wald = match wald_omnibus(&current.means, &mean_cov) {
        Ok(w) => w,
        Err(_) => WaldTest {
            statistic: f64::NAN,
            df: k - 1,
            p: f64::NAN,
        },
    };
    let pairwise = pairwise_differences(&current.means, &mean_cov)?;

    let covariate_mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
    let class_means_at_covariate_mean = current
        .means
        .iter()
        .map(|m| m + current.beta * covariate_mean)
        .collect();

    Ok(ThreeStepResult {
        reference_class: reference,
        covariate_logits,
        class_means: current.means.clone(),
        class_means_at_covariate_mean,
        covariate_mean,
        direct_effect,
        residual_variance: current.sigma2,
        wald,
        pairwise,
        loglik: ll,
        iterations,
        converged,
        ll_trace,
        hessian_warning,
        separation_warning,
        error_matrix,
    })
}

/// Start values from the modal cross-tabulation (smoothed so empty cells
/// stay finite): class shares per covariate level, class means of the
/// outcome, zero direct effect, pooled outcome variance.
fn initial_structural(data: &StepData<'_>, layout: &Layout) -> Structural {
    let k = data.k();
    let n = data.n();
    let mut counts = [vec![0.5f64; k], vec![0.5f64; k]];
    let mut y_sum = vec![0.0f64; k];
    let mut y_n = vec![0usize; k];
    for i in 0..n {
        counts[data.x[i] as usize][data.w[i]] += 1.0;
        y_sum[data.w[i]] += data.y[i];
        y_n[data.w[i]] += 1;
    }
    let grand_mean = data.y.iter().sum::<f64>() / n as f64;
    let means: Vec<f64> = (0..k)
        .map(|c| {
            if y_n[c] > 0 {
                y_sum[c] / y_n[c] as f64
            } else {
                grand_mean
            }
        })
        .collect();
    let sigma2 = (data
        .y
        .iter()
        .map(|v| (v - grand_mean).powi(2))
        .sum::<f64>()
        / n as f64)
        .max(1e-6);

    let mut prior_coef = vec![(0.0, 0.0); k];
    for c in 0..k {
        if c == layout.reference {
            continue;
        }
        let a = (counts[0][c] / counts[0][layout.reference]).ln();
        if layout.has_covariate {
            let l1 = (counts[1][c] / counts[1][layout.reference]).ln();
            prior_coef[c] = (a, l1 - a);
        } else {
            let tot = ((counts[0][c] + counts[1][c]) / (counts[0][layout.reference] + counts[1][layout.reference])).ln();
            prior_coef[c] = (tot, 0.0);
        }
    }

    Structural {
        prior_coef,
        means,
        beta: 0.0,
        sigma2,
    }
}

/// Covariance of the parameter estimates: inverse of the negated Hessian
/// of the observed log-likelihood, computed by central finite
/// differences. `None` when the information matrix is not positive
/// definite.
fn observed_information_covariance(
    data: &StepData<'_>,
    layout: &Layout,
    theta: &[f64],
) -> Option<DMatrix<f64>> {
    let p = theta.len();
    let f = |t: &[f64]| -> f64 { data.loglik(&Structural::unpack(t, layout)) };
    let step: Vec<f64> = theta.iter().map(|t| FD_STEP * t.abs().max(1.0)).collect();

    let f0 = f(theta);
    let mut hessian = DMatrix::<f64>::zeros(p, p);
    let mut work = theta.to_vec();
    for a in 0..p {
        // diagonal: (f(+h) - 2 f0 + f(-h)) / h^2
        work[a] = theta[a] + step[a];
        let fp = f(&work);
        work[a] = theta[a] - step[a];
        let fm = f(&work);
        work[a] = theta[a];
        hessian[(a, a)] = (fp - 2.0 * f0 + fm) / (step[a] * step[a]);
        for b in (a + 1)..p {
            work[a] = theta[a] + step[a];
            work[b] = theta[b] + step[b];
            let fpp = f(&work);
            work[b] = theta[b] - step[b];
            let fpm = f(&work);
            work[a] = theta[a] - step[a];
            work[b] = theta[b] + step[b];
            let fmp = f(&work);
            work[b] = theta[b] - step[b];
            let fmm = f(&work);
            work[a] = theta[a];
            work[b] = theta[b];
            let h = (fpp - fpm - fmp + fmm) / (4.0 * step[a] * step[b]);
            hessian[(a, b)] = h;
            hessian[(b, a)] = h;
        }
    }

    let information = -hessian;
    let cov = information.try_inverse()?;
    for a in 0..p {
        if !(cov[(a, a)] > 0.0) || !cov[(a, a)].is_finite() {
            return None;
        }
    }
    Some(cov)
}

/// Omnibus Wald test of equal class means.
///
/// Contrasts the first K−1 means against the last; the statistic
/// `d' (CΣC')⁻¹ d` is χ² with K−1 degrees of freedom under equality.
pub fn wald_omnibus(class_means: &[f64], covariance: &[Vec<f64>]) -> Result<WaldTest> {
    let k = class_means.len();
    if k < 2 {
        return Err(Error::InvalidConfig {
            context: "Wald test needs K >= 2".into(),
        });
    }
    if covariance.len() != k || covariance.iter().any(|row| row.len() != k) {
        return Err(Error::DimensionMismatch {
            context: format!("covariance must be {k}x{k}"),
        });
    }
    let df = k - 1;
    let d = DVector::from_iterator(df, (0..df).map(|r| class_means[r] - class_means[k - 1]));
    // C Σ C' for C with rows e_r − e_{K−1}
    let mut v = DMatrix::<f64>::zeros(df, df);
    for r in 0..df {
        for c in 0..df {
            v[(r, c)] = covariance[r][c] - covariance[r][k - 1] - covariance[k - 1][c]
                + covariance[k - 1][k - 1];
        }
    }
    let vinv = v.try_inverse().ok_or_else(|| Error::SingularMatrix {
        context: "contrast covariance in Wald test".into(),
    })?;
    let statistic = (d.transpose() * vinv * d)[(0, 0)];
    if !statistic.is_finite() {
        return Err(Error::SingularMatrix {
            context: "contrast covariance in Wald test".into(),
        });
    }
    let chi2 = ChiSquared::new(df as f64).expect("df >= 1");
    let p = 1.0 - chi2.cdf(statistic.max(0.0));
    Ok(WaldTest {
        statistic: statistic.max(0.0),
        df,
        p,
    })
}

/// z-tests for every ordered pair of class means, no multiplicity
/// adjustment. Antisymmetric by construction: diff(a,b) = −diff(b,a).
pub fn pairwise_differences(
    class_means: &[f64],
    covariance: &[Vec<f64>],
) -> Result<Vec<PairwiseDiff>> {
    let k = class_means.len();
    if covariance.len() != k || covariance.iter().any(|row| row.len() != k) {
        return Err(Error::DimensionMismatch {
            context: format!("covariance must be {k}x{k}"),
        });
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out = Vec::new();
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let diff = class_means[a] - class_means[b];
            let var = covariance[a][a] + covariance[b][b] - 2.0 * covariance[a][b];
            let se = var.max(0.0).sqrt();
            let p = if diff == 0.0 {
                1.0
            } else if se > 0.0 {
                2.0 * (1.0 - normal.cdf((diff / se).abs()))
            } else if se == 0.0 {
                0.0
            } else {
                f64::NAN
            };
            out.push(PairwiseDiff { a, b, diff, se, p });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CategoricalDataset;
    use crate::lca::{LcaFit, LcaParams};
    use rand::Rng;

    fn one_hot(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&c| (0..k).map(|s| if s == c { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    /// A step-1 "fit" with perfectly certain posteriors over given labels.
    fn entropy_one_fit(labels: &[usize], k: usize, j: usize) -> LcaFit {
        let n = labels.len();
        let mut counts = vec![0usize; k];
        for &c in labels {
            counts[c] += 1;
        }
        let pi: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let rho = vec![vec![0.5; j]; k];
        LcaFit {
            params: LcaParams::new(pi, rho).unwrap(),
            loglik: 0.0,
            posteriors: one_hot(labels, k),
            iterations: 1,
            converged: true,
            npar: k - 1 + k * j,
            ll_trace: vec![0.0],
        }
    }

    fn dataset_with_aux(
        n: usize,
        j: usize,
        x: Vec<u8>,
        y: Vec<f64>,
    ) -> CategoricalDataset {
        let mut rng = crate::rng::stream(5150, 0);
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..j).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect())
            .collect();
        let names = (0..j).map(|c| format!("u{c}")).collect();
        CategoricalDataset::new(
            names,
            rows,
            vec![("x".into(), x)],
            vec![("y".into(), y)],
        )
        .unwrap()
    }

    #[test]
    fn error_matrix_degenerate_posteriors_is_identity() {
        let labels = vec![0, 1, 2, 0, 1, 2, 2];
        let post = one_hot(&labels, 3);
        let em = classification_error_matrix(&post, &labels).unwrap();
        for k in 0..3 {
            for s in 0..3 {
                let expected = if k == s { 1.0 } else { 0.0 };
                assert!((em.q[k][s] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn error_matrix_hand_weighted_count() {
        let post = vec![vec![0.8, 0.2], vec![0.6, 0.4]];
        let labels = vec![0, 0];
        let em = classification_error_matrix(&post, &labels).unwrap();
        assert!((em.q[0][0] - 1.0).abs() < 1e-12);
        assert!((em.q[0][1] - 0.0).abs() < 1e-12);
        assert!((em.q[1][0] - 1.0).abs() < 1e-12);
        assert!((em.q[1][1] - 0.0).abs() < 1e-12);
        // floored zero cells produce capped logits
        assert_eq!(em.fixed_logits[0][0], LOGIT_CAP);
    }

    #[test]
    fn error_matrix_rows_sum_to_one() {
        let mut rng = crate::rng::stream(33, 1);
        for _ in 0..10 {
            let n = 30;
            let k = 3;
            let post: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let mut row: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|p| *p /= s);
                    row
                })
                .collect();
            let labels = crate::diagnostics::modal_assignment(&post).unwrap();
            let em = classification_error_matrix(&post, &labels).unwrap();
            for row in &em.q {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wald_identical_means_is_zero_with_p_one() {
        let cov = vec![
            vec![0.04, 0.01, 0.0],
            vec![0.01, 0.05, 0.01],
            vec![0.0, 0.01, 0.03],
        ];
        let w = wald_omnibus(&[2.5, 2.5, 2.5], &cov).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert_eq!(w.df, 2);
        assert!((w.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wald_df_is_k_minus_one() {
        for k in 2..=5 {
            let means: Vec<f64> = (0..k).map(|c| c as f64 * 0.1).collect();
            let mut cov = vec![vec![0.0; k]; k];
            for c in 0..k {
                cov[c][c] = 0.02;
            }
            let w = wald_omnibus(&means, &cov).unwrap();
            assert_eq!(w.df, k - 1);
        }
    }

    #[test]
    fn wald_singular_covariance_errors() {
        let cov = vec![vec![0.0; 3]; 3];
        assert!(wald_omnibus(&[1.0, 2.0, 3.0], &cov).is_err());
    }

    #[test]
    fn pairwise_identical_means() {
        let cov = vec![vec![0.02, 0.0], vec![0.0, 0.02]];
        let diffs = pairwise_differences(&[1.0, 1.0], &cov).unwrap();
        for d in diffs {
            assert_eq!(d.diff, 0.0);
            assert_eq!(d.p, 1.0);
        }
    }

    #[test]
    fn pairwise_antisymmetry() {
        let cov = vec![
            vec![0.05, 0.01, 0.0],
            vec![0.01, 0.04, 0.02],
            vec![0.0, 0.02, 0.06],
        ];
        let diffs = pairwise_differences(&[2.60, 2.60, 2.34], &cov).unwrap();
        for d in &diffs {
            let mirror = diffs
                .iter()
                .find(|m| m.a == d.b && m.b == d.a)
                .expect("ordered pairs complete");
            assert_eq!(d.diff, -mirror.diff);
            assert_eq!(d.p, mirror.p);
        }
    }

    /// Test-only ordinary least squares with class dummies plus a slope
    /// column, solved by Gaussian elimination.
    fn ols_ancova(labels: &[usize], x: &[u8], y: &[f64], k: usize) -> (Vec<f64>, f64, f64) {
        let n = labels.len();
        let dim = k + 1;
        let mut a = vec![vec![0.0f64; dim]; dim];
        let mut b = vec![0.0f64; dim];
        for i in 0..n {
            let mut z = vec![0.0f64; dim];
            z[labels[i]] = 1.0;
            z[k] = x[i] as f64;
            for r in 0..dim {
                for c in 0..dim {
                    a[r][c] += z[r] * z[c];
                }
                b[r] += z[r] * y[i];
            }
        }
        let sol = solve_gauss(a, b);
        let means = sol[..k].to_vec();
        let beta = sol[k];
        let rss: f64 = (0..n)
            .map(|i| {
                let fit = means[labels[i]] + beta * x[i] as f64;
                (y[i] - fit).powi(2)
            })
            .sum();
        (means, beta, rss / n as f64)
    }

    fn solve_gauss(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            let diag = a[col][col];
            for r in 0..n {
                if r != col && a[r][col] != 0.0 {
                    let factor = a[r][col] / diag;
                    for c in col..n {
                        a[r][c] -= factor * a[col][c];
                    }
                    b[r] -= factor * b[col];
                }
            }
        }
        (0..n).map(|r| b[r] / a[r][r]).collect()
    }

    /// Saturated multinomial logit of hard labels on binary x: closed
    /// form from the 2×K cell counts.
    fn direct_logit(labels: &[usize], x: &[u8], k: usize, reference: usize) -> Vec<(usize, f64, f64)> {
        let mut cells = [vec![0.0f64; k], vec![0.0f64; k]];
        for (&c, &xv) in labels.iter().zip(x) {
            cells[xv as usize][c] += 1.0;
        }
        (0..k)
            .filter(|&c| c != reference)
            .map(|c| {
                let alpha = (cells[0][c] / cells[0][reference]).ln();
                let logit1 = (cells[1][c] / cells[1][reference]).ln();
                (c, alpha, logit1 - alpha)
            })
            .collect()
    }

    fn oracle_case(seed: u64, n: usize) -> (CategoricalDataset, LcaFit, Vec<usize>, Vec<u8>, Vec<f64>) {
        let mut rng = crate::rng::stream(seed, 0);
        let k = 3;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        // covariate correlated with class so the logits are non-trivial
        let x: Vec<u8> = labels
            .iter()
            .map(|&c| {
                let p = [0.25, 0.5, 0.7][c];
                u8::from(rng.random::<f64>() < p)
            })
            .collect();
        let y: Vec<f64> = labels
            .iter()
            .zip(&x)
            .map(|(&c, &xv)| {
                let mu = [2.6, 2.6, 2.3][c] + 0.4 * xv as f64;
                mu + 0.5 * (rng.random::<f64>() - 0.5)
            })
            .collect();
        let ds = dataset_with_aux(n, 4, x.clone(), y.clone());
        let fit = entropy_one_fit(&labels, k, 4);
        (ds, fit, labels, x, y)
    }

    #[test]
    fn perfect_classification_reduces_to_direct_fits() {
        let (ds, fit, labels, x, y) = oracle_case(17, 400);
        let res = fit_threestep(&ds, &fit, "x", "y").unwrap();
        assert!(res.converged);

        let (means, beta, sigma2) = ols_ancova(&labels, &x, &y, 3);
        for c in 0..3 {
            assert!(
                (res.class_means[c] - means[c]).abs() < 1e-4,
                "class {c}: {} vs oracle {}",
                res.class_means[c],
                means[c]
            );
        }
        assert!((res.direct_effect.coef - beta).abs() < 1e-4);
        assert!((res.residual_variance - sigma2).abs() < 1e-4);

        let oracle_logits = direct_logit(&labels, &x, 3, res.reference_class);
        for (c, alpha, gamma) in oracle_logits {
            let reported = res
                .covariate_logits
                .iter()
                .find(|e| e.class == c)
                .expect("logit row per non-reference class");
            assert!(
                (reported.logit - gamma).abs() < 1e-4,
                "class {c}: logit {} vs oracle {gamma}",
                reported.logit
            );
            assert!((reported.intercept - alpha).abs() < 1e-4);
        }
    }

    #[test]
    fn odds_ratio_is_exactly_exp_logit() {
        let (ds, fit, _, _, _) = oracle_case(29, 300);
        let res = fit_threestep(&ds, &fit, "x", "y").unwrap();
        for e in &res.covariate_logits {
            assert_eq!(e.odds_ratio, e.logit.exp());
        }
    }

    #[test]
    fn ll_trace_is_monotone() {
        let (ds, fit, _, _, _) = oracle_case(31, 250);
        let res = fit_threestep(&ds, &fit, "x", "y").unwrap();
        for w in res.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "trace decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_variance_covariate_gives_exact_zeros() {
        let (ds0, fit, labels, _, y) = oracle_case(41, 200);
        // rebuild with a constant covariate
        let ds = CategoricalDataset::new(
            ds0.indicator_names().to_vec(),
            ds0.rows().to_vec(),
            vec![("x".into(), vec![0u8; ds0.n()])],
            vec![("y".into(), y.clone())],
        )
        .unwrap();
        let res = fit_threestep(&ds, &fit, "x", "y").unwrap();
        for e in &res.covariate_logits {
            assert_eq!(e.logit, 0.0);
            assert_eq!(e.odds_ratio, 1.0);
        }
        assert_eq!(res.direct_effect.coef, 0.0);
        // with x constant at 0, means at x̄ equal means at 0
        assert_eq!(res.class_means, res.class_means_at_covariate_mean);
        // means reduce to per-class outcome means
        let (means, _, _) = ols_ancova(&labels, &vec![0u8; ds.n()], &y, 3);
        for c in 0..3 {
            assert!((res.class_means[c] - means[c]).abs() < 1e-4);
        }
    }

    #[test]
    fn separation_is_flagged() {
        let mut rng = crate::rng::stream(90, 0);
        let n = 120;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        // class 1 never shows x = 0: the (1, 0) cell is empty, but x is
        // not collinear with the class dummy because class 0 is mixed
        let x: Vec<u8> = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| if c == 1 { 1 } else { u8::from(i % 4 == 0) })
            .collect();
        let y: Vec<f64> = labels
            .iter()
            .map(|&c| c as f64 + 0.3 * (rng.random::<f64>() - 0.5))
            .collect();
        let ds = dataset_with_aux(n, 3, x, y);
        let fit = entropy_one_fit(&labels, 2, 3);
        let res = fit_threestep(&ds, &fit, "x", "y").unwrap();
        assert!(res.separation_warning);
    }

    #[test]
    fn relabeling_step1_classes_permutes_outputs() {
        let (ds, fit, labels, _, _) = oracle_case(55, 300);
        // permute classes: new label = (old + 1) % 3
        let perm_labels: Vec<usize> = labels.iter().map(|&c| (c + 1) % 3).collect();
        let fit_perm = entropy_one_fit(&perm_labels, 3, 4);

        let a = fit_threestep(&ds, &fit, "x", "y").unwrap();
        let b = fit_threestep(&ds, &fit_perm, "x", "y").unwrap();

        assert_eq!((a.reference_class + 1) % 3, b.reference_class);
        for c in 0..3 {
            let mapped = (c + 1) % 3;
            assert!(
                (a.class_means[c] - b.class_means[mapped]).abs() < 1e-6,
                "mean of class {c} should map to {mapped}"
            );
        }
        assert!((a.wald.statistic - b.wald.statistic).abs() < 1e-6);
    }

    #[test]
    fn requires_converged_step1() {
        let (ds, mut fit, _, _, _) = oracle_case(60, 100);
        fit.converged = false;
        assert!(fit_threestep(&ds, &fit, "x", "y").is_err());
    }

    #[test]
    fn unknown_columns_error() {
        let (ds, fit, _, _, _) = oracle_case(61, 100);
        assert!(fit_threestep(&ds, &fit, "nope", "y").is_err());
        assert!(fit_threestep(&ds, &fit, "x", "nope").is_err());
    }
}
