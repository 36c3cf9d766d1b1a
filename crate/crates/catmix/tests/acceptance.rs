//! Acceptance suite.
//!
//! Each test is one release criterion, printed as a PASS line with its
//! measured runtime (run with `--nocapture` to see them). Budgets are
//! enforced with a small multiplier as slack for constrained CI hosts.

use std::sync::Mutex;
use std::time::Instant;

use catmix::dataset::{load_csv, CategoricalDataset, Schema};
use catmix::diagnostics::{diagnose, entropy, mcap, modal_assignment, occ};
use catmix::kmodes::{fit_kmodes, silhouette_width, KModesConfig, KModesModel};
use catmix::lca::{fit_em, fit_multistart, log_likelihood, simulate, LcaParams, StartPolicy};
use catmix::selection::{abic, awe, bic, blrt, caic, enumerate_classes};
use catmix::threestep::fit_threestep;

use rand::Rng;

/// Slack multiplier on the stated budgets: this suite also runs on
/// small shared machines.
const BUDGET_SLACK: f64 = 3.0;

/// Criteria run one at a time so each runtime measurement is its own.
static GATE: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn finish(name: &str, start: Instant, budget_secs: f64) {
    let elapsed = start.elapsed().as_secs_f64();
    println!("PASS {name}: {elapsed:.2}s (budget {budget_secs}s)");
    assert!(
        elapsed < budget_secs * BUDGET_SLACK,
        "{name} took {elapsed:.2}s, over budget {budget_secs}s (x{BUDGET_SLACK} slack)"
    );
}

fn rng_stream(seed: u64) -> impl Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn ds_from(rows: Vec<Vec<u8>>) -> CategoricalDataset {
    let j = rows[0].len();
    let names = (0..j).map(|c| format!("v{c}")).collect();
    CategoricalDataset::new(names, rows, vec![], vec![]).unwrap()
}

// -------------------------------------------------------------------------
// 1. Information-criterion formulas reproduce all 7x4 printed values from
//    the published seven-model summary (N = 567) within +-0.05.
#[test]
fn acceptance_01_information_criteria_reproduce_published_table() {
    let _gate = serial();
    let start = Instant::now();
    // (LL, npar, BIC, aBIC, CAIC, AWE)
    let table: [(f64, usize, f64, f64, f64, f64); 7] = [
        (-3840.13, 13, 7762.68, 7721.41, 7775.68, 7884.11),
        (-3647.65, 27, 7466.49, 7380.77, 7493.49, 7718.68),
        (-3596.93, 41, 7453.81, 7323.65, 7494.81, 7836.76),
        (-3576.71, 55, 7502.15, 7327.55, 7557.15, 8015.87),
        (-3558.81, 69, 7555.10, 7336.06, 7624.10, 8199.59),
        (-3542.47, 83, 7611.19, 7347.71, 7694.19, 8386.44),
        (-3526.55, 97, 7668.12, 7360.19, 7765.12, 8574.14),
    ];
    let n = 567;
    for (row, &(ll, npar, b, a, c, w)) in table.iter().enumerate() {
        assert!((bic(ll, npar, n) - b).abs() <= 0.05, "BIC row {row}: {}", bic(ll, npar, n));
        assert!((abic(ll, npar, n) - a).abs() <= 0.05, "aBIC row {row}: {}", abic(ll, npar, n));
        assert!((caic(ll, npar, n) - c).abs() <= 0.05, "CAIC row {row}: {}", caic(ll, npar, n));
        assert!((awe(ll, npar, n) - w).abs() <= 0.05, "AWE row {row}: {}", awe(ll, npar, n));
    }
    finish("criterion 1 (IC formula reproduction)", start, 1.0);
}

// -------------------------------------------------------------------------
// 2. OCC reproduces 17.06, 24.46 and Inf from the published (AvePP, pi)
//    pairs; entropy returns exactly 1 / 0 for degenerate / uniform rows.
#[test]
fn acceptance_02_occ_and_entropy_reproduction() {
    let _gate = serial();
    let start = Instant::now();
    assert!((occ(0.944, 0.497).unwrap() - 17.06).abs() <= 0.05);
    assert!((occ(0.879, 0.229).unwrap() - 24.46).abs() <= 0.05);
    assert!(occ(1.000, 0.273).unwrap().is_infinite());

    for k in 2..=6 {
        let degenerate: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..k).map(|c| if c == i % k { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(entropy(&degenerate).unwrap(), 1.0, "degenerate K={k}");
        let uniform = vec![vec![1.0 / k as f64; k]; 10];
        assert_eq!(entropy(&uniform).unwrap(), 0.0, "uniform K={k}");
    }
    finish("criterion 2 (OCC and entropy reproduction)", start, 1.0);
}

// -------------------------------------------------------------------------
// 3. EM monotonicity over 200 seeded runs on random datasets.
#[test]
fn acceptance_03_em_monotonicity_over_200_runs() {
    let _gate = serial();
    let start = Instant::now();
    for seed in 0..200u64 {
        let mut rng = rng_stream(30_000 + seed);
        let n = rng.random_range(10..=200);
        let j = rng.random_range(1..=8);
        let k = rng.random_range(1..=4.min(n));
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..j).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect())
            .collect();
        let ds = ds_from(rows);
        let fit = fit_em(&ds, k, seed, 500, 1e-6).expect("fit runs");
        for w in fit.ll_trace.windows(2) {
            assert!(
                w[1] - w[0] >= -1e-8,
                "seed {seed}: LL fell {} -> {}",
                w[0],
                w[1]
            );
        }
    }
    finish("criterion 3 (EM monotonicity, 200 runs)", start, 30.0);
}

// -------------------------------------------------------------------------
// 4. Pattern-collapsed log-likelihood equals the naive per-row value on
//    100 random (params, dataset) pairs within 1e-10.
#[test]
fn acceptance_04_likelihood_oracle() {
    let _gate = serial();
    let start = Instant::now();
    for seed in 0..100u64 {
        let mut rng = rng_stream(40_000 + seed);
        let n = rng.random_range(1..=60);
        let j = rng.random_range(1..=6);
        let k = rng.random_range(1..=4);
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..j).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect())
            .collect();
        let ds = ds_from(rows);
        let mut pi: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= s);
        let fix = 1.0 - pi.iter().sum::<f64>();
        pi[0] += fix;
        let rho: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..j).map(|_| rng.random::<f64>() * 0.98 + 0.01).collect())
            .collect();
        let params = LcaParams::new(pi, rho).unwrap();

        // naive oracle: per-row mixture sum in log space
        let naive: f64 = ds
            .rows()
            .iter()
            .map(|row| {
                let terms: Vec<f64> = params
                    .pi()
                    .iter()
                    .zip(params.rho())
                    .map(|(&p, rho_row)| {
                        let mut acc = p.ln();
                        for (&u, &r) in row.iter().zip(rho_row) {
                            acc += if u == 1 { r.ln() } else { (1.0 - r).ln() };
                        }
                        acc
                    })
                    .collect();
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
            })
            .sum();

        let collapsed = log_likelihood(&params, &ds).unwrap();
        assert!(
            (collapsed - naive).abs() < 1e-10,
            "seed {seed}: collapsed {collapsed} vs naive {naive}"
        );
    }
    finish("criterion 4 (likelihood oracle, 100 pairs)", start, 5.0);
}

// -------------------------------------------------------------------------
// 5. Parameter recovery: 3-class model, pi = (0.3, 0.5, 0.2), item
//    profiles separated by >= 0.6, N = 2000, J = 10, 50/10 starts;
//    pi within +-0.03 and rho within +-0.05 after label matching in at
//    least 19 of 20 seeds.
#[test]
fn acceptance_05_parameter_recovery() {
    let _gate = serial();
    let start = Instant::now();
    let hi = 0.9;
    let lo = 0.1;
    let truth = LcaParams::new(
        vec![0.3, 0.5, 0.2],
        vec![
            vec![hi; 10],
            vec![lo; 10],
            vec![hi, hi, hi, hi, hi, lo, lo, lo, lo, lo],
        ],
    )
    .unwrap();

    let mut successes = 0;
    for seed in 0..20u64 {
        let (ds, _) = simulate(&truth, 2000, 50_000 + seed).unwrap();
        let report =
            fit_multistart(&ds, 3, StartPolicy::new(50, 10).unwrap(), 51_000 + seed).unwrap();
        let fit = &report.best_fit;

        // match fitted classes to the truth by total |d rho|
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let cost = |perm: &[usize; 3]| -> f64 {
            (0..3)
                .map(|k| {
                    truth.rho()[k]
                        .iter()
                        .zip(&fit.params.rho()[perm[k]])
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
                })
                .sum()
        };
        let best = perms
            .iter()
            .min_by(|a, b| cost(a).partial_cmp(&cost(b)).unwrap())
            .unwrap();

        let pi_ok = (0..3).all(|k| (truth.pi()[k] - fit.params.pi()[best[k]]).abs() <= 0.03);
        let rho_ok = (0..3).all(|k| {
            truth.rho()[k]
                .iter()
                .zip(&fit.params.rho()[best[k]])
                .all(|(a, b)| (a - b).abs() <= 0.05)
        });
        if pi_ok && rho_ok {
            successes += 1;
        }
    }
    assert!(successes >= 19, "recovery succeeded in {successes}/20 seeds");
    println!("  recovery: {successes}/20 seeds");
    finish("criterion 5 (parameter recovery)", start, 120.0);
}

// -------------------------------------------------------------------------
// 6. k-modes equals the exhaustive-partition minimum on 50 random small
//    instances (N <= 6, J <= 4, k = 2) with 50 restarts.
#[test]
fn acceptance_06_kmodes_brute_force_equivalence() {
    let _gate = serial();
    let start = Instant::now();
    for seed in 0..50u64 {
        let mut rng = rng_stream(60_000 + seed);
        let n = rng.random_range(2..=6);
        let j = rng.random_range(1..=4);
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..j).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect())
            .collect();

        // exhaustive: every assignment into at most two clusters; the
        // per-cluster optimum is sum_j min(#zeros, #ones)
        let mut brute = usize::MAX;
        for mask in 0..(1u32 << n) {
            let mut cost = 0;
            for cluster in 0..2u32 {
                let members: Vec<&Vec<u8>> = (0..n)
                    .filter(|&i| (mask >> i) & 1 == cluster)
                    .map(|i| &rows[i])
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for jj in 0..j {
                    let ones = members.iter().filter(|r| r[jj] == 1).count();
                    cost += ones.min(members.len() - ones);
                }
            }
            brute = brute.min(cost);
        }

        let ds = ds_from(rows);
        let model = fit_kmodes(&ds, &KModesConfig::new(2, seed)).unwrap();
        assert_eq!(model.cost, brute, "seed {seed}");
    }
    finish("criterion 6 (k-modes brute-force equivalence)", start, 10.0);
}

// -------------------------------------------------------------------------
// 7. The 4-point silhouette hand case gives mean S = 0.7917 +- 1e-4.
#[test]
fn acceptance_07_silhouette_hand_case() {
    let _gate = serial();
    let start = Instant::now();
    let ds = ds_from(vec![
        vec![0, 0, 0],
        vec![0, 0, 0],
        vec![1, 1, 1],
        vec![1, 1, 0],
    ]);
    let model = KModesModel {
        centroids: vec![vec![0, 0, 0], vec![1, 1, 1]],
        assignment: vec![0, 0, 1, 1],
        cost: 1,
        iterations: 1,
        converged: true,
        cost_trace: vec![1],
        restart: 0,
    };
    let sil = silhouette_width(&model, &ds).unwrap();
    assert!(
        (sil.mean - 0.7917).abs() <= 1e-4,
        "mean silhouette {}",
        sil.mean
    );
    finish("criterion 7 (silhouette hand case)", start, 1.0);
}

// -------------------------------------------------------------------------
// 8. BLRT behavior: strongly separated 2-class data gives the minimal
//    p = 1/(B+1) with B = 99; data from a 1-class model gives p > 0.05
//    in at least 17 of 20 seeds. Reduced start policy throughout.
#[test]
fn acceptance_08_blrt_behavior() {
    let _gate = serial();
    let start = Instant::now();

    let separated = LcaParams::new(vec![0.5, 0.5], vec![vec![0.9; 5], vec![0.1; 5]]).unwrap();
    let (ds, _) = simulate(&separated, 500, 80_001).unwrap();
    let res = blrt(&ds, 2, 99, 80_002, StartPolicy::reduced()).unwrap();
    assert_eq!(res.n_excluded, 0, "replicates excluded: {}", res.n_excluded);
    assert!(
        (res.p_value - 1.0 / 100.0).abs() < 1e-12,
        "separated-data p = {}, expected 0.01",
        res.p_value
    );

    let null = LcaParams::new(vec![1.0], vec![vec![0.6, 0.45, 0.5, 0.55, 0.4]]).unwrap();
    let mut non_rejections = 0;
    for seed in 0..20u64 {
        let (ds, _) = simulate(&null, 250, 81_000 + seed).unwrap();
        let res = blrt(&ds, 2, 99, 82_000 + seed, StartPolicy::reduced()).unwrap();
        if res.p_value > 0.05 {
            non_rejections += 1;
        }
    }
    assert!(
        non_rejections >= 17,
        "null calibration: p > 0.05 in {non_rejections}/20 seeds"
    );
    println!("  null calibration: {non_rejections}/20 seeds with p > 0.05");
    finish("criterion 8 (BLRT behavior)", start, 300.0);
}

// -------------------------------------------------------------------------
// 9. With entropy-1 step-1 posteriors the three-step estimates equal the
//    direct multinomial-logit + pooled-regression fits within 1e-4.
#[test]
fn acceptance_09_threestep_reduction_oracle() {
    let _gate = serial();
    let start = Instant::now();
    let mut rng = rng_stream(90_000);
    let n = 500;
    let k = 3;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let x: Vec<u8> = labels
        .iter()
        .map(|&c| u8::from(rng.random::<f64>() < [0.25, 0.5, 0.7][c]))
        .collect();
    let y: Vec<f64> = labels
        .iter()
        .zip(&x)
        .map(|(&c, &xv)| [2.6, 2.6, 2.3][c] + 0.4 * xv as f64 + 0.5 * (rng.random::<f64>() - 0.5))
        .collect();

    let j = 4;
    let rows: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..j).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect())
        .collect();
    let names = (0..j).map(|c| format!("u{c}")).collect();
    let ds = CategoricalDataset::new(
        names,
        rows,
        vec![("x".into(), x.clone())],
        vec![("y".into(), y.clone())],
    )
    .unwrap();

    let mut counts = vec![0usize; k];
    for &c in &labels {
        counts[c] += 1;
    }
    let fit = catmix::lca::LcaFit {
        params: LcaParams::new(
            counts.iter().map(|&c| c as f64 / n as f64).collect(),
            vec![vec![0.5; j]; k],
        )
        .unwrap(),
        loglik: 0.0,
        posteriors: labels
            .iter()
            .map(|&c| (0..k).map(|s| if s == c { 1.0 } else { 0.0 }).collect())
            .collect(),
        iterations: 1,
        converged: true,
        npar: k - 1 + k * j,
        ll_trace: vec![0.0],
    };

    let res = fit_threestep(&ds, &fit, "x", "y").unwrap();

    // direct ANCOVA oracle by Gaussian elimination
    let dim = k + 1;
    let mut a = vec![vec![0.0f64; dim]; dim];
    let mut b = vec![0.0f64; dim];
    for i in 0..n {
        let mut z = vec![0.0; dim];
        z[labels[i]] = 1.0;
        z[k] = x[i] as f64;
        for r in 0..dim {
            for c in 0..dim {
                a[r][c] += z[r] * z[c];
            }
            b[r] += z[r] * y[i];
        }
    }
    for col in 0..dim {
        let pivot = (col..dim)
            .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in 0..dim {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..dim {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let direct: Vec<f64> = (0..dim).map(|r| b[r] / a[r][r]).collect();
    for c in 0..k {
        assert!(
            (res.class_means[c] - direct[c]).abs() < 1e-4,
            "class {c} mean {} vs direct {}",
            res.class_means[c],
            direct[c]
        );
    }
    assert!((res.direct_effect.coef - direct[k]).abs() < 1e-4);

    // direct saturated multinomial logit from the 2xK cells
    let mut cells = [vec![0.0f64; k], vec![0.0f64; k]];
    for (&c, &xv) in labels.iter().zip(&x) {
        cells[xv as usize][c] += 1.0;
    }
    for e in &res.covariate_logits {
        let c = e.class;
        let r = res.reference_class;
        let alpha = (cells[0][c] / cells[0][r]).ln();
        let gamma = (cells[1][c] / cells[1][r]).ln() - alpha;
        assert!(
            (e.logit - gamma).abs() < 1e-4,
            "class {c} logit {} vs direct {gamma}",
            e.logit
        );
        assert!((e.intercept - alpha).abs() < 1e-4);
    }
    finish("criterion 9 (three-step reduction oracle)", start, 10.0);
}

// -------------------------------------------------------------------------
// 10. Class enumeration on synthetic 3-class data minimizes BIC at K = 3
//     in at least 18 of 20 seeds.
#[test]
fn acceptance_10_model_selection_sanity() {
    let _gate = serial();
    let start = Instant::now();
    let truth = LcaParams::new(
        vec![0.4, 0.35, 0.25],
        vec![
            vec![0.85; 6],
            vec![0.15; 6],
            vec![0.85, 0.85, 0.85, 0.15, 0.15, 0.15],
        ],
    )
    .unwrap();

    let mut hits = 0;
    for seed in 0..20u64 {
        let (ds, _) = simulate(&truth, 500, 100_000 + seed).unwrap();
        let table =
            enumerate_classes(&ds, 4, StartPolicy::reduced(), None, 101_000 + seed).unwrap();
        let best = table
            .rows
            .iter()
            .min_by(|a, b| a.bic.partial_cmp(&b.bic).unwrap())
            .unwrap();
        if best.k == 3 {
            hits += 1;
        }
    }
    assert!(hits >= 18, "BIC chose K=3 in {hits}/20 seeds");
    println!("  BIC minimized at K=3 in {hits}/20 seeds");
    finish("criterion 10 (model-selection sanity)", start, 180.0);
}

// -------------------------------------------------------------------------
// 11. Conditional reproduction against the released survey data. Runs
//     only when the file is available (CATMIX_PAPER_DATA or
//     data/support.csv); best-effort per the stated seed sensitivity, so
//     mismatches warn instead of failing.
#[test]
fn acceptance_11_conditional_published_dataset() {
    let _gate = serial();
    let start = Instant::now();
    let path = std::env::var_os("CATMIX_PAPER_DATA")
        .map(std::path::PathBuf::from)
        .or_else(|| {
            let p = std::path::PathBuf::from("data/support.csv");
            p.exists().then_some(p)
        });
    let Some(path) = path else {
        println!("SKIP criterion 11: published dataset not available");
        return;
    };

    let ds = load_csv(&path, &Schema::HeaderPrefixes)
        .expect("published dataset loads")
        .dataset;
    println!("  loaded N={} J={}", ds.n(), ds.n_items());

    let mut size_match = false;
    for seed in 0..20u64 {
        let model = fit_kmodes(&ds, &KModesConfig::new(2, seed)).unwrap();
        let mut sizes = model.cluster_sizes();
        sizes.sort_unstable();
        if sizes == vec![241, 326] {
            size_match = true;
            break;
        }
    }
    if !size_match {
        println!("  WARN: no seed among 20 reproduced k-modes sizes 241/326");
    }

    let report = fit_multistart(&ds, 3, StartPolicy::default(), 1).unwrap();
    let ll = report.best_fit.loglik;
    if (ll - -3596.93).abs() > 0.5 {
        println!("  WARN: 3-class LL {ll:.2} differs from -3596.93 by more than 0.5");
    }
    let labels = modal_assignment(&report.best_fit.posteriors).unwrap();
    let mut counts: Vec<usize> = mcap(&labels, 3)
        .unwrap()
        .iter()
        .map(|p| (p * ds.n() as f64).round() as usize)
        .collect();
    counts.sort_unstable();
    if counts != vec![130, 155, 282] {
        println!("  WARN: modal counts {counts:?} differ from (130, 155, 282)");
    }
    let diag = diagnose(&ds, &report.best_fit, 0, 0, 0.95).unwrap();
    if (diag.entropy - 0.87).abs() > 0.01 {
        println!("  WARN: entropy {:.3} differs from 0.87 +- 0.01", diag.entropy);
    }
    finish("criterion 11 (published-data reproduction)", start, 600.0);
}
