//! Parametric simulation from a latent class model.

use rand::Rng;

use crate::dataset::CategoricalDataset;
use crate::error::Error;
use crate::rng;
use crate::Result;

use super::LcaParams;

/// Draw `n` observations: a class from π, then each indicator as an
/// independent Bernoulli(ρ_kj). Returns the dataset (items named
/// `u1..uJ`) together with the true 0-based class labels.
pub fn simulate(
    params: &LcaParams,
    n: usize,
    seed: u64,
) -> Result<(CategoricalDataset, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidConfig {
            context: "simulation needs at least one observation".into(),
        });
    }
    let j = params.n_items();
    let mut rng = rng::stream(seed, 0);

    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = draw_class(params.pi(), rng.random::<f64>());
        let rho = &params.rho()[class];
        let row = (0..j)
            .map(|jj| u8::from(rng.random::<f64>() < rho[jj]))
            .collect();
        rows.push(row);
        labels.push(class);
    }

    let names = (1..=j).map(|jj| format!("u{jj}")).collect();
    let ds = CategoricalDataset::new(names, rows, vec![], vec![])?;
    Ok((ds, labels))
}

fn draw_class(pi: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pi.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lca::RHO_EPS;

    #[test]
    fn upper_clamp_rho_gives_all_ones() {
        let params = LcaParams::new(vec![1.0], vec![vec![1.0 - RHO_EPS; 3]]).unwrap();
        let (ds, _) = simulate(&params, 200, 4).unwrap();
        // P(any zero) = 1 - (1-eps)^600 ~ 6e-4; accept the tiny risk at a fixed seed
        assert!(ds.rows().iter().all(|row| row.iter().all(|&v| v == 1)));
    }

    #[test]
    fn single_class_labels() {
        let params = LcaParams::new(vec![1.0], vec![vec![0.5, 0.5]]).unwrap();
        let (_, labels) = simulate(&params, 50, 9).unwrap();
        assert!(labels.iter().all(|&c| c == 0));
    }

    #[test]
    fn empirical_shares_approach_pi() {
        let params = LcaParams::new(
            vec![0.3, 0.5, 0.2],
            vec![vec![0.9; 4], vec![0.5; 4], vec![0.1; 4]],
        )
        .unwrap();
        let (_, labels) = simulate(&params, 2000, 123).unwrap();
        let mut counts = [0usize; 3];
        for &c in &labels {
            counts[c] += 1;
        }
        for (k, &target) in [0.3, 0.5, 0.2].iter().enumerate() {
            let share = counts[k] as f64 / 2000.0;
            assert!(
                (share - target).abs() <= 0.03,
                "class {k}: share {share} vs target {target}"
            );
        }
    }

    #[test]
    fn zero_n_rejected() {
        let params = LcaParams::new(vec![1.0], vec![vec![0.5]]).unwrap();
        assert!(simulate(&params, 0, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let params = LcaParams::new(vec![0.4, 0.6], vec![vec![0.8, 0.3], vec![0.2, 0.7]]).unwrap();
        let (a, la) = simulate(&params, 100, 31).unwrap();
        let (b, lb) = simulate(&params, 100, 31).unwrap();
        assert_eq!(a.rows(), b.rows());
        assert_eq!(la, lb);
    }
}
