use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use zskd_core::prior::{
    concentration, dirichlet_moments, dirichlet_sample, uniform_prior, ConcentrationVector,
};
use zskd_core::rng::{rng_from_seed, ZskdRng};

const DRAWS: usize = 100_000;

struct Moments {
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn empirical(samples: &[Vec<f64>]) -> Moments {
    let k = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; k];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; k];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v - m) * (v - m) / (n - 1.0);
        }
    }
    Moments { mean, var }
}

/// Standard errors of the sample mean and sample variance of each marginal,
/// which is Beta(a_i, a0 - a_i).
fn standard_errors(alpha: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let a0: f64 = alpha.iter().sum();
    let n = n as f64;
    alpha
        .iter()
        .map(|&a| {
            let b = a0 - a;
            let var = a * b / (a0 * a0 * (a0 + 1.0));
            let excess = 6.0 * ((a - b).powi(2) * (a0 + 1.0) - a * b * (a0 + 2.0))
                / (a * b * (a0 + 2.0) * (a0 + 3.0));
            let mu4 = var * var * (excess + 3.0);
            ((var / n).sqrt(), ((mu4 - var * var) / n).sqrt())
        })
        .unzip()
}

fn draw(alpha: &[f64], seed: u64, n: usize) -> Vec<Vec<f64>> {
    let c = ConcentrationVector::new(alpha.to_vec(), 0, 1.0).unwrap();
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| dirichlet_sample(&c, &mut rng).into_data()).collect()
}

/// Rejection-free reference sampler for half-integer shapes:
/// Gamma(m) is a sum of m unit exponentials and Gamma(1/2) is Z^2 / 2.
fn oracle_draw(alpha: &[f64], seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let gamma = |shape: f64, rng: &mut ZskdRng| {
        let twice = (2.0 * shape).round() as u64;
        assert_eq!(twice as f64, 2.0 * shape, "oracle needs half-integer shapes");
        let mut g: f64 = (0..twice / 2).map(|_| -(1.0 - rng.random::<f64>()).ln()).sum();
        if twice % 2 == 1 {
            let z: f64 = rng.sample(StandardNormal);
            g += 0.5 * z * z;
        }
        g
    };
    (0..n)
        .map(|_| {
            let g: Vec<f64> = alpha.iter().map(|&a| gamma(a, &mut rng)).collect();
            let s: f64 = g.iter().sum();
            g.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn assert_moments(alpha: &[f64], m: &Moments, sigmas: f64, label: &str) {
    let (mean, var) = dirichlet_moments(alpha);
    let (se_mean, se_var) = standard_errors(alpha, DRAWS);
    for i in 0..alpha.len() {
        let zm = (m.mean[i] - mean[i]) / se_mean[i];
        let zv = (m.var[i] - var[i]) / se_var[i];
        assert!(zm.abs() < sigmas, "{label}: mean[{i}] off by {zm:.2} SE");
        assert!(zv.abs() < sigmas, "{label}: var[{i}] off by {zv:.2} SE");
    }
}

#[test]
fn symmetric_pair_has_half_means() {
    let m = empirical(&draw(&[1.0, 1.0], 1, DRAWS));
    let (se, _) = standard_errors(&[1.0, 1.0], DRAWS);
    for (mean, se) in m.mean.iter().zip(&se) {
        assert!((mean - 0.5).abs() < 3.0 * se);
    }
}

#[test]
fn skewed_triple_matches_closed_form_mean() {
    let alpha = [2.0, 1.0, 1.0];
    let m = empirical(&draw(&alpha, 2, DRAWS));
    let (se, _) = standard_errors(&alpha, DRAWS);
    for (i, want) in [0.5, 0.25, 0.25].iter().enumerate() {
        assert!((m.mean[i] - want).abs() < 3.0 * se[i], "component {i}");
    }
}

#[test]
fn random_concentrations_match_moments() {
    let mut rng = rng_from_seed(77);
    let mut cases: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let k = rng.random_range(2..=10);
            (0..k).map(|_| rng.random_range(0.05..5.0)).collect()
        })
        .collect();
    cases.push((0..10).map(|_| rng.random_range(0.001..0.99)).collect());
    for (c, alpha) in cases.iter().enumerate() {
        let m = empirical(&draw(alpha, 100 + c as u64, DRAWS));
        assert_moments(alpha, &m, 4.0, &format!("case {c} {alpha:?}"));
    }
}

#[test]
fn closed_form_moments_agree_with_reference_sampler() {
    for (c, alpha) in [vec![0.5, 0.5, 0.5, 0.5], vec![3.0, 0.5, 1.5], vec![1.0, 2.0, 4.5, 0.5, 1.0]]
        .iter()
        .enumerate()
    {
        let oracle = empirical(&oracle_draw(alpha, 500 + c as u64, DRAWS));
        assert_moments(alpha, &oracle, 4.0, &format!("oracle {alpha:?}"));
        let ours = empirical(&draw(alpha, 600 + c as u64, DRAWS));
        let (se_mean, se_var) = standard_errors(alpha, DRAWS);
        for i in 0..alpha.len() {
            let two = 2f64.sqrt();
            assert!((ours.mean[i] - oracle.mean[i]).abs() < 4.0 * two * se_mean[i]);
            assert!((ours.var[i] - oracle.var[i]).abs() < 4.0 * two * se_var[i]);
        }
    }
}

#[test]
fn uniform_prior_components_are_exchangeable() {
    let sim = uniform_prior(10).unwrap();
    let c = concentration(&sim, 4, 1.0).unwrap();
    assert_eq!(c.alpha(), &[1.0; 10]);
    let m = empirical(&draw(c.alpha(), 3, DRAWS));
    let (se, _) = standard_errors(c.alpha(), DRAWS);
    for (i, (mean, se)) in m.mean.iter().zip(&se).enumerate() {
        assert!((mean - 0.1).abs() < 3.0 * se, "component {i}");
    }
}

/// `P(X > x)` for `X ~ Beta(a, 1 - a)`, by quadrature after substituting
/// `1 - X = u^(1 / (1 - a))`, which removes both endpoint singularities.
fn beta_unit_tail(a: f64, x: f64) -> f64 {
    let b = 1.0 - a;
    let upper = (1.0 - x).powf(b);
    let f = |u: f64| (1.0 - u.powf(1.0 / b)).powf(a - 1.0) / b;
    let n = 20_000;
    let h = upper / n as f64;
    let simpson: f64 = (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * f(i as f64 * h)
        })
        .sum::<f64>()
        * h
        / 3.0;
    simpson * (std::f64::consts::PI * a).sin() / std::f64::consts::PI
}

#[test]
fn small_beta_gives_sparse_targets() {
    let sim = uniform_prior(10).unwrap();
    let c = concentration(&sim, 0, 0.1).unwrap();
    let samples = draw(c.alpha(), 4, DRAWS);
    let n = samples.len() as f64;
    for threshold in [0.5, 0.9] {
        // Above 1/2 at most one component can exceed the threshold.
        let p = 10.0 * beta_unit_tail(0.1, threshold);
        let hits = samples
            .iter()
            .filter(|s| s.iter().copied().fold(0.0, f64::max) > threshold)
            .count() as f64;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!(((hits / n) - p).abs() < 4.0 * se, "max > {threshold}: {} vs {p}", hits / n);
        if threshold == 0.5 {
            assert!(hits * 2.0 > n, "most draws put over half their mass on one class");
        }
    }
}

#[test]
fn tiny_concentration_puts_mass_on_one_component() {
    let samples = draw(&[0.05; 10], 5, 20_000);
    let avg = samples
        .iter()
        .map(|s| s.iter().filter(|&&v| v > 0.5).count())
        .sum::<usize>() as f64
        / samples.len() as f64;
    assert!((0.9..=1.0).contains(&avg), "average {avg}");
}

proptest! {
    #[test]
    fn every_sample_is_on_the_simplex(
        alpha in prop::collection::vec(1e-4f64..20.0, 2..12),
        seed in any::<u64>(),
    ) {
        for p in draw(&alpha, seed, 20) {
            prop_assert!(p.iter().all(|&v| v >= 0.0 && v.is_finite()));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
