mod common;

use common::{gradcheck, random_tensor, rel_err};
use muscl_core::loss::{cosine_sim, pairwise_losses, validation_loss, weighted_infonce, weighted_infonce_on};
use muscl_core::{Rng, Tensor};
use proptest::prelude::*;

/// Direct evaluation of l(a, b) = −log(exp(s_ab/τ) / Σ_{k≠a} exp(s_ak/τ))
/// with explicit exponentials and no stabilization.
fn brute_pair_losses(z: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = |a: usize, b: usize| {
        let dot: f64 = z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum();
        dot / (norm(&z[a]) * norm(&z[b]))
    };
    let l = |a: usize, b: usize| {
        let den: f64 = (0..z.len()).filter(|&k| k != a).map(|k| (s(a, k) / tau).exp()).sum();
        -((s(a, b) / tau).exp() / den).ln()
    };
    (0..z.len() / 2).map(|i| l(2 * i, 2 * i + 1) + l(2 * i + 1, 2 * i)).collect()
}

fn rows(z: &Tensor) -> Vec<Vec<f64>> {
    (0..z.rows()).map(|r| z.row(r).to_vec()).collect()
}

#[test]
fn brute_force_oracle() {
    let mut rng = Rng::new(11);
    for trial in 0..20 {
        let z = random_tensor(&[6, 4], 1.0, &mut rng);
        let tau = [0.5, 0.1, 1.0, 0.07][trial % 4];
        let got = pairwise_losses(&z, tau).unwrap();
        let want = brute_pair_losses(&rows(&z), tau);
        for (g, w) in got.iter().zip(&want) {
            assert!(rel_err(*g, *w) < 1e-12, "tau {tau}: {g} vs {w}");
        }
        let w: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
        let total = weighted_infonce(&z, &w, tau).unwrap().total;
        let oracle = w.iter().zip(&want).map(|(a, b)| a * b).sum::<f64>() / 6.0;
        assert!(rel_err(total, oracle) < 1e-12);
        let v = validation_loss(&z, tau).unwrap();
        assert!(rel_err(v, want.iter().sum::<f64>() / 6.0) < 1e-12);
    }
}

#[test]
fn analytic_values() {
    let z = Tensor::new(vec![2, 2], vec![0.3, -2.0, 5.0, 1.0]).unwrap();
    assert_eq!(weighted_infonce(&z, &[1.0], 0.5).unwrap().total, 0.0);
    let same = Tensor::new(vec![4, 3], [1.0, 2.0, -1.0].repeat(4)).unwrap();
    for l in pairwise_losses(&same, 0.5).unwrap() {
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12, "{l}");
    }
}

#[test]
fn weight_examples() {
    let mut rng = Rng::new(3);
    let z = random_tensor(&[8, 5], 1.0, &mut rng);
    let ones = weighted_infonce(&z, &[1.0; 4], 0.5).unwrap();
    assert_eq!(ones.total, validation_loss(&z, 0.5).unwrap());
    assert_eq!(weighted_infonce(&z, &[0.0; 4], 0.5).unwrap().total, 0.0);
    let mut w = [0.3, 0.9, 0.5, 0.1];
    let before = weighted_infonce(&z, &w, 0.5).unwrap();
    w[2] *= 2.0;
    let after = weighted_infonce(&z, &w, 0.5).unwrap();
    let expect = 0.5 * before.per_pair[2] / 8.0;
    assert!(((after.total - before.total) - expect).abs() < 1e-15);
    assert!(weighted_infonce(&z, &[1.0; 3], 0.5).is_err());
    assert!(pairwise_losses(&z, 0.0).is_err());
}

#[test]
fn gradient_wrt_z_and_weights() {
    let mut rng = Rng::new(4);
    for n in 1..=4 {
        for d in [2, 7, 16] {
            let z = random_tensor(&[2 * n, d], 1.0, &mut rng);
            let w = Tensor::new(vec![n], (0..n).map(|_| rng.uniform()).collect()).unwrap();
            let err = gradcheck(&[z, w], &|t, v| weighted_infonce_on(t, v[0], v[1], 0.5).unwrap(), 1);
            assert!(err < 1e-6, "N {n} d {d}: {err:e}");
        }
    }
}

#[test]
fn cosine_of_zero_vector_is_zero() {
    assert_eq!(cosine_sim(&[0.0; 3], &[1.0, 2.0, 3.0]), 0.0);
    let z = [0.4, -1.2, 3.0];
    assert!((cosine_sim(&z, &z) - 1.0).abs() < 1e-15);
}

fn z_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..6).prop_flat_map(|(n, d)| (Just(n), Just(d), prop::collection::vec(-3.0f64..3.0, 2 * n * d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permuting_pairs_permutes_losses((n, d, data) in z_strategy(), seed in any::<u64>()) {
        let z = Tensor::new(vec![2 * n, d], data).unwrap();
        let base = pairwise_losses(&z, 0.5).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(seed).shuffle(&mut order);
        let perm: Vec<f64> = order.iter().flat_map(|&i| [z.row(2 * i), z.row(2 * i + 1)].concat()).collect();
        let zp = Tensor::new(vec![2 * n, d], perm).unwrap();
        let got = pairwise_losses(&zp, 0.5).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert!((got[k] - base[i]).abs() <= 1e-12 * base[i].abs().max(1.0));
        }
        let t0 = validation_loss(&z, 0.5).unwrap();
        let t1 = validation_loss(&zp, 0.5).unwrap();
        prop_assert!((t0 - t1).abs() <= 1e-12 * t0.abs().max(1.0));
    }

    #[test]
    fn scaling_rows_changes_nothing((n, d, data) in z_strategy(), c in 1e-3f64..1e3) {
        let z = Tensor::new(vec![2 * n, d], data.clone()).unwrap();
        let zc = Tensor::new(vec![2 * n, d], data.iter().map(|x| c * x).collect()).unwrap();
        let a = pairwise_losses(&z, 0.5).unwrap();
        let b = pairwise_losses(&zc, 0.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{} vs {}", x, y);
        }
    }

    #[test]
    fn total_is_weighted_mean_and_pair_sums_nonnegative(
        (n, d, data) in z_strategy(),
        w in prop::collection::vec(0.0f64..1.0, 4),
        tau in 0.05f64..2.0,
    ) {
        let z = Tensor::new(vec![2 * n, d], data).unwrap();
        let w = &w[..n.min(4)];
        prop_assume!(w.len() == n);
        let b = weighted_infonce(&z, w, tau).unwrap();
        let manual = w.iter().zip(&b.per_pair).map(|(a, l)| a * l).sum::<f64>() / (2 * n) as f64;
        prop_assert!((b.total - manual).abs() <= 1e-14 * manual.abs().max(1.0));
        prop_assert!(b.per_pair.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn extreme_norms_and_temperatures_stay_finite((n, d, data) in z_strategy(), tau in 0.05f64..0.2) {
        let z = Tensor::new(vec![2 * n, d], data.iter().map(|x| x * 1e6).collect()).unwrap();
        let l = pairwise_losses(&z, tau).unwrap();
        prop_assert!(l.iter().all(|x| x.is_finite()));
    }
}
