use cadistill::kernel::{kernel_weights, normalize_slice, select_exponents_raw, zpd_moments, KernelParams};
use cadistill::numerics::mean_var;
use cadistill::passrate::{estimate_pass_rate, hard_filter, histogram, RolloutRecord, CURRICULUM_EDGES};
use cadistill::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

#[test]
fn histogram_matches_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let ps: Vec<f64> = (0..100).map(|_| rng.random_range(0..=8) as f64 / 8.0).collect();
    let h = histogram(&ps, &CURRICULUM_EDGES).unwrap();
    let mut counts = [0usize; 3];
    for &p in &ps {
        // low [0, 0.2), med [0.2, 0.8), high [0.8, 1]
        let j = if p < 0.2 {
            0
        } else if p < 0.8 {
            1
        } else {
            2
        };
        counts[j] += 1;
    }
    for (f, c) in h.fractions.iter().zip(counts) {
        assert_eq!(*f, c as f64 / 100.0);
    }
    assert!((h.mean_p - ps.iter().sum::<f64>() / 100.0).abs() < 1e-15);
}

#[test]
fn pass_rate_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..200 {
        let k = rng.random_range(1..=32);
        let outcomes: Vec<bool> = (0..k).map(|_| rng.random_bool(0.3)).collect();
        let s = outcomes.iter().filter(|&&o| o).count();
        let p = estimate_pass_rate(&RolloutRecord::new(format!("q{i}"), outcomes).unwrap()).unwrap();
        assert_eq!((p.successes as usize, p.k as usize), (s, k));
        assert_eq!(p.p, s as f64 / k as f64);
    }
}

#[test]
fn hard_filter_edges_inclusive() {
    assert!(hard_filter(0.2, 0.2, 0.8).unwrap());
    assert!(hard_filter(0.8, 0.2, 0.8).unwrap());
    assert!(!hard_filter(0.199, 0.2, 0.8).unwrap());
    assert!(hard_filter(0.5, 0.9, 0.1).is_err());
}

#[test]
fn uniform_draws_give_flat_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ps: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
    let m = zpd_moments(&ps, 0.01).unwrap();
    // standard errors for n = 1000: mean ~0.009, variance ~0.0024
    assert!((m.mean_p - 0.5).abs() < 0.03, "{m:?}");
    assert!((m.var_p - 1.0 / 12.0).abs() < 0.008, "{m:?}");
}

#[test]
fn beta_draws_recover_exponents() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (1.8, 3.2);
    let dist = Beta::new(a + 1.0, b + 1.0).unwrap();
    let ps: Vec<f64> = (0..200_000).map(|_| dist.sample(&mut rng)).collect();
    let (m, v) = mean_var(&ps);
    let k = select_exponents_raw(m, v).unwrap();
    assert!((k.alpha - a).abs() < 0.1 && (k.beta - b).abs() < 0.15, "{k:?}");
}

#[test]
fn select_exponents_errors() {
    assert!(matches!(select_exponents_raw(0.5, 0.09), Err(Error::Validity(_))));
    assert!(matches!(select_exponents_raw(0.5, 0.0), Err(Error::Degenerate(_))));
    let k = select_exponents_raw(0.4, 0.03).unwrap();
    assert!((k.alpha - 1.8).abs() < 1e-12 && (k.beta - 3.2).abs() < 1e-12);
}

#[test]
fn normalized_kernel_weights_have_unit_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let ps: Vec<f64> = (0..40).map(|_| rng.random_range(0..=8) as f64 / 8.0).collect();
        let params = KernelParams::new(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)).unwrap();
        let w = normalize_slice(&kernel_weights(&ps, params, 0.0).unwrap());
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        if w.iter().any(|&x| x > 0.0) {
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn skewed_mean_can_give_negative_exponent_below_the_boundary() {
    // v = 0.02 < 0.1 * 0.9 / 3, yet α* = 0.1 * (0.09 / 0.02 - 1) - 1 = -0.65
    let k = select_exponents_raw(0.1, 0.02).unwrap();
    assert!((k.alpha + 0.65).abs() < 1e-12, "{k:?}");
    assert!(KernelParams::new(k.alpha, k.beta).is_err());
}
