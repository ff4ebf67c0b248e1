//! Analytic PMFs against closed-form CDF differences and Monte-Carlo draws.

use djpeg_core::quant_model::{
    classify_scenario, empirical_pmf, local_maxima, missing_bins, pmf_double, pmf_single, total_variation,
    DensitySpec, Pmf, ScenarioKind,
};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Laplace, Normal};

/// Bin masses computed as CDF differences over the half-up rounding preimage,
/// independent of the quadrature path.
fn cdf_pmf_single(cdf: &dyn Fn(f64) -> f64, q1: u32, support: std::ops::RangeInclusive<i32>) -> Pmf {
    let q = f64::from(q1);
    let d_min = *support.start();
    Pmf {
        d_min,
        probs: support
            .map(|s| cdf(q * (f64::from(s) + 0.5)) - cdf(q * (f64::from(s) - 0.5)))
            .collect(),
    }
}

/// Double-quantization PMF by summing single-quantization masses over every
/// `s` whose requantization lands in `d`, using float rounding of `s·q1/q2`.
fn brute_pmf_double(single: &Pmf, q1: u32, q2: u32, support: std::ops::RangeInclusive<i32>) -> Pmf {
    let d_min = *support.start();
    let mut probs = vec![0.0; support.clone().count()];
    for (s, p) in single.iter() {
        let d = (f64::from(s) * f64::from(q1) / f64::from(q2) + 0.5).floor() as i32;
        if support.contains(&d) {
            probs[(d - d_min) as usize] += p;
        }
    }
    Pmf { d_min, probs }
}

#[test]
fn single_matches_gaussian_cdf() {
    let n = Normal::new(3.0, 12.0).unwrap();
    let density = DensitySpec::gaussian(3.0, 12.0).unwrap();
    for q1 in [1, 2, 5, 9] {
        let ours = pmf_single(q1, &density, -200..=200).unwrap();
        let oracle = cdf_pmf_single(&|x| n.cdf(x), q1, -200..=200);
        for (s, p) in ours.iter() {
            assert!((p - oracle.get(s)).abs() < 1e-9, "q1={q1} s={s}");
        }
    }
}

#[test]
fn double_matches_brute_force_requantization() {
    let l = Laplace::new(0.0, 8.0).unwrap();
    let density = DensitySpec::laplacian(0.0, 8.0).unwrap();
    for (q1, q2) in [(6, 3), (7, 3), (3, 6), (4, 6), (3, 2), (2, 3), (5, 5), (11, 4)] {
        // single-quantized support wide enough that the dropped tails are negligible
        let single = cdf_pmf_single(&|x| l.cdf(x), q1, -600..=600);
        let oracle = brute_pmf_double(&single, q1, q2, -200..=200);
        let ours = pmf_double(q1, q2, &density, -200..=200).unwrap();
        for (d, p) in ours.iter() {
            assert!((p - oracle.get(d)).abs() < 1e-9, "({q1},{q2}) d={d}: {p} vs {}", oracle.get(d));
        }
    }
}

#[test]
fn s5_is_bitwise_single() {
    let densities = [
        DensitySpec::gaussian(0.0, 20.0).unwrap(),
        DensitySpec::laplacian(1.5, 9.0).unwrap(),
        DensitySpec::uniform(-37.0, 52.0).unwrap(),
    ];
    for density in densities {
        for q in [1, 3, 8, 17, 255] {
            let s = pmf_single(q, &density, -200..=200).unwrap();
            let d = pmf_double(q, q, &density, -200..=200).unwrap();
            assert_eq!(classify_scenario(q, q).unwrap(), ScenarioKind::S5);
            for ((_, a), (_, b)) in s.iter().zip(d.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn s1_leaves_multiples_only() {
    let density = DensitySpec::laplacian(0.0, 30.0).unwrap();
    for (q2, m) in [(2u32, 2u32), (2, 3), (3, 3), (5, 4), (4, 2)] {
        let q1 = q2 * m;
        assert_eq!(classify_scenario(q1, q2).unwrap(), ScenarioKind::S1);
        let p = pmf_double(q1, q2, &density, -200..=200).unwrap();
        for (d, v) in p.iter() {
            if d.rem_euclid(m as i32) != 0 {
                assert_eq!(v, 0.0, "({q1},{q2}) d={d}");
            } else {
                assert!(v > 0.0);
            }
        }
        let missing = missing_bins(&p, 0.0).unwrap();
        // zero bins count as missing only next to a populated in-support bin
        let populated = |d: i32| (-200..=200).contains(&d) && d.rem_euclid(m as i32) == 0;
        let expected: Vec<i32> = (-200..=200)
            .filter(|&d: &i32| !populated(d) && (populated(d - 1) || populated(d + 1)))
            .collect();
        assert_eq!(missing, expected);
    }
}

#[test]
fn monte_carlo_agreement() {
    let density = DensitySpec::laplacian(0.0, 10.0).unwrap();
    let n = 1_000_000;
    for (q1, q2) in [(3u32, 2u32), (2, 3), (4, 2), (2, 4)] {
        let analytic = pmf_double(q1, q2, &density, -200..=200).unwrap();
        let mc = empirical_pmf(q1, Some(q2), n, &density, 7, -200..=200).unwrap();
        let tv = total_variation(&analytic, &mc);
        assert!(tv < 5e-3, "({q1},{q2}) tv={tv}");
    }
    let analytic = pmf_single(3, &density, -200..=200).unwrap();
    let mc = empirical_pmf(3, None, n, &density, 8, -200..=200).unwrap();
    assert!(total_variation(&analytic, &mc) < 5e-3);
}

#[test]
fn non_divisible_pairs_show_off_center_peaks() {
    let density = DensitySpec::laplacian(0.0, 10.0).unwrap();
    // q1 > q2, not divisible: some bins are skipped, leaving isolated peaks
    let p = pmf_double(3, 2, &density, -200..=200).unwrap();
    assert!(!local_maxima(&p).is_empty());
    assert!(missing_bins(&p, 0.0).unwrap().contains(&1));
    // q1 < q2, not divisible: bins collect one or two first-pass bins alternately
    let p = pmf_double(2, 3, &density, -200..=200).unwrap();
    assert!(local_maxima(&p).contains(&3));
    assert!(missing_bins(&p, 0.0).unwrap().is_empty());
    // single quantization of a unimodal density has no off-center maxima
    let p = pmf_single(3, &density, -200..=200).unwrap();
    assert!(local_maxima(&p).is_empty());
}

#[test]
fn pmfs_sum_to_one() {
    let density = DensitySpec::gaussian(0.0, 15.0).unwrap();
    for (q1, q2) in [(1, 1), (7, 2), (2, 7), (8, 4), (255, 1)] {
        let p = pmf_double(q1, q2, &density, -400..=400).unwrap();
        assert!((p.total_mass() - 1.0).abs() < 1e-8, "({q1},{q2})");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn double_pmf_is_a_distribution(q1 in 1u32..=40, q2 in 1u32..=40, scale in 2.0f64..30.0) {
        let density = DensitySpec::laplacian(0.0, scale).unwrap();
        let p = pmf_double(q1, q2, &density, -2000..=2000).unwrap();
        prop_assert!(p.probs.iter().all(|&v| v >= 0.0));
        prop_assert!((p.total_mass() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn s1_zero_mass_law(q2 in 1u32..=20, m in 2u32..=6, scale in 5.0f64..40.0) {
        let density = DensitySpec::gaussian(0.0, scale).unwrap();
        let p = pmf_double(q2 * m, q2, &density, -100..=100).unwrap();
        for (d, v) in p.iter() {
            if d.rem_euclid(m as i32) != 0 {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
