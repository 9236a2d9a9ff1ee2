use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use statedchoice::dimtest::{diagonal_ks, isotonic_fit};
use statedchoice::estimands::average_structural_function;
use statedchoice::firststep::{kmeans_plus_plus, lloyd};
use statedchoice::kernel::nadaraya_watson;
use statedchoice::secondstep::{newton_probit, probit_loglik};
use statedchoice::{
    fit_grouped_probit, kmeans_partition, normal, seed, ActualRecord, Grouping, IndividualMoments, LinkFunction,
    ModelSpec,
};

fn moments_from(points: &[Vec<f64>]) -> Vec<IndividualMoments> {
    points
        .iter()
        .enumerate()
        .map(|(i, h)| IndividualMoments {
            person_id: i as i64 + 1,
            h: h.clone(),
            fit_ok: true,
            eval_points: vec![0.0, 1.0],
            noise_var: None,
        })
        .collect()
}

fn points_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 8..60)
}

/// Composite Simpson integral of the standard normal density from -12 to z.
fn simpson_cdf(z: f64) -> f64 {
    let (a, n) = (-12.0, 20_000);
    let h = (z - a) / n as f64;
    let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(z);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn link_round_trip(p in 0.01f64..=0.99) {
        let l = LinkFunction::default();
        let back = l.inverse_link(l.link(p).unwrap()).unwrap();
        prop_assert!((back - p).abs() < 1e-12);
    }

    #[test]
    fn link_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let l = LinkFunction::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(l.link(lo).unwrap() <= l.link(hi).unwrap());
    }

    #[test]
    fn clamp_is_idempotent(p in -1.0f64..2.0, eps in 0.001f64..0.4) {
        let l = LinkFunction::logit(eps).unwrap();
        let once = l.clamp(p);
        prop_assert_eq!(l.clamp(once), once);
        prop_assert!(once >= eps && once <= 1.0 - eps);
    }

    #[test]
    fn normal_cdf_matches_quadrature(z in -6.0f64..6.0) {
        prop_assert!((normal::cdf(z) - simpson_cdf(z)).abs() < 1e-12);
    }

    #[test]
    fn normal_quantile_inverts_cdf(p in 1e-10f64..(1.0 - 1e-10)) {
        let z = normal::quantile(p);
        prop_assert!((normal::cdf(z) - p).abs() < 1e-13 * p.max(1e-3).min(1.0 - p).max(1e-10) + 1e-15);
    }

    #[test]
    fn lloyd_objective_never_increases(points in points_strategy(), k in 1usize..6, s in any::<u64>()) {
        let mut rng = seed::rng(s);
        let init = kmeans_plus_plus(&points, k.min(points.len()), &mut rng);
        let run = lloyd(&points, init, 200);
        for w in run.history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn kmeans_ignores_input_order(points in points_strategy(), k in 1usize..5, s in any::<u64>()) {
        let m = moments_from(&points);
        let mut shuffled = m.clone();
        shuffled.shuffle(&mut seed::rng(s));
        let a = kmeans_partition(&m, k, 3, 11).unwrap();
        let b = kmeans_partition(&shuffled, k, 3, 11).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn group_weights_sum_to_one(points in points_strategy(), k in 1usize..8) {
        let g = kmeans_partition(&moments_from(&points), k.min(points.len()), 2, 5).unwrap();
        let total: f64 = g.weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.group_sizes().iter().all(|&c| c > 0));
    }

    #[test]
    fn diagonal_ks_is_symmetric_and_nonnegative(
        u in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..80)
    ) {
        let (u1, u2): (Vec<f64>, Vec<f64>) = u.into_iter().unzip();
        let a = diagonal_ks(&u1, &u2);
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, diagonal_ks(&u2, &u1));
    }

    #[test]
    fn isotonic_fit_is_monotone_and_mean_preserving(
        pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..60)
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let fit = isotonic_fit(&x, &y);
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        for w in order.windows(2) {
            prop_assert!(fit[w[0]] <= fit[w[1]] + 1e-12);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&fit) - mean(&y)).abs() < 1e-9);
        let again = isotonic_fit(&x, &fit);
        for (a, b) in again.iter().zip(&fit) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn nadaraya_watson_reproduces_constants(
        xs in prop::collection::vec(-2.0f64..2.0, 1..40), c in -5.0f64..5.0, x0 in -1.0f64..1.0
    ) {
        let ys = vec![c; xs.len()];
        if let Some(v) = nadaraya_watson(&xs, &ys, x0, 1.0) {
            prop_assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn newton_loglik_is_non_decreasing(s in any::<u64>(), n in 30usize..200) {
        let mut rng = seed::rng(s);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random_range(-2.0..2.0)]).collect();
        let y: Vec<u8> = rows.iter().map(|r| (rng.random::<f64>() < normal::cdf(0.3 + 0.8 * r[1])) as u8).collect();
        let out = newton_probit(&rows, &y, &[0.0, 0.0], &ModelSpec::default());
        for w in out.history.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12 * w[0].abs());
        }
        let last = *out.history.last().unwrap();
        prop_assert!((probit_loglik(&rows, &y, &out.theta) - last).abs() < 1e-9 * (1.0 + last.abs()));
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct(parent in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(seed::derive(parent, i), seed::derive(parent, i));
        prop_assert_ne!(seed::derive(parent, i), seed::derive(parent, i + 1));
    }
}

fn relabel(g: &Grouping, perm: &[usize]) -> Grouping {
    let labels: BTreeMap<i64, usize> = g.labels.iter().map(|(&p, &l)| (p, perm[l - 1] + 1)).collect();
    let mut centroids = vec![Vec::new(); g.k];
    for (old, c) in g.centroids.iter().enumerate() {
        centroids[perm[old]] = c.clone();
    }
    Grouping { labels, centroids, objective: g.objective, k: g.k }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn asf_is_invariant_to_group_labels(s in any::<u64>(), k in 2usize..5, x in -1.5f64..2.5) {
        let mut rng = seed::rng(s);
        let n = 300;
        let points: Vec<Vec<f64>> =
            (0..n).map(|i| vec![(i % k) as f64 * 3.0 + rng.random::<f64>(), rng.random::<f64>()]).collect();
        let actual: Vec<ActualRecord> = (0..n)
            .map(|i| {
                let x: f64 = rng.random_range(-1.0..3.0);
                let p = normal::cdf(-1.0 + 0.5 * (i % k) as f64 + 0.7 * x);
                ActualRecord { person_id: i as i64 + 1, x, d: (rng.random::<f64>() < p) as u8 }
            })
            .collect();
        let g = kmeans_partition(&moments_from(&points), k, 3, s).unwrap();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let h = relabel(&g, &perm);
        let spec = ModelSpec::default();
        let a = average_structural_function(&fit_grouped_probit(&actual, &g, &spec).unwrap(), &g, x).unwrap();
        let b = average_structural_function(&fit_grouped_probit(&actual, &h, &spec).unwrap(), &h, x).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
