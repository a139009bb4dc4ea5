//! Label-model quantities checked against brute-force enumeration and
//! central finite differences.

use proptest::prelude::*;
use weaklayout::cage::{
    accumulate_kl_grad, grad_theta, kl_divergence, lf_precision_model, log_partition, nll_unsupervised, posterior,
    quality_guide, QualityBeliefs, ThetaObjective, ThetaParams,
};

/// Unnormalized joint mass of a fire/abstain pattern and class, straight from
/// the product of potentials.
fn mass(theta: &ThetaParams, pattern: u32, y: usize) -> f64 {
    (0..theta.n_lfs())
        .filter(|j| pattern >> j & 1 == 1)
        .map(|j| theta.get(j, y).exp())
        .product()
}

fn z_enum(theta: &ThetaParams) -> f64 {
    let m = theta.n_lfs();
    (1..=theta.n_classes())
        .map(|y| (0..1u32 << m).map(|p| mass(theta, p, y)).sum::<f64>())
        .sum()
}

fn pattern_of(l: &[usize]) -> u32 {
    l.iter().enumerate().filter(|(_, &v)| v != 0).map(|(j, _)| 1 << j).sum()
}

fn precision_enum(theta: &ThetaParams, j: usize) -> f64 {
    let m = theta.n_lfs();
    let mut num = 0.0;
    let mut den = 0.0;
    for p in (0..1u32 << m).filter(|p| p >> j & 1 == 1) {
        for y in 1..=theta.n_classes() {
            let w = mass(theta, p, y);
            den += w;
            if y == theta.attached()[j] {
                num += w;
            }
        }
    }
    num / den
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

prop_compose! {
    fn theta_strategy(max_m: usize, max_k: usize)(m in 1..=max_m, k in 2..=max_k)
        (attached in prop::collection::vec(1..=k, m),
         values in prop::collection::vec(-3.0f64..3.0, m * k),
         k in Just(k)) -> ThetaParams {
        ThetaParams::new(attached, k, values).unwrap()
    }
}

/// A theta together with firing rows consistent with its attached classes.
fn theta_and_rows(max_m: usize, max_k: usize, max_rows: usize) -> impl Strategy<Value = (ThetaParams, Vec<Vec<usize>>)> {
    theta_strategy(max_m, max_k).prop_flat_map(move |theta| {
        let m = theta.n_lfs();
        let attached = theta.attached().to_vec();
        let rows = prop::collection::vec(prop::collection::vec(any::<bool>(), m), 1..=max_rows).prop_map(move |masks| {
            masks
                .into_iter()
                .map(|mask| mask.iter().zip(&attached).map(|(&f, &k)| if f { k } else { 0 }).collect())
                .collect()
        });
        (Just(theta), rows)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn partition_matches_enumeration(theta in theta_strategy(6, 4)) {
        let z = z_enum(&theta);
        prop_assert!(rel(log_partition(&theta).exp(), z) < 1e-9);
    }

    #[test]
    fn posterior_matches_enumeration((theta, rows) in theta_and_rows(6, 4, 1)) {
        let l = &rows[0];
        let p = pattern_of(l);
        let total: f64 = (1..=theta.n_classes()).map(|y| mass(&theta, p, y)).sum();
        let post = posterior(&theta, l);
        for y in 1..=theta.n_classes() {
            prop_assert!((post.prob(y) - mass(&theta, p, y) / total).abs() < 1e-9);
        }
        prop_assert!((post.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn precision_matches_enumeration(theta in theta_strategy(5, 4)) {
        for j in 0..theta.n_lfs() {
            prop_assert!((lf_precision_model(&theta, j) - precision_enum(&theta, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn nll_matches_enumeration((theta, rows) in theta_and_rows(5, 3, 6)) {
        let z = z_enum(&theta);
        let expected: f64 = rows
            .iter()
            .filter(|l| l.iter().any(|&v| v != 0))
            .map(|l| {
                let p = pattern_of(l);
                -((1..=theta.n_classes()).map(|y| mass(&theta, p, y)).sum::<f64>() / z).ln()
            })
            .sum();
        let got = nll_unsupervised(&theta, rows.iter().map(Vec::as_slice));
        prop_assert!((got.loss - expected).abs() < 1e-9 * expected.abs().max(1.0));
    }
}

fn fd_theta(theta: &ThetaParams, f: impl Fn(&ThetaParams) -> f64) -> Vec<f64> {
    let h = 1e-4;
    (0..theta.values().len())
        .map(|i| {
            let mut up = theta.clone();
            up.values_mut()[i] += h;
            let mut down = theta.clone();
            down.values_mut()[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn theta_gradient_matches_differences(
        (theta, rows) in theta_and_rows(4, 3, 5),
        q in prop::collection::vec(0.05f64..0.95, 4),
    ) {
        let beliefs = QualityBeliefs::new(q[..theta.n_lfs()].to_vec(), 1e-3);
        let objective = |t: &ThetaParams| {
            nll_unsupervised(t, rows.iter().map(Vec::as_slice)).loss - quality_guide(t, &beliefs)
        };
        let analytic = grad_theta(&theta, rows.iter().map(Vec::as_slice), &beliefs, ThetaObjective::default());
        let numeric = fd_theta(&theta, objective);
        for (a, n) in analytic.iter().zip(&numeric) {
            prop_assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()).max(1.0), "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn kl_theta_gradient_matches_differences(
        (theta, rows) in theta_and_rows(4, 3, 1),
        raw in prop::collection::vec(0.05f64..1.0, 3),
    ) {
        let k = theta.n_classes();
        let s: f64 = raw[..k].iter().sum();
        let p: Vec<f64> = raw[..k].iter().map(|v| v / s).collect();
        let l = &rows[0];
        let mut analytic = vec![0.0; theta.values().len()];
        accumulate_kl_grad(&theta, l, &p, 1.0, &mut analytic);
        let numeric = fd_theta(&theta, |t| kl_divergence(&p, posterior(t, l).probs()));
        for (a, n) in analytic.iter().zip(&numeric) {
            prop_assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()).max(1.0), "analytic {a} numeric {n}");
        }
    }
}

#[test]
fn partition_survives_large_parameters() {
    let theta = ThetaParams::new(vec![1, 2], 2, vec![400.0, -400.0, 300.0, 350.0]).unwrap();
    let lz = log_partition(&theta);
    assert!(lz.is_finite());
    // class 1 mass ≈ 400 + 300, class 2 ≈ 0 + 350
    assert!((lz - 700.0).abs() < 1e-9);
}
