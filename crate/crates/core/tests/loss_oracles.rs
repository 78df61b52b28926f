mod common;

use approx::assert_abs_diff_eq;
use ccgp::losses::{entropy_reg, scch_loss, sich_loss, EntropyForm, PositiveStructure};
use common::oracles::{self, rng};
use proptest::prelude::*;
use rand::Rng;

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.concat()
}

#[test]
fn instance_loss_at_planned_angles() {
    let z: Vec<Vec<f64>> = [0.0f64, 10.0, 120.0, 130.0]
        .iter()
        .map(|a| vec![a.to_radians().cos(), a.to_radians().sin()])
        .collect();
    // Two anchor/neighbor pairs: (0°, 10°) and (120°, 130°).
    let pos = PositiveStructure {
        positives: vec![vec![1], vec![0], vec![3], vec![2]],
    };
    let expected = oracles::sich(&z, &pos.positives, 0.5);
    let (got, _) = sich_loss(&flat(&z), 2, &pos, 0.5).unwrap();
    assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    // Hand evaluation: every anchor's positive sits 10° away; anchors 0 and 3
    // see negatives at 120° and 130°, anchors 1 and 2 at 110° and 120°.
    let s = |deg: f64| deg.to_radians().cos() / 0.5;
    let term = |a: f64, b: f64| -(s(10.0) - (s(10.0).exp() + s(a).exp() + s(b).exp()).ln());
    let hand = 0.5 * (term(120.0, 130.0) + term(110.0, 120.0));
    assert_abs_diff_eq!(got, hand, epsilon = 1e-12);
}

#[test]
fn instance_loss_matches_the_oracle_on_random_batches() {
    let mut r = rng(1);
    for _ in 0..100 {
        let pairs = r.random_range(2..10);
        let v = 2 * pairs;
        let z = oracles::random_unit_rows(&mut r, v, 16);
        let mut pos = PositiveStructure::paired(pairs);
        // Occasionally add an extra positive to exercise |P(i)| > 1.
        if r.random_bool(0.5) {
            pos.positives[0].push(v - 1);
        }
        let tau = r.random_range(0.1..2.0);
        let (got, _) = sich_loss(&flat(&z), 16, &pos, tau).unwrap();
        let want = oracles::sich(&z, &pos.positives, tau);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn cluster_loss_matches_the_oracle_on_random_batches() {
    let mut r = rng(2);
    for trial in 0..100 {
        let (b, m) = if trial == 0 { (16, 5) } else { (r.random_range(4..24), r.random_range(2..7)) };
        let qa = oracles::random_simplex_rows(&mut r, b, m);
        let qn = oracles::random_simplex_rows(&mut r, b, m);
        let tau = r.random_range(0.2..2.0);
        for sym in [false, true] {
            let (got, _, _) = scch_loss(&flat(&qa), &flat(&qn), m, tau, sym).unwrap();
            let want = oracles::scch(&qa, &qn, tau, sym);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn entropy_matches_the_oracle_on_random_batches() {
    let mut r = rng(3);
    for _ in 0..100 {
        let m = r.random_range(2..8);
        let n = r.random_range(1..40);
        let q = oracles::random_simplex_rows(&mut r, n, m);
        for (form, kl) in [(EntropyForm::KlUniform, true), (EntropyForm::Paper, false)] {
            let (got, _) = entropy_reg(&flat(&q), m, form).unwrap();
            assert!((got - oracles::entropy(&q, kl)).abs() < 1e-6);
        }
    }
}

#[test]
fn temperature_acts_as_a_similarity_scale() {
    // sum over logits s/tau: halving tau equals doubling every dot product,
    // which the oracle can express by scaling one side of each product.
    let mut r = rng(4);
    for _ in 0..100 {
        let z = oracles::random_unit_rows(&mut r, 8, 6);
        let pos = PositiveStructure::paired(4);
        let (a, _) = sich_loss(&flat(&z), 6, &pos, 0.5).unwrap();
        let scaled: Vec<Vec<f64>> = z.iter().map(|row| row.iter().map(|x| x * 2f64.sqrt()).collect()).collect();
        let b = oracles::sich(&scaled, &pos.positives, 1.0);
        assert!((a - b).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_permutation_equivariant(seed in 0u64..10_000, pairs in 2usize..8) {
        let mut r = rng(seed);
        let v = 2 * pairs;
        let z = oracles::random_unit_rows(&mut r, v, 8);
        let pos = PositiveStructure::paired(pairs);
        let mut perm: Vec<usize> = (0..v).collect();
        for i in (1..v).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        // new position p holds old view perm[p]
        let mut inv = vec![0; v];
        for (p, &o) in perm.iter().enumerate() {
            inv[o] = p;
        }
        let zp: Vec<Vec<f64>> = perm.iter().map(|&o| z[o].clone()).collect();
        let posp = PositiveStructure {
            positives: perm.iter().map(|&o| pos.positives[o].iter().map(|&j| inv[j]).collect()).collect(),
        };
        let (a, _) = sich_loss(&flat(&z), 8, &pos, 0.5).unwrap();
        let (b, _) = sich_loss(&flat(&zp), 8, &posp, 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-9);

        // Cluster and entropy terms: permute anchor rows and their neighbor rows together.
        let m = 4;
        let qa = oracles::random_simplex_rows(&mut r, pairs, m);
        let qn = oracles::random_simplex_rows(&mut r, pairs, m);
        let mut rows: Vec<usize> = (0..pairs).collect();
        rows.reverse();
        rows.rotate_left(seed as usize % pairs);
        let qa2: Vec<Vec<f64>> = rows.iter().map(|&i| qa[i].clone()).collect();
        let qn2: Vec<Vec<f64>> = rows.iter().map(|&i| qn[i].clone()).collect();
        let (c1, _, _) = scch_loss(&flat(&qa), &flat(&qn), m, 1.0, true).unwrap();
        let (c2, _, _) = scch_loss(&flat(&qa2), &flat(&qn2), m, 1.0, true).unwrap();
        prop_assert!((c1 - c2).abs() < 1e-9);
        let (e1, _) = entropy_reg(&flat(&qa), m, EntropyForm::KlUniform).unwrap();
        let (e2, _) = entropy_reg(&flat(&qa2), m, EntropyForm::KlUniform).unwrap();
        prop_assert!((e1 - e2).abs() < 1e-9);
    }

    #[test]
    fn kl_entropy_is_minimal_at_uniform(seed in 0u64..10_000, m in 2usize..8) {
        let mut r = rng(seed);
        let q = oracles::random_simplex_rows(&mut r, 12, m);
        let (e, _) = entropy_reg(&flat(&q), m, EntropyForm::KlUniform).unwrap();
        let (u, _) = entropy_reg(&vec![1.0 / m as f64; 3 * m], m, EntropyForm::KlUniform).unwrap();
        prop_assert!(u.abs() < 1e-12);
        prop_assert!(e >= u - 1e-12 && e <= (m as f64).ln() + 1e-12);
    }

    #[test]
    fn raising_a_positive_similarity_lowers_the_instance_loss(seed in 0u64..10_000, eps in 0.01f64..0.5) {
        let mut r = rng(seed);
        let z = oracles::random_unit_rows(&mut r, 6, 4);
        let pos = PositiveStructure::paired(3);
        // An extra coordinate shared only by views 0 and 3 raises z_0.z_3 by
        // eps^2 and leaves every other similarity untouched.
        let lift = |extra: &[f64]| -> Vec<f64> {
            z.iter().zip(extra).flat_map(|(row, &e)| row.iter().copied().chain([e])).collect()
        };
        let before = sich_loss(&lift(&[0.0; 6]), 5, &pos, 0.5).unwrap().0;
        let after = sich_loss(&lift(&[eps, 0.0, 0.0, eps, 0.0, 0.0]), 5, &pos, 0.5).unwrap().0;
        prop_assert!(after < before);
    }
}
