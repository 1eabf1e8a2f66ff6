//! A full round through the public API: key generation, client encoding,
//! serialization, verification and decoding, checked against the plaintext
//! rule.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use ebscfl_core::kdc::{init_keys_with, KeyMaterial, Normalizer, ProtocolDims};
use ebscfl_core::protocol::{adversary, client_encode, robust_aggregate, secure_round, Keys, RoundStatus};
use ebscfl_core::rfca::{aggregate_plain, ClientUpdate, ClusterState, Denominator};
use ebscfl_core::rng::{self, Rng};
use ebscfl_core::{moma, wire};

fn gaussian(l: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(l, |_, _| StandardNormal.sample(rng))
}

/// References plus updates that agree or disagree with them clearly.
fn round(n: usize, m: usize, l: usize, seed: u64) -> (Vec<DVector<f64>>, Vec<ClientUpdate>) {
    let mut rng = rng::substream(seed, 0);
    let g0: Vec<DVector<f64>> = (0..m).map(|_| gaussian(l, &mut rng)).collect();
    let updates = (0..n)
        .map(|i| {
            let j = i % m;
            let sign = if i % 4 == 3 { -1.0 } else { 1.0 };
            let g = &g0[j] * rng.random_range(0.5..2.0) + gaussian(l, &mut rng) * 0.3;
            ClientUpdate::new(j, g * sign)
        })
        .collect();
    (g0, updates)
}

fn plaintext(g0: &[DVector<f64>], updates: &[ClientUpdate]) -> Vec<DVector<f64>> {
    let l = g0[0].len();
    let state = ClusterState::new(vec![DVector::zeros(l); g0.len()], g0.to_vec(), 1.0).unwrap();
    aggregate_plain(&state, updates, Denominator::PerCluster).unwrap().per_cluster
}

fn rescaled(km: &KeyMaterial, updates: &[Option<DVector<f64>>], l: usize) -> Vec<DVector<f64>> {
    updates
        .iter()
        .zip(km.g0_norms())
        .map(|(u, &s)| u.as_ref().map(|u| u * s).unwrap_or_else(|| DVector::zeros(l)))
        .collect()
}

fn assert_close(got: &[DVector<f64>], want: &[DVector<f64>]) {
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).norm() <= 1e-6 * w.norm().max(1.0), "{g} vs {w}");
    }
}

#[test]
fn honest_round_over_the_wire_matches_plaintext() {
    let (n, m, l) = (6, 2, 5);
    let dims = ProtocolDims::new(n, m, l).unwrap();
    let (g0, updates) = round(n, m, l, 7);
    let km = init_keys_with(&dims, &g0, Normalizer::PerCluster, 7).unwrap();
    let received: Vec<_> = updates
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let d = client_encode(&u.gradient, u.cluster, km.encode_key(i), km.a(), &dims).unwrap();
            wire::read_gradient(&wire::write_gradient(&d).unwrap()).unwrap()
        })
        .collect();
    let outcome = robust_aggregate(&received, &km).unwrap();
    assert!(outcome.completed());
    assert!(outcome.verdicts.iter().all(|v| v.accepted()));
    assert_close(&rescaled(&km, &outcome.updates, l), &plaintext(&g0, &updates));
}

#[test]
fn tampered_client_is_refused_and_replaced() {
    let (n, m, l) = (5, 2, 4);
    let dims = ProtocolDims::new(n, m, l).unwrap();
    let (g0, updates) = round(n, m, l, 21);
    let km = init_keys_with(&dims, &g0, Normalizer::PerCluster, 21).unwrap();
    let mut rng = rng::substream(99, 0);
    let outcome = secure_round(&updates, &Keys::Base(&km), &mut |i, d| {
        if i != 2 {
            return d;
        }
        let noise: Vec<_> = d.deltas.iter().map(|row| moma::gaussian(1, row.ncols(), &mut rng) * 1e-2).collect();
        adversary::additive(&d, &noise)
    })
    .unwrap();
    assert!(!outcome.verdicts[2].accepted());
    assert!(outcome.verdicts.iter().enumerate().all(|(i, v)| i == 2 || v.accepted()));
    assert!(matches!(outcome.status, RoundStatus::Completed));
    // The stand-in carries no weight: the result is the round without client 2.
    let mut rest = updates.clone();
    rest.remove(2);
    assert_close(&rescaled(&km, &outcome.updates, l), &plaintext(&g0, &rest));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn secure_round_matches_plaintext(seed in any::<u64>(), n in 2usize..6, m in 1usize..3, l in 2usize..7) {
        prop_assume!(n >= m);
        let dims = ProtocolDims::new(n, m, l).unwrap();
        let (g0, updates) = round(n, m, l, seed);
        let km = init_keys_with(&dims, &g0, Normalizer::PerCluster, seed).unwrap();
        let outcome = secure_round(&updates, &Keys::Base(&km), &mut |_, d| d).unwrap();
        let got = rescaled(&km, &outcome.updates, l);
        for (g, w) in got.iter().zip(&plaintext(&g0, &updates)) {
            prop_assert!((g - w).norm() <= 1e-6 * w.norm().max(1.0));
        }
    }
}
