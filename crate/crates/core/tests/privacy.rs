mod common;

use std::collections::BTreeSet;

use num_bigint::BigUint;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use splitgnn_core::nn::init_rng;
use splitgnn_core::privacy::{
    element_rng, keygen, psi_align, psi_salt, random_plaintext, transcript_audit, FixedPoint,
    SecureAggregator, TEST_BITS,
};
use splitgnn_core::transcript::{MessageKind, MessageRecord, Transcript};
use splitgnn_core::{Error, Tensor};

#[test]
fn homomorphism_over_a_thousand_pairs() {
    let keys = keygen(TEST_BITS, 1).unwrap();
    let pk = &keys.public;
    let mut rng = init_rng(2, &[]);
    for k in 0..1000 {
        let a = random_plaintext(pk, &mut rng);
        let b = random_plaintext(pk, &mut rng);
        let mut erng = element_rng(3, k);
        let ca = pk.encrypt(&a, &mut erng).unwrap();
        let cb = pk.encrypt(&b, &mut erng).unwrap();
        let sum = keys.decrypt(&pk.add(&ca, &cb).unwrap()).unwrap();
        assert_eq!(sum, (&a + &b) % &pk.n);
    }
}

#[test]
fn hundred_round_trips_and_boundaries() {
    let keys = keygen(TEST_BITS, 9).unwrap();
    let pk = &keys.public;
    let mut rng = init_rng(4, &[]);
    for k in 0..100 {
        let m = random_plaintext(pk, &mut rng);
        let c = pk.encrypt(&m, &mut element_rng(5, k)).unwrap();
        assert_eq!(keys.decrypt(&c).unwrap(), m);
    }
    let zero = BigUint::from(0u8);
    let top = &pk.n - 1u8;
    for m in [zero, top] {
        let c = pk.encrypt(&m, &mut element_rng(6, 0)).unwrap();
        assert_eq!(keys.decrypt(&c).unwrap(), m);
    }
    assert!(matches!(pk.encrypt(&pk.n, &mut element_rng(6, 1)), Err(Error::Range(_))));
}

#[test]
fn key_modulus_has_requested_size() {
    let keys = keygen(TEST_BITS, 11).unwrap();
    assert_eq!(keys.public.n.bits(), TEST_BITS);
    assert!(keygen(100, 0).is_err());
}

#[test]
fn secure_sum_of_four_random_vectors() {
    let mut agg = SecureAggregator::new(TEST_BITS, 7).unwrap();
    let inputs: Vec<Tensor> = (0..4).map(|p| common::random_tensor(40 + p, &[1, 8])).collect();
    let mut transcript = Transcript::new();
    let got = agg.secure_sum(&inputs, 1, &mut transcript).unwrap();
    for j in 0..8 {
        let expect: f64 = inputs.iter().map(|t| t.data()[j]).sum();
        assert!((got.data()[j] - expect).abs() <= 4.0 * 2f64.powi(-24));
    }
    assert!(transcript_audit(&transcript).is_clean());
    let decrypts = transcript.records().iter().filter(|r| r.kind == MessageKind::Decrypt).count();
    assert_eq!(decrypts, 1);
}

#[test]
fn overflowing_value_names_the_element() {
    let mut agg = SecureAggregator::new(TEST_BITS, 7).unwrap();
    let bad = Tensor::vector(vec![0.0, 0.0, 1e30]);
    let err = agg
        .secure_sum(&[bad, Tensor::zeros(&[3])], 1, &mut Transcript::new())
        .unwrap_err();
    assert!(matches!(err, Error::Range(_)), "{err}");
    assert!(err.to_string().contains("element 2"), "{err}");
}

fn random_sets(seed: u64, parties: usize, size: usize) -> Vec<Vec<String>> {
    let mut rng = init_rng(seed, &[]);
    (0..parties)
        .map(|_| {
            let mut ids: Vec<String> = (0..size * 2)
                .filter(|_| rng.random_bool(0.5))
                .take(size)
                .map(|k| format!("node-{k}"))
                .collect();
            ids.shuffle(&mut rng);
            ids
        })
        .collect()
}

fn plain_intersection(sets: &[Vec<String>]) -> BTreeSet<String> {
    let mut acc: BTreeSet<String> = sets[0].iter().cloned().collect();
    for s in &sets[1..] {
        let other: BTreeSet<String> = s.iter().cloned().collect();
        acc = acc.intersection(&other).cloned().collect();
    }
    acc
}

#[test]
fn three_party_psi_matches_plain_intersection() {
    for seed in 0..10 {
        let sets = random_sets(seed, 3, 1000);
        let mut t = Transcript::new();
        let got = psi_align(&sets, &psi_salt(seed), 0, &mut t).unwrap();
        assert_eq!(got.len(), got.iter().collect::<BTreeSet<_>>().len());
        assert_eq!(got.into_iter().collect::<BTreeSet<_>>(), plain_intersection(&sets));
        assert!(transcript_audit(&t).is_clean());
    }
}

#[test]
fn psi_transcript_carries_no_raw_id() {
    let sets = random_sets(3, 3, 200);
    let mut t = Transcript::new();
    psi_align(&sets, &psi_salt(3), 0, &mut t).unwrap();
    assert!(!t.is_empty());
    let text: String = t
        .records()
        .iter()
        .map(|r| format!("{} {} {:?} {}", r.from, r.to, r.kind, r.payload.clone().unwrap_or_default()))
        .collect();
    for id in sets.iter().flatten() {
        assert!(!text.contains(id.as_str()), "{id} leaked");
    }
}

#[test]
fn injected_raw_id_gives_exactly_one_finding() {
    let mut agg = SecureAggregator::new(TEST_BITS, 1).unwrap();
    let mut t = Transcript::new();
    let inputs = vec![Tensor::zeros(&[2, 4]), Tensor::zeros(&[2, 4])];
    agg.secure_sum(&inputs, 1, &mut t).unwrap();
    agg.secure_sum(&inputs, 2, &mut t).unwrap();
    assert!(transcript_audit(&t).is_clean());
    t.push(MessageRecord::plain(2, "p1", "server", MessageKind::RawId, 12));
    let report = transcript_audit(&t);
    assert_eq!(report.findings.len(), 1);
    assert_eq!(report.findings[0].round, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn fixed_point_round_trip(x in -1e9f64..1e9) {
        let keys = fixed_keys();
        let fp = FixedPoint::default();
        let m = fp.encode(x, &keys).unwrap();
        prop_assert!((fp.decode(&m, &keys, 1) - x).abs() <= 2f64.powi(-24));
    }
}

fn fixed_keys() -> BigUint {
    use std::sync::OnceLock;
    static N: OnceLock<BigUint> = OnceLock::new();
    N.get_or_init(|| keygen(TEST_BITS, 0).unwrap().public.n).clone()
}
