use cohortsim_core::representations::{activation, hamming_norm, SemVisRep, REP_DIM};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_bits(rng: &mut ChaCha8Rng, density: f64) -> Vec<u8> {
    (0..REP_DIM).map(|_| u8::from(rng.gen::<f64>() < density)).collect()
}

fn naive_distance(a: &[u8], b: &[u8]) -> f64 {
    let mut diff = 0usize;
    for i in 0..a.len() {
        if a[i] != b[i] {
            diff += 1;
        }
    }
    diff as f64 / a.len() as f64
}

#[test]
fn hamming_axioms_on_ten_thousand_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..10_000 {
        // vary density so that near-duplicates and far pairs both occur
        let density = [0.02, 0.1, 0.5][k % 3];
        let a = random_bits(&mut rng, density);
        let mut b = a.clone();
        if k % 5 != 0 {
            b = random_bits(&mut rng, density);
        }
        let c = random_bits(&mut rng, density);
        let ab = hamming_norm(&a, &b).unwrap();
        let ba = hamming_norm(&b, &a).unwrap();
        let bc = hamming_norm(&b, &c).unwrap();
        let ac = hamming_norm(&a, &c).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab == 0.0, a == b);
        assert_eq!(hamming_norm(&a, &a).unwrap(), 0.0);
        assert!(ac <= ab + bc + 1e-12, "triangle: {ac} > {ab} + {bc}");
        assert!((0.0..=1.0).contains(&ab));
        assert_eq!(ab, naive_distance(&a, &b));
    }
}

#[test]
fn length_mismatch_is_an_error() {
    assert!(hamming_norm(&[0, 1], &[0, 1, 1]).is_err());
}

proptest! {
    #[test]
    fn activation_is_one_minus_mean_absolute_error(bits in prop::collection::vec(0u8..=1, REP_DIM), out in prop::collection::vec(0.0f64..=1.0, REP_DIM)) {
        let rep = SemVisRep::from_bits(0, bits.clone()).unwrap();
        let got = activation(&out, &rep).unwrap();
        let want = 1.0 - out.iter().zip(&bits).map(|(o, &b)| (o - f64::from(b)).abs()).sum::<f64>() / REP_DIM as f64;
        prop_assert!((got - want).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn exact_output_scores_one(bits in prop::collection::vec(0u8..=1, REP_DIM)) {
        let rep = SemVisRep::from_bits(3, bits.clone()).unwrap();
        let out: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
        prop_assert_eq!(activation(&out, &rep).unwrap(), 1.0);
    }
}

#[test]
fn non_binary_bits_are_rejected() {
    let mut bits = vec![0u8; REP_DIM];
    bits[5] = 2;
    assert!(SemVisRep::from_bits(0, bits).is_err());
    assert!(SemVisRep::from_bits(0, vec![0; REP_DIM - 1]).is_err());
}
