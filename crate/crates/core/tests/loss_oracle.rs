mod common;

use common::{naive_center, naive_instance, random_batch, unit_scale};
use lascl::losses::{loss_ic, loss_scl, loss_sic, loss_sii, loss_variant};
use lascl::LossVariant;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn terms_match_double_loop(seed in any::<u64>()) {
        let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 8, 4);
        let scl = loss_scl(&b.z, &b.y, b.tau).unwrap().value;
        prop_assert!((scl - naive_instance(&b.z, &b.y, b.tau, None)).abs() <= 1e-10);
        let sii = loss_sii(&b.z, &b.y, b.tau, &b.scale).unwrap().value;
        prop_assert!((sii - naive_instance(&b.z, &b.y, b.tau, Some(&b.scale))).abs() <= 1e-10);
        let ic = loss_ic(&b.z, &b.y, &b.centers, b.tau).unwrap().value;
        prop_assert!((ic - naive_center(&b.z, &b.y, &b.centers, b.tau, None)).abs() <= 1e-10);
        let sic = loss_sic(&b.z, &b.y, &b.centers, b.tau, &b.scale).unwrap().value;
        prop_assert!((sic - naive_center(&b.z, &b.y, &b.centers, b.tau, Some(&b.scale))).abs() <= 1e-10);
    }

    #[test]
    fn variants_are_sums_of_terms(seed in any::<u64>()) {
        let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 8, 4);
        let ii = naive_instance(&b.z, &b.y, b.tau, None);
        let sii = naive_instance(&b.z, &b.y, b.tau, Some(&b.scale));
        let ic = naive_center(&b.z, &b.y, &b.centers, b.tau, None);
        let sic = naive_center(&b.z, &b.y, &b.centers, b.tau, Some(&b.scale));
        let expect = [ii, sii, ii + ic, sii + ic, sii + sic];
        for (v, e) in LossVariant::ALL.into_iter().zip(expect) {
            let got = loss_variant(v, &b.z, &b.y, &b.centers, b.tau, &b.scale).unwrap().value;
            prop_assert!((got - e).abs() <= 1e-10, "{} {} vs {}", v, got, e);
        }
    }

    #[test]
    fn unit_scale_reduces_to_unscaled(seed in any::<u64>()) {
        let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 8, 4);
        let ones = unit_scale(b.centers.rows());
        let sii = loss_sii(&b.z, &b.y, b.tau, &ones).unwrap();
        let scl = loss_scl(&b.z, &b.y, b.tau).unwrap();
        prop_assert!((sii.value - scl.value).abs() <= 1e-12);
        let sic = loss_sic(&b.z, &b.y, &b.centers, b.tau, &ones).unwrap();
        let ic = loss_ic(&b.z, &b.y, &b.centers, b.tau).unwrap();
        prop_assert!((sic.value - ic.value).abs() <= 1e-12);
        for (a, c) in sic.grad_u.as_slice().iter().zip(ic.grad_u.as_slice()) {
            prop_assert!((a - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_is_scale_invariant_per_instance(seed in any::<u64>(), alpha in 1.0f64..50.0) {
        let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 8, 4);
        let scaled: Vec<Vec<f64>> = b.z.iter().map(|v| v.iter().map(|x| x * alpha).collect()).collect();
        let a = loss_variant(LossVariant::Lisc, &b.z, &b.y, &b.centers, b.tau, &b.scale).unwrap().value;
        let c = loss_variant(LossVariant::Lisc, &scaled, &b.y, &b.centers, b.tau, &b.scale).unwrap().value;
        prop_assert!((a - c).abs() <= 1e-8);
    }
}
