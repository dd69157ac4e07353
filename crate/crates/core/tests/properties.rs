use piba_core::attribution::{AttributionMap, Provenance};
use piba_core::eval::{ehr, pearson, ssim};
use piba_core::featbn::bottleneck_kl;
use piba_core::synthdata::{blur_image, BBox};
use piba_core::{RngStream, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn prov() -> Provenance {
    Provenance {
        method: "test".into(),
        seed: 0,
        config_hash: String::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn normalized_maps_stay_in_unit_range(t in tensor(vec![6, 7], -1e3, 1e3)) {
        let m = AttributionMap::from_raw(&t, prov());
        prop_assert!(m.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(m.validate().is_ok());
    }

    #[test]
    fn kl_is_non_negative(
        mask in 0.0..0.9999f64, value in -10.0..10.0f64, prior in 0.0..1.0f64,
        mu in -3.0..3.0f64, sigma in 0.01..5.0f64,
    ) {
        let one = |v| Tensor::new(vec![1], vec![v]).unwrap();
        let k = bottleneck_kl(&one(mask), &one(value), &one(prior), &one(mu), &one(sigma)).unwrap();
        prop_assert!(k.data()[0] >= -1e-12);
    }

    #[test]
    fn ehr_is_a_fraction(
        t in tensor(vec![16, 16], 0.0, 1.0),
        top in 0usize..13, left in 0usize..13,
    ) {
        let bbox = BBox { top, left, height: 4, width: 4 };
        let e = ehr(&t, &bbox, 101).unwrap();
        prop_assert!((0.0..=1.0).contains(&e), "{}", e);
    }

    #[test]
    fn ssim_is_reflexive_and_symmetric(a in tensor(vec![16, 16], 0.0, 1.0), b in tensor(vec![16, 16], 0.0, 1.0)) {
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_bounded(x in prop::collection::vec(-1e3..1e3f64, 3..40), seed in any::<u64>()) {
        let mut s = RngStream::new(seed, 0);
        let y: Vec<f64> = x.iter().map(|v| v * s.normal() + s.normal()).collect();
        if let Ok(r) = pearson(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn blur_stays_within_the_input_range(t in tensor(vec![1, 9, 11], -5.0, 5.0), k in 0usize..4, sigma in 0.3..3.0f64) {
        let b = blur_image(&t, 2 * k + 1, sigma).unwrap();
        prop_assert_eq!(b.shape(), t.shape());
        let tol = 1e-12;
        prop_assert!(b.data().iter().all(|&v| v >= t.min() - tol && v <= t.max() + tol));
    }

    #[test]
    fn reshape_round_trips(t in tensor(vec![2, 3, 4], -1.0, 1.0)) {
        let flat = t.reshape(vec![24]).unwrap();
        prop_assert_eq!(flat.reshape(vec![2, 3, 4]).unwrap(), t);
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), stream in 0u64..1000) {
        let (mut a, mut b) = (RngStream::new(seed, stream), RngStream::new(seed, stream));
        for _ in 0..16 {
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        let mut c = RngStream::new(seed, stream + 1);
        let mut a = RngStream::new(seed, stream);
        prop_assert!((0..4).any(|_| a.uniform() != c.uniform()));
    }
}
