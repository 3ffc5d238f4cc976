use proptest::prelude::*;
use saic::codec::{quantize, Bitstream, Bpp, LatentShape};
use saic::evaluation::{classification_metrics, psnr, ssim, PSNR_CAP};
use saic::gsw::map_weights;
use saic::si::PairedResults;
use saic::Tensor;

fn image_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (prop::collection::vec(0.0f32..=1.0, 3 * 12 * 12), prop::collection::vec(0.0f32..=1.0, 3 * 12 * 12))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_is_idempotent(v in prop::collection::vec(-2.0f32..3.0, 1..200)) {
        let t = Tensor::from_vec(&[v.len()], v).unwrap();
        let q = quantize(&t);
        prop_assert_eq!(quantize(&q), q.clone());
        prop_assert!(q.data().iter().all(|&b| b == 0.0 || b == 1.0));
    }

    #[test]
    fn bitstreams_round_trip(c in 1usize..6, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let shape = LatentShape::new(c, h, w);
        let bits: Vec<f32> = (0..shape.len()).map(|i| ((seed >> (i % 64)) & 1) as f32).collect();
        let bs = Bitstream::from_latent(&bits, shape, 8 * h, 8 * w).unwrap();
        let bytes = bs.to_bytes().unwrap();
        prop_assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), bs);
        prop_assert_eq!(Bpp::of(shape, 8 * h, 8 * w), Bpp::new(c as u64, 64));
    }

    #[test]
    fn psnr_and_ssim_are_symmetric_and_bounded((a, b) in image_pair()) {
        let x = Tensor::from_vec(&[1, 3, 12, 12], a).unwrap();
        let y = Tensor::from_vec(&[1, 3, 12, 12], b).unwrap();
        let p = psnr(&x, &y).unwrap();
        prop_assert!((p - psnr(&y, &x).unwrap()).abs() < 1e-9);
        prop_assert!(p <= PSNR_CAP);
        let s = ssim(&x, &y).unwrap();
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-9);
        prop_assert!(s <= 1.0 + 1e-9 && s >= -1.0 - 1e-9);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mapped_weights_are_a_scaled_distribution(
        raw in prop::collection::vec(-1.0f64..1.0, 1..64),
        tau in 0.0f64..5000.0,
        r in 0.1f64..100.0,
    ) {
        let w = map_weights(&raw, tau, r).unwrap();
        prop_assert!((w.iter().sum::<f64>() - r).abs() < 1e-6 * r);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        let best = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let wmax = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let i = raw.iter().position(|&v| v == best).unwrap();
        prop_assert!((w[i] - wmax).abs() <= 1e-12 * r);
    }

    #[test]
    fn metrics_are_in_unit_range(pred in prop::collection::vec(0usize..5, 1..50), seed in any::<u64>()) {
        let labels: Vec<usize> = pred.iter().enumerate().map(|(i, p)| (p + (seed as usize >> (i % 32)) % 2) % 5).collect();
        let (acc, f1) = classification_metrics(&pred, &labels, 5).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f1));
        let (acc, f1) = classification_metrics(&labels, &labels, 5).unwrap();
        prop_assert_eq!((acc, f1), (1.0, 1.0));
    }

    #[test]
    fn paired_results_tsv_round_trip(rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 6), 1..20)) {
        let n = rows.len();
        let y: Vec<f32> = rows.iter().flat_map(|r| r[..3].to_vec()).collect();
        let yp: Vec<f32> = rows.iter().flat_map(|r| r[3..].to_vec()).collect();
        let p = PairedResults::new((0..n).map(|i| format!("img{i}")).collect(), 3, y, yp).unwrap();
        prop_assert_eq!(PairedResults::from_tsv(&p.to_tsv()).unwrap(), p);
    }
}
