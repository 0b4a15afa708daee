//! Invariants over randomly drawn inputs: image transforms, metrics and
//! checkpoint serialization.

use proptest::prelude::*;
use wibmark::checkpoint::Checkpoint;
use wibmark::data::{procedural_image, quantize};
use wibmark::metrics::{psnr, ssim, PSNR_CAP};
use wibmark::robustness::{apply_transform, TransformKind, TransformSpec};
use wibmark::{Rng, Tensor};

const KINDS: [TransformKind; 7] = [
    TransformKind::Brightness,
    TransformKind::Contrast,
    TransformKind::Saturation,
    TransformKind::Sharpen,
    TransformKind::Crop,
    TransformKind::TextOverlay,
    TransformKind::GaussNoise,
];

fn image(seed: u64) -> Tensor {
    procedural_image(&mut Rng::new(seed))
}

/// A valid magnitude for `kind` from a unit draw.
fn magnitude(kind: TransformKind, u: f64) -> f64 {
    match kind {
        TransformKind::Crop => 0.05 + 0.95 * u,
        TransformKind::TextOverlay | TransformKind::GaussNoise => u,
        _ => 4.0 * u,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transforms_keep_shape_and_range(seed in 0u64..1000, k in 0usize..7, u in 0.0f64..1.0, t in 0u64..100) {
        let img = image(seed);
        let kind = KINDS[k];
        let spec = TransformSpec::new(kind, magnitude(kind, u)).unwrap().with_seed(t);
        let out = apply_transform(&img, &spec).unwrap();
        if kind == TransformKind::Crop {
            // The window is returned as is; sides never drop below 8.
            prop_assert_eq!(out.shape()[0], 3);
            prop_assert!(out.shape()[1] >= 8 && out.shape()[2] >= 8);
            prop_assert!(out.shape()[1] <= img.shape()[1] && out.shape()[2] <= img.shape()[2]);
        } else {
            prop_assert_eq!(out.shape(), img.shape());
        }
        prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // Same seed, same output.
        let again = apply_transform(&img, &spec).unwrap();
        prop_assert_eq!(out.data(), again.data());
    }

    #[test]
    fn identity_magnitudes_leave_images_unchanged(seed in 0u64..1000, k in 0usize..7) {
        let img = image(seed);
        let kind = KINDS[k];
        let id = match kind {
            TransformKind::TextOverlay | TransformKind::GaussNoise => 0.0,
            _ => 1.0,
        };
        let spec = TransformSpec::new(kind, id).unwrap();
        prop_assert!(spec.is_identity());
        let out = apply_transform(&img, &spec).unwrap();
        prop_assert!(out.max_abs_diff(&img).unwrap() < 1e-6);
    }

    #[test]
    fn out_of_range_magnitudes_are_rejected(k in 0usize..7, over in 0.01f64..10.0) {
        let kind = KINDS[k];
        let hi = if matches!(kind, TransformKind::Crop | TransformKind::TextOverlay | TransformKind::GaussNoise) { 1.0 } else { 4.0 };
        prop_assert!(TransformSpec::new(kind, hi + over).is_err());
        prop_assert!(TransformSpec::new(kind, -over).is_err());
    }

    #[test]
    fn psnr_is_symmetric_and_capped(a in 0u64..1000, b in 0u64..1000) {
        let (x, y) = (image(a), image(b));
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!(psnr(&x, &y).unwrap() <= PSNR_CAP);
        prop_assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantize_is_idempotent(seed in 0u64..1000) {
        let q = quantize(&image(seed));
        let qq = quantize(&q);
        prop_assert_eq!(qq.data(), q.data());
    }

    #[test]
    fn checkpoints_round_trip_through_bytes(seed in 0u64..1000, n in 1usize..4) {
        let mut rng = Rng::new(seed);
        let mut ck = Checkpoint::new(seed % 2 == 0, serde_json::json!({ "seed": seed }));
        for i in 0..n {
            ck.push(format!("t{i}"), Tensor::randn(&[i + 1, 3], 1.0, &mut rng)).unwrap();
        }
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        for (name, t) in ck.tensors() {
            prop_assert_eq!(back.require(name).unwrap().data(), t.data());
        }
    }
}
