use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use scomp_core::geom::RgbImage;
use scomp_core::metrics::{psnr, rotation_distance, ssim, translation_distance, PoseRole, PoseSet};

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform3(-3.0f64..3.0).prop_map(|v| *Rotation3::new(Vector3::from(v)).matrix())
}

fn poses(rots: Vec<Matrix3<f64>>, role: PoseRole) -> PoseSet {
    let n = rots.len();
    PoseSet::new(rots, vec![Vector3::zeros(); n], role).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_distance_is_symmetric_and_left_invariant(
        a in prop::collection::vec(rotation(), 1..6),
        b in prop::collection::vec(rotation(), 6),
        g in rotation(),
    ) {
        let b: Vec<_> = b.into_iter().take(a.len()).collect();
        let gen = poses(a.clone(), PoseRole::Generated);
        let gt = poses(b.clone(), PoseRole::GroundTruth);
        let d = rotation_distance(&gen, &gt).unwrap();
        prop_assert!((d - rotation_distance(&gt, &gen).unwrap()).abs() <= 1e-12);
        let moved_a = poses(a.iter().map(|r| g * r).collect(), PoseRole::Generated);
        let moved_b = poses(b.iter().map(|r| g * r).collect(), PoseRole::GroundTruth);
        prop_assert!((d - rotation_distance(&moved_a, &moved_b).unwrap()).abs() <= 1e-9);
        prop_assert!(d.is_finite());
    }

    #[test]
    fn translation_distance_matches_elementwise_sum(t in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..8)) {
        let n = t.len();
        let gen = PoseSet::new(vec![Matrix3::identity(); n], t.iter().map(|v| Vector3::from(*v)).collect(), PoseRole::Generated).unwrap();
        let gt = PoseSet::new(vec![Matrix3::identity(); n], vec![Vector3::new(1.0, -2.0, 0.5); n], PoseRole::GroundTruth).unwrap();
        let mut want = 0.0;
        for v in &t {
            want += ((v[0] - 1.0).powi(2) + (v[1] + 2.0).powi(2) + (v[2] - 0.5).powi(2)).sqrt();
        }
        prop_assert_eq!(translation_distance(&gen, &gt).unwrap(), want);
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one(v in prop::collection::vec(0.0f64..1.0, 16 * 16 * 3)) {
        let img = RgbImage::new(16, 16, v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
        prop_assert!((ssim(&img, &img, 1.0).unwrap() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let base = RgbImage::filled(12, 12, [0.5; 3]);
    let mut last = f64::INFINITY;
    for k in 1..10 {
        let a = k as f64 * 0.04;
        let other = RgbImage::new(12, 12, (0..144).map(|i| if i % 2 == 0 { [0.5 + a; 3] } else { [0.5 - a; 3] }).collect()).unwrap();
        let p = psnr(&base, &other, 1.0).unwrap();
        assert!(p < last);
        last = p;
    }
    let shifted = RgbImage::filled(12, 12, [0.6; 3]);
    assert!((psnr(&base, &shifted, 1.0).unwrap() - 20.0).abs() < 1e-9);
}
