mod common;

use common::{condition, random_homography, texture};
use pcb_sentinel_core::registration::*;
use pcb_sentinel_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn self_match_offsets_are_zero() {
    let img = texture(128, 128, 1);
    let pairs = detect_and_match(&img, &img, 0.75).unwrap();
    assert!(pairs.len() >= 4);
    for p in &pairs {
        assert!(
            (p.query[0] - p.reference[0]).abs() < 1e-6
                && (p.query[1] - p.reference[1]).abs() < 1e-6
        );
    }
}

#[test]
fn rotated_copy_matches_are_consistent() {
    let reference = texture(160, 160, 2);
    let (c, s) = (10f64.to_radians().cos(), 10f64.to_radians().sin());
    let rot = Homography::new([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    let about = Homography::translation(80.0, 80.0)
        .compose(&rot)
        .unwrap()
        .compose(&Homography::translation(-80.0, -80.0))
        .unwrap();
    let query = warp(&reference, &about, 160, 160).unwrap();
    let pairs = detect_and_match(&query, &reference, 0.75).unwrap();
    let good = pairs
        .iter()
        .filter(|p| {
            let (x, y) = about.apply(p.reference[0], p.reference[1]);
            (x - p.query[0]).hypot(y - p.query[1]) < 2.0
        })
        .count();
    assert!(good >= 4, "{good} of {}", pairs.len());
    assert!(2 * good > pairs.len(), "{good} of {}", pairs.len());
}

#[test]
fn self_registration() {
    let img = texture(128, 128, 3);
    let r = register(&img, &img, &RegistrationConfig::default()).unwrap();
    assert!(r.mean_reprojection_error < 0.5);
    assert!(r.homography.max_abs_diff(&Homography::identity()) < 1e-6);
    let diff = r
        .warped
        .pixels()
        .iter()
        .zip(img.pixels())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn known_warp_is_inverted() {
    let reference = texture(192, 192, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let known = random_homography(192, 192, &mut rng);
    assert!(condition(&known) < 1000.0);
    let query = warp(&reference, &known, 192, 192).unwrap();
    let r = register(&query, &reference, &RegistrationConfig::default()).unwrap();
    let id = r.homography.compose(&known).unwrap();
    assert!(id.max_abs_diff(&Homography::identity()) < 1e-2, "{id:?}");
    assert!(r.mean_reprojection_error < 1.0);
    assert!(r.inlier_count <= r.match_count && (0.0..=1.0).contains(&r.inlier_ratio));
    assert_eq!((r.warped.height(), r.warped.width()), (192, 192));
}

#[test]
fn registration_is_deterministic() {
    let reference = texture(128, 128, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let query = warp(&reference, &random_homography(128, 128, &mut rng), 128, 128).unwrap();
    let cfg = RegistrationConfig::default();
    let a = register(&query, &reference, &cfg).unwrap();
    let b = register(&query, &reference, &cfg).unwrap();
    assert_eq!(a.homography.matrix(), b.homography.matrix());
    assert_eq!(a.warped, b.warped);
}

#[test]
fn quality_ceiling_is_enforced() {
    let reference = texture(128, 128, 6);
    let cfg = RegistrationConfig {
        quality_ceiling_px: 0.0,
        photometric_iters: 0,
        ..RegistrationConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let query = warp(&reference, &random_homography(128, 128, &mut rng), 128, 128).unwrap();
    assert!(matches!(
        register(&query, &reference, &cfg),
        Err(Error::RegistrationQuality { .. })
    ));
}
