mod common;

use pcb_sentinel_core::evaluation::{confusion, threshold_grid};
use pcb_sentinel_core::perceptual::FALLBACK_SEED;
use pcb_sentinel_core::pipeline::*;
use pcb_sentinel_core::{
    BinaryMask, CaeConfig, Error, FeatureExtractor, FloatMap, ModelBundle, Raster, Result,
};

/// Reconstructs every input as the same clean board, the ideal normal-only model.
struct CleanStub(Raster);

impl Reconstruct for CleanStub {
    fn reconstruct(&self, _: &Raster) -> Result<Raster> {
        Ok(self.0.clone())
    }
}

struct Identity;

impl Reconstruct for Identity {
    fn reconstruct(&self, x: &Raster) -> Result<Raster> {
        Ok(x.clone())
    }
}

fn paste(board: &Raster, donor: &Raster, y0: usize, x0: usize, side: usize) -> Raster {
    let mut out = board.clone();
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            for c in 0..3 {
                out.set(y, x, c, donor.get(y, x, c));
            }
        }
    }
    out
}

#[test]
fn pasted_patch_is_localized() {
    let fe = FeatureExtractor::vgg19_seeded(FALLBACK_SEED).unwrap();
    let clean = common::texture(256, 256, 5);
    let donor = common::texture(256, 256, 99);
    let (y0, x0, side) = (96, 128, 64);
    let modified = paste(&clean, &donor, y0, x0, side);
    let truth = BinaryMask::from_fn(256, 256, |y, x| {
        (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)
    });

    let stub = CleanStub(clean.clone());
    let raw = raw_maps(&stub, &fe, &[modified.clone(), clean.clone()]).unwrap();
    assert!(raw[1].values().iter().all(|&v| v == 0.0));
    let bundle = calibrate_from_maps(
        &ModelBundle::new("grid1_1", CaeConfig::toy()).unwrap(),
        &raw,
    )
    .unwrap();
    let range = bundle.norm_range.unwrap();

    let map = infer_region_with("grid1_1", &stub, Some(range), &fe, &modified, 0.5)
        .unwrap()
        .anomaly_map
        .unwrap();
    let mut best = 0.0f64;
    for t in threshold_grid(256).unwrap() {
        let v = RegionVerdict::from_map("grid1_1", map.clone(), t);
        best = best.max(
            confusion(v.mask.as_ref().unwrap(), &truth)
                .unwrap()
                .metrics()
                .iou,
        );
    }
    assert!(best > 0.3, "best IoU {best}");
}

#[test]
fn identical_images_cannot_be_calibrated() {
    let fe = FeatureExtractor::vgg19_seeded(FALLBACK_SEED).unwrap();
    let img = common::texture(64, 64, 1);
    let raw = raw_maps(&Identity, &fe, &[img.clone(), img]).unwrap();
    let bundle = ModelBundle::new("grid1_1", CaeConfig::toy()).unwrap();
    assert!(matches!(
        calibrate_from_maps(&bundle, &raw),
        Err(Error::DegenerateRange { .. })
    ));
}

#[test]
fn calibration_stores_the_global_range() {
    let maps = vec![
        FloatMap::new(1, 2, vec![0.2, 0.7]).unwrap(),
        FloatMap::new(1, 2, vec![1.2, 0.5]).unwrap(),
    ];
    let bundle = ModelBundle::new("grid1_1", CaeConfig::toy()).unwrap();
    assert_eq!(
        calibrate_from_maps(&bundle, &maps).unwrap().norm_range,
        Some((0.2, 1.2))
    );
}

#[test]
fn calibration_is_idempotent_and_inference_repeatable() {
    let fe = FeatureExtractor::vgg19_seeded(FALLBACK_SEED).unwrap();
    let bundle = ModelBundle::new("grid1_1", CaeConfig::toy()).unwrap();
    let set: Vec<Raster> = (0..3).map(|s| common::texture(64, 64, s)).collect();
    let a = calibrate(&bundle, &fe, &set).unwrap();
    let b = calibrate(&a, &fe, &set).unwrap();
    assert_eq!(a.norm_range, b.norm_range);
    assert!(matches!(
        calibrate(&bundle, &fe, &[]),
        Err(Error::EmptyDataset(_))
    ));

    let first = infer_region(&a, &fe, &set[1], 0.4).unwrap();
    let second = infer_region(&a, &fe, &set[1], 0.4).unwrap();
    assert_eq!(first, second);
    let bits = |v: &RegionVerdict| {
        v.anomaly_map
            .as_ref()
            .unwrap()
            .values()
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&first), bits(&second));
}

#[test]
fn threshold_bounds_on_a_calibrated_model() {
    let fe = FeatureExtractor::vgg19_seeded(FALLBACK_SEED).unwrap();
    let bundle = ModelBundle::new("grid1_1", CaeConfig::toy()).unwrap();
    let set: Vec<Raster> = (0..2).map(|s| common::texture(64, 64, s)).collect();
    // Widen the range so no live value reaches 1.0.
    let (lo, hi) = calibrate(&bundle, &fe, &set).unwrap().norm_range.unwrap();
    let mut wide = bundle.clone();
    wide.norm_range = Some((lo, hi + (hi - lo)));

    let top = infer_region(&wide, &fe, &set[0], 1.0).unwrap();
    assert!(top.anomaly_map.as_ref().unwrap().max() < 1.0);
    assert_eq!((top.anomalous_pixels, top.detected), (0, false));
    let floor = infer_region(&wide, &fe, &set[0], 0.0).unwrap();
    assert_eq!((floor.anomalous_pixels, floor.detected), (64 * 64, true));
    assert!(matches!(
        infer_region(&wide, &fe, &set[0], 1.5),
        Err(Error::Argument(_))
    ));
}

#[test]
fn identical_reconstruction_gives_empty_masks() {
    let fe = FeatureExtractor::vgg19_seeded(FALLBACK_SEED).unwrap();
    let img = common::texture(64, 64, 3);
    for t in [1e-6, 0.1, 0.5, 1.0] {
        let v = infer_region_with("grid1_1", &Identity, Some((0.0, 1.0)), &fe, &img, t).unwrap();
        assert_eq!(v.anomalous_pixels, 0);
        assert!(!v.detected);
    }
}
