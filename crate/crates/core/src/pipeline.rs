//! Inference: reconstruction, feature-space anomaly map, calibration with a
//! stored min-max range, thresholding and board-level reassembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cae::ModelBundle;
use crate::error::{Error, Result};
use crate::imaging::{global_range, normalize_with, BinaryMask, FloatMap, Raster, Resample};
use crate::partition::{extract_region, paint_region_mask, RegionGrid};
use crate::perceptual::FeatureExtractor;

/// A region is flagged when at least this many pixels reach the threshold.
pub const MIN_ANOMALOUS_PIXELS: usize = 10;
/// Threshold used when a bundle carries no operating threshold.
pub const FALLBACK_THRESHOLD: f32 = 0.5;

/// Anything that maps a region image to its reconstruction.
pub trait Reconstruct: Send + Sync {
    fn reconstruct(&self, x: &Raster) -> Result<Raster>;
}

impl Reconstruct for ModelBundle {
    fn reconstruct(&self, x: &Raster) -> Result<Raster> {
        ModelBundle::reconstruct(self, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionVerdict {
    pub region_id: String,
    /// Normalized, region-input-sized map.
    #[serde(skip)]
    pub anomaly_map: Option<FloatMap>,
    #[serde(skip)]
    pub mask: Option<BinaryMask>,
    pub anomalous_pixels: usize,
    pub detected: bool,
    pub threshold: f32,
    /// Value of the 10th-largest map pixel; `score >= threshold` iff `detected`.
    pub score: f32,
}

impl RegionVerdict {
    pub fn from_map(region_id: &str, map: FloatMap, threshold: f32) -> RegionVerdict {
        let mask = map.threshold(threshold);
        let anomalous_pixels = mask.count_ones();
        RegionVerdict {
            region_id: region_id.to_string(),
            score: image_score(&map),
            anomalous_pixels,
            detected: anomalous_pixels >= MIN_ANOMALOUS_PIXELS,
            threshold,
            anomaly_map: Some(map),
            mask: Some(mask),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardReport {
    pub board_id: String,
    pub verdicts: Vec<RegionVerdict>,
    #[serde(skip)]
    pub board_mask: Option<BinaryMask>,
    pub board_anomalous_pixels: usize,
    pub any_detected: bool,
}

/// Image-level score: the 10th-largest value, so that `score >= t` exactly when
/// at least 10 pixels reach `t`. Maps with fewer pixels score `-inf`.
pub fn image_score(map: &FloatMap) -> f32 {
    let mut v = map.values().to_vec();
    if v.len() < MIN_ANOMALOUS_PIXELS {
        return f32::NEG_INFINITY;
    }
    let k = MIN_ANOMALOUS_PIXELS - 1;
    let (_, kth, _) = v.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    *kth
}

/// Raw feature-space map of a region, bilinearly resized to the region size.
pub fn raw_region_map(
    model: &dyn Reconstruct,
    extractor: &FeatureExtractor,
    img: &Raster,
) -> Result<FloatMap> {
    let recon = model.reconstruct(img)?;
    extractor
        .anomaly_map(&recon, img)?
        .resize_bilinear(img.height(), img.width())
}

/// Normalizes with a stored range, clamping into `[0, 1]`.
pub fn normalize_map(raw: &FloatMap, norm_range: (f32, f32)) -> Result<FloatMap> {
    normalize_with(raw, norm_range.0, norm_range.1, true)
}

pub fn infer_region_with(
    region_id: &str,
    model: &dyn Reconstruct,
    norm_range: Option<(f32, f32)>,
    extractor: &FeatureExtractor,
    img: &Raster,
    threshold: f32,
) -> Result<RegionVerdict> {
    let range = norm_range.ok_or_else(|| Error::UncalibratedModel {
        region_id: region_id.to_string(),
    })?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Argument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let map = normalize_map(&raw_region_map(model, extractor, img)?, range)?;
    Ok(RegionVerdict::from_map(region_id, map, threshold))
}

pub fn infer_region(
    model: &ModelBundle,
    extractor: &FeatureExtractor,
    img: &Raster,
    threshold: f32,
) -> Result<RegionVerdict> {
    infer_region_with(
        &model.region_id,
        model,
        model.norm_range,
        extractor,
        img,
        threshold,
    )
}

/// Raw (resized, unnormalized) maps of every image.
pub fn raw_maps(
    model: &dyn Reconstruct,
    extractor: &FeatureExtractor,
    images: &[Raster],
) -> Result<Vec<FloatMap>> {
    images
        .iter()
        .map(|img| raw_region_map(model, extractor, img))
        .collect()
}

/// Stores the global min/max of the evaluation set's raw maps into a copy of the bundle.
pub fn calibrate(
    model: &ModelBundle,
    extractor: &FeatureExtractor,
    eval_set: &[Raster],
) -> Result<ModelBundle> {
    if eval_set.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no calibration images for {}",
            model.region_id
        )));
    }
    calibrate_from_maps(model, &raw_maps(model, extractor, eval_set)?)
}

pub fn calibrate_from_maps(model: &ModelBundle, raw: &[FloatMap]) -> Result<ModelBundle> {
    let mut out = model.clone();
    out.norm_range = Some(global_range(raw)?);
    Ok(out)
}

/// Region thresholds: the explicit one, else each bundle's operating threshold.
fn threshold_for(model: &ModelBundle, threshold: Option<f32>) -> f32 {
    threshold
        .or(model.operating_threshold)
        .unwrap_or(FALLBACK_THRESHOLD)
}

/// Runs every grid region through its bundle and ORs the masks onto the board.
pub fn infer_board(
    board_id: &str,
    board: &Raster,
    models: &BTreeMap<String, ModelBundle>,
    extractor: &FeatureExtractor,
    grid: &RegionGrid,
    threshold: Option<f32>,
) -> Result<BoardReport> {
    let mut maps = Vec::with_capacity(grid.len());
    for spec in &grid.regions {
        let model = models
            .get(&spec.region_id)
            .ok_or_else(|| Error::MissingModel {
                region_id: spec.region_id.clone(),
            })?;
        let range = model.norm_range.ok_or_else(|| Error::UncalibratedModel {
            region_id: spec.region_id.clone(),
        })?;
        let img = extract_region(board, spec, model.config().input_side)?;
        let map = normalize_map(&raw_region_map(model, extractor, &img)?, range)?;
        maps.push((spec.region_id.clone(), map, threshold_for(model, threshold)));
    }
    assemble_report(board_id, grid, maps)
}

/// Builds a report from normalized region maps and per-region thresholds.
pub fn assemble_report(
    board_id: &str,
    grid: &RegionGrid,
    maps: Vec<(String, FloatMap, f32)>,
) -> Result<BoardReport> {
    let mut board_mask = BinaryMask::zeros(grid.board_h, grid.board_w);
    let mut verdicts = Vec::with_capacity(maps.len());
    for (region_id, map, t) in maps {
        let spec = grid
            .get(&region_id)
            .ok_or_else(|| Error::Argument(format!("{region_id} is not in the grid")))?;
        let v = RegionVerdict::from_map(&region_id, map, t);
        paint_region_mask(&mut board_mask, v.mask.as_ref().unwrap(), spec)?;
        verdicts.push(v);
    }
    Ok(BoardReport {
        board_id: board_id.to_string(),
        any_detected: verdicts.iter().any(|v| v.detected),
        board_anomalous_pixels: board_mask.count_ones(),
        board_mask: Some(board_mask),
        verdicts,
    })
}

impl BoardReport {
    /// Re-binarizes the stored maps at `threshold` without recomputing them.
    pub fn rethreshold(&self, grid: &RegionGrid, threshold: f32) -> Result<BoardReport> {
        let maps = self
            .verdicts
            .iter()
            .map(|v| {
                let map = v
                    .anomaly_map
                    .clone()
                    .ok_or_else(|| Error::Argument("report carries no maps".into()))?;
                Ok((v.region_id.clone(), map, threshold))
            })
            .collect::<Result<Vec<_>>>()?;
        assemble_report(&self.board_id, grid, maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::build_grid;

    #[test]
    fn score_is_tenth_largest() {
        let v: Vec<f32> = (0..20).map(|i| i as f32 / 20.0).collect();
        let m = FloatMap::new(4, 5, v).unwrap();
        assert_eq!(image_score(&m), 10.0 / 20.0);
        for t in [0.3, 0.5, 0.55, 0.9] {
            assert_eq!(m.threshold(t).count_ones() >= 10, image_score(&m) >= t);
        }
        assert_eq!(
            image_score(&FloatMap::filled(3, 3, 1.0).unwrap()),
            f32::NEG_INFINITY
        );
    }

    #[test]
    fn threshold_extremes() {
        let m = FloatMap::new(4, 4, (0..16).map(|i| i as f32 / 20.0).collect()).unwrap();
        let top = RegionVerdict::from_map("r", m.clone(), 1.0);
        assert_eq!((top.anomalous_pixels, top.detected), (0, false));
        let all = RegionVerdict::from_map("r", m, 0.0);
        assert_eq!((all.anomalous_pixels, all.detected), (16, true));
    }

    #[test]
    fn report_locality_and_union() {
        let grid = build_grid(12, 8, 8).unwrap();
        // grid1_1 at x 0..8, grid2_1 at x 4..12; overlap columns 4..8.
        let quiet = FloatMap::filled(8, 8, 0.0).unwrap();
        let band = |lo: usize, hi: usize| {
            FloatMap::new(
                8,
                8,
                (0..64)
                    .map(|i| ((lo..hi).contains(&(i % 8))) as u8 as f32)
                    .collect(),
            )
            .unwrap()
        };
        let r = assemble_report(
            "b",
            &grid,
            vec![
                ("grid1_1".into(), quiet.clone(), 0.5),
                ("grid2_1".into(), quiet.clone(), 0.5),
            ],
        )
        .unwrap();
        assert!(!r.any_detected);
        assert!(r.board_mask.as_ref().unwrap().is_empty());

        let r = assemble_report(
            "b",
            &grid,
            vec![
                ("grid1_1".into(), band(4, 8), 0.5),
                ("grid2_1".into(), band(0, 4), 0.5),
            ],
        )
        .unwrap();
        let m = r.board_mask.as_ref().unwrap();
        assert_eq!(m.count_ones(), 32);
        assert!((0..8).all(|y| (0..12).all(|x| m.get(y, x) == (4..8).contains(&x))));
        assert!(r.any_detected);

        let r = assemble_report(
            "b",
            &grid,
            vec![
                ("grid1_1".into(), band(0, 2), 0.5),
                ("grid2_1".into(), quiet, 0.5),
            ],
        )
        .unwrap();
        let m = r.board_mask.as_ref().unwrap();
        assert!((0..8).all(|y| (2..12).all(|x| !m.get(y, x))));
        assert_eq!(
            r.rethreshold(&grid, 1.0).unwrap().board_anomalous_pixels,
            16
        );
    }

    #[test]
    fn missing_and_uncalibrated_models() {
        let grid = build_grid(64, 64, 64).unwrap();
        let fe = FeatureExtractor::vgg19_seeded(0).unwrap();
        let board = Raster::filled(64, 64, crate::imaging::ColorSpace::Rgb, 0.5).unwrap();
        let models = BTreeMap::new();
        assert!(matches!(
            infer_board("b", &board, &models, &fe, &grid, None),
            Err(Error::MissingModel { .. })
        ));
        let bundle = ModelBundle::new("grid1_1", crate::cae::CaeConfig::toy()).unwrap();
        assert!(matches!(
            infer_region(&bundle, &fe, &board, 0.5),
            Err(Error::UncalibratedModel { .. })
        ));
    }
}
