//! Dataset-level operations behind the CLI subcommands and the service.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use pcb_sentinel_core::datasets::{
    generate_synthetic, load_manifest, load_truth, DatasetKind, DatasetManifest, SyntheticRecord,
    SyntheticSpec, TestItem,
};
use pcb_sentinel_core::evaluation::{evaluate_regions, EvalReport, EvalSample};
use pcb_sentinel_core::imaging::{encode_png, load_raster};
use pcb_sentinel_core::partition::{
    build_grid, extract_region, extract_region_mask, RegionGrid, RegionSpec,
};
use pcb_sentinel_core::pipeline::{
    assemble_report, calibrate_from_maps, normalize_map, raw_region_map, BoardReport,
    FALLBACK_THRESHOLD,
};
use pcb_sentinel_core::registration::register;
use pcb_sentinel_core::training::{
    train_region, AugmentedSource, BoardImage, BoardRegionSource, EpochRecord, SampleSource,
};
use pcb_sentinel_core::{BinaryMask, Error, FeatureExtractor, FloatMap, ModelBundle, Raster};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;

/// Boards above this many pixels are decoded on demand during training.
const STREAM_PIXELS: usize = 4_000_000;
pub const TRAIN_LOG: &str = "train_log.ndjson";

/// Converts to the channel count the autoencoder expects.
pub fn conform(img: Raster, channels: usize) -> Raster {
    match (img.channels(), channels) {
        (1, 3) => img.to_rgb(),
        (3, 1) => img.to_gray(),
        _ => img,
    }
}

/// Region grid for boards of `(width, height)`. MVTec objects are one region.
pub fn grid_for(
    cfg: &Config,
    kind: Option<DatasetKind>,
    size: (usize, usize),
) -> Result<RegionGrid> {
    let w = cfg.grid.board_w.unwrap_or(size.0);
    let h = cfg.grid.board_h.unwrap_or(size.1);
    let side = match kind {
        Some(DatasetKind::MvtecAd) => w.min(h),
        _ => cfg.grid.side,
    };
    Ok(build_grid(w, h, side)?)
}

/// Grid regions filtered to `only` (all regions when empty).
pub fn select<'g>(grid: &'g RegionGrid, only: &[String]) -> Result<Vec<&'g RegionSpec>> {
    if only.is_empty() {
        return Ok(grid.regions.iter().collect());
    }
    only.iter()
        .map(|id| {
            grid.get(id).with_context(|| {
                format!(
                    "region {id} is not in the {}x{} grid",
                    grid.board_w, grid.board_h
                )
            })
        })
        .collect()
}

pub fn region_dir(models_dir: &Path, region_id: &str) -> PathBuf {
    models_dir.join(region_id)
}

pub fn load_models<'a>(
    models_dir: &Path,
    ids: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<String, ModelBundle>> {
    let mut out = BTreeMap::new();
    for id in ids {
        let dir = region_dir(models_dir, id);
        if !dir.join(pcb_sentinel_core::cae::MANIFEST_FILE).is_file() {
            return Err(Error::MissingModel {
                region_id: id.to_string(),
            }
            .into());
        }
        let bundle =
            ModelBundle::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
        out.insert(id.to_string(), bundle);
    }
    Ok(out)
}

/// Every bundle found directly under `models_dir`.
pub fn load_all_models(models_dir: &Path) -> Result<BTreeMap<String, ModelBundle>> {
    let entries = fs::read_dir(models_dir)
        .with_context(|| format!("reading models directory {}", models_dir.display()))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e?;
        if e.path()
            .join(pcb_sentinel_core::cae::MANIFEST_FILE)
            .is_file()
        {
            ids.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    load_models(models_dir, ids.iter().map(String::as_str))
}

fn manifest(cfg: &Config) -> Result<DatasetManifest> {
    let ds = cfg.dataset()?;
    Ok(load_manifest(&ds.root, ds.kind)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Applies the channel conversion to every sample of an inner source.
struct Conformed<S> {
    inner: S,
    channels: usize,
}

impl<S: SampleSource> SampleSource for Conformed<S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> pcb_sentinel_core::Result<Raster> {
        Ok(conform(self.inner.sample(index, rng)?, self.channels))
    }

    fn is_static(&self) -> bool {
        self.inner.is_static()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

fn board_images(paths: &[PathBuf]) -> Result<Vec<BoardImage>> {
    paths
        .iter()
        .map(|p| {
            let dims =
                image::image_dimensions(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(if dims.0 as usize * dims.1 as usize > STREAM_PIXELS {
                BoardImage::Path(p.clone())
            } else {
                BoardImage::Loaded(load_raster(p)?)
            })
        })
        .collect()
}

fn region_sources(
    cfg: &Config,
    kind: DatasetKind,
    spec: &RegionSpec,
    train: &[BoardImage],
    val: &[BoardImage],
) -> Result<(Box<dyn SampleSource>, Box<dyn SampleSource>)> {
    let side = cfg.cae.input_side;
    let channels = cfg.cae.input_channels;
    let val_src = Conformed {
        inner: BoardRegionSource::new(val.to_vec(), spec.clone(), side, (0, 0))?,
        channels,
    };
    let train_src: Box<dyn SampleSource> = match kind {
        DatasetKind::MvtecAd => {
            let crops = train
                .iter()
                .map(|b| match b {
                    BoardImage::Loaded(r) => Ok(conform(extract_region(r, spec, side)?, channels)),
                    BoardImage::Path(p) => Ok(conform(
                        extract_region(&load_raster(p)?, spec, side)?,
                        channels,
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            Box::new(AugmentedSource::new(crops, cfg.train.augmentation.mvtec))
        }
        // Synthetic boards are already aligned to the pixel; shifting them
        // would only teach the model a blurrier layout.
        DatasetKind::Synthetic => Box::new(Conformed {
            inner: BoardRegionSource::new(train.to_vec(), spec.clone(), side, (0, 0))?,
            channels,
        }),
        DatasetKind::MpiPcb => Box::new(Conformed {
            inner: BoardRegionSource::new(
                train.to_vec(),
                spec.clone(),
                side,
                cfg.train.augmentation.mpi_offset_px,
            )?,
            channels,
        }),
    };
    Ok((train_src, Box::new(val_src)))
}

/// Trains one bundle per selected region and saves it under `models_dir/<region>/`.
pub fn train(cfg: &Config, fe: &FeatureExtractor, only: &[String]) -> Result<Vec<ModelBundle>> {
    let m = manifest(cfg)?;
    let grid = grid_for(cfg, Some(m.kind), m.image_size)?;
    let specs = select(&grid, only)?;
    let train_boards = board_images(&m.train)?;
    let val_boards = board_images(&m.val)?;
    info!(
        "training {} region(s) on {} boards ({} validation), backbone {}",
        specs.len(),
        train_boards.len(),
        val_boards.len(),
        fe.source()
    );
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let (train_src, val_src) = region_sources(cfg, m.kind, spec, &train_boards, &val_boards)?;
        let dir = region_dir(&cfg.models_dir, &spec.region_id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let log_path = dir.join(TRAIN_LOG);
        let mut log = BufWriter::new(
            File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
        );
        let mut log_err = None;
        let val = (!val_src.is_empty()).then_some(val_src.as_ref());
        let bundle = train_region(
            &spec.region_id,
            train_src.as_ref(),
            val,
            fe,
            &cfg.cae,
            &cfg.train,
            |r: &EpochRecord| {
                info!(
                    "{} epoch {:>4}  loss {:.5}  val {}  lr {:.2e}",
                    spec.region_id,
                    r.epoch,
                    r.train_loss,
                    r.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
                    r.lr
                );
                let line = serde_json::to_string(r).map_err(std::io::Error::from);
                if let Err(e) = line.and_then(|l| writeln!(log, "{l}").and_then(|_| log.flush())) {
                    log_err.get_or_insert(e);
                }
            },
        )?;
        if let Some(e) = log_err {
            return Err(e).with_context(|| format!("writing {}", log_path.display()));
        }
        bundle.save(&dir)?;
        info!("saved {}", dir.display());
        out.push(bundle);
    }
    Ok(out)
}

/// Raw maps and region-sized truths of every test board, per region.
struct TestMaps {
    maps: BTreeMap<String, Vec<FloatMap>>,
    truths: BTreeMap<String, Vec<BinaryMask>>,
}

fn test_maps(
    items: &[TestItem],
    grid: &RegionGrid,
    specs: &[&RegionSpec],
    models: &BTreeMap<String, ModelBundle>,
    fe: &FeatureExtractor,
    with_truth: bool,
) -> Result<TestMaps> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("the test split is empty".into()).into());
    }
    let mut maps: BTreeMap<String, Vec<FloatMap>> = BTreeMap::new();
    let mut truths: BTreeMap<String, Vec<BinaryMask>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let board = load_raster(&item.image)?;
        if (board.width(), board.height()) != (grid.board_w, grid.board_h) {
            bail!(
                "{} is {}x{}, the grid expects {}x{}",
                item.image.display(),
                board.width(),
                board.height(),
                grid.board_w,
                grid.board_h
            );
        }
        let truth = if with_truth {
            Some(load_truth(item, board.height(), board.width())?)
        } else {
            None
        };
        for spec in specs {
            let model = &models[&spec.region_id];
            let c = model.config();
            let img = conform(
                extract_region(&board, spec, c.input_side)?,
                c.input_channels,
            );
            maps.entry(spec.region_id.clone())
                .or_default()
                .push(raw_region_map(model, fe, &img)?);
            if let Some(t) = &truth {
                truths
                    .entry(spec.region_id.clone())
                    .or_default()
                    .push(extract_region_mask(t, spec, c.input_side)?);
            }
        }
        info!("scored test board {}/{}", i + 1, items.len());
    }
    Ok(TestMaps { maps, truths })
}

/// Stores each region's global raw-map range over the test boards.
pub fn calibrate(cfg: &Config, fe: &FeatureExtractor, only: &[String]) -> Result<Vec<ModelBundle>> {
    let m = manifest(cfg)?;
    let grid = grid_for(cfg, Some(m.kind), m.image_size)?;
    let specs = select(&grid, only)?;
    let models = load_models(&cfg.models_dir, specs.iter().map(|s| s.region_id.as_str()))?;
    let tm = test_maps(&m.test, &grid, &specs, &models, fe, false)?;
    let mut out = Vec::new();
    for spec in &specs {
        let bundle = calibrate_from_maps(&models[&spec.region_id], &tm.maps[&spec.region_id])?;
        bundle.save(region_dir(&cfg.models_dir, &spec.region_id))?;
        let (lo, hi) = bundle.norm_range.expect("just calibrated");
        info!("{}: range [{lo:.6}, {hi:.6}]", spec.region_id);
        out.push(bundle);
    }
    Ok(out)
}

/// Scores the test split, writes the report and ROC curves, and stores each
/// region's best-IoU threshold as its operating threshold.
///
/// Without `recalibrate` every bundle must already carry a range.
pub fn evaluate(
    cfg: &Config,
    fe: &FeatureExtractor,
    only: &[String],
    recalibrate: bool,
) -> Result<EvalReport> {
    let m = manifest(cfg)?;
    let grid = grid_for(cfg, Some(m.kind), m.image_size)?;
    let specs = select(&grid, only)?;
    let mut models = load_models(&cfg.models_dir, specs.iter().map(|s| s.region_id.as_str()))?;
    if !recalibrate {
        if let Some(b) = models.values().find(|b| b.norm_range.is_none()) {
            return Err(Error::UncalibratedModel {
                region_id: b.region_id.clone(),
            })
            .context(
                "run `calibrate` first or pass --calibrate to take the range from this test set",
            );
        }
    }
    let tm = test_maps(&m.test, &grid, &specs, &models, fe, true)?;
    let mut regions = Vec::new();
    for spec in &specs {
        let id = &spec.region_id;
        if recalibrate {
            let b = calibrate_from_maps(&models[id], &tm.maps[id])?;
            models.insert(id.clone(), b);
        }
        let range = models[id].norm_range.expect("checked above");
        let truths = &tm.truths[id];
        if truths.iter().all(BinaryMask::is_empty) {
            warn!("{id}: no modified pixels in the test split, skipped");
            continue;
        }
        let samples = tm.maps[id]
            .iter()
            .zip(truths)
            .map(|(raw, truth)| {
                Ok(EvalSample {
                    map: normalize_map(raw, range)?,
                    truth: truth.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        regions.push((id.clone(), samples));
    }
    if regions.is_empty() {
        bail!("no selected region has modified pixels in the test split");
    }
    let report = evaluate_regions(&regions, cfg.eval.n_thresholds)?;

    let roc_dir = cfg.output_dir.join("roc");
    fs::create_dir_all(&roc_dir).with_context(|| format!("creating {}", roc_dir.display()))?;
    fs::write(cfg.output_dir.join("report.json"), report.to_json()?)?;
    fs::write(cfg.output_dir.join("report.txt"), report.to_table())?;
    for r in &report.regions {
        if let Some(c) = &r.seg_roc {
            fs::write(
                roc_dir.join(format!("{}_segmentation.csv", r.region_id)),
                c.to_csv(),
            )?;
        }
        if let Some(c) = &r.det_roc {
            fs::write(
                roc_dir.join(format!("{}_detection.csv", r.region_id)),
                c.to_csv(),
            )?;
        }
        let b = models
            .get_mut(&r.region_id)
            .expect("evaluated regions have models");
        b.operating_threshold = Some(r.best_iou_threshold);
    }
    for (id, b) in &models {
        b.save(region_dir(&cfg.models_dir, id))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistrationSummary {
    pub homography: [[f64; 3]; 3],
    pub match_count: usize,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    pub mean_reprojection_error: f64,
}

/// A board ready for inference and how it got there.
pub struct PreparedBoard {
    pub board: Raster,
    pub registration: Option<RegistrationSummary>,
}

pub fn load_reference(cfg: &Config) -> Result<Option<Raster>> {
    cfg.registration
        .reference
        .as_ref()
        .map(|p| load_raster(p).with_context(|| format!("loading reference {}", p.display())))
        .transpose()
}

/// Registers onto the reference when one is configured.
pub fn prepare_board(
    cfg: &Config,
    reference: Option<&Raster>,
    img: Raster,
) -> Result<PreparedBoard> {
    let Some(reference) = reference else {
        return Ok(PreparedBoard {
            board: img,
            registration: None,
        });
    };
    let r = register(&img, reference, &cfg.registration.params)?;
    Ok(PreparedBoard {
        board: r.warped,
        registration: Some(RegistrationSummary {
            homography: r.homography.matrix(),
            match_count: r.match_count,
            inlier_count: r.inlier_count,
            inlier_ratio: r.inlier_ratio,
            mean_reprojection_error: r.mean_reprojection_error,
        }),
    })
}

/// Scores every grid region of a prepared board.
pub fn infer_prepared(
    board_id: &str,
    board: &Raster,
    grid: &RegionGrid,
    models: &BTreeMap<String, ModelBundle>,
    fe: &FeatureExtractor,
    threshold: Option<f32>,
) -> Result<BoardReport> {
    if (board.width(), board.height()) != (grid.board_w, grid.board_h) {
        bail!(
            "board is {}x{}, the grid expects {}x{}",
            board.width(),
            board.height(),
            grid.board_w,
            grid.board_h
        );
    }
    if let Some(t) = threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Argument(format!("threshold {t} outside [0, 1]")).into());
        }
    }
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
        let c = model.config();
        let img = conform(extract_region(board, spec, c.input_side)?, c.input_channels);
        let map = normalize_map(&raw_region_map(model, fe, &img)?, range)?;
        let t = threshold
            .or(model.operating_threshold)
            .unwrap_or(FALLBACK_THRESHOLD);
        maps.push((spec.region_id.clone(), map, t));
    }
    Ok(assemble_report(board_id, grid, maps)?)
}

/// Board image with the detected regions outlined in red.
pub fn overlay_png(board: &Raster, mask: &BinaryMask) -> Result<Vec<u8>> {
    if (mask.width(), mask.height()) != (board.width(), board.height()) {
        bail!("mask and board sizes differ");
    }
    let mut rgb = board.to_rgb().to_dynamic().to_rgb8();
    let (w, h) = (mask.width(), mask.height());
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
    };
    // Two-pixel outline: mask pixels within two steps of the outside.
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let edge = (1..=2).any(|d| {
                !inside(yi - d, xi)
                    || !inside(yi + d, xi)
                    || !inside(yi, xi - d)
                    || !inside(yi, xi + d)
            });
            if edge {
                rgb.put_pixel(x as u32, y as u32, image::Rgb([255, 0, 0]));
            }
        }
    }
    Ok(encode_png(&image::DynamicImage::ImageRgb8(rgb))?)
}

#[derive(Debug, Serialize)]
struct InferFile<'a> {
    #[serde(flatten)]
    report: &'a BoardReport,
    registration: &'a Option<RegistrationSummary>,
}

/// Registers, scores and writes `report.json`, `overlay.png` and `maps/<region>.amap`.
pub fn infer_file(
    cfg: &Config,
    fe: &FeatureExtractor,
    image: &Path,
    threshold: Option<f32>,
) -> Result<BoardReport> {
    let reference = load_reference(cfg)?;
    let prepared = prepare_board(cfg, reference.as_ref(), load_raster(image)?)?;
    let board = &prepared.board;
    let grid = grid_for(
        cfg,
        cfg.dataset.as_ref().map(|d| d.kind),
        (board.width(), board.height()),
    )?;
    let models = load_models(
        &cfg.models_dir,
        grid.regions.iter().map(|s| s.region_id.as_str()),
    )?;
    let board_id = image
        .file_stem()
        .map_or("board".into(), |s| s.to_string_lossy().into_owned());
    let report = infer_prepared(&board_id, board, &grid, &models, fe, threshold)?;

    let maps_dir = cfg.output_dir.join("maps");
    fs::create_dir_all(&maps_dir).with_context(|| format!("creating {}", maps_dir.display()))?;
    write_json(
        &cfg.output_dir.join("report.json"),
        &InferFile {
            report: &report,
            registration: &prepared.registration,
        },
    )?;
    let mask = report
        .board_mask
        .as_ref()
        .expect("assembled reports carry a mask");
    fs::write(
        cfg.output_dir.join("overlay.png"),
        overlay_png(board, mask)?,
    )?;
    for v in &report.verdicts {
        if let Some(map) = &v.anomaly_map {
            map.save(maps_dir.join(format!("{}.amap", v.region_id)))?;
        }
    }
    Ok(report)
}

pub fn synthesize(
    spec: &SyntheticSpec,
    n_normal: usize,
    n_anomalous: usize,
    seed: u64,
    root: &Path,
) -> Result<SyntheticRecord> {
    let record = generate_synthetic(spec, n_normal, n_anomalous, seed, root)?;
    info!(
        "wrote {} normal and {} modified {}x{} boards to {}",
        n_normal,
        n_anomalous,
        spec.board_w,
        spec.board_h,
        root.display()
    );
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcb_sentinel_core::ColorSpace;

    #[test]
    fn overlay_marks_only_the_rim() {
        let board = Raster::filled(20, 20, ColorSpace::Gray, 0.5).unwrap();
        let mask = BinaryMask::from_fn(20, 20, |y, x| (5..15).contains(&y) && (5..15).contains(&x));
        let png = overlay_png(&board, &mask).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(5, 5).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(6, 10).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(10, 10).0, [128, 128, 128]);
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128]);
    }

    #[test]
    fn mvtec_images_are_one_region() {
        let cfg = Config::defaults(crate::config::Profile::Full);
        let g = grid_for(&cfg, Some(DatasetKind::MvtecAd), (900, 900)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.regions[0].side, 900);
        assert_eq!(
            grid_for(&cfg, Some(DatasetKind::MpiPcb), (4096, 2816))
                .unwrap()
                .len(),
            12
        );
        assert!(select(&g, &["grid9_9".into()]).is_err());
    }
}
