#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use pcb_sentinel_core::imaging::{encode_png, save_raster};
use pcb_sentinel_core::pipeline::{calibrate_from_maps, raw_maps};
use pcb_sentinel_core::{CaeConfig, ColorSpace, FeatureExtractor, ModelBundle, Raster};
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

/// Smooth random board: a few soft blobs on a mid-grey field.
pub fn board(h: usize, w: usize, seed: u64) -> Raster {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..h as f32),
                rng.random_range(0.0..w as f32),
                rng.random_range(4.0..12.0),
                [rng.random(), rng.random(), rng.random()],
            )
        })
        .collect();
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let mut c = [0.4f32; 3];
            for (by, bx, r, col) in &blobs {
                let d2 = (y as f32 - by).powi(2) + (x as f32 - bx).powi(2);
                let a = (-d2 / (2.0 * r * r)).exp();
                for k in 0..3 {
                    c[k] += a * (col[k] - c[k]);
                }
            }
            px.extend_from_slice(&c);
        }
    }
    Raster::new(h, w, ColorSpace::Rgb, px).unwrap()
}

/// Scattered blobs and soft rectangles: plenty of keypoints for registration.
pub fn texture(h: usize, w: usize, seed: u64) -> Raster {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![0.2f32; h * w * 3];
    for _ in 0..(h * w) / 300 {
        let (cx, cy) = (
            rng.random_range(0.0..w as f32),
            rng.random_range(0.0..h as f32),
        );
        let s = rng.random_range(1.5..6.0f32);
        let rect = rng.random_bool(0.4);
        let amp = rng.random_range(-0.5..0.5f32);
        let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        let r = (4.0 * s) as isize;
        for y in (cy as isize - r).max(0)..(cy as isize + r).min(h as isize) {
            for x in (cx as isize - r).max(0)..(cx as isize + r).min(w as isize) {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let v = if rect {
                    let e = |d: f32| 1.0 / (1.0 + ((d.abs() - 1.5 * s) * 1.5).exp());
                    e(dx) * e(dy)
                } else {
                    (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
                };
                for c in 0..3 {
                    px[(y as usize * w + x as usize) * 3 + c] += amp * v * tint[c];
                }
            }
        }
    }
    Raster::from_clamped(h, w, ColorSpace::Rgb, px).unwrap()
}

pub fn png(r: &Raster) -> Vec<u8> {
    encode_png(&r.to_dynamic()).unwrap()
}

/// Untrained toy bundles for every region of a `cols x rows` grid of 64 px
/// squares, calibrated on a handful of random boards.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
}

impl Fixture {
    pub fn models_dir(&self) -> PathBuf {
        self.dir.path().join("models")
    }
}

pub fn fixture(cols: usize, rows: usize, calibrated: bool, extra_config: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let fe = FeatureExtractor::vgg19().unwrap();
    let boards: Vec<Raster> = (0..3).map(|s| board(64, 64, 100 + s)).collect();
    for (c, r) in (0..cols).flat_map(|c| (0..rows).map(move |r| (c, r))) {
        let id = format!("grid{}_{}", c + 1, r + 1);
        let seed = (c * rows + r) as u64;
        let mut bundle = ModelBundle::new(
            &id,
            CaeConfig {
                seed,
                ..CaeConfig::toy()
            },
        )
        .unwrap();
        if calibrated {
            bundle =
                calibrate_from_maps(&bundle, &raw_maps(&bundle, &fe, &boards).unwrap()).unwrap();
        }
        bundle.save(dir.path().join("models").join(&id)).unwrap();
    }
    let config = dir.path().join("pcb-sentinel.toml");
    fs::write(&config, format!("profile = \"toy\"\n{extra_config}")).unwrap();
    Fixture { dir, config }
}

/// Content hash of every file under `dir`, paths included.
pub fn dir_hash(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

pub fn save_board(r: &Raster, path: &Path) {
    save_raster(r, path).unwrap();
}
