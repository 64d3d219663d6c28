//! Dataset layouts, deterministic splits and a procedural board generator.
//!
//! Gas-pump board layout (also produced by [`generate_synthetic`]):
//!
//! ```text
//! root/normal/*.{png,jpg}      anomaly-free boards
//! root/anomalous/*.{png,jpg}   modified boards
//! root/masks/*.png             one mask per modified board, same stem
//! root/manifest.json           optional: pins split membership by file name
//! ```
//!
//! MVTec-AD categories use their published layout:
//! `train/good`, `test/{defect}`, `ground_truth/{defect}/{stem}_mask.png`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_mask, save_mask, save_raster, BinaryMask, ColorSpace, Raster};

pub const SPLIT_MANIFEST: &str = "manifest.json";
pub const SYNTHETIC_RECORD: &str = "synthetic.json";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MpiPcb,
    MvtecAd,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub image: PathBuf,
    /// Absent for anomaly-free test images.
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub kind: DatasetKind,
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<TestItem>,
    /// `(width, height)` of the first image.
    pub image_size: (usize, usize),
}

impl DatasetManifest {
    pub fn test_normal(&self) -> impl Iterator<Item = &TestItem> {
        self.test.iter().filter(|t| t.mask.is_none())
    }

    pub fn test_anomalous(&self) -> impl Iterator<Item = &TestItem> {
        self.test.iter().filter(|t| t.mask.is_some())
    }
}

/// Split membership by file name, relative to `normal/`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Fractions of the whole; the test share absorbs rounding.
    Ratios(f64, f64, f64),
    Counts(usize, usize, usize),
}

/// Shuffles with `seed` and cuts into train/val/test.
pub fn split<T: Clone>(
    items: &[T],
    spec: SplitSpec,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = items.len();
    let (a, b, c) = match spec {
        SplitSpec::Counts(a, b, c) => (a, b, c),
        SplitSpec::Ratios(ra, rb, rc) => {
            if [ra, rb, rc].iter().any(|r| !(0.0..=1.0).contains(r))
                || (ra + rb + rc - 1.0).abs() > 1e-9
            {
                return Err(Error::Argument(format!(
                    "split ratios ({ra}, {rb}, {rc}) must sum to 1"
                )));
            }
            let a = (ra * n as f64).round() as usize;
            let b = ((rb * n as f64).round() as usize).min(n - a);
            (a, b, n - a - b)
        }
    };
    if a + b + c != n {
        return Err(Error::Argument(format!(
            "split counts {a}+{b}+{c} != {n} items"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..a]),
        pick(&order[a..a + b]),
        pick(&order[a + b..]),
    ))
}

/// Default gas-pump split: as many normal test images as anomalous ones, and
/// the remainder divided train:val as 1518:169.
pub fn default_split_counts(n_normal: usize, n_anomalous: usize) -> Result<(usize, usize, usize)> {
    if n_anomalous >= n_normal {
        return Err(Error::Layout(format!(
            "{n_normal} normal images cannot cover {n_anomalous} normal test slots plus training"
        )));
    }
    let rest = n_normal - n_anomalous;
    let val = ((rest * 169) as f64 / 1687.0).round() as usize;
    Ok((rest - val, val, n_anomalous))
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn require_dir(path: PathBuf) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(Error::Layout(format!(
            "missing directory {}",
            path.display()
        )))
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((w as usize, h as usize))
}

/// Loads a dataset root; file ordering is lexicographic and splits are deterministic.
pub fn load_manifest(root: impl AsRef<Path>, kind: DatasetKind) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Layout(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    match kind {
        DatasetKind::MpiPcb | DatasetKind::Synthetic => load_board_layout(root, kind),
        DatasetKind::MvtecAd => load_mvtec(root),
    }
}

fn load_board_layout(root: &Path, kind: DatasetKind) -> Result<DatasetManifest> {
    let normal = list_images(&require_dir(root.join("normal"))?)?;
    let anomalous = list_images(&require_dir(root.join("anomalous"))?)?;
    let mask_dir = require_dir(root.join("masks"))?;
    if normal.is_empty() {
        return Err(Error::Layout(format!(
            "{} holds no normal images",
            root.display()
        )));
    }
    let masks: BTreeMap<String, PathBuf> = list_images(&mask_dir)?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    let mut anomalous_items = Vec::with_capacity(anomalous.len());
    for img in anomalous {
        let mask = masks
            .get(&stem(&img))
            .cloned()
            .ok_or_else(|| Error::MaskMismatch { image: img.clone() })?;
        anomalous_items.push(TestItem {
            image: img,
            mask: Some(mask),
        });
    }

    let pinned = root.join(SPLIT_MANIFEST);
    let (train, val, test_normal) = if pinned.exists() {
        let file: SplitFile =
            serde_json::from_slice(&fs::read(&pinned).map_err(|e| Error::io(&pinned, e))?)?;
        resolve_pinned(&file, &normal, &pinned)?
    } else {
        let counts = default_split_counts(normal.len(), anomalous_items.len())?;
        let (a, b, c) = split(&normal, SplitSpec::Counts(counts.0, counts.1, counts.2), 0)?;
        (sorted(a), sorted(b), sorted(c))
    };
    let mut test: Vec<TestItem> = test_normal
        .into_iter()
        .map(|image| TestItem { image, mask: None })
        .collect();
    test.extend(anomalous_items);
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        kind,
        image_size: image_size(&normal[0])?,
        train,
        val,
        test,
    })
}

fn sorted(mut v: Vec<PathBuf>) -> Vec<PathBuf> {
    v.sort();
    v
}

type Triple = (Vec<PathBuf>, Vec<PathBuf>, Vec<PathBuf>);

fn resolve_pinned(file: &SplitFile, normal: &[PathBuf], origin: &Path) -> Result<Triple> {
    let by_name: BTreeMap<String, &PathBuf> = normal.iter().map(|p| (file_name(p), p)).collect();
    let mut seen = HashSet::new();
    let mut resolve = |names: &[String]| -> Result<Vec<PathBuf>> {
        names
            .iter()
            .map(|n| {
                if !seen.insert(n.clone()) {
                    return Err(Error::Layout(format!(
                        "{}: {n} listed twice",
                        origin.display()
                    )));
                }
                by_name.get(n).map(|p| (*p).clone()).ok_or_else(|| {
                    Error::Layout(format!("{}: {n} is not in normal/", origin.display()))
                })
            })
            .collect()
    };
    let out = (
        resolve(&file.train)?,
        resolve(&file.val)?,
        resolve(&file.test)?,
    );
    if seen.len() != normal.len() {
        return Err(Error::Layout(format!(
            "{} assigns {} of {} normal images",
            origin.display(),
            seen.len(),
            normal.len()
        )));
    }
    Ok(out)
}

fn load_mvtec(root: &Path) -> Result<DatasetManifest> {
    let good = list_images(&require_dir(root.join("train").join("good"))?)?;
    if good.is_empty() {
        return Err(Error::Layout(format!(
            "{} has no training images",
            root.display()
        )));
    }
    let test_root = require_dir(root.join("test"))?;
    let mut defects: Vec<PathBuf> = fs::read_dir(&test_root)
        .map_err(|e| Error::io(&test_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    defects.sort();
    let mut test = Vec::new();
    for dir in defects {
        let defect = file_name(&dir);
        for image in list_images(&dir)? {
            let mask = if defect == "good" {
                None
            } else {
                let m = root
                    .join("ground_truth")
                    .join(&defect)
                    .join(format!("{}_mask.png", stem(&image)));
                if !m.exists() {
                    return Err(Error::MaskMismatch { image });
                }
                Some(m)
            };
            test.push(TestItem { image, mask });
        }
    }
    let val_n = ((good.len() as f64) * 0.1).round() as usize;
    let (train, val, _) = split(&good, SplitSpec::Counts(good.len() - val_n, val_n, 0), 0)?;
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        kind: DatasetKind::MvtecAd,
        image_size: image_size(&good[0])?,
        train: sorted(train),
        val: sorted(val),
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    PastePatch,
    RemoveComponent,
    JumperLine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub board_w: usize,
    pub board_h: usize,
    /// Seed of the fixed component layout shared by every board.
    pub texture_seed: u64,
    pub component_count: usize,
    /// Inclusive range of component side lengths, px.
    pub component_size: (usize, usize),
    pub anomaly_kinds: Vec<AnomalyKind>,
    /// Inclusive range of anomaly extents, px.
    pub anomaly_size: (usize, usize),
    /// Relative per-image brightness jitter.
    pub brightness_jitter: f32,
    /// Maximum per-image sub-pixel translation, px.
    pub shift_jitter: f32,
    pub noise_std: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            board_w: 64,
            board_h: 64,
            texture_seed: 7,
            component_count: 7,
            component_size: (6, 16),
            anomaly_kinds: vec![AnomalyKind::PastePatch],
            anomaly_size: (16, 24),
            brightness_jitter: 0.05,
            shift_jitter: 0.25,
            noise_std: 0.004,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (amin, amax) = self.anomaly_size;
        let (cmin, cmax) = self.component_size;
        if amin < 4 || amin > amax || amax > self.board_w.min(self.board_h) {
            return Err(Error::Argument(format!(
                "anomaly size range {:?} must lie in [4, board side]",
                self.anomaly_size
            )));
        }
        if cmin < 4 || cmin > cmax || cmax >= self.board_w.min(self.board_h) {
            return Err(Error::Argument(
                "component sizes must be >= 4 and smaller than the board".into(),
            ));
        }
        if self.anomaly_kinds.is_empty() {
            return Err(Error::Argument(
                "at least one anomaly kind is required".into(),
            ));
        }
        if self.anomaly_kinds.contains(&AnomalyKind::RemoveComponent) && self.component_count == 0 {
            return Err(Error::Argument("remove_component needs components".into()));
        }
        Ok(())
    }
}

/// Ground truth of one generated modification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticAnnotation {
    pub file: String,
    pub kind: AnomalyKind,
    /// `(y0, x0, y1, x1)`, end-exclusive.
    pub bbox: (usize, usize, usize, usize),
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub annotations: Vec<SyntheticAnnotation>,
}

#[derive(Debug, Clone, Copy)]
struct Component {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    body: [f32; 3],
    lead: [f32; 3],
}

const BOARD_GREEN: [f32; 3] = [0.08, 0.36, 0.17];
const TRACE_GREEN: [f32; 3] = [0.16, 0.52, 0.24];
const BODIES: [[f32; 3]; 5] = [
    [0.10, 0.10, 0.12],
    [0.80, 0.70, 0.50],
    [0.55, 0.38, 0.20],
    [0.72, 0.72, 0.76],
    [0.20, 0.25, 0.55],
];

/// Fixed board artwork derived from the texture seed.
struct Layout {
    w: usize,
    h: usize,
    background: Vec<[f32; 3]>,
    components: Vec<Component>,
}

impl Layout {
    fn new(spec: &SyntheticSpec) -> Layout {
        let (w, h) = (spec.board_w, spec.board_h);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        let mut background = vec![BOARD_GREEN; w * h];
        for px in background.iter_mut() {
            let t = rng.random_range(-0.025..0.025f32);
            px.iter_mut().for_each(|v| *v += t);
        }
        let traces = (w + h) / 16 + 2;
        for _ in 0..traces {
            if rng.random_bool(0.5) {
                let y = rng.random_range(0..h);
                let (a, b) = ordered(rng.random_range(0..w), rng.random_range(0..w));
                (a..=b).for_each(|x| background[y * w + x] = TRACE_GREEN);
            } else {
                let x = rng.random_range(0..w);
                let (a, b) = ordered(rng.random_range(0..h), rng.random_range(0..h));
                (a..=b).for_each(|y| background[y * w + x] = TRACE_GREEN);
            }
        }
        let mut components: Vec<Component> = Vec::new();
        let (cmin, cmax) = spec.component_size;
        let mut attempts = 0;
        while components.len() < spec.component_count && attempts < 500 {
            attempts += 1;
            let ch = rng.random_range(cmin..=cmax);
            let cw = rng.random_range(cmin..=cmax);
            let y0 = rng.random_range(1..h - ch);
            let x0 = rng.random_range(1..w - cw);
            let clash = components.iter().any(|c| {
                y0 < c.y0 + c.h + 2
                    && c.y0 < y0 + ch + 2
                    && x0 < c.x0 + c.w + 2
                    && c.x0 < x0 + cw + 2
            });
            if clash {
                continue;
            }
            let body = BODIES[rng.random_range(0..BODIES.len())];
            let lead = if rng.random_bool(0.5) {
                [0.85, 0.85, 0.82]
            } else {
                [0.70, 0.60, 0.35]
            };
            components.push(Component {
                y0,
                x0,
                h: ch,
                w: cw,
                body,
                lead,
            });
        }
        Layout {
            w,
            h,
            background,
            components,
        }
    }

    /// Colour at continuous board coordinates, optionally omitting one component.
    fn color(&self, y: usize, x: usize, skip: Option<usize>) -> [f32; 3] {
        for (i, c) in self.components.iter().enumerate() {
            if Some(i) == skip || y < c.y0 || y >= c.y0 + c.h || x < c.x0 || x >= c.x0 + c.w {
                continue;
            }
            // Leads along the short ends, body in between.
            let horizontal = c.w >= c.h;
            let (pos, len) = if horizontal {
                (x - c.x0, c.w)
            } else {
                (y - c.y0, c.h)
            };
            let lead_len = (len / 5).max(1);
            return if pos < lead_len || pos >= len - lead_len {
                c.lead
            } else {
                c.body
            };
        }
        self.background[y * self.w + x]
    }

    fn render(&self, skip: Option<usize>) -> Vec<[f32; 3]> {
        (0..self.h)
            .flat_map(|y| (0..self.w).map(move |x| (y, x)))
            .map(|(y, x)| self.color(y, x, skip))
            .collect()
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Per-image photometric and geometric variation.
struct Jitter {
    dy: f32,
    dx: f32,
    gain: f32,
    noise_seed: u64,
}

impl Jitter {
    fn draw(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Jitter {
        let mut sym = |m: f32| {
            if m > 0.0 {
                rng.random_range(-m..=m)
            } else {
                0.0
            }
        };
        let dy = sym(spec.shift_jitter);
        let dx = sym(spec.shift_jitter);
        let gain = 1.0 + sym(spec.brightness_jitter);
        Jitter {
            dy,
            dx,
            gain,
            noise_seed: rng.random(),
        }
    }

    fn apply(&self, art: &[[f32; 3]], w: usize, h: usize, noise_std: f32) -> Result<Raster> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let normal =
            Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::Argument(e.to_string()))?;
        let at = |y: isize, x: isize| {
            art[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
        };
        let mut px = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as f32 - self.dy, x as f32 - self.dx);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                for c in 0..3 {
                    let v = at(y0, x0)[c] * (1.0 - fy) * (1.0 - fx)
                        + at(y0, x0 + 1)[c] * (1.0 - fy) * fx
                        + at(y0 + 1, x0)[c] * fy * (1.0 - fx)
                        + at(y0 + 1, x0 + 1)[c] * fy * fx;
                    let n = if noise_std > 0.0 {
                        normal.sample(&mut rng)
                    } else {
                        0.0
                    };
                    px.push(v * self.gain + n);
                }
            }
        }
        Raster::from_clamped(h, w, ColorSpace::Rgb, px)
    }
}

/// Injects one modification, returning its exact mask.
fn inject(
    img: &mut Raster,
    kind: AnomalyKind,
    layout: &Layout,
    jitter: &Jitter,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<BinaryMask> {
    let (w, h) = (spec.board_w, spec.board_h);
    let (amin, amax) = spec.anomaly_size;
    match kind {
        AnomalyKind::PastePatch => {
            let ph = rng.random_range(amin..=amax);
            let pw = rng.random_range(amin..=amax);
            let y0 = rng.random_range(0..=h - ph);
            let x0 = rng.random_range(0..=w - pw);
            // Foreign part: saturated colour with a stripe pattern, far from board green.
            let base = [
                rng.random_range(0.6..1.0),
                rng.random_range(0.0..0.3),
                rng.random_range(0.3..1.0),
            ];
            let period = rng.random_range(2..5usize);
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    let k = if ((x - x0) / period + (y - y0) / period) % 2 == 0 {
                        1.0
                    } else {
                        0.6
                    };
                    for (c, b) in base.iter().enumerate() {
                        img.set(y, x, c, b * k);
                    }
                }
            }
            Ok(BinaryMask::from_fn(h, w, |y, x| {
                (y0..y0 + ph).contains(&y) && (x0..x0 + pw).contains(&x)
            }))
        }
        AnomalyKind::RemoveComponent => {
            let i = rng.random_range(0..layout.components.len());
            let c = layout.components[i];
            let bare = jitter.apply(&layout.render(Some(i)), w, h, spec.noise_std)?;
            for y in c.y0..c.y0 + c.h {
                for x in c.x0..c.x0 + c.w {
                    for ch in 0..3 {
                        img.set(y, x, ch, bare.get(y, x, ch));
                    }
                }
            }
            Ok(BinaryMask::from_fn(h, w, |y, x| {
                (c.y0..c.y0 + c.h).contains(&y) && (c.x0..c.x0 + c.w).contains(&x)
            }))
        }
        AnomalyKind::JumperLine => {
            let color = if rng.random_bool(0.5) {
                [0.85, 0.1, 0.1]
            } else {
                [0.05, 0.05, 0.05]
            };
            let half = 1.0f32;
            loop {
                let p = [rng.random_range(0..w) as f32, rng.random_range(0..h) as f32];
                let q = [rng.random_range(0..w) as f32, rng.random_range(0..h) as f32];
                let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
                if len < amin as f32 || len > (amax * 2) as f32 {
                    continue;
                }
                let mask =
                    BinaryMask::from_fn(h, w, |y, x| seg_dist([x as f32, y as f32], p, q) <= half);
                if mask.count_ones() < 16 {
                    continue;
                }
                for y in 0..h {
                    for x in 0..w {
                        if mask.get(y, x) {
                            (0..3).for_each(|c| img.set(y, x, c, color[c]));
                        }
                    }
                }
                return Ok(mask);
            }
        }
    }
}

fn seg_dist(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((a[0] + t * dx - p[0]).powi(2) + (a[1] + t * dy - p[1]).powi(2)).sqrt()
}

/// Writes a board-layout dataset with a pinned split and ground-truth record.
///
/// Normal test images number `min(n_anomalous, n_normal / 2)`; a tenth of the
/// rest (at least one when possible) goes to validation.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    n_normal: usize,
    n_anomalous: usize,
    seed: u64,
    root: impl AsRef<Path>,
) -> Result<SyntheticRecord> {
    spec.validate()?;
    if n_normal < 2 {
        return Err(Error::Argument("need at least two normal images".into()));
    }
    let root = root.as_ref();
    for sub in ["normal", "anomalous", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let layout = Layout::new(spec);
    let art = layout.render(None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(n_normal);
    for i in 0..n_normal {
        let jitter = Jitter::draw(spec, &mut rng);
        let img = jitter.apply(&art, spec.board_w, spec.board_h, spec.noise_std)?;
        let name = format!("normal_{i:04}.png");
        save_raster(&img, root.join("normal").join(&name))?;
        names.push(name);
    }
    let mut annotations = Vec::with_capacity(n_anomalous);
    for i in 0..n_anomalous {
        let jitter = Jitter::draw(spec, &mut rng);
        let mut img = jitter.apply(&art, spec.board_w, spec.board_h, spec.noise_std)?;
        let kind = spec.anomaly_kinds[rng.random_range(0..spec.anomaly_kinds.len())];
        let mask = inject(&mut img, kind, &layout, &jitter, spec, &mut rng)?;
        let file = format!("anomalous_{i:04}.png");
        save_raster(&img, root.join("anomalous").join(&file))?;
        save_mask(&mask, root.join("masks").join(&file))?;
        annotations.push(SyntheticAnnotation {
            file,
            kind,
            bbox: mask.bounding_box().expect("injected masks are non-empty"),
            pixels: mask.count_ones(),
        });
    }
    let n_test = n_anomalous.min(n_normal / 2);
    let rest = n_normal - n_test;
    let n_val = if rest > 1 {
        ((rest as f64 * 0.1).round() as usize).max(1)
    } else {
        0
    };
    let (train, val, test) = split(&names, SplitSpec::Counts(rest - n_val, n_val, n_test), seed)?;
    let pinned = SplitFile { train, val, test };
    let path = root.join(SPLIT_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&pinned)?).map_err(|e| Error::io(&path, e))?;
    let record = SyntheticRecord {
        spec: spec.clone(),
        seed,
        n_normal,
        n_anomalous,
        annotations,
    };
    let path = root.join(SYNTHETIC_RECORD);
    fs::write(&path, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    Ok(record)
}

/// Loads a test item's mask, or an all-zero mask of `(height, width)` for normal images.
pub fn load_truth(item: &TestItem, height: usize, width: usize) -> Result<BinaryMask> {
    match &item.mask {
        Some(p) => load_mask(p),
        None => Ok(BinaryMask::zeros(height, width)),
    }
}
