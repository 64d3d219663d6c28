//! Aligns a photographed board to its reference: keypoint matching, RANSAC
//! homography, a photometric polish of the estimate, then a warp into the
//! reference frame.
//!
//! Homographies map query pixel coordinates to reference pixel coordinates.
//! Pixel `(x, y)` is centred at coordinate `(x, y)`.

mod features;
mod homography;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Raster, Resample};

pub use features::{Keypoint, DESCRIPTOR_LEN};
pub use homography::{
    estimate_homography, estimate_homography_fit, fit_dlt, refine_geometric, Homography,
    HomographyFit, PointPair, MIN_INLIER_RATIO,
};

use features::Plane;

/// Smallest image side accepted for matching.
pub const MIN_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Lowe ratio for descriptor matching.
    pub ratio: f32,
    pub reproj_threshold: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Mean reprojection error above this fails the registration.
    pub quality_ceiling_px: f64,
    pub max_keypoints: usize,
    /// Images are downscaled to this longest side before keypoint detection.
    pub max_side: usize,
    /// Gauss-Newton iterations per level of the photometric polish; 0 disables it.
    pub photometric_iters: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            ratio: 0.75,
            reproj_threshold: 3.0,
            max_iters: 2000,
            seed: 0,
            quality_ceiling_px: 3.0,
            max_keypoints: 4000,
            max_side: 2048,
            photometric_iters: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// The query resampled onto the reference grid, zero outside the query frame.
    pub warped: Raster,
    pub homography: Homography,
    pub match_count: usize,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    /// Mean transfer error of the RANSAC inliers, in reference pixels.
    pub mean_reprojection_error: f64,
}

fn gray_plane(img: &Raster) -> Plane {
    let g = img.to_gray();
    Plane::new(g.height(), g.width(), g.into_pixels())
}

/// Keypoints of a raster, in its own pixel coordinates.
pub fn detect_keypoints(
    img: &Raster,
    max_keypoints: usize,
    max_side: usize,
) -> Result<Vec<Keypoint>> {
    if img.height() < MIN_SIDE || img.width() < MIN_SIDE {
        return Err(Error::Argument(format!(
            "image {}x{} is smaller than {MIN_SIDE}x{MIN_SIDE}",
            img.width(),
            img.height()
        )));
    }
    let longest = img.height().max(img.width());
    let (plane, scale) = if max_side > 0 && longest > max_side {
        let s = longest as f64 / max_side as f64;
        let h = ((img.height() as f64 / s).round() as usize).max(1);
        let w = ((img.width() as f64 / s).round() as usize).max(1);
        (
            gray_plane(&img.resize_bilinear(h, w)?),
            (
                img.width() as f64 / w as f64,
                img.height() as f64 / h as f64,
            ),
        )
    } else {
        (gray_plane(img), (1.0, 1.0))
    };
    let mut kps = features::detect(&plane, max_keypoints);
    if scale != (1.0, 1.0) {
        for k in &mut kps {
            k.x = ((k.x as f64 + 0.5) * scale.0 - 0.5) as f32;
            k.y = ((k.y as f64 + 0.5) * scale.1 - 0.5) as f32;
            k.sigma *= scale.0.max(scale.1) as f32;
        }
    }
    Ok(kps)
}

/// Ratio-tested correspondences between two images.
pub fn detect_and_match(query: &Raster, reference: &Raster, ratio: f32) -> Result<Vec<PointPair>> {
    detect_and_match_with(
        query,
        reference,
        &RegistrationConfig {
            ratio,
            ..RegistrationConfig::default()
        },
    )
}

pub fn detect_and_match_with(
    query: &Raster,
    reference: &Raster,
    cfg: &RegistrationConfig,
) -> Result<Vec<PointPair>> {
    if !(cfg.ratio > 0.0 && cfg.ratio < 1.0) {
        return Err(Error::Argument(format!(
            "ratio {} outside (0, 1)",
            cfg.ratio
        )));
    }
    let kq = detect_keypoints(query, cfg.max_keypoints, cfg.max_side)?;
    let kr = detect_keypoints(reference, cfg.max_keypoints, cfg.max_side)?;
    let pairs: Vec<PointPair> = features::match_descriptors(&kq, &kr, cfg.ratio)?
        .into_iter()
        .map(|(q, r)| {
            PointPair::new(
                [kq[q].x as f64, kq[q].y as f64],
                [kr[r].x as f64, kr[r].y as f64],
            )
        })
        .collect();
    if pairs.len() < 4 {
        return Err(Error::InsufficientFeatures { found: pairs.len() });
    }
    Ok(pairs)
}

/// Resamples `img` onto an `out_h x out_w` grid through `h`: output pixel `p`
/// takes the bilinear value at `h^-1(p)`, or 0 outside the source frame.
pub fn warp(img: &Raster, h: &Homography, out_h: usize, out_w: usize) -> Result<Raster> {
    let inv = h.inverse()?;
    let ch = img.channels();
    let planes: Vec<Plane> = (0..ch)
        .map(|c| {
            Plane::new(
                img.height(),
                img.width(),
                img.pixels().iter().skip(c).step_by(ch).copied().collect(),
            )
        })
        .collect();
    let mut out = vec![0.0f32; out_h * out_w * ch];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            for (c, plane) in planes.iter().enumerate() {
                if let Some(v) = plane.sample(sx, sy) {
                    out[(y * out_w + x) * ch + c] = v;
                }
            }
        }
    }
    Raster::from_clamped(out_h, out_w, img.color_space(), out)
}

fn mean_error(pairs: &[PointPair], flags: &[bool], h: &Homography) -> f64 {
    let (sum, n) = pairs
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f)
        .fold((0.0, 0usize), |(s, n), (p, _)| (s + p.error(h), n + 1));
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// Similarity taking pixel coordinates to roughly `[-1, 1]`.
#[derive(Clone, Copy)]
struct Frame {
    cx: f64,
    cy: f64,
    s: f64,
}

impl Frame {
    fn of(h: usize, w: usize) -> Frame {
        Frame {
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            s: (h.max(w) as f64 / 2.0).max(1.0),
        }
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        let k = 1.0 / self.s;
        [
            [k, 0.0, -self.cx * k],
            [0.0, k, -self.cy * k],
            [0.0, 0.0, 1.0],
        ]
    }
}

/// Intensity alignment of a moving image onto the pixel grid of a fixed one.
struct Photometric<'a> {
    fixed: &'a Plane,
    moving: Plane,
    gx: Plane,
    gy: Plane,
    ff: Frame,
    mf: Frame,
    samples: Vec<(usize, usize)>,
}

impl<'a> Photometric<'a> {
    fn new(fixed: &'a Plane, moving: Plane) -> Photometric<'a> {
        let (h, w) = (moving.h, moving.w);
        let mut gx = vec![0.0; h * w];
        let mut gy = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(w - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(h - 1);
                gx[y * w + x] = (moving.at(y, xr) - moving.at(y, xl)) / (xr - xl).max(1) as f32;
                gy[y * w + x] = (moving.at(yd, x) - moving.at(yu, x)) / (yd - yu).max(1) as f32;
            }
        }
        // Subsample large boards to about 200k residuals; skip a two-pixel rim.
        let stride = ((fixed.h * fixed.w) as f64 / 200_000.0)
            .sqrt()
            .ceil()
            .max(1.0) as usize;
        let margin = 2;
        let samples = (margin..fixed.h.saturating_sub(margin))
            .step_by(stride)
            .flat_map(|y| {
                (margin..fixed.w.saturating_sub(margin))
                    .step_by(stride)
                    .map(move |x| (y, x))
            })
            .collect();
        Photometric {
            fixed,
            gx: Plane::new(h, w, gx),
            gy: Plane::new(h, w, gy),
            ff: Frame::of(fixed.h, fixed.w),
            mf: Frame::of(h, w),
            moving,
            samples,
        }
    }

    /// Maps a fixed-grid pixel through normalized params `p` into the moving image.
    #[inline]
    fn map(&self, p: &[f64; 8], y: usize, x: usize) -> (f64, f64, f64, f64, f64) {
        let xn = (x as f64 - self.ff.cx) / self.ff.s;
        let yn = (y as f64 - self.ff.cy) / self.ff.s;
        let d = p[6] * xn + p[7] * yn + 1.0;
        let u = (p[0] * xn + p[1] * yn + p[2]) / d;
        let v = (p[3] * xn + p[4] * yn + p[5]) / d;
        (xn, yn, d, u, v)
    }

    fn in_query(&self, qx: f64, qy: f64) -> bool {
        qx >= 1.0
            && qy >= 1.0
            && qx <= (self.moving.w - 2) as f64
            && qy <= (self.moving.h - 2) as f64
    }

    /// Mean squared residual and sample count.
    fn cost(&self, p: &[f64; 8]) -> (f64, usize) {
        let (mut sum, mut n) = (0.0, 0);
        for &(y, x) in &self.samples {
            let (_, _, _, u, v) = self.map(p, y, x);
            let (qx, qy) = (u * self.mf.s + self.mf.cx, v * self.mf.s + self.mf.cy);
            if !self.in_query(qx, qy) {
                continue;
            }
            if let Some(q) = self.moving.sample(qx, qy) {
                let r = (q - self.fixed.at(y, x)) as f64;
                sum += r * r;
                n += 1;
            }
        }
        (
            if n == 0 {
                f64::INFINITY
            } else {
                sum / n as f64
            },
            n,
        )
    }

    fn normal_equations(
        &self,
        p: &[f64; 8],
    ) -> (nalgebra::SMatrix<f64, 8, 8>, nalgebra::SVector<f64, 8>) {
        let mut jtj = nalgebra::SMatrix::<f64, 8, 8>::zeros();
        let mut jtr = nalgebra::SVector::<f64, 8>::zeros();
        for &(y, x) in &self.samples {
            let (xn, yn, d, u, v) = self.map(p, y, x);
            let (qx, qy) = (u * self.mf.s + self.mf.cx, v * self.mf.s + self.mf.cy);
            if !self.in_query(qx, qy) {
                continue;
            }
            let (Some(q), Some(gx), Some(gy)) = (
                self.moving.sample(qx, qy),
                self.gx.sample(qx, qy),
                self.gy.sample(qx, qy),
            ) else {
                continue;
            };
            let r = (q - self.fixed.at(y, x)) as f64;
            let (gx, gy) = (gx as f64 * self.mf.s, gy as f64 * self.mf.s);
            let j = nalgebra::SVector::<f64, 8>::from_column_slice(&[
                gx * xn / d,
                gx * yn / d,
                gx / d,
                gy * xn / d,
                gy * yn / d,
                gy / d,
                -(gx * u + gy * v) * xn / d,
                -(gx * u + gy * v) * yn / d,
            ]);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        (jtj, jtr)
    }

    fn run(&self, mut p: [f64; 8], iterations: usize) -> [f64; 8] {
        let (mut current, n0) = self.cost(&p);
        let mut lambda = 1e-4;
        for _ in 0..iterations {
            let (jtj, jtr) = self.normal_equations(&p);
            let mut accepted = false;
            for _ in 0..8 {
                let mut damped = jtj;
                for i in 0..8 {
                    damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
                }
                let Some(step) = damped.lu().solve(&(-jtr)) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut cand = p;
                for (c, s) in cand.iter_mut().zip(step.iter()) {
                    *c += s;
                }
                let (c, n) = self.cost(&cand);
                if c.is_finite() && c < current && 2 * n >= n0 {
                    let gain = current - c;
                    p = cand;
                    current = c;
                    lambda = (lambda * 0.1).max(1e-10);
                    accepted = gain > 1e-14 * current.max(1e-12);
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        p
    }
}

/// Converts between a fixed->moving pixel homography and normalized parameters.
fn to_params(w: &Homography, ff: Frame, mf: Frame) -> Option<[f64; 8]> {
    let tm = Homography::new(mf.matrix()).ok()?;
    let tf_inv = Homography::new(ff.matrix()).ok()?.inverse().ok()?;
    let m = tm.compose(w).ok()?.compose(&tf_inv).ok()?.matrix();
    Some([
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1],
    ])
}

fn from_params(p: &[f64; 8], ff: Frame, mf: Frame) -> Option<Homography> {
    let n = Homography::new([[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], 1.0]]).ok()?;
    let tm_inv = Homography::new(mf.matrix()).ok()?.inverse().ok()?;
    let tf = Homography::new(ff.matrix()).ok()?;
    tm_inv.compose(&n).ok()?.compose(&tf).ok()
}

/// Polishes a query->reference homography by minimizing intensity differences
/// over the query grid, sampling the reference. Returns `None` when the polish
/// fails or does not lower the photometric cost.
fn photometric_refine(
    query: &Plane,
    reference: &Plane,
    h: &Homography,
    iterations: usize,
) -> Option<Homography> {
    let (qf, rf) = (
        Frame::of(query.h, query.w),
        Frame::of(reference.h, reference.w),
    );
    let mut p = to_params(h, qf, rf)?;
    let fine = Photometric::new(query, reference.clone());
    let (start, _) = fine.cost(&p);
    for sigma in [1.5f32, 0.0] {
        let query_blur = query.blur(sigma);
        let level = Photometric::new(&query_blur, reference.blur(sigma));
        p = level.run(p, iterations);
    }
    let (end, _) = fine.cost(&p);
    if !(end < start) {
        return None;
    }
    from_params(&p, qf, rf)
}

/// Registers `query` onto `reference`.
pub fn register(
    query: &Raster,
    reference: &Raster,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let pairs = detect_and_match_with(query, reference, cfg)?;
    let fit = estimate_homography_fit(&pairs, cfg.reproj_threshold, cfg.max_iters, cfg.seed)?;
    let mut h = fit.homography;
    let mut err = mean_error(&pairs, &fit.inliers, &h);
    if cfg.photometric_iters > 0 {
        if let Some(polished) = photometric_refine(
            &gray_plane(query),
            &gray_plane(reference),
            &h,
            cfg.photometric_iters,
        ) {
            let polished_err = mean_error(&pairs, &fit.inliers, &polished);
            // Keep the polish only while it stays consistent with the keypoints.
            if polished_err <= err + 1.0 {
                h = polished;
                err = polished_err;
            }
        }
    }
    if err > cfg.quality_ceiling_px {
        return Err(Error::RegistrationQuality {
            error_px: err,
            ceiling_px: cfg.quality_ceiling_px,
        });
    }
    Ok(RegistrationResult {
        warped: warp(query, &h, reference.height(), reference.width())?,
        homography: h,
        match_count: pairs.len(),
        inlier_count: fit.inlier_count,
        inlier_ratio: fit.inlier_ratio,
        mean_reprojection_error: err,
    })
}
