#![allow(dead_code)]

use pcb_sentinel_core::registration::Homography;
use pcb_sentinel_core::{ColorSpace, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth random texture: overlapping Gaussian blobs and soft-edged rectangles.
pub fn texture(h: usize, w: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![0.2f32; h * w * 3];
    let n = (h * w) / 300;
    for _ in 0..n {
        let (cx, cy) = (
            rng.random_range(0.0..w as f32),
            rng.random_range(0.0..h as f32),
        );
        let s = rng.random_range(1.5..6.0f32);
        let rect = rng.random_bool(0.4);
        let amp = rng.random_range(-0.5..0.5f32);
        let tint = [
            rng.random_range(0.5..1.0f32),
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
        ];
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

/// Random well-conditioned perspective transform about the image centre.
pub fn random_homography(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Homography {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let theta: f64 = rng.random_range(-0.15..0.15);
    let s: f64 = rng.random_range(0.92..1.08);
    let (tx, ty): (f64, f64) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
    let (p, q): (f64, f64) = (rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4));
    let (c, sn) = (theta.cos() * s, theta.sin() * s);
    let a = Homography::new([[c, -sn, cx + tx], [sn, c, cy + ty], [p, q, 1.0]]).unwrap();
    a.compose(&Homography::translation(-cx, -cy)).unwrap()
}

/// Condition number of the 3x3 matrix.
pub fn condition(h: &Homography) -> f64 {
    let m = nalgebra::Matrix3::from_fn(|r, c| h.matrix()[r][c]);
    let sv = m.svd(false, false).singular_values;
    sv.max() / sv.min()
}
