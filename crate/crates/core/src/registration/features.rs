//! Scale-space keypoints with oriented gradient-histogram descriptors, in the
//! style of SIFT: difference-of-Gaussian extrema, sub-pixel refinement, a
//! dominant-orientation histogram and a 4x4x8 descriptor.

use std::f32::consts::PI;

use crate::error::{Error, Result};

const INTERVALS: usize = 3;
const SIGMA0: f32 = 1.6;
const ASSUMED_BLUR: f32 = 0.5;
const CONTRAST: f32 = 0.04;
const EDGE_RATIO: f32 = 10.0;
const BORDER: usize = 5;
const ORI_BINS: usize = 36;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
pub const DESCRIPTOR_LEN: usize = DESC_WIDTH * DESC_WIDTH * DESC_BINS;

/// Single-channel `f32` plane, row-major.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Plane {
        debug_assert_eq!(data.len(), h * w);
        Plane { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    /// Bilinear sample at continuous pixel-centre coordinates; `None` outside.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> Option<f32> {
        // A hair of tolerance keeps near-identity warps from dropping the rim.
        const EPS: f64 = 1e-6;
        let (xm, ym) = ((self.w - 1) as f64, (self.h - 1) as f64);
        if !(x >= -EPS && y >= -EPS && x <= xm + EPS && y <= ym + EPS) {
            return None;
        }
        let (x, y) = (x.clamp(0.0, xm), y.clamp(0.0, ym));
        let x0 = (x.floor() as usize).min(self.w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.h.saturating_sub(2));
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let top = self.at(y0, x0) + (self.at(y0, x1) - self.at(y0, x0)) * fx;
        let bot = self.at(y1, x0) + (self.at(y1, x1) - self.at(y1, x0)) * fx;
        Some(top + (bot - top) * fy)
    }

    pub fn blur(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / sum).collect();
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..self.h {
            let row = &self.data[y * self.w..(y + 1) * self.w];
            for x in 0..self.w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * row[clampi(x as isize + k as isize - radius, self.w)];
                }
                tmp[y * self.w + x] = acc;
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = clampi(y as isize + k as isize - radius, self.h);
                let src = &tmp[sy * self.w..(sy + 1) * self.w];
                let dst = &mut out[y * self.w..(y + 1) * self.w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += kv * s;
                }
            }
        }
        Plane::new(self.h, self.w, out)
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.at(2 * y, 2 * x))
            .collect();
        Plane::new(h, w, data)
    }

    fn sub(&self, other: &Plane) -> Plane {
        Plane::new(
            self.h,
            self.w,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| b - a)
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Position in input pixel coordinates.
    pub x: f32,
    pub y: f32,
    /// Scale in input pixels.
    pub sigma: f32,
    /// Dominant gradient direction in radians.
    pub angle: f32,
    pub response: f32,
    pub descriptor: Vec<f32>,
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

fn build_pyramid(base: &Plane) -> Vec<Octave> {
    let min_side = base.h.min(base.w) as f32;
    let n_oct = ((min_side.log2() - 4.0).floor() as usize).max(1);
    let k = 2f32.powf(1.0 / INTERVALS as f32);
    let increments: Vec<f32> = (1..INTERVALS + 3)
        .map(|i| {
            let prev = SIGMA0 * k.powi(i as i32 - 1);
            let cur = prev * k;
            (cur * cur - prev * prev).sqrt()
        })
        .collect();
    let mut octaves = Vec::with_capacity(n_oct);
    let mut first = base.blur((SIGMA0 * SIGMA0 - ASSUMED_BLUR * ASSUMED_BLUR).sqrt());
    for _ in 0..n_oct {
        let mut gauss = vec![first];
        for s in &increments {
            let next = gauss.last().unwrap().blur(*s);
            gauss.push(next);
        }
        let dog = gauss.windows(2).map(|w| w[0].sub(&w[1])).collect();
        first = gauss[INTERVALS].downsample();
        octaves.push(Octave { gauss, dog });
        if first.h < 2 * BORDER + 3 || first.w < 2 * BORDER + 3 {
            break;
        }
    }
    octaves
}

fn is_extremum(dog: &[Plane], s: usize, y: usize, x: usize) -> bool {
    let v = dog[s].at(y, x);
    let mut is_max = true;
    let mut is_min = true;
    for plane in &dog[s - 1..=s + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = plane.at(yy, xx);
                if std::ptr::eq(plane, &dog[s]) && yy == y && xx == x {
                    continue;
                }
                is_max &= v > n;
                is_min &= v < n;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

/// Sub-pixel refinement; returns `(x, y, layer, response)` in octave coordinates.
fn refine(dog: &[Plane], mut s: usize, mut y: usize, mut x: usize) -> Option<(f32, f32, f32, f32)> {
    let (h, w) = (dog[0].h, dog[0].w);
    for _ in 0..5 {
        let d = |ds: isize, dy: isize, dx: isize| {
            dog[(s as isize + ds) as usize]
                .at((y as isize + dy) as usize, (x as isize + dx) as usize)
        };
        let v = d(0, 0, 0);
        let g = [
            0.5 * (d(0, 0, 1) - d(0, 0, -1)),
            0.5 * (d(0, 1, 0) - d(0, -1, 0)),
            0.5 * (d(1, 0, 0) - d(-1, 0, 0)),
        ];
        let dxx = d(0, 0, 1) + d(0, 0, -1) - 2.0 * v;
        let dyy = d(0, 1, 0) + d(0, -1, 0) - 2.0 * v;
        let dss = d(1, 0, 0) + d(-1, 0, 0) - 2.0 * v;
        let dxy = 0.25 * (d(0, 1, 1) - d(0, 1, -1) - d(0, -1, 1) + d(0, -1, -1));
        let dxs = 0.25 * (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1));
        let dys = 0.25 * (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0));
        let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let off = hess
            .lu()
            .solve(&nalgebra::Vector3::new(-g[0], -g[1], -g[2]))?;
        if off.iter().all(|o| o.abs() < 0.5) {
            let response = v + 0.5 * (g[0] * off[0] + g[1] * off[1] + g[2] * off[2]);
            if response.abs() < CONTRAST / INTERVALS as f32 {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            if det <= 0.0 || tr * tr * EDGE_RATIO >= (EDGE_RATIO + 1.0).powi(2) * det {
                return None;
            }
            return Some((
                x as f32 + off[0],
                y as f32 + off[1],
                s as f32 + off[2],
                response,
            ));
        }
        if off.iter().any(|o| !o.is_finite() || o.abs() > 1e3) {
            return None;
        }
        x = (x as isize + off[0].round() as isize) as usize;
        y = (y as isize + off[1].round() as isize) as usize;
        s = (s as isize + off[2].round() as isize) as usize;
        if !(1..=INTERVALS).contains(&s)
            || x < BORDER
            || y < BORDER
            || x >= w - BORDER
            || y >= h - BORDER
        {
            return None;
        }
    }
    None
}

fn gradient(img: &Plane, y: usize, x: usize) -> (f32, f32) {
    (
        img.at(y, x + 1) - img.at(y, x - 1),
        img.at(y + 1, x) - img.at(y - 1, x),
    )
}

fn orientations(img: &Plane, x: f32, y: f32, sigma: f32) -> Vec<f32> {
    let sig_w = 1.5 * sigma;
    let radius = (3.0 * sig_w).round() as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = [0f32; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if px < 1 || py < 1 || px >= img.w as isize - 1 || py >= img.h as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, py as usize, px as usize);
            let weight = (-((dx * dx + dy * dy) as f32) / (2.0 * sig_w * sig_w)).exp();
            let bin = ((gy.atan2(gx) + 2.0 * PI) * ORI_BINS as f32 / (2.0 * PI)).round() as usize
                % ORI_BINS;
            hist[bin] += weight * (gx * gx + gy * gy).sqrt();
        }
    }
    let smooth: Vec<f32> = (0..ORI_BINS)
        .map(|i| {
            let at = |o: isize| hist[(i as isize + o).rem_euclid(ORI_BINS as isize) as usize];
            (at(-2) + at(2)) / 16.0 + (at(-1) + at(1)) * 4.0 / 16.0 + at(0) * 6.0 / 16.0
        })
        .collect();
    let peak = smooth.iter().cloned().fold(0.0, f32::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..ORI_BINS {
        let l = smooth[(i + ORI_BINS - 1) % ORI_BINS];
        let r = smooth[(i + 1) % ORI_BINS];
        let c = smooth[i];
        if c > l && c > r && c >= 0.8 * peak {
            let shift = 0.5 * (l - r) / (l - 2.0 * c + r);
            let mut angle = (i as f32 + shift) * 2.0 * PI / ORI_BINS as f32;
            if angle >= PI {
                angle -= 2.0 * PI;
            }
            out.push(angle);
        }
    }
    out
}

fn descriptor(img: &Plane, x: f32, y: f32, sigma: f32, angle: f32) -> Vec<f32> {
    let d = DESC_WIDTH as f32;
    let hist_width = 3.0 * sigma;
    let radius = (hist_width * std::f32::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize;
    let (cos_t, sin_t) = (angle.cos() / hist_width, angle.sin() / hist_width);
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = vec![0f32; (DESC_WIDTH + 2) * (DESC_WIDTH + 2) * (DESC_BINS + 2)];
    let idx = |r: usize, c: usize, o: usize| (r * (DESC_WIDTH + 2) + c) * (DESC_BINS + 2) + o;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let c_rot = dx as f32 * cos_t + dy as f32 * sin_t;
            let r_rot = -(dx as f32) * sin_t + dy as f32 * cos_t;
            let rbin = r_rot + d / 2.0 - 0.5;
            let cbin = c_rot + d / 2.0 - 0.5;
            let (px, py) = (cx + dx, cy + dy);
            if rbin <= -1.0 || rbin >= d || cbin <= -1.0 || cbin >= d {
                continue;
            }
            if px < 1 || py < 1 || px >= img.w as isize - 1 || py >= img.h as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, py as usize, px as usize);
            let weight = (-(c_rot * c_rot + r_rot * r_rot) / (0.5 * d * d)).exp();
            let mag = (gx * gx + gy * gy).sqrt() * weight;
            let obin = (gy.atan2(gx) - angle).rem_euclid(2.0 * PI) * DESC_BINS as f32 / (2.0 * PI);
            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0, o0) = ((r0 + 1.0) as usize, (c0 + 1.0) as usize, o0 as usize);
            for (ri, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (ci, wc) in [(0, 1.0 - fc), (1, fc)] {
                    for (oi, wo) in [(0, 1.0 - fo), (1, fo)] {
                        hist[idx(r0 + ri, c0 + ci, o0 + oi)] += mag * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut desc = Vec::with_capacity(DESCRIPTOR_LEN);
    for r in 0..DESC_WIDTH {
        for c in 0..DESC_WIDTH {
            // Orientation bins wrap: bin DESC_BINS is bin 0.
            let wrap = hist[idx(r + 1, c + 1, DESC_BINS)] + hist[idx(r + 1, c + 1, DESC_BINS + 1)];
            for o in 0..DESC_BINS {
                let extra = if o == 0 { wrap } else { 0.0 };
                desc.push(hist[idx(r + 1, c + 1, o)] + extra);
            }
        }
    }
    normalize_descriptor(&mut desc);
    desc
}

fn normalize_descriptor(desc: &mut [f32]) {
    let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
    for v in desc.iter_mut() {
        *v = (*v / norm).min(0.2);
    }
    let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
    for v in desc.iter_mut() {
        *v /= norm;
    }
}

/// Detects keypoints on a gray plane, strongest first.
pub(crate) fn detect(plane: &Plane, max_keypoints: usize) -> Vec<Keypoint> {
    let mut kps = Vec::new();
    let threshold = 0.5 * CONTRAST / INTERVALS as f32;
    for (o, oct) in build_pyramid(plane).iter().enumerate() {
        let (h, w) = (oct.dog[0].h, oct.dog[0].w);
        if h <= 2 * BORDER || w <= 2 * BORDER {
            break;
        }
        let factor = (1usize << o) as f32;
        for s in 1..=INTERVALS {
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    if oct.dog[s].at(y, x).abs() <= threshold || !is_extremum(&oct.dog, s, y, x) {
                        continue;
                    }
                    let Some((kx, ky, layer, response)) = refine(&oct.dog, s, y, x) else {
                        continue;
                    };
                    let sigma = SIGMA0 * 2f32.powf(layer / INTERVALS as f32);
                    let img = &oct.gauss[(layer.round() as usize).clamp(1, INTERVALS)];
                    for angle in orientations(img, kx, ky, sigma) {
                        kps.push(Keypoint {
                            x: kx * factor,
                            y: ky * factor,
                            sigma: sigma * factor,
                            angle,
                            response: response.abs(),
                            descriptor: descriptor(img, kx, ky, sigma, angle),
                        });
                    }
                }
            }
        }
    }
    kps.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.angle.total_cmp(&b.angle))
    });
    kps.truncate(max_keypoints);
    kps
}

/// Nearest-neighbour matching with Lowe's ratio test. Returns `(query index, reference index)`.
pub(crate) fn match_descriptors(
    query: &[Keypoint],
    reference: &[Keypoint],
    ratio: f32,
) -> Result<Vec<(usize, usize)>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("ratio {ratio} outside (0, 1)")));
    }
    if reference.len() < 2 || query.is_empty() {
        return Ok(Vec::new());
    }
    let (m, n, k) = (query.len(), reference.len(), DESCRIPTOR_LEN);
    let a: Vec<f32> = query
        .iter()
        .flat_map(|kp| kp.descriptor.iter().copied())
        .collect();
    let b: Vec<f32> = reference
        .iter()
        .flat_map(|kp| kp.descriptor.iter().copied())
        .collect();
    let mut dots = vec![0f32; m * n];
    // dots = A (m x k) * B^T (k x n); descriptors are unit vectors so
    // squared distance is 2 - 2 dot.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            dots.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let mut out = Vec::new();
    for (qi, row) in dots.chunks_exact(n).enumerate() {
        let (mut best, mut second, mut arg) = (f32::INFINITY, f32::INFINITY, 0);
        for (ri, &dot) in row.iter().enumerate() {
            let d = (2.0 - 2.0 * dot).max(0.0);
            if d < best {
                second = best;
                best = d;
                arg = ri;
            } else if d < second {
                second = d;
            }
        }
        if best.sqrt() < ratio * second.sqrt() {
            out.push((qi, arg));
        }
    }
    Ok(out)
}
