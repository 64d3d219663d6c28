//! Planar homographies: normalized DLT, seeded RANSAC and geometric
//! least-squares refinement.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this best inlier ratio RANSAC reports no consensus.
pub const MIN_INLIER_RATIO: f64 = 0.2;

/// A 3x3 projective transform normalized so that `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    h: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(h: [[f64; 3]; 3]) -> Result<Homography> {
        let m = to_matrix(&h);
        if !h.iter().flatten().all(|v| v.is_finite()) || h[2][2].abs() < 1e-300 {
            return Err(Error::Argument(
                "homography must be finite with h[2][2] != 0".into(),
            ));
        }
        let m = m / h[2][2];
        if m.determinant().abs() <= 1e-12 {
            return Err(Error::Argument("homography is singular".into()));
        }
        Ok(Homography { h: from_matrix(&m) })
    }

    pub fn identity() -> Homography {
        Homography {
            h: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Pure translation by `(tx, ty)`.
    pub fn translation(tx: f64, ty: f64) -> Homography {
        Homography {
            h: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.h
    }

    pub fn determinant(&self) -> f64 {
        to_matrix(&self.h).determinant()
    }

    /// Maps a point; non-finite when it lands on the line at infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.h;
        let d = h[2][0] * x + h[2][1] * y + h[2][2];
        (
            (h[0][0] * x + h[0][1] * y + h[0][2]) / d,
            (h[1][0] * x + h[1][1] * y + h[1][2]) / d,
        )
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = to_matrix(&self.h)
            .try_inverse()
            .ok_or_else(|| Error::Argument("homography is singular".into()))?;
        Homography::new(from_matrix(&inv))
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::new(from_matrix(&(to_matrix(&self.h) * to_matrix(&other.h))))
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.h
            .iter()
            .flatten()
            .zip(other.h.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn to_matrix(h: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| h[r][c])
}

fn from_matrix(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut h = [[0.0; 3]; 3];
    for (r, row) in h.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    h
}

/// A correspondence from the query image to the reference image, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub query: [f64; 2],
    pub reference: [f64; 2],
}

impl PointPair {
    pub fn new(query: [f64; 2], reference: [f64; 2]) -> PointPair {
        PointPair { query, reference }
    }

    /// Distance between `h(query)` and `reference`.
    pub fn error(&self, h: &Homography) -> f64 {
        let (x, y) = h.apply(self.query[0], self.query[1]);
        let e = ((x - self.reference[0]).powi(2) + (y - self.reference[1]).powi(2)).sqrt();
        if e.is_finite() {
            e
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyFit {
    pub homography: Homography,
    /// Per-pair inlier flags under the final model.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(points: impl Iterator<Item = [f64; 2]> + Clone) -> Matrix3<f64> {
    let n = points.clone().count().max(1) as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean = points
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean > 1e-12 {
        std::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = t * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Normalized direct linear transform over all pairs (algebraic least squares).
pub fn fit_dlt(pairs: &[PointPair]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientFeatures { found: pairs.len() });
    }
    let tq = normalizer(pairs.iter().map(|p| p.query));
    let tr = normalizer(pairs.iter().map(|p| p.reference));
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, p) in pairs.iter().enumerate() {
        let [x, y] = transform(&tq, p.query);
        let [u, v] = transform(&tr, p.reference);
        let r = 2 * i;
        for (c, val) in [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]
            .into_iter()
            .enumerate()
        {
            a[(r, c)] = val;
        }
        for (c, val) in [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]
            .into_iter()
            .enumerate()
        {
            a[(r + 1, c)] = val;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::DegenerateConfiguration)?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::DegenerateConfiguration)?;
    let hn = Matrix3::from_fn(|r, c| v_t[(k, 3 * r + c)]);
    let tr_inv = tr.try_inverse().ok_or(Error::DegenerateConfiguration)?;
    let h = tr_inv * hn * tq;
    Homography::new(from_matrix(&h)).map_err(|_| Error::DegenerateConfiguration)
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
    let (vx, vy) = (c[0] - a[0], c[1] - a[1]);
    let cross = (ux * vy - uy * vx).abs();
    cross <= 1e-3 * (ux.hypot(uy) * vx.hypot(vy)) + 1e-12
}

fn degenerate_sample(pairs: &[PointPair], idx: &[usize]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|t| {
        let q = |i: usize| pairs[idx[t[i]]].query;
        let r = |i: usize| pairs[idx[t[i]]].reference;
        collinear(q(0), q(1), q(2)) || collinear(r(0), r(1), r(2))
    })
}

fn score(pairs: &[PointPair], h: &Homography, threshold: f64) -> (usize, f64, Vec<bool>) {
    let mut count = 0;
    let mut total = 0.0;
    let flags = pairs
        .iter()
        .map(|p| {
            let e = p.error(h);
            let inlier = e <= threshold;
            if inlier {
                count += 1;
                total += e;
            }
            inlier
        })
        .collect();
    (count, total, flags)
}

fn select(pairs: &[PointPair], flags: &[bool]) -> Vec<PointPair> {
    pairs
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f)
        .map(|(p, _)| *p)
        .collect()
}

/// Levenberg-Marquardt on the summed squared transfer error, in normalized coordinates.
pub fn refine_geometric(pairs: &[PointPair], init: &Homography, iterations: usize) -> Homography {
    if pairs.len() < 4 {
        return *init;
    }
    let tq = normalizer(pairs.iter().map(|p| p.query));
    let tr = normalizer(pairs.iter().map(|p| p.reference));
    let (Some(tr_inv), Some(tq_inv)) = (tr.try_inverse(), tq.try_inverse()) else {
        return *init;
    };
    let pts: Vec<([f64; 2], [f64; 2])> = pairs
        .iter()
        .map(|p| (transform(&tq, p.query), transform(&tr, p.reference)))
        .collect();
    let hn = tr * to_matrix(&init.h) * tq_inv;
    let hn = hn / hn[(2, 2)];
    let mut params = SVector::<f64, 8>::from_fn(|i, _| hn[(i / 3, i % 3)]);
    let cost = |p: &SVector<f64, 8>| -> f64 {
        pts.iter()
            .map(|(q, r)| {
                let d = p[6] * q[0] + p[7] * q[1] + 1.0;
                let u = (p[0] * q[0] + p[1] * q[1] + p[2]) / d;
                let v = (p[3] * q[0] + p[4] * q[1] + p[5]) / d;
                (u - r[0]).powi(2) + (v - r[1]).powi(2)
            })
            .sum()
    };
    let mut current = cost(&params);
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let mut jtj = SMatrix::<f64, 8, 8>::zeros();
        let mut jtr = SVector::<f64, 8>::zeros();
        for (q, r) in &pts {
            let (x, y) = (q[0], q[1]);
            let d = params[6] * x + params[7] * y + 1.0;
            let u = (params[0] * x + params[1] * y + params[2]) / d;
            let v = (params[3] * x + params[4] * y + params[5]) / d;
            let ju = SVector::<f64, 8>::from_column_slice(&[
                x / d,
                y / d,
                1.0 / d,
                0.0,
                0.0,
                0.0,
                -u * x / d,
                -u * y / d,
            ]);
            let jv = SVector::<f64, 8>::from_column_slice(&[
                0.0,
                0.0,
                0.0,
                x / d,
                y / d,
                1.0 / d,
                -v * x / d,
                -v * y / d,
            ]);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * (u - r[0]) + jv * (v - r[1]);
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj;
            for i in 0..8 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = params + step;
            let c = cost(&candidate);
            if c.is_finite() && c < current {
                params = candidate;
                current = c;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || current < 1e-24 {
            break;
        }
    }
    let hn = Matrix3::new(
        params[0], params[1], params[2], params[3], params[4], params[5], params[6], params[7], 1.0,
    );
    Homography::new(from_matrix(&(tr_inv * hn * tq))).unwrap_or(*init)
}

/// RANSAC over minimal 4-point samples followed by least squares on the consensus set.
pub fn estimate_homography_fit(
    pairs: &[PointPair],
    reproj_threshold: f64,
    max_iters: usize,
    seed: u64,
) -> Result<HomographyFit> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientFeatures { found: pairs.len() });
    }
    if !(reproj_threshold > 0.0) || max_iters == 0 {
        return Err(Error::Argument(
            "reprojection threshold and iteration count must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, f64, Homography)> = None;
    for _ in 0..max_iters {
        let idx = sample(&mut rng, pairs.len(), 4).into_vec();
        if degenerate_sample(pairs, &idx) {
            continue;
        }
        let minimal: Vec<PointPair> = idx.iter().map(|&i| pairs[i]).collect();
        let Ok(h) = fit_dlt(&minimal) else { continue };
        let (count, total, _) = score(pairs, &h, reproj_threshold);
        let better = match &best {
            None => true,
            Some((bc, bt, _)) => count > *bc || (count == *bc && total < *bt),
        };
        if better {
            best = Some((count, total, h));
        }
        if count == pairs.len() && total < 1e-9 {
            break;
        }
    }
    let (count, _, mut h) = best.ok_or(Error::DegenerateConfiguration)?;
    let ratio = count as f64 / pairs.len() as f64;
    if ratio < MIN_INLIER_RATIO || count < 4 {
        return Err(Error::NoConsensus {
            inlier_ratio: ratio,
        });
    }
    let (_, _, mut flags) = score(pairs, &h, reproj_threshold);
    for _ in 0..5 {
        let inliers = select(pairs, &flags);
        let Ok(refit) = fit_dlt(&inliers) else { break };
        let refined = refine_geometric(&inliers, &refit, 50);
        let (c, _, f) = score(pairs, &refined, reproj_threshold);
        if c < count {
            break;
        }
        let settled = f == flags;
        h = refined;
        flags = f;
        if settled {
            break;
        }
    }
    let inlier_count = flags.iter().filter(|&&f| f).count();
    Ok(HomographyFit {
        homography: h,
        inlier_ratio: inlier_count as f64 / pairs.len() as f64,
        inlier_count,
        inliers: flags,
    })
}

pub fn estimate_homography(
    pairs: &[PointPair],
    reproj_threshold: f64,
    max_iters: usize,
    seed: u64,
) -> Result<Homography> {
    estimate_homography_fit(pairs, reproj_threshold, max_iters, seed).map(|f| f.homography)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn known() -> Homography {
        Homography::new([[1.05, 0.08, 12.0], [-0.06, 0.97, -7.5], [2e-4, -1e-4, 1.0]]).unwrap()
    }

    fn exact_pairs(h: &Homography, pts: &[[f64; 2]]) -> Vec<PointPair> {
        pts.iter()
            .map(|&q| {
                let (x, y) = h.apply(q[0], q[1]);
                PointPair::new(q, [x, y])
            })
            .collect()
    }

    #[test]
    fn four_exact_pairs_recover_the_matrix() {
        let pts = [[10.0, 12.0], [200.0, 15.0], [190.0, 230.0], [20.0, 210.0]];
        let got = estimate_homography(&exact_pairs(&known(), &pts), 3.0, 2000, 0).unwrap();
        assert!(got.max_abs_diff(&known()) < 1e-6, "{got:?}");
        assert_eq!(got.matrix()[2][2], 1.0);
    }

    #[test]
    fn identity_correspondences() {
        let pts = [
            [0.0, 0.0],
            [100.0, 0.0],
            [100.0, 80.0],
            [0.0, 80.0],
            [50.0, 33.0],
        ];
        let pairs: Vec<PointPair> = pts.iter().map(|&p| PointPair::new(p, p)).collect();
        let got = estimate_homography(&pairs, 3.0, 100, 1).unwrap();
        assert!(got.max_abs_diff(&Homography::identity()) < 1e-6);
    }

    #[test]
    fn outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 2]> = (0..20)
            .map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)])
            .collect();
        let mut pairs = exact_pairs(&known(), &pts);
        for _ in 0..10 {
            pairs.push(PointPair::new(
                [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)],
                [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)],
            ));
        }
        let fit = estimate_homography_fit(&pairs, 3.0, 2000, 9).unwrap();
        assert!(fit.inlier_count >= 20);
        assert!(fit.inliers[..20].iter().all(|&f| f));
        assert!(fit.homography.max_abs_diff(&known()) < 1e-3);
        assert!(fit.inlier_ratio <= 1.0);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pairs: Vec<PointPair> = (0..8)
            .map(|i| PointPair::new([i as f64, 2.0 * i as f64], [i as f64, 2.0 * i as f64]))
            .collect();
        assert!(matches!(
            estimate_homography(&pairs, 3.0, 200, 0),
            Err(Error::DegenerateConfiguration)
        ));
    }

    #[test]
    fn pure_noise_has_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<PointPair> = (0..60)
            .map(|_| {
                PointPair::new(
                    [rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)],
                    [rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)],
                )
            })
            .collect();
        assert!(matches!(
            estimate_homography(&pairs, 3.0, 500, 0),
            Err(Error::NoConsensus { .. })
        ));
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pairs = exact_pairs(
            &known(),
            &(0..30)
                .map(|_| [rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)])
                .collect::<Vec<_>>(),
        );
        for p in pairs.iter_mut().take(8) {
            p.reference[0] += rng.random_range(-40.0..40.0);
        }
        let a = estimate_homography(&pairs, 3.0, 300, 11).unwrap();
        let b = estimate_homography(&pairs, 3.0, 300, 11).unwrap();
        assert_eq!(a.matrix(), b.matrix());
    }

    #[test]
    fn composition_and_inverse() {
        let h = known();
        let i = h.compose(&h.inverse().unwrap()).unwrap();
        assert!(i.max_abs_diff(&Homography::identity()) < 1e-12);
        assert!(Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        let t = Homography::translation(3.0, -2.0);
        assert_eq!(t.apply(1.0, 1.0), (4.0, -1.0));
    }
}
