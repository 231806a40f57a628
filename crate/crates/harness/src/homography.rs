//! Planar homographies: normalized DLT, seeded RANSAC and corner error.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use winmatch_core::matcher::FineMatch;

use crate::error::{HarnessError, Result};

/// Row-major 3×3 matrix acting on `[x, y, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    /// Rotation by `degrees` about `(cx, cy)`.
    pub fn rotation_about(degrees: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0.0, 0.0, 1.0]])
    }

    fn to_matrix(self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.0[r][c])
    }

    fn from_matrix(m: &Matrix3<f64>) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        Self(out)
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let h = &self.0;
        let z = h[2][0] * p[0] + h[2][1] * p[1] + h[2][2];
        [(h[0][0] * p[0] + h[0][1] * p[1] + h[0][2]) / z, (h[1][0] * p[0] + h[1][1] * p[1] + h[1][2]) / z]
    }

    pub fn inverse(&self) -> Option<Self> {
        self.to_matrix().try_inverse().map(|m| Self::from_matrix(&m).normalized())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::from_matrix(&(self.to_matrix() * other.to_matrix())).normalized()
    }

    /// Scaled so the bottom-right entry is 1 when that is possible.
    pub fn normalized(&self) -> Self {
        let s = self.0[2][2];
        if s.abs() < 1e-300 {
            return *self;
        }
        let mut out = self.0;
        out.iter_mut().flatten().for_each(|v| *v /= s);
        Self(out)
    }
}

/// Similarity transform taking the points to zero mean and mean distance √2.
fn normalizer(points: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = t * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Normalized direct linear transform from at least four correspondences.
pub fn dlt(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Homography> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(HarnessError::InsufficientData(format!("DLT needs at least 4 correspondences, got {n}")));
    }
    let degenerate = || HarnessError::Core(winmatch_core::Error::Degenerate("coincident points".into()));
    let ts = normalizer(src).ok_or_else(degenerate)?;
    let td = normalizer(dst).ok_or_else(degenerate)?;

    // a square system keeps the full right singular basis
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(dst).enumerate() {
        let [x, y] = transform(&ts, *s);
        let [u, v] = transform(&td, *d);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| HarnessError::Numerical("SVD did not converge".into()))?;
    // singular values are not guaranteed sorted
    let smallest = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nine singular values");
    let h = Matrix3::from_fn(|r, c| v_t[(smallest, 3 * r + c)]);
    let td_inv = td.try_inverse().ok_or_else(|| HarnessError::Numerical("singular normalizer".into()))?;
    let out = Homography::from_matrix(&(td_inv * h * ts));
    if out.0.iter().flatten().any(|v| !v.is_finite()) || out.0[2][2].abs() < 1e-12 {
        return Err(HarnessError::Core(winmatch_core::Error::Degenerate("DLT solution at infinity".into())));
    }
    Ok(out.normalized())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iters: usize,
    pub inlier_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iters: 1000, inlier_px: 3.0, seed: 0 }
    }
}

fn residual(h: &Homography, s: [f64; 2], d: [f64; 2]) -> f64 {
    let p = h.apply(s);
    let e = (p[0] - d[0]).hypot(p[1] - d[1]);
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

fn inliers(h: &Homography, src: &[[f64; 2]], dst: &[[f64; 2]], radius: f64) -> Vec<bool> {
    src.iter().zip(dst).map(|(s, d)| residual(h, *s, *d) < radius).collect()
}

/// RANSAC over 4-point DLT samples, then a DLT refit on the best inlier set.
pub fn ransac(src: &[[f64; 2]], dst: &[[f64; 2]], cfg: &RansacConfig) -> Result<(Homography, Vec<bool>)> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(HarnessError::InsufficientData(format!("homography needs at least 4 matches, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Homography)> = None;
    for _ in 0..cfg.iters.max(1) {
        let pick = sample(&mut rng, n, 4).into_vec();
        let s: Vec<[f64; 2]> = pick.iter().map(|&k| src[k]).collect();
        let d: Vec<[f64; 2]> = pick.iter().map(|&k| dst[k]).collect();
        let Ok(h) = dlt(&s, &d) else { continue };
        let count = inliers(&h, src, dst, cfg.inlier_px).iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
        }
    }
    let (_, model) = best.ok_or_else(|| {
        HarnessError::Core(winmatch_core::Error::Degenerate("every RANSAC sample was degenerate".into()))
    })?;
    let mask = inliers(&model, src, dst, cfg.inlier_px);
    let (s, d): (Vec<_>, Vec<_>) =
        src.iter().zip(dst).zip(&mask).filter(|(_, &m)| m).map(|((s, d), _)| (*s, *d)).unzip();
    let refit = if s.len() >= 4 { dlt(&s, &d).unwrap_or(model) } else { model };
    let mask = inliers(&refit, src, dst, cfg.inlier_px);
    Ok((refit, mask))
}

/// Robust homography from the fine matches of a match set.
pub fn estimate_homography(matches: &[FineMatch], cfg: &RansacConfig) -> Result<(Homography, Vec<bool>)> {
    let src: Vec<[f64; 2]> = matches.iter().map(|m| m.point_a).collect();
    let dst: Vec<[f64; 2]> = matches.iter().map(|m| m.point_b).collect();
    ransac(&src, &dst, cfg)
}

/// Pixel-center coordinates of the four image corners.
pub fn image_corners(h: usize, w: usize) -> [[f64; 2]; 4] {
    let (x1, y1) = (w as f64 - 1.0, h as f64 - 1.0);
    [[0.0, 0.0], [x1, 0.0], [x1, y1], [0.0, y1]]
}

/// Mean distance between the corners mapped by `est` and by `truth`.
pub fn corner_error(est: &Homography, truth: &Homography, h: usize, w: usize) -> f64 {
    image_corners(h, w)
        .iter()
        .map(|&c| {
            let (a, b) = (est.apply(c), truth.apply(c));
            (a[0] - b[0]).hypot(a[1] - b[1])
        })
        .sum::<f64>()
        / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_h() -> Homography {
        Homography([[1.05, 0.02, 3.0], [-0.03, 0.97, -2.0], [1e-4, -2e-4, 1.0]])
    }

    #[test]
    fn minimal_case_reproduces_points() {
        let h = sample_h();
        let src = [[0.0, 0.0], [100.0, 5.0], [90.0, 120.0], [-10.0, 80.0]];
        let dst: Vec<[f64; 2]> = src.iter().map(|&p| h.apply(p)).collect();
        let est = dlt(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            assert!(residual(&est, *s, *d) < 1e-9);
        }
    }

    #[test]
    fn rejects_too_few_or_coincident_points() {
        assert!(matches!(dlt(&[[0.0; 2]; 3], &[[0.0; 2]; 3]), Err(HarnessError::InsufficientData(_))));
        assert!(dlt(&[[1.0; 2]; 5], &[[2.0; 2]; 5]).is_err());
        assert!(matches!(
            ransac(&[[0.0; 2]; 2], &[[0.0; 2]; 2], &RansacConfig::default()),
            Err(HarnessError::InsufficientData(_))
        ));
    }

    #[test]
    fn exact_recovery_from_eight_points() {
        let h = sample_h();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<[f64; 2]> = (0..8).map(|_| [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)]).collect();
        let dst: Vec<[f64; 2]> = src.iter().map(|&p| h.apply(p)).collect();
        let (est, mask) = ransac(&src, &dst, &RansacConfig::default()).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert!(corner_error(&est, &h, 128, 128) < 1e-6);
    }

    #[test]
    fn corner_error_of_identity_and_shift() {
        let h = sample_h();
        assert_eq!(corner_error(&h, &h, 64, 64), 0.0);
        let shifted = Homography::translation(3.0, 4.0).compose(&h);
        assert!((corner_error(&shifted, &h, 64, 64) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_keeps_center_fixed() {
        let r = Homography::rotation_about(30.0, 10.0, 20.0);
        let c = r.apply([10.0, 20.0]);
        assert!((c[0] - 10.0).abs() < 1e-12 && (c[1] - 20.0).abs() < 1e-12);
        let inv = r.inverse().unwrap();
        let back = inv.apply(r.apply([3.0, -7.0]));
        assert!((back[0] - 3.0).abs() < 1e-12 && (back[1] + 7.0).abs() < 1e-12);
    }
}
