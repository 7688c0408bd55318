use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SureError};

/// A 2-D point in pixel coordinates; pixel centres sit on integer coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Projective depths below this magnitude are treated as points at infinity.
pub const MIN_PROJECTIVE_DEPTH: f64 = 1e-9;

/// Planar projective transform, stored with `h[2][2] = 1` whenever that entry is non-zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    /// Builds a homography, normalising scale and rejecting singular matrices.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(SureError::Numeric(
                "homography has non-finite entries".into(),
            ));
        }
        let m = if m[(2, 2)].abs() > f64::EPSILON * m.abs().max() {
            m / m[(2, 2)]
        } else {
            m
        };
        // Relative to the largest singular value so pixel-scale translations do not matter.
        let sv = m.singular_values();
        if !(sv.min() > 1e-12 * sv.max()) {
            return Err(SureError::Degenerate("singular homography".into()));
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| SureError::Degenerate("homography is not invertible".into()))?;
        Self::from_matrix(inv)
    }

    /// `self` after `first`: maps `p` to `self(first(p))`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        Self::from_matrix(self.m * first.m)
    }

    /// Maps one point; `None` when it lands at infinity.
    pub fn apply(&self, p: Point2) -> Option<Point2> {
        let v = self.m * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() <= MIN_PROJECTIVE_DEPTH || !v.x.is_finite() || !v.y.is_finite() {
            return None;
        }
        Some(Point2::new(v.x / v.z, v.y / v.z))
    }
}

/// Applies `h` to every point; points mapped to infinity come back as `None`.
pub fn apply_homography(h: &Homography, points: &[Point2]) -> Vec<Option<Point2>> {
    points.iter().map(|&p| h.apply(p)).collect()
}

/// Similarity transform moving the centroid to the origin with mean distance `sqrt(2)`.
fn normalizing_transform(points: &[Point2]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / n;
    if !(mean_dist > 1e-12) {
        return Err(SureError::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

fn transform(t: &Matrix3<f64>, p: &Point2) -> Point2 {
    Point2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

fn has_collinear_triple(points: &[Point2]) -> bool {
    let scale = points
        .iter()
        .flat_map(|p| [p.x.abs(), p.y.abs()])
        .fold(1.0f64, f64::max);
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let (a, b, c) = (points[i], points[j], points[k]);
                let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                if cross.abs() <= 1e-9 * scale * scale {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalised direct linear transform: least-squares `H` with `dst ~ H src`.
pub fn estimate_homography_dlt(src: &[Point2], dst: &[Point2]) -> Result<Homography> {
    let n = src.len();
    if n != dst.len() {
        return Err(SureError::invalid(format!(
            "dlt: {} source points but {} destination points",
            n,
            dst.len()
        )));
    }
    if n < 4 {
        return Err(SureError::invalid(format!(
            "dlt needs at least 4 points, got {n}"
        )));
    }
    if n == 4 && (has_collinear_triple(src) || has_collinear_triple(dst)) {
        return Err(SureError::Degenerate(
            "three of four points are collinear".into(),
        ));
    }
    let ts = normalizing_transform(src)?;
    let td = normalizing_transform(dst)?;

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let p = transform(&ts, p);
        let q = transform(&td, q);
        let (r0, r1) = (2 * i, 2 * i + 1);
        a[(r0, 0)] = -p.x;
        a[(r0, 1)] = -p.y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = q.x * p.x;
        a[(r0, 7)] = q.x * p.y;
        a[(r0, 8)] = q.x;
        a[(r1, 3)] = -p.x;
        a[(r1, 4)] = -p.y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = q.y * p.x;
        a[(r1, 7)] = q.y * p.y;
        a[(r1, 8)] = q.y;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| SureError::Numeric("dlt: svd did not converge".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    let largest = sv.max();
    // A one-dimensional null space is required for a unique solution.
    if sv[second] <= 1e-10 * largest {
        return Err(SureError::Degenerate(
            "dlt design matrix is rank deficient".into(),
        ));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::from_fn(|r, c| h[3 * r + c]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| SureError::Degenerate("normalisation not invertible".into()))?;
    Homography::from_matrix(td_inv * hn * ts)
}
