//! Error metrics: end-point error, AUC of cumulative error curves, rank
//! correlation and epipolar distance.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::correspondence::Correspondence;
use super::homography::{Homography, Point2};
use crate::error::{Result, SureError};

/// Per-match `|pB - H(pA)|`. Matches whose warp is at infinity get `+inf`.
pub fn compute_epe(pred: &[Correspondence], h_true: &Homography) -> Vec<f64> {
    pred.iter()
        .map(|c| match h_true.apply(c.a) {
            Some(w) => w.dist(&c.b),
            None => f64::INFINITY,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucPoint {
    pub threshold: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub points: Vec<AucPoint>,
    /// Set when the error list was empty and every value defaulted to zero.
    pub empty_input: bool,
}

impl AucReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.threshold == threshold)
            .map(|p| p.auc)
    }
}

/// Normalised area under the step CDF of `errors` on `[0, t]` for each `t`.
///
/// With `F(u)` the fraction of errors `<= u`, the area is
/// `(1/t) * integral_0^t F(u) du = sum_i max(0, t - e_i) / (n t)`.
pub fn compute_auc(errors: &[f64], thresholds: &[f64]) -> Result<AucReport> {
    if errors.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(SureError::invalid("auc errors must be non-negative"));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) || thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(SureError::invalid(
            "auc thresholds must be positive and ascending",
        ));
    }
    if errors.is_empty() {
        return Ok(AucReport {
            points: thresholds
                .iter()
                .map(|&threshold| AucPoint {
                    threshold,
                    auc: 0.0,
                })
                .collect(),
            empty_input: true,
        });
    }
    let n = errors.len() as f64;
    let points = thresholds
        .iter()
        .map(|&t| {
            let area: f64 = errors.iter().map(|&e| (t - e).max(0.0)).sum();
            AucPoint {
                threshold: t,
                auc: (area / (n * t)).clamp(0.0, 1.0),
            }
        })
        .collect();
    Ok(AucReport {
        points,
        empty_input: false,
    })
}

/// Fractional ranks starting at 1; ties share their average rank.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman_rank_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SureError::invalid(format!(
            "spearman: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(SureError::invalid("spearman needs at least 3 samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(SureError::invalid("spearman input contains NaN"));
    }
    pearson(&fractional_ranks(a), &fractional_ranks(b))
        .ok_or_else(|| SureError::UndefinedCorrelation("an input sequence is constant".into()))
}

/// Sum of squared point-to-epipolar-line distances in both images.
///
/// For `e = pB^T F pA`, `l = F pA` and `l' = F^T pB` the value is
/// `e^2 / (l_1^2 + l_2^2) + e^2 / (l'_1^2 + l'_2^2)`.
pub fn symmetric_epipolar_error(corr: &Correspondence, f: &Matrix3<f64>) -> Result<f64> {
    let pa = Vector3::new(corr.a.x, corr.a.y, 1.0);
    let pb = Vector3::new(corr.b.x, corr.b.y, 1.0);
    let l = f * pa;
    let lt = f.transpose() * pb;
    let e = pb.dot(&l);
    let na = l.x * l.x + l.y * l.y;
    let nb = lt.x * lt.x + lt.y * lt.y;
    if na <= f64::MIN_POSITIVE || nb <= f64::MIN_POSITIVE {
        return Err(SureError::Degenerate(
            "epipolar line has zero normal".into(),
        ));
    }
    Ok(e * e / na + e * e / nb)
}

/// Mean distance between the four image corners mapped by `estimated` and by `truth`.
pub fn corner_error(
    estimated: &Homography,
    truth: &Homography,
    width: usize,
    height: usize,
) -> f64 {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let corners = [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(w, h),
        Point2::new(0.0, h),
    ];
    corners
        .iter()
        .map(|&c| match (estimated.apply(c), truth.apply(c)) {
            (Some(a), Some(b)) => a.dist(&b),
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

/// Largest corner distance between two homographies.
pub fn max_corner_error(
    estimated: &Homography,
    truth: &Homography,
    width: usize,
    height: usize,
) -> f64 {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(w, h),
        Point2::new(0.0, h),
    ]
    .iter()
    .map(|&c| match (estimated.apply(c), truth.apply(c)) {
        (Some(a), Some(b)) => a.dist(&b),
        _ => f64::INFINITY,
    })
    .fold(0.0, f64::max)
}

/// Aggregate evaluation metrics over a set of image pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Vec<AucPoint>,
    pub mean_epe: f64,
    pub spearman_ua: Option<f64>,
    pub spearman_ue: Option<f64>,
    pub inlier_ratio: f64,
}
