use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::correspondence::Correspondence;
use super::homography::{estimate_homography_dlt, Homography, Point2};
use crate::error::{Result, SureError};

/// Confidence at which the adaptive iteration bound stops sampling.
pub const RANSAC_CONFIDENCE: f64 = 0.999;

#[derive(Clone, Debug)]
pub struct RansacFit {
    /// Best model found; `None` if no minimal sample produced a valid model.
    pub homography: Option<Homography>,
    pub inliers: Vec<bool>,
    /// `false` when fewer than four inliers support the best model.
    pub success: bool,
    pub iterations: usize,
}

impl RansacFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Mean of the forward and backward transfer distances.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, a: Point2, b: Point2) -> f64 {
    match (h.apply(a), h_inv.apply(b)) {
        (Some(fa), Some(bb)) => 0.5 * (fa.dist(&b) + bb.dist(&a)),
        _ => f64::INFINITY,
    }
}

fn classify(h: &Homography, corrs: &[Correspondence], threshold: f64) -> Option<Vec<bool>> {
    let h_inv = h.inverse().ok()?;
    Some(
        corrs
            .iter()
            .map(|c| symmetric_transfer_error(h, &h_inv, c.a, c.b) <= threshold)
            .collect(),
    )
}

fn refit(corrs: &[Correspondence], mask: &[bool]) -> Result<Homography> {
    let (src, dst): (Vec<Point2>, Vec<Point2>) = corrs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| (c.a, c.b))
        .unzip();
    estimate_homography_dlt(&src, &dst)
}

fn adaptive_bound(inlier_ratio: f64, sample_size: i32) -> f64 {
    let w = inlier_ratio.powi(sample_size);
    if w >= 1.0 {
        return 0.0;
    }
    if w <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - RANSAC_CONFIDENCE).ln() / (1.0 - w).ln()
}

/// Hypothesise-and-verify homography fit with four-point DLT samples.
///
/// Deterministic for a fixed `seed`. The consensus set of the best hypothesis
/// is refitted with DLT and re-classified once.
pub fn ransac_homography(
    corrs: &[Correspondence],
    inlier_threshold_px: f64,
    max_iters: usize,
    seed: u64,
) -> Result<RansacFit> {
    if !(inlier_threshold_px > 0.0) {
        return Err(SureError::invalid("ransac threshold must be positive"));
    }
    let n = corrs.len();
    if n < 4 {
        return Ok(RansacFit {
            homography: None,
            inliers: vec![false; n],
            success: false,
            iterations: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut bound = max_iters as f64;
    let mut iterations = 0;
    while (iterations as f64) < bound.min(max_iters as f64) {
        iterations += 1;
        let idx = sample(&mut rng, n, 4);
        let (src, dst): (Vec<Point2>, Vec<Point2>) =
            idx.iter().map(|i| (corrs[i].a, corrs[i].b)).unzip();
        let Ok(h) = estimate_homography_dlt(&src, &dst) else {
            continue;
        };
        let Some(mask) = classify(&h, corrs, inlier_threshold_px) else {
            continue;
        };
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(_, _, c)| count > *c) {
            bound = adaptive_bound(count as f64 / n as f64, 4);
            best = Some((h, mask, count));
        }
    }

    let Some((mut h, mut mask, mut count)) = best else {
        return Ok(RansacFit {
            homography: None,
            inliers: vec![false; n],
            success: false,
            iterations,
        });
    };
    if count >= 4 {
        if let Ok(h_refit) = refit(corrs, &mask) {
            if let Some(mask_refit) = classify(&h_refit, corrs, inlier_threshold_px) {
                let c = mask_refit.iter().filter(|&&b| b).count();
                if c >= count {
                    h = h_refit;
                    mask = mask_refit;
                    count = c;
                }
            }
        }
    }
    Ok(RansacFit {
        homography: Some(h),
        inliers: mask,
        success: count >= 4,
        iterations,
    })
}
