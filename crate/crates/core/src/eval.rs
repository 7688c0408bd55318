//! Evaluation of a matcher on pairs with known homographies.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Result, SureError};
use crate::evidential::MatchWithUncertainty;
use crate::geometry::{
    compute_auc, corner_error, ransac_homography, spearman_rank_corr, AucPoint, Correspondence,
    Homography, MetricReport,
};
use crate::model::{MatchOptions, SureModel};
use crate::train::SyntheticPair;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];
/// RANSAC inlier threshold in pixels.
pub const RANSAC_THRESHOLD: f64 = 3.0;
pub const RANSAC_MAX_ITERS: usize = 2000;

/// Per-pair outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub index: usize,
    pub seed: u64,
    pub raw_matches: usize,
    pub kept_matches: usize,
    pub inliers: usize,
    /// Mean corner distance of the estimated homography; infinite on failure.
    pub corner_error: f64,
    pub mean_epe: f64,
    /// Mean distance of the unrefined cell-centre matches.
    pub mean_epe_coarse: f64,
    pub match_ms: f64,
}

/// Per-match values used for calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSample {
    pub pair: usize,
    pub u_a: f64,
    pub u_e: f64,
    pub epe: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub pairs: Vec<PairEval>,
    pub samples: Vec<MatchSample>,
}

fn epe_of(m: &MatchWithUncertainty, h: &Homography) -> f64 {
    h.apply(m.a).map_or(f64::INFINITY, |w| w.dist(&m.b))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Robust homography from matches and its corner error against `truth`.
pub fn homography_error(
    corrs: &[Correspondence],
    truth: &Homography,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    if corrs.len() < 4 {
        return Ok((f64::INFINITY, 0));
    }
    let fit = ransac_homography(corrs, RANSAC_THRESHOLD, RANSAC_MAX_ITERS, seed)?;
    Ok(match (&fit.homography, fit.success) {
        (Some(h), true) => (corner_error(h, truth, width, height), fit.inlier_count()),
        _ => (f64::INFINITY, 0),
    })
}

/// Times `f` `runs` times and returns the median in milliseconds.
pub fn median_ms(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Matching source for [`evaluate_with`]: a model or injected correspondences.
pub trait Matcher {
    fn run(
        &self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
    ) -> Result<(Vec<MatchWithUncertainty>, Vec<MatchWithUncertainty>)>;
}

pub struct ModelMatcher<'m> {
    pub model: &'m SureModel,
    pub options: MatchOptions,
}

impl Matcher for ModelMatcher<'_> {
    fn run(
        &self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
    ) -> Result<(Vec<MatchWithUncertainty>, Vec<MatchWithUncertainty>)> {
        let out = self.model.match_images_with(a, b, &self.options)?;
        Ok((out.refined, out.kept))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Timed repetitions per pair; 0 skips timing.
    pub timing_runs: usize,
    pub ransac_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            timing_runs: 0,
            ransac_seed: 0,
        }
    }
}

pub fn evaluate(
    model: &SureModel,
    options: MatchOptions,
    pairs: &[SyntheticPair],
    thresholds: &[f64],
    eval: EvalOptions,
) -> Result<Evaluation> {
    evaluate_with(&ModelMatcher { model, options }, pairs, thresholds, eval)
}

/// Match, estimate a homography, and aggregate AUC, EPE and rank correlations.
pub fn evaluate_with(
    matcher: &dyn Matcher,
    pairs: &[SyntheticPair],
    thresholds: &[f64],
    eval: EvalOptions,
) -> Result<Evaluation> {
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut samples = Vec::new();
    for (index, pair) in pairs.iter().enumerate() {
        let (raw, kept) = matcher.run(&pair.image_a, &pair.image_b)?;
        let match_ms = if eval.timing_runs > 0 {
            median_ms(eval.timing_runs, || {
                matcher.run(&pair.image_a, &pair.image_b).map(|_| ())
            })?
        } else {
            0.0
        };
        let h = &pair.h_true;
        let corrs: Vec<Correspondence> = kept
            .iter()
            .map(|m| Correspondence::new(m.a, m.b, m.conf))
            .collect();
        let size = pair.size();
        let (err, inliers) = homography_error(&corrs, h, size, size, eval.ransac_seed ^ pair.seed)?;
        let grid = crate::geometry::GridSpec::for_image(size, size, crate::model::STRIDE)?;
        let mut kept_iter = kept.iter().peekable();
        for m in &raw {
            let is_kept = kept_iter.peek().is_some_and(|k| *k == m);
            if is_kept {
                kept_iter.next();
            }
            samples.push(MatchSample {
                pair: index,
                u_a: m.u_a,
                u_e: m.u_e,
                epe: epe_of(m, h),
                kept: is_kept,
            });
        }
        per_pair.push(PairEval {
            index,
            seed: pair.seed,
            raw_matches: raw.len(),
            kept_matches: kept.len(),
            inliers,
            corner_error: err,
            mean_epe: mean(kept.iter().map(|m| epe_of(m, h))),
            mean_epe_coarse: mean(kept.iter().map(|m| {
                h.apply(m.a)
                    .map_or(f64::INFINITY, |w| w.dist(&grid.center(m.j)))
            })),
            match_ms,
        });
    }
    let errors: Vec<f64> = per_pair.iter().map(|p| p.corner_error).collect();
    let auc = compute_auc(&errors, thresholds)?;
    let kept_epe: Vec<f64> = samples.iter().filter(|s| s.kept).map(|s| s.epe).collect();
    let finite: Vec<&MatchSample> = samples.iter().filter(|s| s.epe.is_finite()).collect();
    let epe: Vec<f64> = finite.iter().map(|s| s.epe).collect();
    let corr = |u: Vec<f64>| match spearman_rank_corr(&u, &epe) {
        Ok(v) => Ok(Some(v)),
        Err(SureError::UndefinedCorrelation(_)) | Err(SureError::InvalidArgument(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let spearman_ua = corr(finite.iter().map(|s| s.u_a).collect())?;
    let spearman_ue = corr(finite.iter().map(|s| s.u_e).collect())?;
    let total_inliers: usize = per_pair.iter().map(|p| p.inliers).sum();
    let total_kept: usize = per_pair.iter().map(|p| p.kept_matches).sum();
    let report = MetricReport {
        auc: auc.points,
        mean_epe: mean(kept_epe.iter().copied()),
        spearman_ua,
        spearman_ue,
        inlier_ratio: if total_kept == 0 {
            0.0
        } else {
            total_inliers as f64 / total_kept as f64
        },
    };
    Ok(Evaluation {
        report,
        pairs: per_pair,
        samples,
    })
}

/// AUC at `t` from a report, zero when absent.
pub fn auc_at(points: &[AucPoint], t: f64) -> f64 {
    points
        .iter()
        .find(|p| p.threshold == t)
        .map_or(0.0, |p| p.auc)
}
