//! Planar and epipolar geometry used for supervision and evaluation.

mod correspondence;
mod ground_truth;
mod homography;
mod metrics;
mod ransac;

pub use correspondence::{
    format_correspondences, parse_correspondences, Correspondence, CorrespondenceRecord,
};
pub use ground_truth::{make_ground_truth, GridSpec, GroundTruth, GroundTruthMatch};
pub use homography::{apply_homography, estimate_homography_dlt, Homography, Point2};
pub use metrics::{
    compute_auc, compute_epe, corner_error, fractional_ranks, max_corner_error, spearman_rank_corr,
    symmetric_epipolar_error, AucPoint, AucReport, MetricReport,
};
pub use ransac::{ransac_homography, symmetric_transfer_error, RansacFit, RANSAC_CONFIDENCE};
