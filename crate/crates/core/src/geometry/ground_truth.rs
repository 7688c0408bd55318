use serde::{Deserialize, Serialize};

use super::correspondence::Correspondence;
use super::homography::{Homography, Point2};
use crate::error::{Result, SureError};

/// Regular lattice of square cells; cell `i` sits at row `i / cols`, column `i % cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl GridSpec {
    /// Grid covering an image whose sides are multiples of `stride`.
    pub fn for_image(width: usize, height: usize, stride: usize) -> Result<Self> {
        if stride == 0 || width % stride != 0 || height % stride != 0 {
            return Err(SureError::invalid(format!(
                "image {width}x{height} is not divisible by stride {stride}"
            )));
        }
        Ok(Self {
            rows: height / stride,
            cols: width / stride,
            stride,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.cols * self.stride
    }

    pub fn height(&self) -> usize {
        self.rows * self.stride
    }

    /// Centre of cell `index` in pixel coordinates (pixel centres on integers).
    pub fn center(&self, index: usize) -> Point2 {
        let half = (self.stride as f64 - 1.0) / 2.0;
        let (r, c) = (index / self.cols, index % self.cols);
        Point2::new(
            (c * self.stride) as f64 + half,
            (r * self.stride) as f64 + half,
        )
    }

    /// Cell whose centre is nearest to `p`, or `None` when `p` lies outside the image.
    pub fn nearest_cell(&self, p: Point2) -> Option<usize> {
        let s = self.stride as f64;
        let cx = ((p.x + 0.5) / s).floor();
        let cy = ((p.y + 0.5) / s).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.cols as f64 || cy >= self.rows as f64 {
            return None;
        }
        Some(cy as usize * self.cols + cx as usize)
    }
}

/// A supervised coarse match with its sub-cell offset in units of the stride.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthMatch {
    pub cell_a: usize,
    pub cell_b: usize,
    /// `(w - c_b) / stride`, each component in `[-0.5, 0.5]`.
    pub offset: [f64; 2],
    pub corr: Correspondence,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub matches: Vec<GroundTruthMatch>,
    /// Set when no cell of A lands inside B.
    pub empty_overlap: bool,
}

/// Warps every cell centre of A into B and assigns it to the nearest B cell.
pub fn make_ground_truth(h: &Homography, grid_a: &GridSpec, grid_b: &GridSpec) -> GroundTruth {
    let stride = grid_b.stride as f64;
    let matches: Vec<GroundTruthMatch> = (0..grid_a.len())
        .filter_map(|cell_a| {
            let ca = grid_a.center(cell_a);
            let w = h.apply(ca)?;
            let cell_b = grid_b.nearest_cell(w)?;
            let cb = grid_b.center(cell_b);
            Some(GroundTruthMatch {
                cell_a,
                cell_b,
                offset: [(w.x - cb.x) / stride, (w.y - cb.y) / stride],
                corr: Correspondence::new(ca, w, 1.0),
            })
        })
        .collect();
    GroundTruth {
        empty_overlap: matches.is_empty(),
        matches,
    }
}
