//! Semi-dense image matching with evidential, uncertainty-refined offsets.
//!
//! The pipeline: a small convolutional backbone and a multi-scale fusion
//! module produce coarse and fine feature maps; coarse cells are matched by a
//! dual softmax with mutual-nearest-neighbour filtering; two axis-wise
//! evidential heads regress the sub-cell offset of each match together with
//! a Normal-Inverse-Gamma posterior, from which aleatoric and epistemic
//! uncertainties are derived and used to filter unreliable matches.

pub mod backbone;
pub mod cli;
pub mod coarse;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod evidential;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Result, SureError};
