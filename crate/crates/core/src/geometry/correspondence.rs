//! Correspondences and their plain-text file format.
//!
//! One match per line: `xA yA xB yB confidence u_a u_e`, space separated.
//! Lines starting with `#` are comments.

use std::fmt::Write as _;

use super::homography::Point2;
use crate::error::{Result, SureError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub a: Point2,
    pub b: Point2,
    pub confidence: f64,
}

impl Correspondence {
    pub const fn new(a: Point2, b: Point2, confidence: f64) -> Self {
        Self { a, b, confidence }
    }

    /// True when both endpoints lie in `[-1, W] x [-1, H]`.
    pub fn within_bounds(&self, width: usize, height: usize) -> bool {
        let ok =
            |p: &Point2| p.x >= -1.0 && p.y >= -1.0 && p.x <= width as f64 && p.y <= height as f64;
        ok(&self.a) && ok(&self.b)
    }
}

/// One line of a correspondence file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrespondenceRecord {
    pub corr: Correspondence,
    pub u_a: f64,
    pub u_e: f64,
}

/// Renders records, preceded by `header` lines which are emitted as comments.
pub fn format_correspondences(header: &[String], records: &[CorrespondenceRecord]) -> String {
    let mut out = String::new();
    for line in header {
        let _ = writeln!(out, "# {line}");
    }
    for r in records {
        let c = &r.corr;
        let _ = writeln!(
            out,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.8e} {:.8e}",
            c.a.x, c.a.y, c.b.x, c.b.y, c.confidence, r.u_a, r.u_e
        );
    }
    out
}

pub fn parse_correspondences(text: &str) -> Result<Vec<CorrespondenceRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| SureError::Parse(format!("line {}: {e}", lineno + 1)))?;
        let &[xa, ya, xb, yb, conf, u_a, u_e] = fields.as_slice() else {
            return Err(SureError::Parse(format!(
                "line {}: expected 7 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        };
        out.push(CorrespondenceRecord {
            corr: Correspondence::new(Point2::new(xa, ya), Point2::new(xb, yb), conf),
            u_a,
            u_e,
        });
    }
    Ok(out)
}
