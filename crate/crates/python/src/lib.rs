//! Python bindings for the matcher: models, matching, synthetic data,
//! training, evaluation and the scalar loss functions.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

use sure_core::cli::{Checkpoint, RunConfig};
use sure_core::diffcore::Tensor;
use sure_core::eval::{auc_at, evaluate, EvalOptions, DEFAULT_THRESHOLDS};
use sure_core::evidential::{self, MatchWithUncertainty, NigParams};
use sure_core::geometry::{self, Correspondence, Point2};
use sure_core::model::SureModel;
use sure_core::train::{self, generate_dataset, Difficulty, Trainer};
use sure_core::SureError;

create_exception!(sure_py, CheckpointError, PyException);

fn to_py(e: SureError) -> PyErr {
    match e {
        SureError::Io { .. } => PyOSError::new_err(e.to_string()),
        SureError::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        SureError::Checkpoint(_) | SureError::VersionMismatch { .. } => {
            CheckpointError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image_from_rows(rows: Vec<Vec<f32>>) -> PyResult<Tensor<f32>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(
            "image must be a non-empty rectangular list of rows",
        ));
    }
    Tensor::new(vec![1, h, w], rows.concat()).map_err(to_py)
}

fn image_to_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let w = t.shape()[2];
    t.data().chunks(w).map(<[f32]>::to_vec).collect()
}

fn parse_difficulty(s: &str) -> PyResult<Difficulty> {
    s.parse().map_err(to_py)
}

/// One refined correspondence.
#[pyclass(get_all, frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Match {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub u_a: f64,
    pub u_e: f64,
    pub confidence: f64,
}

#[pymethods]
impl Match {
    fn __repr__(&self) -> String {
        format!(
            "Match(({:.2}, {:.2}) -> ({:.2}, {:.2}), conf={:.3}, u_a={:.3e}, u_e={:.3e})",
            self.xa, self.ya, self.xb, self.yb, self.confidence, self.u_a, self.u_e
        )
    }
}

#[pyclass]
pub struct Model {
    inner: SureModel,
    config: RunConfig,
}

#[pymethods]
impl Model {
    /// `config_json` is a run configuration (`{"train": ..., "model": ...}`).
    #[new]
    #[pyo3(signature = (config_json=None, seed=None))]
    fn new(config_json: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut config = match config_json {
            Some(s) => RunConfig::from_json(s).map_err(to_py)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            config.train.seed = s;
        }
        let inner = SureModel::new(config.model.clone(), config.train.seed).map_err(to_py)?;
        Ok(Self { inner, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, config) = Checkpoint::load(&path)
            .and_then(|c| c.to_model())
            .map_err(to_py)?;
        Ok(Self { inner, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, &self.config)
            .and_then(|c| c.save(&path))
            .map_err(to_py)
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        self.config.to_canonical_json().map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Matches two equally sized images given as lists of rows in `[0, 1]`.
    #[pyo3(signature = (image_a, image_b, tau_c=None, filter=true))]
    fn match_images(
        &self,
        image_a: Vec<Vec<f32>>,
        image_b: Vec<Vec<f32>>,
        tau_c: Option<f64>,
        filter: bool,
    ) -> PyResult<Vec<Match>> {
        let (a, b) = (image_from_rows(image_a)?, image_from_rows(image_b)?);
        let mut opts = self.inner.default_options();
        if let Some(t) = tau_c {
            opts.tau_c = t;
        }
        if !filter {
            opts.filter = None;
        }
        let out = self.inner.match_images_with(&a, &b, &opts).map_err(to_py)?;
        Ok(out
            .kept
            .iter()
            .map(|m| Match {
                xa: m.a.x,
                ya: m.a.y,
                xb: m.b.x,
                yb: m.b.y,
                offset_x: m.offset[0],
                offset_y: m.offset[1],
                u_a: m.u_a,
                u_e: m.u_e,
                confidence: m.conf,
            })
            .collect())
    }

    /// Trains on freshly generated pairs; returns the mean total loss per epoch.
    #[pyo3(signature = (count, difficulty="easy", base_seed=1, epochs=None))]
    fn fit_synthetic(
        &mut self,
        count: usize,
        difficulty: &str,
        base_seed: u64,
        epochs: Option<usize>,
    ) -> PyResult<Vec<f64>> {
        let mut cfg = self.config.train.clone();
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        let pairs = generate_dataset(
            base_seed,
            count,
            cfg.image_size,
            parse_difficulty(difficulty)?,
        )
        .map_err(to_py)?;
        let mut trainer = Trainer::new(self.inner.clone(), cfg).map_err(to_py)?;
        let reports = trainer.fit(&pairs, |_| Ok(())).map_err(to_py)?;
        self.inner = trainer.model;
        Ok(reports.iter().map(|r| r.mean_total).collect())
    }

    /// AUC at 3/5/10 px, mean EPE and Spearman(u_e, EPE) on generated pairs.
    #[pyo3(signature = (count, difficulty="easy", base_seed=2, filter=true))]
    fn evaluate_synthetic(
        &self,
        count: usize,
        difficulty: &str,
        base_seed: u64,
        filter: bool,
    ) -> PyResult<(Vec<f64>, f64, Option<f64>)> {
        let pairs = generate_dataset(
            base_seed,
            count,
            self.config.train.image_size,
            parse_difficulty(difficulty)?,
        )
        .map_err(to_py)?;
        let mut opts = self.inner.default_options();
        if !filter {
            opts.filter = None;
        }
        let ev = evaluate(
            &self.inner,
            opts,
            &pairs,
            &DEFAULT_THRESHOLDS,
            EvalOptions::default(),
        )
        .map_err(to_py)?;
        let aucs = DEFAULT_THRESHOLDS
            .iter()
            .map(|&t| auc_at(&ev.report.auc, t))
            .collect();
        Ok((aucs, ev.report.mean_epe, ev.report.spearman_ue))
    }
}

/// Returns `(image_a, image_b, h_true)` for one seeded synthetic pair.
#[pyfunction]
#[pyo3(signature = (seed, size=64, difficulty="easy"))]
#[allow(clippy::type_complexity)]
fn generate_pair(
    seed: u64,
    size: usize,
    difficulty: &str,
) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>, [[f64; 3]; 3])> {
    let p = train::generate_pair(seed, size, parse_difficulty(difficulty)?).map_err(to_py)?;
    Ok((
        image_to_rows(&p.image_a),
        image_to_rows(&p.image_b),
        p.h_true.rows(),
    ))
}

#[pyfunction]
fn evidential_nll(y: f64, psi: f64, eta: f64, kappa: f64, rho: f64) -> PyResult<f64> {
    evidential::evidential_nll(&NigParams::new(psi, eta, kappa, rho).map_err(to_py)?, y)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (y, psi, eta, kappa, rho, zeta=1.0))]
fn evidential_reg(y: f64, psi: f64, eta: f64, kappa: f64, rho: f64, zeta: f64) -> PyResult<f64> {
    let p = NigParams::new(psi, eta, kappa, rho).map_err(to_py)?;
    Ok(zeta * evidential::evidential_reg(&p, y))
}

/// `(mean, aleatoric, epistemic)`.
#[pyfunction]
fn predictive_moments(psi: f64, eta: f64, kappa: f64, rho: f64) -> PyResult<(f64, f64, f64)> {
    let p = NigParams::new(psi, eta, kappa, rho).map_err(to_py)?;
    evidential::predictive_moments(&p).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (p, alpha=0.25, gamma=2.0))]
fn focal_loss(p: f64, alpha: f64, gamma: f64) -> f64 {
    train::focal_loss(p, alpha, gamma)
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    geometry::spearman_rank_corr(&a, &b).map_err(to_py)
}

/// Nearest-rank quantile filter; returns the indices that are kept.
#[pyfunction]
#[pyo3(signature = (u_a, u_e, q_a=0.95, q_e=0.95))]
fn filter_indices(u_a: Vec<f64>, u_e: Vec<f64>, q_a: f64, q_e: f64) -> PyResult<Vec<usize>> {
    if u_a.len() != u_e.len() {
        return Err(PyValueError::new_err("u_a and u_e differ in length"));
    }
    let origin = Point2::new(0.0, 0.0);
    let matches: Vec<MatchWithUncertainty> = u_a
        .iter()
        .zip(&u_e)
        .enumerate()
        .map(|(k, (&a, &e))| MatchWithUncertainty {
            i: k,
            j: k,
            a: origin,
            b: origin,
            offset: [0.0, 0.0],
            u_a: a,
            u_e: e,
            conf: 1.0,
        })
        .collect();
    let kept = evidential::filter_by_uncertainty(&matches, q_a, q_e).map_err(to_py)?;
    Ok(kept.iter().map(|m| m.i).collect())
}

/// Robust homography from point lists; `None` when estimation fails.
#[pyfunction]
#[pyo3(signature = (src, dst, threshold=3.0, max_iters=2000, seed=0))]
fn ransac_homography(
    src: Vec<(f64, f64)>,
    dst: Vec<(f64, f64)>,
    threshold: f64,
    max_iters: usize,
    seed: u64,
) -> PyResult<Option<([[f64; 3]; 3], Vec<bool>)>> {
    if src.len() != dst.len() {
        return Err(PyValueError::new_err("src and dst differ in length"));
    }
    let corrs: Vec<Correspondence> = src
        .iter()
        .zip(&dst)
        .map(|(&(xa, ya), &(xb, yb))| {
            Correspondence::new(Point2::new(xa, ya), Point2::new(xb, yb), 1.0)
        })
        .collect();
    let fit = geometry::ransac_homography(&corrs, threshold, max_iters, seed).map_err(to_py)?;
    Ok(match (fit.success, fit.homography) {
        (true, Some(h)) => Some((h.rows(), fit.inliers)),
        _ => None,
    })
}

#[pymodule]
fn sure_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CheckpointError", m.py().get_type::<CheckpointError>())?;
    m.add_class::<Model>()?;
    m.add_class::<Match>()?;
    m.add_function(wrap_pyfunction!(generate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(evidential_nll, m)?)?;
    m.add_function(wrap_pyfunction!(evidential_reg, m)?)?;
    m.add_function(wrap_pyfunction!(predictive_moments, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(filter_indices, m)?)?;
    m.add_function(wrap_pyfunction!(ransac_homography, m)?)?;
    Ok(())
}
