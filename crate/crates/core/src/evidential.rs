//! Axis-wise regression heads with Normal-Inverse-Gamma outputs, the
//! evidential loss, uncertainty aggregation and filtering, and sub-cell
//! refinement of coarse matches.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coarse::CoarseMatchSet;
use crate::diffcore::{softplus_scalar, ConvSpec, Scalar, Tensor, Var};
use crate::error::{Result, SureError};
use crate::geometry::{GridSpec, Point2};
use crate::nn::{Bound, Initializer, ParamStore};

/// Floor added after softplus so the NIG constraints hold strictly.
pub const POSITIVITY_EPS: f64 = 1e-6;
/// Smallest logarithm argument accepted by the NLL before it reports an error.
pub const LOG_FLOOR: f64 = 1e-30;
/// Probability floor of the KL head.
const PROB_FLOOR: f64 = 1e-12;

/// Output structure and loss of the fine regression heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One scalar offset per axis with a squared-error loss.
    DirectL2,
    /// Soft-argmax over bins with a squared-error loss.
    CoordL2,
    /// Soft-argmax over bins, trained with KL to a Gaussian target.
    CoordKl,
    /// Soft-argmax plus NIG scalars, trained with the evidential loss.
    #[default]
    Evidential,
}

impl HeadMode {
    pub const ALL: [HeadMode; 4] = [
        HeadMode::DirectL2,
        HeadMode::CoordL2,
        HeadMode::CoordKl,
        HeadMode::Evidential,
    ];

    pub fn output_width(self, bins: usize) -> usize {
        match self {
            HeadMode::DirectL2 => 1,
            HeadMode::CoordL2 | HeadMode::CoordKl => bins,
            HeadMode::Evidential => bins + 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::DirectL2 => "direct_l2",
            HeadMode::CoordL2 => "coord_l2",
            HeadMode::CoordKl => "coord_kl",
            HeadMode::Evidential => "evidential",
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadMode {
    type Err = SureError;

    fn from_str(s: &str) -> Result<Self> {
        HeadMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SureError::invalid(format!("unknown head mode {s:?}")))
    }
}

/// Bin centres `c_k = (k + 0.5) / n - 0.5`.
pub fn bin_centers(n: usize) -> Vec<f64> {
    (0..n).map(|k| (k as f64 + 0.5) / n as f64 - 0.5).collect()
}

pub const AXES: [&str; 2] = ["x", "y"];

/// Adds two-layer heads `head.{x,y}.{l1,l2}` mapping `in_dim` to the mode's width.
/// Starting bias of the raw `rho` output (softplus of it is 0.01). A small
/// `rho` gives a narrow initial predictive scale, so the offset receives a
/// strong likelihood gradient from the first step.
pub const INITIAL_RHO_BIAS: f32 = -4.600_166;

pub fn init_heads(
    mode: HeadMode,
    in_dim: usize,
    hidden: usize,
    bins: usize,
    init: &mut Initializer,
    params: &mut ParamStore,
) {
    let out = mode.output_width(bins);
    for axis in AXES {
        params.insert(
            format!("head.{axis}.l1.w"),
            init.kaiming(&[hidden, in_dim, 1]),
        );
        params.insert(format!("head.{axis}.l1.b"), Tensor::zeros(&[hidden]));
        params.insert(
            format!("head.{axis}.l2.w"),
            init.normal(&[out, hidden, 1], 0.1 / (hidden as f64).sqrt()),
        );
        let mut bias = Tensor::zeros(&[out]);
        if mode == HeadMode::Evidential {
            bias.data_mut()[bins + 2] = INITIAL_RHO_BIAS;
        }
        params.insert(format!("head.{axis}.l2.b"), bias);
    }
}

/// One head: `[M, 2d]` descriptors to `[M, width]` raw outputs via two
/// pointwise 1-D convolutions with a ReLU in between.
pub fn head_forward<'t, T: Scalar>(
    fused: Var<'t, T>,
    params: &Bound<'t, T>,
    axis: &str,
) -> Result<Var<'t, T>> {
    let s = fused.shape();
    let &[m, d] = s.as_slice() else {
        return Err(SureError::invalid(format!(
            "head input must be [M, 2d], got {s:?}"
        )));
    };
    let w1 = params.get(&format!("head.{axis}.l1.w"))?;
    let w2 = params.get(&format!("head.{axis}.l2.w"))?;
    let (ws1, ws2) = (w1.shape(), w2.shape());
    if ws1.len() != 3 || ws1[1] != d || ws2.len() != 3 || ws2[1] != ws1[0] {
        return Err(SureError::invalid(format!(
            "head {axis} weights {ws1:?}, {ws2:?} do not fit input width {d}"
        )));
    }
    let width = ws2[0];
    if m == 0 {
        return Ok(fused.tape().constant(Tensor::zeros(&[0, width])));
    }
    let h = fused
        .reshape(&[m, d, 1])?
        .conv1d(
            w1,
            params.get(&format!("head.{axis}.l1.b"))?,
            ConvSpec::POINTWISE,
        )?
        .relu();
    h.conv1d(
        w2,
        params.get(&format!("head.{axis}.l2.b"))?,
        ConvSpec::POINTWISE,
    )?
    .reshape(&[m, width])
}

/// Runs both axis heads on the same descriptors.
pub fn head_pair_forward<'t, T: Scalar>(
    fused: Var<'t, T>,
    params: &Bound<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((
        head_forward(fused, params, "x")?,
        head_forward(fused, params, "y")?,
    ))
}

/// `psi_m = sum_k softmax(logits_m)_k c_k`.
pub fn soft_argmax<'t, T: Scalar>(logits: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = logits.shape();
    let &[m, n] = s.as_slice() else {
        return Err(SureError::invalid(format!(
            "logits must be [M, N], got {s:?}"
        )));
    };
    if n < 2 {
        return Err(SureError::invalid("soft-argmax needs at least two bins"));
    }
    let centers = logits
        .tape()
        .constant(Tensor::from_f64_slice(&[n, 1], &bin_centers(n))?);
    logits.softmax(1)?.matmul(centers)?.reshape(&[m])
}

fn column<'t, T: Scalar>(raw: Var<'t, T>, col: usize) -> Result<Var<'t, T>> {
    let m = raw.shape()[0];
    raw.narrow(1, col, 1)?.reshape(&[m])
}

/// Per-match NIG parameters on a tape, each of shape `[M]`.
#[derive(Clone, Copy, Debug)]
pub struct NigVars<'t, T: Scalar> {
    pub psi: Var<'t, T>,
    pub eta: Var<'t, T>,
    pub kappa: Var<'t, T>,
    pub rho: Var<'t, T>,
}

impl<'t, T: Scalar> NigVars<'t, T> {
    /// Splits an `[M, N + 3]` evidential head output.
    pub fn from_head(raw: Var<'t, T>, bins: usize) -> Result<Self> {
        let s = raw.shape();
        if s.len() != 2 || s[1] != bins + 3 {
            return Err(SureError::invalid(format!(
                "evidential head output must be [M, {}], got {s:?}",
                bins + 3
            )));
        }
        Ok(Self {
            psi: soft_argmax(raw.narrow(1, 0, bins)?)?,
            eta: column(raw, bins)?.softplus()?.add_scalar(POSITIVITY_EPS),
            kappa: column(raw, bins + 1)?
                .softplus()?
                .add_scalar(1.0 + POSITIVITY_EPS),
            rho: column(raw, bins + 2)?
                .softplus()?
                .add_scalar(POSITIVITY_EPS),
        })
    }
}

fn guarded_ln<'t, T: Scalar>(x: Var<'t, T>, what: &str) -> Result<Var<'t, T>> {
    let v = x.value();
    if let Some(bad) = v.data().iter().find(|v| !(v.to_f64_lossy() >= LOG_FLOOR)) {
        return Err(SureError::Numeric(format!(
            "log argument {what} = {bad} below floor {LOG_FLOOR:e}"
        )));
    }
    x.ln()
}

/// Per-match negative log evidence, `[M]`.
pub fn nll_var<'t, T: Scalar>(p: &NigVars<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let theta = p.rho.scale(2.0).mul(p.eta.add_scalar(1.0))?;
    let resid2 = target.sub(p.psi)?.square();
    let a = guarded_ln(p.eta, "eta")?
        .scale(-0.5)
        .add_scalar(0.5 * PI.ln());
    let b = p.kappa.mul(guarded_ln(theta, "theta")?)?.neg();
    let inner = resid2.mul(p.eta)?.add(theta)?;
    let c = p
        .kappa
        .add_scalar(0.5)
        .mul(guarded_ln(inner, "residual")?)?;
    let d = p
        .kappa
        .ln_gamma()?
        .sub(p.kappa.add_scalar(0.5).ln_gamma()?)?;
    let out = a.add(b)?.add(c)?.add(d)?;
    if !out.value().is_finite() {
        return Err(SureError::Numeric("evidential NLL is not finite".into()));
    }
    Ok(out)
}

/// Per-match `|y - psi| (2 eta + kappa)`, `[M]`.
pub fn reg_var<'t, T: Scalar>(p: &NigVars<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    target.sub(p.psi)?.abs().mul(p.eta.scale(2.0).add(p.kappa)?)
}

/// A mean loss over matches; `empty` marks a step without supervision.
#[derive(Clone, Copy, Debug)]
pub struct MeanLoss<'t, T: Scalar> {
    pub value: Var<'t, T>,
    pub empty: bool,
}

impl<'t, T: Scalar> MeanLoss<'t, T> {
    pub(crate) fn zero(tape: &'t crate::diffcore::Tape<T>) -> Self {
        Self {
            value: tape.constant(Tensor::scalar(T::zero())),
            empty: true,
        }
    }
}

/// `mean_j (NLL_j + zeta Reg_j)`.
pub fn fine_loss_var<'t, T: Scalar>(
    p: &NigVars<'t, T>,
    target: Var<'t, T>,
    zeta: f64,
) -> Result<MeanLoss<'t, T>> {
    if zeta < 0.0 {
        return Err(SureError::invalid("zeta must be non-negative"));
    }
    if target.shape() != p.psi.shape() {
        return Err(SureError::invalid(
            "targets and predictions differ in length",
        ));
    }
    if target.shape()[0] == 0 {
        return Ok(MeanLoss::zero(target.tape()));
    }
    let per = nll_var(p, target)?.add(reg_var(p, target)?.scale(zeta))?;
    Ok(MeanLoss {
        value: per.mean(),
        empty: false,
    })
}

/// Loss of one axis head under `mode` against offsets `target` (`[M]`).
pub fn head_loss<'t, T: Scalar>(
    mode: HeadMode,
    raw: Var<'t, T>,
    target: Var<'t, T>,
    bins: usize,
    zeta: f64,
    kl_sigma_bins: f64,
) -> Result<MeanLoss<'t, T>> {
    let m = target.shape()[0];
    if m == 0 {
        return Ok(MeanLoss::zero(target.tape()));
    }
    let value = match mode {
        HeadMode::Evidential => {
            return fine_loss_var(&NigVars::from_head(raw, bins)?, target, zeta)
        }
        HeadMode::DirectL2 => column(raw, 0)?.sub(target)?.square().mean(),
        HeadMode::CoordL2 => soft_argmax(raw)?.sub(target)?.square().mean(),
        HeadMode::CoordKl => {
            let t = target.value();
            let centers = bin_centers(bins);
            let sigma = kl_sigma_bins / bins as f64;
            let mut q = Vec::with_capacity(m * bins);
            let mut entropy = 0.0;
            for y in t.data() {
                let y = y.to_f64_lossy();
                let w: Vec<f64> = centers
                    .iter()
                    .map(|c| (-(c - y).powi(2) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let z: f64 = w.iter().sum();
                for wk in w {
                    let qk = wk / z;
                    if qk > 0.0 {
                        entropy += qk * qk.ln();
                    }
                    q.push(qk);
                }
            }
            let q = raw.tape().constant(Tensor::from_f64_slice(&[m, bins], &q)?);
            let cross = q.mul(raw.softmax(1)?.ln_floor(PROB_FLOOR))?.sum();
            cross.neg().add_scalar(entropy).scale(1.0 / m as f64)
        }
    };
    Ok(MeanLoss {
        value,
        empty: false,
    })
}

/// NIG posterior parameters of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub psi: f64,
    pub eta: f64,
    pub kappa: f64,
    pub rho: f64,
}

impl NigParams {
    pub fn new(psi: f64, eta: f64, kappa: f64, rho: f64) -> Result<Self> {
        let p = Self {
            psi,
            eta,
            kappa,
            rho,
        };
        p.validate()?;
        Ok(p)
    }

    /// Maps spatial logits and three raw scalars through soft-argmax and the
    /// shifted softplus parameterisation.
    pub fn from_raw(logits: &[f64], raw_eta: f64, raw_kappa: f64, raw_rho: f64) -> Result<Self> {
        if logits.len() < 2 {
            return Err(SureError::invalid("soft-argmax needs at least two bins"));
        }
        Self::new(
            soft_argmax_scalar(logits),
            softplus_scalar(raw_eta) + POSITIVITY_EPS,
            1.0 + softplus_scalar(raw_kappa) + POSITIVITY_EPS,
            softplus_scalar(raw_rho) + POSITIVITY_EPS,
        )
    }

    fn validate(&self) -> Result<()> {
        let ok = self.psi.is_finite()
            && self.eta > 0.0
            && self.kappa > 1.0
            && self.rho > 0.0
            && self.eta.is_finite()
            && self.kappa.is_finite()
            && self.rho.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SureError::invalid(format!(
                "NIG parameters out of domain: {self:?} (need eta > 0, kappa > 1, rho > 0)"
            )))
        }
    }
}

pub fn soft_argmax_scalar(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter()
        .zip(bin_centers(logits.len()))
        .map(|(w, c)| w / z * c)
        .sum()
}

/// `(z_hat, u_a, u_e) = (psi, rho / (kappa - 1), rho / (eta (kappa - 1)))`.
pub fn predictive_moments(p: &NigParams) -> Result<(f64, f64, f64)> {
    p.validate()?;
    let u_a = p.rho / (p.kappa - 1.0);
    Ok((p.psi, u_a, u_a / p.eta))
}

fn ln_gamma(x: f64) -> f64 {
    Scalar::ln_gamma(x)
}

/// Negative log evidence of `y` under the NIG predictive distribution.
pub fn evidential_nll(p: &NigParams, y: f64) -> Result<f64> {
    p.validate()?;
    let theta = 2.0 * p.rho * (1.0 + p.eta);
    let inner = (y - p.psi).powi(2) * p.eta + theta;
    if theta < LOG_FLOOR || inner < LOG_FLOOR {
        return Err(SureError::Numeric(format!(
            "log floor reached at {p:?}, y = {y}"
        )));
    }
    let v = 0.5 * (PI / p.eta).ln() - p.kappa * theta.ln()
        + (p.kappa + 0.5) * inner.ln()
        + ln_gamma(p.kappa)
        - ln_gamma(p.kappa + 0.5);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SureError::Numeric(format!(
            "non-finite NLL at {p:?}, y = {y}"
        )))
    }
}

/// `|y - psi| (2 eta + kappa)`.
pub fn evidential_reg(p: &NigParams, y: f64) -> f64 {
    (y - p.psi).abs() * (2.0 * p.eta + p.kappa)
}

/// Mean of `NLL + zeta Reg`; returns `(0, true)` for an empty set.
pub fn fine_loss(params: &[NigParams], targets: &[f64], zeta: f64) -> Result<(f64, bool)> {
    if params.len() != targets.len() {
        return Err(SureError::invalid(
            "targets and predictions differ in length",
        ));
    }
    if zeta < 0.0 {
        return Err(SureError::invalid("zeta must be non-negative"));
    }
    if params.is_empty() {
        return Ok((0.0, true));
    }
    let mut total = 0.0;
    for (p, &y) in params.iter().zip(targets) {
        total += evidential_nll(p, y)? + zeta * evidential_reg(p, y);
    }
    Ok((total / params.len() as f64, false))
}

/// Axis-mean of aleatoric and epistemic uncertainty.
pub fn aggregate_uncertainty(ux: (f64, f64), uy: (f64, f64)) -> (f64, f64) {
    ((ux.0 + uy.0) / 2.0, (ux.1 + uy.1) / 2.0)
}

/// Decoded prediction of one axis head for every match.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AxisPrediction {
    pub psi: Vec<f64>,
    pub u_a: Vec<f64>,
    pub u_e: Vec<f64>,
}

impl AxisPrediction {
    /// Decodes a raw `[M, width]` head output. Modes without a NIG
    /// posterior report zero uncertainty.
    pub fn decode<T: Scalar>(mode: HeadMode, raw: &Tensor<T>, bins: usize) -> Result<Self> {
        let width = mode.output_width(bins);
        let &[m, w] = raw.shape() else {
            return Err(SureError::invalid("head output must be a matrix"));
        };
        if w != width {
            return Err(SureError::invalid(format!(
                "{mode} head output has width {w}, expected {width}"
            )));
        }
        let data = raw.to_f64_vec();
        let mut out = Self::default();
        for row in data.chunks(w.max(1)).take(m) {
            let (psi, u_a, u_e) = match mode {
                HeadMode::DirectL2 => (row[0], 0.0, 0.0),
                HeadMode::CoordL2 | HeadMode::CoordKl => (soft_argmax_scalar(row), 0.0, 0.0),
                HeadMode::Evidential => {
                    let p =
                        NigParams::from_raw(&row[..bins], row[bins], row[bins + 1], row[bins + 2])?;
                    predictive_moments(&p)?
                }
            };
            out.psi.push(psi);
            out.u_a.push(u_a);
            out.u_e.push(u_e);
        }
        Ok(out)
    }
}

/// A refined correspondence with its uncertainties.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchWithUncertainty {
    pub i: usize,
    pub j: usize,
    pub a: Point2,
    pub b: Point2,
    pub offset: [f64; 2],
    pub u_a: f64,
    pub u_e: f64,
    pub conf: f64,
}

/// Places `pA` at the centre of cell `i` and `pB` at the centre of cell `j`
/// shifted by `stride * (psi_x, psi_y)`.
pub fn refine_matches(
    matches: &CoarseMatchSet,
    grid: &GridSpec,
    x: &AxisPrediction,
    y: &AxisPrediction,
) -> Result<Vec<MatchWithUncertainty>> {
    let n = matches.len();
    if [
        x.psi.len(),
        y.psi.len(),
        x.u_a.len(),
        y.u_a.len(),
        x.u_e.len(),
        y.u_e.len(),
    ]
    .iter()
    .any(|&l| l != n)
    {
        return Err(SureError::invalid(
            "per-axis predictions do not match the coarse set",
        ));
    }
    let s = grid.stride as f64;
    matches
        .pairs
        .iter()
        .enumerate()
        .map(|(k, m)| {
            if m.i >= grid.len() || m.j >= grid.len() {
                return Err(SureError::invalid(format!(
                    "cell pair ({}, {}) outside grid",
                    m.i, m.j
                )));
            }
            let cb = grid.center(m.j);
            let (u_a, u_e) = aggregate_uncertainty((x.u_a[k], x.u_e[k]), (y.u_a[k], y.u_e[k]));
            Ok(MatchWithUncertainty {
                i: m.i,
                j: m.j,
                a: grid.center(m.i),
                b: Point2::new(cb.x + s * x.psi[k], cb.y + s * y.psi[k]),
                offset: [x.psi[k], y.psi[k]],
                u_a,
                u_e,
                conf: m.conf,
            })
        })
        .collect()
}

/// Nearest-rank quantile: the `ceil(q n)`-th smallest value. A small slack
/// keeps `q n` that is integral up to rounding from skipping a rank.
pub fn quantile_nearest_rank(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(q > 0.0 && q <= 1.0) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64 - 1e-9).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// How uncertainty thresholds are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterRule {
    /// Quantile levels of the batch's own uncertainty distribution.
    Quantile { q_a: f64, q_e: f64 },
    /// Fixed thresholds.
    Absolute { tau_a: f64, tau_e: f64 },
}

impl Default for FilterRule {
    fn default() -> Self {
        FilterRule::Quantile {
            q_a: 0.95,
            q_e: 0.95,
        }
    }
}

/// Drops matches whose `u_a` or `u_e` exceeds the given thresholds; order is kept.
pub fn filter_by_thresholds(
    matches: &[MatchWithUncertainty],
    tau_a: f64,
    tau_e: f64,
) -> Vec<MatchWithUncertainty> {
    matches
        .iter()
        .filter(|m| m.u_a <= tau_a && m.u_e <= tau_e)
        .copied()
        .collect()
}

/// Quantile filtering with thresholds computed from `matches` itself.
pub fn filter_by_uncertainty(
    matches: &[MatchWithUncertainty],
    q_a: f64,
    q_e: f64,
) -> Result<Vec<MatchWithUncertainty>> {
    for q in [q_a, q_e] {
        if !(q > 0.0 && q <= 1.0) {
            return Err(SureError::invalid(format!(
                "quantile level {q} outside (0, 1]"
            )));
        }
    }
    if matches.is_empty() {
        return Ok(Vec::new());
    }
    let ua: Vec<f64> = matches.iter().map(|m| m.u_a).collect();
    let ue: Vec<f64> = matches.iter().map(|m| m.u_e).collect();
    let tau_a = quantile_nearest_rank(&ua, q_a).unwrap_or(f64::INFINITY);
    let tau_e = quantile_nearest_rank(&ue, q_e).unwrap_or(f64::INFINITY);
    Ok(filter_by_thresholds(matches, tau_a, tau_e))
}

pub fn apply_filter(
    matches: &[MatchWithUncertainty],
    rule: FilterRule,
) -> Result<Vec<MatchWithUncertainty>> {
    match rule {
        FilterRule::Quantile { q_a, q_e } => filter_by_uncertainty(matches, q_a, q_e),
        FilterRule::Absolute { tau_a, tau_e } => Ok(filter_by_thresholds(matches, tau_a, tau_e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::CoarseMatch;
    use crate::diffcore::{check_gradients, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    // independent scalar evaluation, log-gamma from libm
    fn oracle_nll(psi: f64, eta: f64, kappa: f64, rho: f64, y: f64) -> f64 {
        let theta = 2.0 * rho * (1.0 + eta);
        0.5 * (PI / eta).ln() - kappa * theta.ln()
            + (kappa + 0.5) * ((y - psi) * (y - psi) * eta + theta).ln()
            + libm::lgamma(kappa)
            - libm::lgamma(kappa + 0.5)
    }

    #[test]
    fn bin_centre_examples() {
        let mut logits = vec![0.0; 16];
        assert!(soft_argmax_scalar(&logits).abs() < 1e-15);
        logits[0] = 1000.0;
        assert!((soft_argmax_scalar(&logits) + 0.46875).abs() < 1e-12);
        logits[0] = 0.0;
        logits[15] = 1000.0;
        assert!((soft_argmax_scalar(&logits) - 0.46875).abs() < 1e-12);
    }

    #[test]
    fn moments_examples() {
        let p = NigParams::new(0.1, 1.0, 2.0, 0.5).unwrap();
        assert_eq!(predictive_moments(&p).unwrap(), (0.1, 0.5, 0.5));
        let (_, ua, ue) =
            predictive_moments(&NigParams::new(0.1, 1e12, 2.0, 0.5).unwrap()).unwrap();
        assert_eq!(ua, 0.5);
        assert!(ue < 1e-12);
        let (_, ua2, ue2) =
            predictive_moments(&NigParams::new(0.1, 1.0, 2.0, 1.0).unwrap()).unwrap();
        assert_eq!((ua2, ue2), (1.0, 1.0));
        assert!(NigParams::new(0.0, 1.0, 1.0, 1.0).is_err());
        let bad = NigParams {
            psi: 0.0,
            eta: 1.0,
            kappa: 0.5,
            rho: 1.0,
        };
        assert!(predictive_moments(&bad).is_err());
    }

    #[test]
    fn nll_example() {
        let p = NigParams::new(0.0, 1.0, 2.0, 1.0).unwrap();
        let expect =
            0.5 * PI.ln() - 2.0 * 4f64.ln() + 2.5 * 4f64.ln() + (1.0f64 / libm::tgamma(2.5)).ln();
        assert!((evidential_nll(&p, 0.0).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn reg_examples() {
        let p = NigParams::new(0.1, 1.0, 2.0, 1.0).unwrap();
        assert!((evidential_reg(&p, 0.5) - 1.6).abs() < 1e-15);
        assert_eq!(evidential_reg(&p, 0.1), 0.0);
        let p2 = NigParams { eta: 2.0, ..p };
        let d = evidential_reg(&p2, 0.5) - evidential_reg(&p, 0.5);
        assert!((d - 2.0 * 1.0 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn fine_loss_examples() {
        let p1 = NigParams::new(0.1, 1.0, 2.0, 0.5).unwrap();
        let p2 = NigParams::new(-0.2, 3.0, 1.5, 0.2).unwrap();
        let (single, empty) = fine_loss(&[p1], &[0.3], 1.0).unwrap();
        assert!(!empty);
        assert!(
            (single - evidential_nll(&p1, 0.3).unwrap() - evidential_reg(&p1, 0.3)).abs() < 1e-12
        );
        let (nll_only, _) = fine_loss(&[p1], &[0.3], 0.0).unwrap();
        assert_eq!(nll_only, evidential_nll(&p1, 0.3).unwrap());
        let (two, _) = fine_loss(&[p1, p2], &[0.3, 0.0], 1.0).unwrap();
        let t1 = oracle_nll(0.1, 1.0, 2.0, 0.5, 0.3) + 0.2 * 4.0;
        let t2 = oracle_nll(-0.2, 3.0, 1.5, 0.2, 0.0) + 0.2 * 7.5;
        assert!((two - (t1 + t2) / 2.0).abs() < 1e-12);
        assert_eq!(fine_loss(&[], &[], 1.0).unwrap(), (0.0, true));
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(
            aggregate_uncertainty((0.2, 0.0), (0.4, 0.0)).0,
            0.30000000000000004
        );
        assert_eq!(aggregate_uncertainty((0.7, 0.1), (0.7, 0.1)), (0.7, 0.1));
        assert_eq!(aggregate_uncertainty((0.0, 0.0), (0.0, 0.0)), (0.0, 0.0));
    }

    fn heads(mode: HeadMode, d: usize, seed: u64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        init_heads(mode, d, 5, 4, &mut Initializer::new(seed), &mut p);
        p.cast()
    }

    #[test]
    fn head_edge_cases() {
        let p = heads(HeadMode::Evidential, 6, 1);
        let tape = Tape::<f64>::new();
        let bound = p.bind(&tape, false);
        let empty = tape.constant(Tensor::zeros(&[0, 6]));
        let (hx, hy) = head_pair_forward(empty, &bound).unwrap();
        assert_eq!(hx.shape(), vec![0, 7]);
        assert_eq!(hy.shape(), vec![0, 7]);

        let mut zero = p.clone();
        zero.iter_mut()
            .for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let bound = zero.bind(&tape, false);
        let x = tape.constant(Tensor::full(&[3, 6], 0.7));
        let out = head_forward(x, &bound, "x").unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let wrong = tape.constant(Tensor::full(&[3, 5], 0.7));
        assert!(head_forward(wrong, &bound, "x").is_err());
    }

    #[test]
    fn initial_rho_is_small() {
        let p = heads(HeadMode::Evidential, 6, 3);
        for axis in AXES {
            let b = p.get(&format!("head.{axis}.l2.b")).unwrap().data();
            assert_eq!(&b[..6], &[0.0; 6]);
            assert!((libm::log1p(libm::exp(b[6])) - 0.01).abs() < 1e-7);
        }
        let p = heads(HeadMode::CoordL2, 6, 3);
        assert!(p
            .get("head.x.l2.b")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn tape_and_scalar_paths_agree() {
        let p = heads(HeadMode::Evidential, 6, 2);
        let tape = Tape::<f64>::new();
        let bound = p.bind(&tape, false);
        let data: Vec<f64> = (0..18).map(|k| (k as f64 * 0.61).sin() * 3.0).collect();
        let x = tape.constant(Tensor::new(vec![3, 6], data).unwrap());
        let raw = head_forward(x, &bound, "y").unwrap();
        let nig = NigVars::from_head(raw, 4).unwrap();
        let target = tape.constant(Tensor::new(vec![3], vec![0.1, -0.4, 0.25]).unwrap());
        let loss = fine_loss_var(&nig, target, 1.0)
            .unwrap()
            .value
            .value()
            .item()
            .unwrap();
        let rawv = raw.value();
        let params: Vec<NigParams> = rawv
            .data()
            .chunks(7)
            .map(|r| NigParams::from_raw(&r[..4], r[4], r[5], r[6]).unwrap())
            .collect();
        let (expect, _) = fine_loss(&params, &[0.1, -0.4, 0.25], 1.0).unwrap();
        assert!((loss - expect).abs() < 1e-12);
        let dec = AxisPrediction::decode(HeadMode::Evidential, &rawv, 4).unwrap();
        for (k, p) in params.iter().enumerate() {
            let (z, ua, ue) = predictive_moments(p).unwrap();
            assert_eq!((dec.psi[k], dec.u_a[k], dec.u_e[k]), (z, ua, ue));
        }
    }

    #[test]
    fn loss_gradients_every_mode() {
        for mode in HeadMode::ALL {
            let p = heads(mode, 4, 3);
            let x: Tensor<f64> = Tensor::new(
                vec![3, 4],
                (0..12).map(|k| (k as f64 * 1.3).cos()).collect(),
            )
            .unwrap();
            let target = Tensor::new(vec![3], vec![0.3, -0.1, 0.45]).unwrap();
            for name in p.names() {
                let err = check_gradients(
                    |tape, w| {
                        let bound = p.bind(tape, false).with_override(name, w);
                        let axis = &name[5..6];
                        let raw = head_forward(tape.constant(x.clone()), &bound, axis)?;
                        Ok(head_loss(mode, raw, tape.constant(target.clone()), 4, 1.0, 1.0)?.value)
                    },
                    p.get(name).unwrap(),
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-4, "{mode} {name}: {err}");
            }
        }
    }

    #[test]
    fn nll_and_reg_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let point = Tensor::new(
                vec![4],
                vec![
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.05..5.0),
                    rng.random_range(1.05..5.0),
                    rng.random_range(0.05..5.0),
                ],
            )
            .unwrap();
            let y: f64 = rng.random_range(-0.5..0.5);
            for use_reg in [false, true] {
                let err = check_gradients(
                    |tape, v| {
                        let nig = NigVars {
                            psi: v.narrow(0, 0, 1)?,
                            eta: v.narrow(0, 1, 1)?,
                            kappa: v.narrow(0, 2, 1)?,
                            rho: v.narrow(0, 3, 1)?,
                        };
                        let t = tape.constant(Tensor::from_vec(vec![y]));
                        Ok(if use_reg {
                            reg_var(&nig, t)?
                        } else {
                            nll_var(&nig, t)?
                        }
                        .sum())
                    },
                    &point,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-4, "reg={use_reg} at {:?}: {err}", point.data());
            }
        }
    }

    #[test]
    fn nll_psi_gradient_vanishes_at_target() {
        let tape = Tape::<f64>::new();
        let psi = tape.param(Tensor::from_vec(vec![0.2]));
        let nig = NigVars {
            psi,
            eta: tape.constant(Tensor::from_vec(vec![1.5])),
            kappa: tape.constant(Tensor::from_vec(vec![2.5])),
            rho: tape.constant(Tensor::from_vec(vec![0.3])),
        };
        let t = tape.constant(Tensor::from_vec(vec![0.2]));
        let loss = nll_var(&nig, t).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(psi).unwrap().data()[0], 0.0);
    }

    #[test]
    fn kl_head_is_minimised_by_target() {
        // the KL loss is zero when the softmax equals the Gaussian target
        let tape = Tape::<f64>::new();
        let bins = 8;
        let y = 0.13;
        let sigma = 1.0 / bins as f64;
        let q: Vec<f64> = bin_centers(bins)
            .iter()
            .map(|c| -(c - y) * (c - y) / (2.0 * sigma * sigma))
            .collect();
        let raw = tape.constant(Tensor::new(vec![1, bins], q).unwrap());
        let t = tape.constant(Tensor::from_vec(vec![y]));
        let l = head_loss(HeadMode::CoordKl, raw, t, bins, 1.0, 1.0).unwrap();
        assert!(l.value.value().item().unwrap().abs() < 1e-12);
    }

    fn with_u(u: &[(f64, f64)]) -> Vec<MatchWithUncertainty> {
        u.iter()
            .enumerate()
            .map(|(k, &(u_a, u_e))| MatchWithUncertainty {
                i: k,
                j: k,
                a: Point2::new(0.0, 0.0),
                b: Point2::new(0.0, 0.0),
                offset: [0.0; 2],
                u_a,
                u_e,
                conf: 1.0,
            })
            .collect()
    }

    fn brute_filter(ms: &[MatchWithUncertainty], qa: f64, qe: f64) -> Vec<usize> {
        let n = ms.len();
        let thr = |vals: Vec<f64>, q: f64| {
            // smallest value v such that at least q n values are <= v
            let mut best = f64::INFINITY;
            for &v in &vals {
                let count = vals.iter().filter(|&&w| w <= v).count();
                if count as f64 >= q * n as f64 - 1e-9 && v < best {
                    best = v;
                }
            }
            best
        };
        let ta = thr(ms.iter().map(|m| m.u_a).collect(), qa);
        let te = thr(ms.iter().map(|m| m.u_e).collect(), qe);
        ms.iter()
            .filter(|m| m.u_a <= ta && m.u_e <= te)
            .map(|m| m.i)
            .collect()
    }

    #[test]
    fn filter_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let u: Vec<(f64, f64)> = (0..100).map(|_| (rng.random(), rng.random())).collect();
        let ms = with_u(&u);
        assert_eq!(filter_by_uncertainty(&ms, 1.0, 1.0).unwrap().len(), 100);
        let kept = filter_by_uncertainty(&ms, 0.95, 0.95).unwrap();
        assert!(kept.len() >= 90);
        let same = with_u(&[(0.3, 0.2); 10]);
        assert_eq!(filter_by_uncertainty(&same, 0.5, 0.5).unwrap().len(), 10);
        assert!(filter_by_uncertainty(&[], 0.9, 0.9).unwrap().is_empty());
        assert!(filter_by_uncertainty(&ms, 0.0, 0.9).is_err());
    }

    #[test]
    fn refine_examples() {
        let grid = GridSpec {
            rows: 2,
            cols: 2,
            stride: 8,
        };
        let set = CoarseMatchSet {
            pairs: vec![
                CoarseMatch {
                    i: 0,
                    j: 3,
                    conf: 0.9,
                },
                CoarseMatch {
                    i: 1,
                    j: 2,
                    conf: 0.5,
                },
            ],
            grid: (2, 2),
        };
        let x = AxisPrediction {
            psi: vec![0.0, 0.5],
            u_a: vec![0.2, 1.0],
            u_e: vec![0.1, 0.0],
        };
        let y = AxisPrediction {
            psi: vec![0.0, -0.5],
            u_a: vec![0.4, 1.0],
            u_e: vec![0.3, 0.0],
        };
        let r = refine_matches(&set, &grid, &x, &y).unwrap();
        assert_eq!(r[0].b, grid.center(3));
        assert_eq!(r[0].a, grid.center(0));
        let c = grid.center(2);
        assert_eq!(r[1].b, Point2::new(c.x + 4.0, c.y - 4.0));
        assert!((r[0].u_a - 0.3).abs() < 1e-15 && (r[0].u_e - 0.2).abs() < 1e-15);
        assert!(refine_matches(&set, &grid, &x, &AxisPrediction::default()).is_err());
    }

    #[test]
    fn head_mode_names_round_trip() {
        for m in HeadMode::ALL {
            assert_eq!(m.as_str().parse::<HeadMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("l1".parse::<HeadMode>().is_err());
    }

    proptest! {
        #[test]
        fn parameterisation_is_valid(a in -100.0f64..100.0, b in -100.0f64..100.0, c in -100.0f64..100.0) {
            let p = NigParams::from_raw(&[0.0, 1.0], a, b, c).unwrap();
            prop_assert!(p.eta > 0.0 && p.kappa > 1.0 && p.rho > 0.0);
            let (_, ua, ue) = predictive_moments(&p).unwrap();
            prop_assert!(ua > 0.0 && ue > 0.0);
        }

        #[test]
        fn epistemic_below_aleatoric_iff_evidence(
            eta in 0.01f64..10.0, kappa in 1.01f64..10.0, rho in 0.01f64..10.0,
        ) {
            let p = NigParams::new(0.0, eta, kappa, rho).unwrap();
            let (_, ua, ue) = predictive_moments(&p).unwrap();
            prop_assert_eq!(ue <= ua, eta >= 1.0);
        }

        #[test]
        fn nll_matches_oracle(
            psi in -0.5f64..0.5, eta in 1e-3f64..50.0, kappa in 1.001f64..50.0,
            rho in 1e-3f64..50.0, y in -0.5f64..0.5,
        ) {
            let got = evidential_nll(&NigParams::new(psi, eta, kappa, rho).unwrap(), y).unwrap();
            let want = oracle_nll(psi, eta, kappa, rho, y);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }

        #[test]
        fn soft_argmax_shift_invariant(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..20), shift in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let a = soft_argmax_scalar(&logits);
            prop_assert!((a - soft_argmax_scalar(&shifted)).abs() < 1e-12);
            prop_assert!((-0.5..=0.5).contains(&a));
        }

        #[test]
        fn fine_loss_permutation_invariant(seed in any::<u64>(), n in 1usize..20) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut items: Vec<(NigParams, f64)> = (0..n)
                .map(|_| {
                    let p = NigParams::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(0.1..3.0),
                        rng.random_range(1.1..3.0),
                        rng.random_range(0.1..3.0),
                    ).unwrap();
                    (p, rng.random_range(-0.5..0.5))
                })
                .collect();
            let eval = |items: &[(NigParams, f64)]| {
                let (p, y): (Vec<_>, Vec<_>) = items.iter().copied().unzip();
                fine_loss(&p, &y, 1.0).unwrap().0
            };
            let before = eval(&items);
            items.reverse();
            items.rotate_left(n / 2);
            prop_assert!((before - eval(&items)).abs() <= 1e-12 * before.abs().max(1.0));
        }

        #[test]
        fn filter_matches_brute_force(
            seed in any::<u64>(), n in 0usize..200, qa in 0.01f64..=1.0, qe in 0.01f64..=1.0,
            coarse in any::<bool>(),
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    let (a, e): (f64, f64) = (rng.random(), rng.random());
                    if coarse { ((a * 4.0).round(), (e * 4.0).round()) } else { (a, e) }
                })
                .collect();
            let ms = with_u(&u);
            let got: Vec<usize> = filter_by_uncertainty(&ms, qa, qe).unwrap().iter().map(|m| m.i).collect();
            prop_assert_eq!(got, brute_filter(&ms, qa, qe));
        }
    }
}
