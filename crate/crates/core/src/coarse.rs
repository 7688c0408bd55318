//! Coarse matching: attention-based feature enhancement, similarity,
//! dual softmax and mutual-nearest-neighbour selection.

use crate::diffcore::{Scalar, Tensor, Var};
use crate::error::{Result, SureError};
use crate::nn::{Bound, Initializer, ParamStore};

/// Largest number of cells per map accepted by [`enhance_features`].
pub const MAX_ATTENTION_CELLS: usize = 4096;

/// Default confidence threshold on `pAB * pBA`.
pub const DEFAULT_TAU_C: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseMatch {
    pub i: usize,
    pub j: usize,
    pub conf: f64,
}

/// Mutual-nearest-neighbour matches between two grids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoarseMatchSet {
    pub pairs: Vec<CoarseMatch>,
    /// `(rows, cols)` of the coarse grid of each image.
    pub grid: (usize, usize),
}

impl CoarseMatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

const BLOCKS: [&str; 2] = ["self", "cross"];
const PROJ: [&str; 4] = ["q", "k", "v", "o"];

/// Adds `depth` self+cross attention layers of width `channels`.
pub fn init_attention(
    depth: usize,
    channels: usize,
    init: &mut Initializer,
    params: &mut ParamStore,
) {
    let std = 1.0 / (channels as f64).sqrt();
    for layer in 0..depth {
        for block in BLOCKS {
            for p in PROJ {
                params.insert(
                    format!("coarse.l{layer}.{block}.{p}"),
                    init.normal(&[channels, channels], std),
                );
            }
        }
    }
}

/// `x + softmax(Q K^T / sqrt(C)) V W_o` with queries from `xq` and keys/values from `xkv`.
fn attend<'t, T: Scalar>(
    xq: Var<'t, T>,
    xkv: Var<'t, T>,
    params: &Bound<'t, T>,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let w = |p: &str| params.get(&format!("{prefix}.{p}"));
    let c = xq.shape()[1];
    let q = xq.matmul(w("q")?)?;
    let k = xkv.matmul(w("k")?)?;
    let v = xkv.matmul(w("v")?)?;
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / (c as f64).sqrt());
    let msg = scores.softmax(1)?.matmul(v)?.matmul(w("o")?)?;
    xq.add(msg)
}

fn to_sequence<'t, T: Scalar>(f: Var<'t, T>) -> Result<(Var<'t, T>, [usize; 3])> {
    let s = f.shape();
    let &[c, h, w] = s.as_slice() else {
        return Err(SureError::invalid(format!(
            "feature map must be [C,H,W], got {s:?}"
        )));
    };
    Ok((f.reshape(&[c, h * w])?.transpose()?, [c, h, w]))
}

fn from_sequence<'t, T: Scalar>(x: Var<'t, T>, shape: [usize; 3]) -> Result<Var<'t, T>> {
    x.transpose()?.reshape(&shape)
}

/// Runs `depth` layers of self attention per image followed by cross
/// attention in both directions. Weights are shared by the two images.
pub fn enhance_features<'t, T: Scalar>(
    fa: Var<'t, T>,
    fb: Var<'t, T>,
    params: &Bound<'t, T>,
    depth: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if fa.shape() != fb.shape() {
        return Err(SureError::invalid(format!(
            "coarse maps differ in shape: {:?} vs {:?}",
            fa.shape(),
            fb.shape()
        )));
    }
    let (mut a, shape) = to_sequence(fa)?;
    let (mut b, _) = to_sequence(fb)?;
    let cells = shape[1] * shape[2];
    if cells > MAX_ATTENTION_CELLS {
        return Err(SureError::invalid(format!(
            "{cells} coarse cells exceed the attention limit of {MAX_ATTENTION_CELLS}; tile the image"
        )));
    }
    for layer in 0..depth {
        let sp = format!("coarse.l{layer}.self");
        a = attend(a, a, params, &sp)?;
        b = attend(b, b, params, &sp)?;
        let cp = format!("coarse.l{layer}.cross");
        let (na, nb) = (attend(a, b, params, &cp)?, attend(b, a, params, &cp)?);
        a = na;
        b = nb;
    }
    Ok((from_sequence(a, shape)?, from_sequence(b, shape)?))
}

/// `S[i][j] = <fa(i), fb(j)> / tau` over flattened cells.
pub fn similarity_matrix<'t, T: Scalar>(
    fa: Var<'t, T>,
    fb: Var<'t, T>,
    tau: f64,
) -> Result<Var<'t, T>> {
    if !(tau > 0.0) {
        return Err(SureError::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (a, _) = to_sequence(fa)?;
    let s = fb.shape();
    let &[c, h, w] = s.as_slice() else {
        return Err(SureError::invalid(format!(
            "feature map must be [C,H,W], got {s:?}"
        )));
    };
    Ok(a.matmul(fb.reshape(&[c, h * w])?)?.scale(1.0 / tau))
}

/// Row-wise (`pAB`) and column-wise (`pBA`) softmax of `s`.
pub fn dual_softmax<'t, T: Scalar>(s: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if s.shape().len() != 2 {
        return Err(SureError::invalid("dual softmax needs a matrix"));
    }
    Ok((s.softmax(1)?, s.softmax(0)?))
}

/// Keeps `(i, j)` when each is the other's argmax (lowest index on ties) and
/// `pAB[i][j] * pBA[i][j] >= tau_c`.
pub fn mnn_filter<T: Scalar>(
    p_ab: &Tensor<T>,
    p_ba: &Tensor<T>,
    tau_c: f64,
    grid: (usize, usize),
) -> Result<CoarseMatchSet> {
    let &[na, nb] = p_ab.shape() else {
        return Err(SureError::invalid("mnn_filter needs matrices"));
    };
    if p_ba.shape() != p_ab.shape() {
        return Err(SureError::invalid("probability matrices differ in shape"));
    }
    if !(0.0..1.0).contains(&tau_c) {
        return Err(SureError::invalid(format!(
            "tau_c must lie in [0, 1), got {tau_c}"
        )));
    }
    let (ab, ba) = (p_ab.data(), p_ba.data());
    let mut col_best = vec![0usize; nb];
    let mut col_max: Vec<T> = ba.get(..nb).map(<[T]>::to_vec).unwrap_or_default();
    for (i, row) in ba.chunks_exact(nb.max(1)).enumerate().skip(1) {
        for ((best, max), &v) in col_best.iter_mut().zip(col_max.iter_mut()).zip(row) {
            if v > *max {
                *max = v;
                *best = i;
            }
        }
    }
    let mut pairs = Vec::new();
    if nb > 0 {
        for i in 0..na {
            let row = &ab[i * nb..(i + 1) * nb];
            let mut j = 0;
            for k in 1..nb {
                if row[k] > row[j] {
                    j = k;
                }
            }
            if col_best[j] != i {
                continue;
            }
            let conf = row[j].to_f64_lossy() * ba[i * nb + j].to_f64_lossy();
            if conf >= tau_c {
                pairs.push(CoarseMatch { i, j, conf });
            }
        }
    }
    Ok(CoarseMatchSet { pairs, grid })
}
