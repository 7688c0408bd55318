//! Named parameter storage, seeded initialisation and the frozen-statistics
//! channel normalisation used in place of batch normalisation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::error::{Result, SureError};

/// Parameters keyed by dotted names such as `backbone.s1.down.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| SureError::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| SureError::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape for one forward pass.
#[derive(Clone)]
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SureError::invalid(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }

    /// Copy of the binding with `name` pointing at `var`.
    pub fn with_override(&self, name: &str, var: Var<'t, T>) -> Self {
        let mut vars = self.vars.clone();
        vars.insert(name.to_string(), var);
        Self { vars }
    }
}

/// Seeded Kaiming-normal initialiser (`std = sqrt(2 / fan_in)`).
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    /// Kaiming init for a kernel whose dimensions after the first are fan-in.
    pub fn kaiming(&mut self, shape: &[usize]) -> Tensor<f32> {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(shape, (2.0 / fan_in.max(1) as f64).sqrt())
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Running per-channel statistics of one normalisation site.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            count: 0,
        }
    }

    /// Folds one sample's channel statistics into the cumulative average.
    pub fn observe<T: Scalar>(&mut self, x: &Tensor<T>) {
        let c = self.mean.len();
        let inner = x.numel() / c.max(1);
        if inner == 0 {
            return;
        }
        let n = self.count as f64;
        for ch in 0..c {
            let vals = &x.data()[ch * inner..(ch + 1) * inner];
            let m = vals.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / inner as f64;
            let v = vals
                .iter()
                .map(|v| (v.to_f64_lossy() - m).powi(2))
                .sum::<f64>()
                / inner as f64;
            self.mean[ch] = (self.mean[ch] * n + m) / (n + 1.0);
            self.var[ch] = (self.var[ch] * n + v) / (n + 1.0);
        }
        self.count += 1;
    }
}

/// All normalisation statistics of a model, plus the freeze flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormStats {
    pub sites: BTreeMap<String, ChannelStats>,
    pub frozen: bool,
}

impl NormStats {
    pub fn site(&self, name: &str) -> Result<&ChannelStats> {
        self.sites
            .get(name)
            .ok_or_else(|| SureError::invalid(format!("missing normalisation site {name}")))
    }
}

/// How a forward pass treats normalisation statistics.
pub enum NormMode<'a> {
    /// Use stored statistics as constants.
    Frozen(&'a NormStats),
    /// Fold each input into the running statistics before normalising with them.
    Update(&'a mut NormStats),
}

impl NormMode<'_> {
    pub fn stats(&self) -> &NormStats {
        match self {
            NormMode::Frozen(s) => s,
            NormMode::Update(s) => s,
        }
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` with statistics held constant.
pub fn channel_norm<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &Bound<'t, T>,
    site: &str,
    mode: &mut NormMode<'_>,
) -> Result<Var<'t, T>> {
    if let NormMode::Update(stats) = mode {
        if !stats.frozen {
            let entry = stats
                .sites
                .get_mut(site)
                .ok_or_else(|| SureError::invalid(format!("missing normalisation site {site}")))?;
            entry.observe(&x.value());
        }
    }
    let st = mode.stats().site(site)?;
    let tape = x.tape();
    let inv: Vec<f64> = st.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let shift: Vec<f64> = st.mean.iter().zip(&inv).map(|(m, s)| -m * s).collect();
    let c = inv.len();
    let scale = tape.constant(Tensor::from_f64_slice(&[c], &inv)?);
    let shift = tape.constant(Tensor::from_f64_slice(&[c], &shift)?);
    x.mul_channels(scale)?
        .add_channels(shift)?
        .mul_channels(params.get(&format!("{site}.gamma"))?)?
        .add_channels(params.get(&format!("{site}.beta"))?)
}
