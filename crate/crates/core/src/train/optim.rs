//! AdamW with decoupled, multiplicative weight decay.

use std::collections::BTreeMap;

use crate::diffcore::{Scalar, Tensor};
use crate::error::{Result, SureError};
use crate::nn::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

/// Moment estimates are kept in `f64` regardless of the parameter scalar.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient entry:
    /// `p *= 1 - lr wd`, then the bias-corrected Adam step.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<StepOutcome> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(SureError::invalid(format!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        if grads.values().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let decay = 1.0 - lr * self.weight_decay;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let n = p.numel();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            for (k, (pk, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = gk.to_f64_lossy();
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
                let (mh, vh) = (m[k] / c1, v[k] / c2);
                let x = pk.to_f64_lossy() * decay - lr * mh / (vh.sqrt() + ADAM_EPS);
                *pk = T::from_f64_lossy(x);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> (ParamStore<f64>, BTreeMap<String, Tensor<f64>>) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![v]));
        (p, BTreeMap::new())
    }

    // textbook AdamW written out for one scalar
    fn reference(mut w: f64, g: f64, lr: f64, wd: f64, steps: usize) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            w -= lr * wd * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        w
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let (mut p, mut g) = single(0.7);
        g.insert("w".into(), Tensor::from_vec(vec![0.0]));
        let mut opt = AdamW::new(0.0);
        for _ in 0..5 {
            opt.step(&mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let (mut p, mut g) = single(2.0);
        g.insert("w".into(), Tensor::from_vec(vec![0.0]));
        let mut opt = AdamW::new(0.1);
        let lr = 0.05;
        for t in 1..=10 {
            opt.step(&mut p, &g, lr).unwrap();
            let expect = 2.0 * (1.0 - lr * 0.1f64).powi(t);
            assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_matches_reference() {
        for &(g0, wd) in &[(0.3, 1e-4), (-2.0, 0.0), (1e-3, 0.5)] {
            let (mut p, mut g) = single(1.5);
            g.insert("w".into(), Tensor::from_vec(vec![g0]));
            let mut opt = AdamW::new(wd);
            for t in 1..=50 {
                opt.step(&mut p, &g, 2e-3).unwrap();
                let want = reference(1.5, g0, 2e-3, wd, t);
                assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_finite_gradient_skips() {
        let (mut p, mut g) = single(1.0);
        g.insert("w".into(), Tensor::from_vec(vec![f64::NAN]));
        let mut opt = AdamW::new(0.1);
        assert_eq!(
            opt.step(&mut p, &g, 0.1).unwrap(),
            StepOutcome::SkippedNonFinite
        );
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (mut p, mut g) = single(1.0);
        g.insert("w".into(), Tensor::from_vec(vec![1.0, 2.0]));
        assert!(AdamW::new(0.0).step(&mut p, &g, 0.1).is_err());
        g.clear();
        g.insert("missing".into(), Tensor::from_vec(vec![1.0]));
        assert!(AdamW::new(0.0).step(&mut p, &g, 0.1).is_err());
    }
}
