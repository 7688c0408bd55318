//! Losses, the optimiser and the training loop.

mod optim;
mod synth;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, StepOutcome, ADAM_EPS, BETA1, BETA2};
pub use synth::{
    generate_dataset, generate_pair, generate_pair_with, pair_seed, render_texture,
    sample_homography, warp_image, Difficulty, SyntheticPair, TextureConfig, PIXEL_NOISE,
};

use crate::backbone::sample_fine_descriptors;
use crate::coarse::mnn_filter;
use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::error::{Result, SureError};
use crate::evidential::{head_loss, head_pair_forward, MeanLoss};
use crate::geometry::GroundTruth;
use crate::model::{forward_pair, ModelConfig, SureModel};
use crate::nn::{Bound, NormMode};

/// Probability floor inside the focal loss logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub zeta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Linear learning-rate warm-up length in optimiser steps; 0 disables it.
    pub warmup_steps: usize,
    /// Supervise the fine heads on ground-truth cell pairs rather than predicted ones.
    pub teacher_forcing: bool,
    /// Add a focal term over non-matching entries.
    pub focal_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 1e-4,
            alpha: 0.25,
            gamma: 2.0,
            lambda_c: 1.0,
            lambda_f: 0.25,
            zeta: 1.0,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            image_size: 64,
            warmup_steps: 0,
            teacher_forcing: true,
            focal_negatives: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("lambda_c", self.lambda_c),
            ("lambda_f", self.lambda_f),
            ("zeta", self.zeta),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SureError::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(SureError::invalid("batch_size must be positive"));
        }
        if self.image_size == 0 || self.image_size % crate::model::STRIDE != 0 {
            return Err(SureError::invalid(format!(
                "image_size {} is not a positive multiple of 8",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// `-alpha (1 - p)^gamma ln p`, with `p` floored at `PROB_FLOOR`.
pub fn focal_loss(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0);
    let w = if gamma == 0.0 {
        1.0
    } else {
        (1.0 - p).powf(gamma)
    };
    -alpha * w * p.ln()
}

fn focal_var<'t, T: Scalar>(p: Var<'t, T>, alpha: f64, gamma: f64) -> Result<Var<'t, T>> {
    let log_p = p.ln_floor(PROB_FLOOR);
    let w = p.neg().add_scalar(1.0).relu().powf(gamma);
    Ok(w.mul(log_p)?.scale(-alpha))
}

/// Mean focal loss over ground-truth entries of `pAB` plus the same for `pBA`.
pub fn coarse_loss<'t, T: Scalar>(
    p_ab: Var<'t, T>,
    p_ba: Var<'t, T>,
    gt: &GroundTruth,
    alpha: f64,
    gamma: f64,
    negatives: bool,
) -> Result<MeanLoss<'t, T>> {
    let s = p_ab.shape();
    let &[na, nb] = s.as_slice() else {
        return Err(SureError::invalid("coarse loss needs probability matrices"));
    };
    if gt.matches.is_empty() {
        return Ok(MeanLoss::zero(p_ab.tape()));
    }
    let mut idx = Vec::with_capacity(gt.matches.len());
    for m in &gt.matches {
        if m.cell_a >= na || m.cell_b >= nb {
            return Err(SureError::invalid(format!(
                "ground-truth cell pair ({}, {}) outside {na}x{nb}",
                m.cell_a, m.cell_b
            )));
        }
        idx.push(m.cell_a * nb + m.cell_b);
    }
    let n = idx.len();
    let mut total = focal_var(p_ab.gather(&idx, &[n])?, alpha, gamma)?
        .mean()
        .add(focal_var(p_ba.gather(&idx, &[n])?, alpha, gamma)?.mean())?;
    if negatives {
        let mut positive = vec![false; na * nb];
        idx.iter().for_each(|&k| positive[k] = true);
        let neg: Vec<usize> = (0..na * nb).filter(|&k| !positive[k]).collect();
        if !neg.is_empty() {
            let m = neg.len();
            for p in [p_ab, p_ba] {
                // -(1 - alpha) p^gamma ln(1 - p)
                let q = p.gather(&neg, &[m])?;
                let term = q
                    .relu()
                    .powf(gamma)
                    .mul(q.neg().add_scalar(1.0).ln_floor(PROB_FLOOR))?
                    .scale(-(1.0 - alpha))
                    .mean();
                total = total.add(term)?;
            }
        }
    }
    Ok(MeanLoss {
        value: total,
        empty: false,
    })
}

/// `lambda_c l_c + lambda_f (l_fx + l_fy)`.
pub fn total_loss(l_c: f64, l_fx: f64, l_fy: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_c * l_c + cfg.lambda_f * (l_fx + l_fy)
}

/// Loss of one pair on a tape, with the component values.
pub struct PairLoss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub l_c: f64,
    pub l_fx: f64,
    pub l_fy: f64,
    pub fine_pairs: usize,
}

/// Forward pass plus coarse and fine losses for one synthetic pair.
pub fn pair_loss<'t, T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    bound: &Bound<'t, T>,
    pair: &SyntheticPair,
    mode: &mut NormMode<'_>,
) -> Result<PairLoss<'t, T>> {
    let tape = bound.get("head.x.l1.w")?.tape();
    let img_a = tape.constant(pair.image_a.cast());
    let img_b = tape.constant(pair.image_b.cast());
    let fwd = forward_pair(model_cfg, bound, img_a, img_b, mode)?;
    let lc = coarse_loss(
        fwd.p_ab,
        fwd.p_ba,
        &pair.gt,
        cfg.alpha,
        cfg.gamma,
        cfg.focal_negatives,
    )?;

    let (cells, targets): (Vec<(usize, usize)>, Vec<[f64; 2]>) = if cfg.teacher_forcing {
        pair.gt
            .matches
            .iter()
            .map(|m| ((m.cell_a, m.cell_b), m.offset))
            .unzip()
    } else {
        predicted_targets(&fwd.p_ab.value(), &fwd.p_ba.value(), pair, model_cfg)?
    };
    let m = cells.len();
    let desc = sample_fine_descriptors(fwd.fine_a, fwd.fine_b, &cells)?;
    let (hx, hy) = head_pair_forward(desc, bound)?;
    let axis_loss = |raw: Var<'t, T>, k: usize| -> Result<MeanLoss<'t, T>> {
        let t: Vec<f64> = targets.iter().map(|o| o[k]).collect();
        let t = tape.constant(Tensor::from_f64_slice(&[m], &t)?);
        head_loss(
            model_cfg.head_mode,
            raw,
            t,
            model_cfg.bins,
            cfg.zeta,
            model_cfg.kl_sigma_bins,
        )
    };
    let (lx, ly) = (axis_loss(hx, 0)?, axis_loss(hy, 1)?);
    let scalar = |v: Var<'t, T>| -> Result<f64> { Ok(v.value().item()?.to_f64_lossy()) };
    let total = lc
        .value
        .scale(cfg.lambda_c)
        .add(lx.value.add(ly.value)?.scale(cfg.lambda_f))?;
    Ok(PairLoss {
        total,
        l_c: scalar(lc.value)?,
        l_fx: scalar(lx.value)?,
        l_fy: scalar(ly.value)?,
        fine_pairs: m,
    })
}

/// Predicted MNN pairs whose true offset lies inside the matched cell.
fn predicted_targets<T: Scalar>(
    p_ab: &Tensor<T>,
    p_ba: &Tensor<T>,
    pair: &SyntheticPair,
    cfg: &ModelConfig,
) -> Result<(Vec<(usize, usize)>, Vec<[f64; 2]>)> {
    let size = pair.size();
    let grid = crate::geometry::GridSpec::for_image(size, size, crate::model::STRIDE)?;
    let set = mnn_filter(p_ab, p_ba, cfg.tau_c, (grid.rows, grid.cols))?;
    let s = grid.stride as f64;
    let mut cells = Vec::new();
    let mut targets = Vec::new();
    for m in &set.pairs {
        let Some(w) = pair.h_true.apply(grid.center(m.i)) else {
            continue;
        };
        let cb = grid.center(m.j);
        let off = [(w.x - cb.x) / s, (w.y - cb.y) / s];
        if off.iter().all(|o| o.abs() <= 0.5) {
            cells.push((m.i, m.j));
            targets.push(off);
        }
    }
    Ok((cells, targets))
}

/// Summary of one pass over the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_l_c: f64,
    pub mean_l_f: f64,
    pub mean_total: f64,
    pub mean_grad_norm: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub wall_ms: f64,
}

impl EpochReport {
    /// Same report with the timing field cleared, for determinism checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

/// Appends one JSON object per line.
pub fn append_report(out: &mut impl Write, report: &EpochReport) -> std::io::Result<()> {
    let line = serde_json::to_string(report).map_err(std::io::Error::other)?;
    writeln!(out, "{line}")
}

/// Model plus optimiser state.
pub struct Trainer {
    pub model: SureModel,
    pub cfg: TrainConfig,
    pub optimizer: AdamW,
}

impl Trainer {
    pub fn new(model: SureModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            optimizer: AdamW::new(cfg.weight_decay),
            model,
            cfg,
        })
    }

    fn learning_rate(&self) -> f64 {
        let w = self.cfg.warmup_steps;
        if w == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * ((self.optimizer.steps() + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// Gradients of the mean loss over `batch`, plus per-pair losses.
    fn batch_gradients(
        &mut self,
        batch: &[&SyntheticPair],
    ) -> Result<(BTreeMap<String, Tensor<f32>>, Vec<(f64, f64, f64)>)> {
        let mut acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut losses = Vec::with_capacity(batch.len());
        let scale = 1.0 / batch.len() as f32;
        for pair in batch {
            let tape = Tape::new();
            let bound = self.model.params.bind(&tape, true);
            let mut mode = if self.model.stats.frozen {
                NormMode::Frozen(&self.model.stats)
            } else {
                NormMode::Update(&mut self.model.stats)
            };
            let loss = pair_loss(&self.model.config, &self.cfg, &bound, pair, &mut mode)?;
            let total = loss.total.value().item()?.to_f64_lossy();
            if !total.is_finite() {
                return Err(SureError::Numeric(format!(
                    "non-finite loss {total} on pair seed {} (l_c {}, l_fx {}, l_fy {})",
                    pair.seed, loss.l_c, loss.l_fx, loss.l_fy
                )));
            }
            let grads = tape.backward(loss.total)?;
            for (name, var) in bound.iter() {
                let g = grads.get_or_zeros(*var);
                let slot = acc
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.numel()]);
                slot.iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b * scale);
            }
            losses.push((loss.l_c, loss.l_fx + loss.l_fy, total));
        }
        let grads = acc
            .into_iter()
            .map(|(name, data)| {
                let shape = self.model.params.get(&name)?.shape().to_vec();
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok((grads, losses))
    }

    /// One shuffled pass over `pairs`. Normalisation statistics are
    /// accumulated during the first epoch and frozen afterwards.
    pub fn train_epoch(&mut self, pairs: &[SyntheticPair], epoch: usize) -> Result<EpochReport> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(self.cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum_c, mut sum_f, mut sum_t, mut sum_norm) = (0.0, 0.0, 0.0, 0.0);
        let (mut steps, mut skipped, mut seen) = (0, 0, 0);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&SyntheticPair> = chunk.iter().map(|&k| &pairs[k]).collect();
            let (grads, losses) = self.batch_gradients(&batch)?;
            for (c, f, t) in losses {
                sum_c += c;
                sum_f += f;
                sum_t += t;
                seen += 1;
            }
            let norm: f64 = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            let lr = self.learning_rate();
            match self.optimizer.step(&mut self.model.params, &grads, lr)? {
                StepOutcome::Applied => {
                    steps += 1;
                    sum_norm += norm;
                }
                StepOutcome::SkippedNonFinite => {
                    skipped += 1;
                    log::warn!("epoch {epoch}: skipped step with non-finite gradient");
                }
            }
        }
        self.model.stats.frozen = true;
        let n = seen.max(1) as f64;
        Ok(EpochReport {
            epoch,
            mean_l_c: sum_c / n,
            mean_l_f: sum_f / n,
            mean_total: sum_t / n,
            mean_grad_norm: sum_norm / steps.max(1) as f64,
            steps,
            skipped_steps: skipped,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs `cfg.epochs` epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        pairs: &[SyntheticPair],
        mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let r = self.train_epoch(pairs, epoch)?;
            on_epoch(&r)?;
            reports.push(r);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::diffcore::check_gradients;
    use crate::geometry::{Correspondence, GroundTruthMatch, Point2};
    use proptest::prelude::*;

    fn gt(pairs: &[(usize, usize)]) -> GroundTruth {
        GroundTruth {
            matches: pairs
                .iter()
                .map(|&(a, b)| GroundTruthMatch {
                    cell_a: a,
                    cell_b: b,
                    offset: [0.0, 0.0],
                    corr: Correspondence::new(Point2::new(0.0, 0.0), Point2::new(0.0, 0.0), 1.0),
                })
                .collect(),
            empty_overlap: pairs.is_empty(),
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                widths: [2, 3, 4],
                coarse_dim: 4,
                fine_dim: 3,
                norm_enabled: true,
                fusion_enabled: true,
            },
            head_hidden: 6,
            bins: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal_loss(1.0, 0.25, 2.0), 0.0);
        assert!((focal_loss(0.5, 0.25, 2.0) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((focal_loss(0.3, 0.4, 0.0) + 0.4 * 0.3f64.ln()).abs() < 1e-15);
        assert!(focal_loss(0.0, 0.25, 2.0).is_finite());
    }

    fn coarse_value(p: &[f64], n: usize, g: &GroundTruth) -> (f64, bool) {
        let tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::new(vec![n, n], p.to_vec()).unwrap());
        let l = coarse_loss(v, v, g, 0.25, 2.0, false).unwrap();
        (l.value.value().item().unwrap(), l.empty)
    }

    #[test]
    fn coarse_loss_examples() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(coarse_value(&eye, 2, &gt(&[(0, 0), (1, 1)])).0, 0.0);
        let half = [0.5; 4];
        let (v, _) = coarse_value(&half, 2, &gt(&[(0, 1)]));
        assert!((v - 2.0 * 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(coarse_value(&half, 2, &gt(&[])), (0.0, true));
    }

    #[test]
    fn total_loss_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(total_loss(1.0, 2.0, 2.0, &cfg), 2.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
        let coarse_only = TrainConfig {
            lambda_f: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(1.5, 9.0, 9.0, &coarse_only), 1.5);
    }

    #[test]
    fn coarse_and_focal_gradients() {
        let g = gt(&[(0, 1), (2, 2), (1, 0)]);
        let s = Tensor::new(vec![3, 3], (0..9).map(|k| (k as f64 * 0.9).sin()).collect()).unwrap();
        for negatives in [false, true] {
            let err = check_gradients(
                |_, x| {
                    let (ab, ba) = crate::coarse::dual_softmax(x)?;
                    Ok(coarse_loss(ab, ba, &g, 0.25, 2.0, negatives)?.value)
                },
                &s,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn fine_terms_do_not_reach_attention() {
        let mcfg = tiny_model();
        let model = SureModel::new(mcfg.clone(), 1).unwrap();
        let pair = generate_pair(5, 32, Difficulty::Easy).unwrap();
        let cfg = TrainConfig {
            lambda_c: 0.0,
            ..TrainConfig::default()
        };
        let tape = Tape::new();
        let bound = model.params.bind(&tape, true);
        let loss = pair_loss(
            &mcfg,
            &cfg,
            &bound,
            &pair,
            &mut NormMode::Frozen(&model.stats),
        )
        .unwrap();
        let grads = tape.backward(loss.total).unwrap();
        for (name, var) in bound.iter() {
            let g = grads.get_or_zeros(*var);
            let zero = g.data().iter().all(|&v| v == 0.0);
            if name.starts_with("coarse.") || name == "backbone.coarse.w" {
                assert!(zero, "{name} received fine gradient");
            }
            if name == "head.x.l2.w" {
                assert!(!zero);
            }
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let model = SureModel::new(tiny_model(), 2).unwrap();
        let pairs = generate_dataset(3, 4, 32, Difficulty::Easy).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model.clone(), cfg).unwrap();
        t.train_epoch(&pairs, 0).unwrap();
        assert_eq!(t.model.params, model.params);
        assert!(t.model.stats.frozen);
        let frozen = t.model.clone();
        t.train_epoch(&pairs, 1).unwrap();
        assert_eq!(t.model, frozen);
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = generate_dataset(4, 4, 32, Difficulty::Easy).unwrap();
        let run = || {
            let model = SureModel::new(tiny_model(), 3).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 2,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(model, cfg).unwrap();
            let reports = t.fit(&pairs, |_| Ok(())).unwrap();
            (
                reports
                    .iter()
                    .map(EpochReport::without_timing)
                    .collect::<Vec<_>>(),
                t.model,
            )
        };
        let (r1, m1) = run();
        let (r2, m2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn predicted_match_supervision_runs() {
        let mcfg = ModelConfig {
            tau_c: 0.0,
            ..tiny_model()
        };
        let model = SureModel::new(mcfg.clone(), 1).unwrap();
        let pair = generate_pair_with(
            5,
            32,
            Difficulty::Easy,
            &TextureConfig::default(),
            Some(crate::geometry::Homography::identity()),
        )
        .unwrap();
        let cfg = TrainConfig {
            teacher_forcing: false,
            ..TrainConfig::default()
        };
        let tape = Tape::new();
        let bound = model.params.bind(&tape, true);
        let loss = pair_loss(
            &mcfg,
            &cfg,
            &bound,
            &pair,
            &mut NormMode::Frozen(&model.stats),
        )
        .unwrap();
        assert!(loss.total.value().item().unwrap().is_finite());
    }

    #[test]
    fn epoch_report_jsonl() {
        let r = EpochReport {
            epoch: 3,
            mean_l_c: 0.5,
            mean_l_f: 1.0,
            mean_total: 1.0,
            mean_grad_norm: 2.0,
            steps: 10,
            skipped_steps: 0,
            wall_ms: 12.5,
        };
        let mut buf = Vec::new();
        append_report(&mut buf, &r).unwrap();
        append_report(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: EpochReport = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            image_size: 60,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: f64::NAN,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn total_loss_is_linear(
            lc in 0.0f64..10.0, lx in 0.0f64..10.0, ly in 0.0f64..10.0,
            wc in 0.0f64..3.0, wf in 0.0f64..3.0,
        ) {
            let cfg = TrainConfig { lambda_c: wc, lambda_f: wf, ..TrainConfig::default() };
            let v = total_loss(lc, lx, ly, &cfg);
            prop_assert_eq!(v, wc * lc + wf * (lx + ly));
        }

        #[test]
        fn coarse_loss_non_negative_and_monotone(
            seed in any::<u64>(), bump in 0.01f64..0.5,
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let p: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.01..0.9)).collect();
            let g = gt(&[(0, 2), (3, 1)]);
            let (base, _) = coarse_value(&p, n, &g);
            prop_assert!(base >= 0.0);
            let mut q = p.clone();
            q[2] = (q[2] + bump).min(1.0);
            let (after, _) = coarse_value(&q, n, &g);
            prop_assert!(after < base);
        }
    }
}
