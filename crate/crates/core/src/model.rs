//! The full matcher: configuration, parameters and the forward pipeline
//! from two grayscale images to refined, uncertainty-annotated matches.

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_pyramid, init_backbone, spatial_fusion, BackboneConfig};
use crate::coarse::{
    dual_softmax, enhance_features, init_attention, mnn_filter, similarity_matrix, CoarseMatchSet,
    DEFAULT_TAU_C,
};
use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::error::{Result, SureError};
use crate::evidential::{
    apply_filter, head_pair_forward, init_heads, refine_matches, AxisPrediction, FilterRule,
    HeadMode, MatchWithUncertainty,
};
use crate::geometry::GridSpec;
use crate::nn::{Bound, Initializer, NormMode, NormStats, ParamStore};

/// Resolution ratio between the input image and the coarse/fine grids.
pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention_depth: usize,
    /// Similarity temperature.
    pub tau: f64,
    pub bins: usize,
    pub head_mode: HeadMode,
    pub head_hidden: usize,
    /// Width of the KL head's Gaussian target, in bins.
    pub kl_sigma_bins: f64,
    pub tau_c: f64,
    pub filtering_enabled: bool,
    pub filter: FilterRule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            attention_depth: 1,
            tau: 0.1,
            bins: 16,
            head_mode: HeadMode::Evidential,
            head_hidden: 128,
            kl_sigma_bins: 1.0,
            tau_c: DEFAULT_TAU_C,
            filtering_enabled: true,
            filter: FilterRule::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.widths.contains(&0) || b.coarse_dim == 0 || b.fine_dim == 0 || self.head_hidden == 0 {
            return Err(SureError::invalid("layer widths must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(SureError::invalid(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.bins < 2 {
            return Err(SureError::invalid("at least two bins are required"));
        }
        if !(0.0..1.0).contains(&self.tau_c) {
            return Err(SureError::invalid(format!(
                "tau_c must lie in [0, 1), got {}",
                self.tau_c
            )));
        }
        if !(self.kl_sigma_bins > 0.0) {
            return Err(SureError::invalid("kl_sigma_bins must be positive"));
        }
        match self.filter {
            FilterRule::Quantile { q_a, q_e } => {
                if !(q_a > 0.0 && q_a <= 1.0 && q_e > 0.0 && q_e <= 1.0) {
                    return Err(SureError::invalid("quantile levels must lie in (0, 1]"));
                }
            }
            FilterRule::Absolute { tau_a, tau_e } => {
                if tau_a.is_nan() || tau_e.is_nan() {
                    return Err(SureError::invalid("absolute thresholds must not be NaN"));
                }
            }
        }
        Ok(())
    }
}

/// Everything a training or inference step needs from one image pair.
pub struct PairForward<'t, T: Scalar> {
    pub coarse_a: Var<'t, T>,
    pub coarse_b: Var<'t, T>,
    pub fine_a: Var<'t, T>,
    pub fine_b: Var<'t, T>,
    pub p_ab: Var<'t, T>,
    pub p_ba: Var<'t, T>,
    pub grid: GridSpec,
}

fn image_features<'t, T: Scalar>(
    cfg: &ModelConfig,
    bound: &Bound<'t, T>,
    img: Var<'t, T>,
    mode: &mut NormMode<'_>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let mut p = extract_pyramid(img, bound, &cfg.backbone, mode)?;
    let fine = spatial_fusion(&mut p, bound, &cfg.backbone, mode)?;
    Ok((p.f_coarse, fine))
}

/// Backbone, fusion, attention, similarity and dual softmax for `[1, H, W]` images.
pub fn forward_pair<'t, T: Scalar>(
    cfg: &ModelConfig,
    bound: &Bound<'t, T>,
    img_a: Var<'t, T>,
    img_b: Var<'t, T>,
    mode: &mut NormMode<'_>,
) -> Result<PairForward<'t, T>> {
    if img_a.shape() != img_b.shape() {
        return Err(SureError::invalid(format!(
            "images differ in size: {:?} vs {:?}",
            img_a.shape(),
            img_b.shape()
        )));
    }
    let s = img_a.shape();
    let grid = GridSpec::for_image(s[2], s[1], STRIDE)?;
    let (ca, fine_a) = image_features(cfg, bound, img_a, mode)?;
    let (cb, fine_b) = image_features(cfg, bound, img_b, mode)?;
    let (ea, eb) = enhance_features(ca, cb, bound, cfg.attention_depth)?;
    // unit-scale descriptors before the temperature is applied
    let norm = 1.0 / (cfg.backbone.coarse_dim as f64).sqrt();
    let (da, db) = (ea.scale(norm), eb.scale(norm));
    let sim = similarity_matrix(da, db, cfg.tau)?;
    let (p_ab, p_ba) = dual_softmax(sim)?;
    Ok(PairForward {
        coarse_a: ea,
        coarse_b: eb,
        fine_a,
        fine_b,
        p_ab,
        p_ba,
        grid,
    })
}

/// Inference-time knobs that may override the model configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchOptions {
    pub tau_c: f64,
    /// `None` disables uncertainty filtering.
    pub filter: Option<FilterRule>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutput {
    pub coarse: CoarseMatchSet,
    /// Refined matches before uncertainty filtering.
    pub refined: Vec<MatchWithUncertainty>,
    /// Matches that survive filtering (equal to `refined` when it is off).
    pub kept: Vec<MatchWithUncertainty>,
    pub grid: GridSpec,
}

/// Model parameters together with normalisation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SureModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stats: NormStats,
}

impl SureModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let mut stats = NormStats::default();
        init_backbone(&config.backbone, &mut init, &mut params, &mut stats);
        init_attention(
            config.attention_depth,
            config.backbone.coarse_dim,
            &mut init,
            &mut params,
        );
        init_heads(
            config.head_mode,
            2 * config.backbone.fine_dim,
            config.head_hidden,
            config.bins,
            &mut init,
            &mut params,
        );
        Ok(Self {
            config,
            params,
            stats,
        })
    }

    pub fn default_options(&self) -> MatchOptions {
        MatchOptions {
            tau_c: self.config.tau_c,
            filter: self.config.filtering_enabled.then_some(self.config.filter),
        }
    }

    pub fn match_images(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<MatchOutput> {
        self.match_images_with(a, b, &self.default_options())
    }

    /// Matches two `[1, H, W]` images with `H`, `W` divisible by 8.
    pub fn match_images_with(
        &self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
        opts: &MatchOptions,
    ) -> Result<MatchOutput> {
        let cfg = &self.config;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let mut mode = NormMode::Frozen(&self.stats);
        let fwd = forward_pair(
            cfg,
            &bound,
            tape.constant(a.clone()),
            tape.constant(b.clone()),
            &mut mode,
        )?;
        let grid = fwd.grid;
        let coarse = mnn_filter(
            &fwd.p_ab.value(),
            &fwd.p_ba.value(),
            opts.tau_c,
            (grid.rows, grid.cols),
        )?;
        let pairs: Vec<(usize, usize)> = coarse.pairs.iter().map(|m| (m.i, m.j)).collect();
        let desc = crate::backbone::sample_fine_descriptors(fwd.fine_a, fwd.fine_b, &pairs)?;
        let (hx, hy) = head_pair_forward(desc, &bound)?;
        let x = AxisPrediction::decode(cfg.head_mode, &hx.value(), cfg.bins)?;
        let y = AxisPrediction::decode(cfg.head_mode, &hy.value(), cfg.bins)?;
        let refined = refine_matches(&coarse, &grid, &x, &y)?;
        let kept = match opts.filter {
            Some(rule) => apply_filter(&refined, rule)?,
            None => refined.clone(),
        };
        Ok(MatchOutput {
            coarse,
            refined,
            kept,
            grid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::sample_fine_descriptors;
    use crate::diffcore::check_gradients;
    use crate::evidential::head_loss;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                widths: [2, 3, 4],
                coarse_dim: 4,
                fine_dim: 3,
                norm_enabled: true,
                fusion_enabled: true,
            },
            head_hidden: 5,
            bins: 4,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u32, n: usize) -> Tensor<f32> {
        let data = (0..n * n)
            .map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 255) as f32 / 255.0)
            .collect();
        Tensor::new(vec![1, n, n], data).unwrap()
    }

    #[test]
    fn parameter_names_are_stable() {
        let m = SureModel::new(ModelConfig::default(), 0).unwrap();
        let names: Vec<&String> = m.params.names().collect();
        assert!(names.iter().any(|n| *n == "coarse.l0.cross.q"));
        assert!(names.iter().any(|n| *n == "head.x.l2.w"));
        assert_eq!(m.params.get("head.y.l2.w").unwrap().shape(), &[19, 128, 1]);
        assert_eq!(
            m.params.get("fusion.fuse.w").unwrap().shape(),
            &[64, 192, 1, 1]
        );
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            tau: 0.0,
            ..ModelConfig::default()
        };
        assert!(SureModel::new(bad, 0).is_err());
        let bad = ModelConfig {
            tau_c: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            filter: FilterRule::Quantile { q_a: 0.0, q_e: 0.5 },
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&ModelConfig::default()).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ModelConfig::default());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"tua": 1}"#).is_err());
    }

    #[test]
    fn matching_is_deterministic_and_filter_is_subset() {
        let m = SureModel::new(tiny(), 3).unwrap();
        let (a, b) = (image(1, 32), image(1, 32));
        let opts = MatchOptions {
            tau_c: 0.0,
            filter: Some(FilterRule::Quantile { q_a: 0.5, q_e: 0.5 }),
        };
        let r1 = m.match_images_with(&a, &b, &opts).unwrap();
        let r2 = m.match_images_with(&a, &b, &opts).unwrap();
        assert_eq!(r1, r2);
        assert!(!r1.refined.is_empty());
        assert!(r1.kept.iter().all(|k| r1.refined.contains(k)));
        assert_eq!(
            r1.grid,
            GridSpec {
                rows: 4,
                cols: 4,
                stride: 8
            }
        );
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let m = SureModel::new(tiny(), 3).unwrap();
        assert!(m.match_images(&image(1, 32), &image(1, 16)).is_err());
        let odd = Tensor::zeros(&[1, 12, 12]);
        assert!(m.match_images(&odd, &odd).is_err());
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let cfg = tiny();
        let m = SureModel::new(cfg.clone(), 5).unwrap();
        let p64 = m.params.cast::<f64>();
        let (a, b) = (image(2, 16).cast::<f64>(), image(9, 16).cast::<f64>());
        let stats = m.stats.clone();
        for name in [
            "backbone.s1.down.w",
            "fusion.residual_proj.w",
            "coarse.l0.self.k",
            "head.y.l1.w",
        ] {
            let err = check_gradients(
                |tape, w| {
                    let bound = p64.bind(tape, false).with_override(name, w);
                    let mut mode = NormMode::Frozen(&stats);
                    let f = forward_pair(
                        &cfg,
                        &bound,
                        tape.constant(a.clone()),
                        tape.constant(b.clone()),
                        &mut mode,
                    )?;
                    let desc = sample_fine_descriptors(f.fine_a, f.fine_b, &[(0, 1), (3, 2)])?;
                    let (_, hy) = head_pair_forward(desc, &bound)?;
                    let t = tape.constant(Tensor::from_vec(vec![0.1, -0.3]));
                    let fine = head_loss(cfg.head_mode, hy, t, cfg.bins, 1.0, 1.0)?.value;
                    f.p_ab.mul(f.p_ba)?.sum().add(fine)
                },
                p64.get(name).unwrap(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
