//! Convolutional feature pyramid and the spatial fusion module.
//!
//! Three stride-2 residual stages produce features at 1/2, 1/4 and 1/8 of
//! the input resolution; one more 3x3 block yields the coarse descriptors.
//! Fine features are built at 1/8 resolution by projecting every scale to a
//! common width, pooling to 1/8, fusing the concatenation with a 1x1
//! convolution, and adding a pooled high-resolution residual path.

use serde::{Deserialize, Serialize};

use crate::diffcore::{concat, ConvSpec, Scalar, Tensor, Var};
use crate::error::{Result, SureError};
use crate::nn::{channel_norm, Bound, ChannelStats, Initializer, NormMode, NormStats, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channel widths at 1/2, 1/4 and 1/8 resolution.
    pub widths: [usize; 3],
    pub coarse_dim: usize,
    pub fine_dim: usize,
    pub norm_enabled: bool,
    pub fusion_enabled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            coarse_dim: 64,
            fine_dim: 64,
            norm_enabled: true,
            fusion_enabled: true,
        }
    }
}

const STAGES: [&str; 3] = ["backbone.s1", "backbone.s2", "backbone.s3"];

fn add_conv(
    params: &mut ParamStore,
    stats: &mut NormStats,
    init: &mut Initializer,
    name: &str,
    shape: [usize; 4],
    norm: bool,
) {
    params.insert(format!("{name}.w"), init.kaiming(&shape));
    params.insert(format!("{name}.b"), Tensor::zeros(&[shape[0]]));
    if norm {
        params.insert(format!("{name}.norm.gamma"), Tensor::full(&[shape[0]], 1.0));
        params.insert(format!("{name}.norm.beta"), Tensor::zeros(&[shape[0]]));
        stats
            .sites
            .insert(format!("{name}.norm"), ChannelStats::identity(shape[0]));
    }
}

/// Adds backbone and fusion parameters to `params`.
pub fn init_backbone(
    cfg: &BackboneConfig,
    init: &mut Initializer,
    params: &mut ParamStore,
    stats: &mut NormStats,
) {
    let norm = cfg.norm_enabled;
    let mut cin = 1;
    for (stage, &w) in STAGES.iter().zip(&cfg.widths) {
        add_conv(
            params,
            stats,
            init,
            &format!("{stage}.down"),
            [w, cin, 3, 3],
            norm,
        );
        add_conv(
            params,
            stats,
            init,
            &format!("{stage}.res"),
            [w, w, 3, 3],
            norm,
        );
        cin = w;
    }
    add_conv(
        params,
        stats,
        init,
        "backbone.coarse",
        [cfg.coarse_dim, cfg.widths[2], 3, 3],
        norm,
    );

    let cf = cfg.fine_dim;
    let [c2, c4, c8] = cfg.widths;
    add_conv(
        params,
        stats,
        init,
        "fusion.proj_eighth",
        [cf, c8, 1, 1],
        false,
    );
    if cfg.fusion_enabled {
        add_conv(
            params,
            stats,
            init,
            "fusion.proj_half",
            [cf, c2, 1, 1],
            false,
        );
        add_conv(
            params,
            stats,
            init,
            "fusion.proj_quarter",
            [cf, c4, 1, 1],
            false,
        );
        add_conv(params, stats, init, "fusion.fuse", [cf, 3 * cf, 1, 1], norm);
        add_conv(
            params,
            stats,
            init,
            "fusion.residual_proj",
            [cf, cf, 1, 1],
            false,
        );
    }
}

/// Multi-scale features of one image.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'t, T: Scalar> {
    pub f_half: Var<'t, T>,
    pub f_quarter: Var<'t, T>,
    pub f_eighth: Var<'t, T>,
    pub f_coarse: Var<'t, T>,
    pub f_fine: Option<Var<'t, T>>,
}

fn conv<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &Bound<'t, T>,
    name: &str,
    spec: ConvSpec,
) -> Result<Var<'t, T>> {
    x.conv2d(
        params.get(&format!("{name}.w"))?,
        params.get(&format!("{name}.b"))?,
        spec,
    )
}

fn conv_norm<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &Bound<'t, T>,
    name: &str,
    spec: ConvSpec,
    cfg: &BackboneConfig,
    mode: &mut NormMode<'_>,
) -> Result<Var<'t, T>> {
    let y = conv(x, params, name, spec)?;
    if cfg.norm_enabled {
        channel_norm(y, params, &format!("{name}.norm"), mode)
    } else {
        Ok(y)
    }
}

/// Runs the convolutional stages on a `[1, H, W]` image with `H`, `W` divisible by 8.
pub fn extract_pyramid<'t, T: Scalar>(
    image: Var<'t, T>,
    params: &Bound<'t, T>,
    cfg: &BackboneConfig,
    mode: &mut NormMode<'_>,
) -> Result<FeaturePyramid<'t, T>> {
    let shape = image.shape();
    let &[1, h, w] = shape.as_slice() else {
        return Err(SureError::invalid(format!(
            "expected a [1, H, W] grayscale image, got {shape:?}"
        )));
    };
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(SureError::invalid(format!(
            "image {w}x{h} is not divisible by 8; pad before extraction"
        )));
    }
    let mut x = image;
    let mut levels = Vec::with_capacity(3);
    for stage in STAGES {
        let y = conv_norm(
            x,
            params,
            &format!("{stage}.down"),
            ConvSpec::DOWN3,
            cfg,
            mode,
        )?
        .relu();
        let r = conv_norm(
            y,
            params,
            &format!("{stage}.res"),
            ConvSpec::SAME3,
            cfg,
            mode,
        )?;
        x = y.add(r)?.relu();
        levels.push(x);
    }
    let f_coarse = conv_norm(x, params, "backbone.coarse", ConvSpec::SAME3, cfg, mode)?;
    Ok(FeaturePyramid {
        f_half: levels[0],
        f_quarter: levels[1],
        f_eighth: levels[2],
        f_coarse,
        f_fine: None,
    })
}

/// The two additive terms of the fine features: fused multi-scale path and
/// pooled high-resolution residual.
pub struct FusionParts<'t, T: Scalar> {
    pub fused: Var<'t, T>,
    pub residual: Option<Var<'t, T>>,
}

pub fn spatial_fusion_parts<'t, T: Scalar>(
    p: &FeaturePyramid<'t, T>,
    params: &Bound<'t, T>,
    cfg: &BackboneConfig,
    mode: &mut NormMode<'_>,
) -> Result<FusionParts<'t, T>> {
    let proj_eighth = conv(
        p.f_eighth,
        params,
        "fusion.proj_eighth",
        ConvSpec::POINTWISE,
    )?;
    if !cfg.fusion_enabled {
        return Ok(FusionParts {
            fused: proj_eighth,
            residual: None,
        });
    }
    let proj_half = conv(p.f_half, params, "fusion.proj_half", ConvSpec::POINTWISE)?;
    let proj_quarter = conv(
        p.f_quarter,
        params,
        "fusion.proj_quarter",
        ConvSpec::POINTWISE,
    )?;
    let aligned = [
        proj_half.avg_pool2d(4)?,
        proj_quarter.avg_pool2d(2)?,
        proj_eighth,
    ];
    let stacked = concat(&aligned, 0)?;
    let fused = conv_norm(
        stacked,
        params,
        "fusion.fuse",
        ConvSpec::POINTWISE,
        cfg,
        mode,
    )?
    .relu();
    let residual = conv(
        proj_half,
        params,
        "fusion.residual_proj",
        ConvSpec::POINTWISE,
    )?
    .avg_pool2d(4)?;
    Ok(FusionParts {
        fused,
        residual: Some(residual),
    })
}

/// Fine features `F_f = F_fused + Pool(Conv1x1(proj_half))` at 1/8 resolution.
pub fn spatial_fusion<'t, T: Scalar>(
    p: &mut FeaturePyramid<'t, T>,
    params: &Bound<'t, T>,
    cfg: &BackboneConfig,
    mode: &mut NormMode<'_>,
) -> Result<Var<'t, T>> {
    let parts = spatial_fusion_parts(p, params, cfg, mode)?;
    let f_fine = match parts.residual {
        Some(r) => parts.fused.add(r)?,
        None => parts.fused,
    };
    p.f_fine = Some(f_fine);
    Ok(f_fine)
}

/// Gathers, for every `(i, j)`, column `i` of `fine_a` and column `j` of
/// `fine_b` (both `[C, Hc, Wc]`) into one row of an `[M, 2C]` matrix.
pub fn sample_fine_descriptors<'t, T: Scalar>(
    fine_a: Var<'t, T>,
    fine_b: Var<'t, T>,
    pairs: &[(usize, usize)],
) -> Result<Var<'t, T>> {
    let flat = |f: Var<'t, T>| -> Result<Var<'t, T>> {
        let s = f.shape();
        let &[c, h, w] = s.as_slice() else {
            return Err(SureError::invalid(format!(
                "fine map must be [C,H,W], got {s:?}"
            )));
        };
        f.reshape(&[c, h * w])?.transpose()
    };
    let (ta, tb) = (flat(fine_a)?, flat(fine_b)?);
    let (ia, ib): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let rows_a = ta.gather_rows(&ia)?;
    let rows_b = tb.gather_rows(&ib)?;
    concat(&[rows_a, rows_b], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradients, Tape};

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            widths: [3, 4, 5],
            coarse_dim: 6,
            fine_dim: 4,
            norm_enabled: true,
            fusion_enabled: true,
        }
    }

    fn build(cfg: &BackboneConfig, seed: u64) -> (ParamStore, NormStats) {
        let mut params = ParamStore::new();
        let mut stats = NormStats::default();
        init_backbone(cfg, &mut Initializer::new(seed), &mut params, &mut stats);
        (params, stats)
    }

    fn image(h: usize, w: usize) -> Tensor<f32> {
        let data = (0..h * w)
            .map(|i| ((i * 37 % 101) as f32) / 101.0)
            .collect();
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = BackboneConfig::default();
        let (params, stats) = build(&cfg, 1);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let img = tape.constant(image(64, 64));
        let mut mode = NormMode::Frozen(&stats);
        let mut p = extract_pyramid(img, &bound, &cfg, &mut mode).unwrap();
        assert_eq!(p.f_half.shape(), vec![16, 32, 32]);
        assert_eq!(p.f_quarter.shape(), vec![32, 16, 16]);
        assert_eq!(p.f_eighth.shape(), vec![64, 8, 8]);
        assert_eq!(p.f_coarse.shape(), vec![64, 8, 8]);
        let f = spatial_fusion(&mut p, &bound, &cfg, &mut mode).unwrap();
        assert_eq!(f.shape(), vec![64, 8, 8]);
        assert!(p.f_fine.is_some());
    }

    #[test]
    fn rejects_non_divisible_image() {
        let cfg = small_cfg();
        let (params, stats) = build(&cfg, 1);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let img = tape.constant(image(20, 16));
        assert!(extract_pyramid(img, &bound, &cfg, &mut NormMode::Frozen(&stats)).is_err());
    }

    #[test]
    fn zero_image_gives_zero_preactivations() {
        let cfg = small_cfg();
        let (params, stats) = build(&cfg, 2);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let img = tape.constant(Tensor::zeros(&[1, 16, 16]));
        let y = conv(img, &bound, "backbone.s1.down", ConvSpec::DOWN3).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let p = extract_pyramid(img, &bound, &cfg, &mut NormMode::Frozen(&stats)).unwrap();
        assert!(p.f_coarse.value().is_finite());
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = small_cfg();
        let (params, stats) = build(&cfg, 5);
        let run = || {
            let tape = Tape::new();
            let bound = params.bind(&tape, false);
            let img = tape.constant(image(16, 24));
            let mut mode = NormMode::Frozen(&stats);
            let mut p = extract_pyramid(img, &bound, &cfg, &mut mode).unwrap();
            let f = spatial_fusion(&mut p, &bound, &cfg, &mut mode).unwrap();
            ((*p.f_coarse.value()).clone(), (*f.value()).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fusion_is_additive() {
        let cfg = small_cfg();
        let (params, stats) = build(&cfg, 9);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let img = tape.constant(image(16, 16));
        let mut mode = NormMode::Frozen(&stats);
        let mut p = extract_pyramid(img, &bound, &cfg, &mut mode).unwrap();
        let parts = spatial_fusion_parts(&p, &bound, &cfg, &mut mode).unwrap();
        let total = spatial_fusion(&mut p, &bound, &cfg, &mut mode)
            .unwrap()
            .value();
        let fused = parts.fused.value();
        let residual = parts.residual.unwrap().value();
        for ((t, f), r) in total.data().iter().zip(fused.data()).zip(residual.data()) {
            assert!((t - r - f).abs() <= 1e-6);
        }
    }

    #[test]
    fn zeroed_fuse_path_leaves_residual() {
        let cfg = small_cfg();
        let (mut params, stats) = build(&cfg, 4);
        for name in ["fusion.fuse.w", "fusion.fuse.b", "fusion.fuse.norm.beta"] {
            let t = params.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let img = tape.constant(image(16, 16));
        let mut mode = NormMode::Frozen(&stats);
        let mut p = extract_pyramid(img, &bound, &cfg, &mut mode).unwrap();
        let out = spatial_fusion(&mut p, &bound, &cfg, &mut mode)
            .unwrap()
            .value();
        let proj_half = conv(p.f_half, &bound, "fusion.proj_half", ConvSpec::POINTWISE).unwrap();
        let expect = conv(
            proj_half,
            &bound,
            "fusion.residual_proj",
            ConvSpec::POINTWISE,
        )
        .unwrap()
        .avg_pool2d(4)
        .unwrap()
        .value();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn zero_pyramid_zero_fusion_output() {
        let cfg = small_cfg();
        let (params, stats) = build(&cfg, 4);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let mut p = FeaturePyramid {
            f_half: tape.constant(Tensor::zeros(&[3, 8, 8])),
            f_quarter: tape.constant(Tensor::zeros(&[4, 4, 4])),
            f_eighth: tape.constant(Tensor::zeros(&[5, 2, 2])),
            f_coarse: tape.constant(Tensor::zeros(&[6, 2, 2])),
            f_fine: None,
        };
        let out = spatial_fusion(&mut p, &bound, &cfg, &mut NormMode::Frozen(&stats))
            .unwrap()
            .value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_half_map_pools_to_constant() {
        let tape = Tape::<f64>::new();
        let v = 0.625;
        let half = tape.constant(Tensor::full(&[2, 16, 16], v));
        // identity 1x1 residual convolution
        let w = tape.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let r = half
            .conv2d(w, b, ConvSpec::POINTWISE)
            .unwrap()
            .avg_pool2d(4)
            .unwrap()
            .value();
        assert_eq!(r.shape(), &[2, 4, 4]);
        assert!(r.data().iter().all(|&x| x == v));
    }

    #[test]
    fn sample_descriptors_direct_lookup() {
        let tape = Tape::<f64>::new();
        // fine_a[c, cell] = 100 c + cell, fine_b[c, cell] = -(100 c + cell)
        let fa: Vec<f64> = (0..3)
            .flat_map(|c| (0..4).map(move |i| (100 * c + i) as f64))
            .collect();
        let fb: Vec<f64> = fa.iter().map(|v| -v).collect();
        let a = tape.constant(Tensor::new(vec![3, 2, 2], fa).unwrap());
        let b = tape.constant(Tensor::new(vec![3, 2, 2], fb).unwrap());
        let d = sample_fine_descriptors(a, b, &[(1, 3)]).unwrap().value();
        assert_eq!(d.shape(), &[1, 6]);
        assert_eq!(d.data(), &[1.0, 101.0, 201.0, -3.0, -103.0, -203.0]);

        let swapped = sample_fine_descriptors(b, a, &[(3, 1)]).unwrap().value();
        assert_eq!(&swapped.data()[..3], &d.data()[3..]);
        assert_eq!(&swapped.data()[3..], &d.data()[..3]);

        let empty = sample_fine_descriptors(a, b, &[]).unwrap().value();
        assert_eq!(empty.shape(), &[0, 6]);
        assert!(sample_fine_descriptors(a, b, &[(4, 0)]).is_err());
    }

    #[test]
    fn backbone_and_fusion_gradients() {
        let cfg = small_cfg();
        let (params, stats) = build(&cfg, 11);
        let params64 = params.cast::<f64>();
        let img: Tensor<f64> = image(16, 16).cast();
        let names: Vec<String> = params64.names().cloned().collect();
        // perturb the input image and check d(loss)/d(image)
        let err = check_gradients(
            |tape, x| {
                let bound = params64.bind(tape, false);
                let mut mode = NormMode::Frozen(&stats);
                let mut p = extract_pyramid(x, &bound, &cfg, &mut mode)?;
                let f = spatial_fusion(&mut p, &bound, &cfg, &mut mode)?;
                let w = tape.constant(Tensor::full(&f.shape(), 0.3));
                Ok(f.mul(w)?.sum().add(p.f_coarse.square().sum())?)
            },
            &img,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "image gradient {err}");
        // and w.r.t. every parameter tensor in turn
        for name in names {
            let point = params64.get(&name).unwrap().clone();
            let err = check_gradients(
                |tape, x| {
                    let bound = params64.bind(tape, false).with_override(&name, x);
                    let img = tape.constant(img.clone());
                    let mut mode = NormMode::Frozen(&stats);
                    let mut p = extract_pyramid(img, &bound, &cfg, &mut mode)?;
                    let f = spatial_fusion(&mut p, &bound, &cfg, &mut mode)?;
                    p.f_coarse.square().sum().add(f.square().sum())
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
