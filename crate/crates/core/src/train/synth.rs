//! Seeded synthetic image pairs related by a known homography.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Result, SureError};
use crate::geometry::{make_ground_truth, GridSpec, GroundTruth, Homography, Point2};
use crate::model::STRIDE;

/// Standard deviation of the additive pixel noise in image B.
pub const PIXEL_NOISE: f64 = 0.02;
const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    #[default]
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Difficulty {
    type Err = SureError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(SureError::invalid(format!("unknown difficulty {s:?}"))),
        }
    }
}

/// Parameters of the procedural texture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    /// Fraction of the image replaced by a flat, low-texture patch.
    pub flat_fraction: f64,
    pub shapes: usize,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            flat_fraction: 0.1,
            shapes: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub h_true: Homography,
    pub gt: GroundTruth,
}

impl SyntheticPair {
    pub fn size(&self) -> usize {
        self.image_a.shape()[2]
    }

    /// Assembles a pair from stored square images and their homography.
    pub fn from_images(
        seed: u64,
        difficulty: Difficulty,
        image_a: Tensor<f32>,
        image_b: Tensor<f32>,
        h_true: Homography,
    ) -> Result<Self> {
        let shape = image_a.shape().to_vec();
        let &[1, h, w] = shape.as_slice() else {
            return Err(SureError::invalid(format!(
                "expected a [1, H, W] image, got {shape:?}"
            )));
        };
        if h != w || image_b.shape() != shape.as_slice() {
            return Err(SureError::invalid(format!(
                "pair images must be square and equal in size, got {shape:?} and {:?}",
                image_b.shape()
            )));
        }
        let grid = GridSpec::for_image(w, h, STRIDE)?;
        let gt = make_ground_truth(&h_true, &grid, &grid);
        Ok(Self {
            seed,
            difficulty,
            image_a,
            image_b,
            h_true,
            gt,
        })
    }
}

const TEXTURE_STREAM: u64 = 1;
const HOMOGRAPHY_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed of the `index`-th pair of a dataset (SplitMix64 mixing).
pub fn pair_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise on a `cells x cells` lattice, sampled at pixel `(x, y)`.
fn value_noise(lattice: &[f64], cells: usize, size: usize, x: usize, y: usize) -> f64 {
    let s = cells as f64 / size as f64;
    let (fx, fy) = (x as f64 * s, y as f64 * s);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (tx, ty) = (smooth(fx - x0 as f64), smooth(fy - y0 as f64));
    let at = |i: usize, j: usize| lattice[j.min(cells) * (cells + 1) + i.min(cells)];
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
    let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Multi-octave value noise plus random rectangles and ellipses, with one
/// flat patch. Values are quantised to 8 bits.
pub fn render_texture(seed: u64, size: usize, cfg: &TextureConfig) -> Tensor<f32> {
    let mut rng = stream(seed, TEXTURE_STREAM);
    let octaves = [(size / 16, 0.45), (size / 8, 0.35), (size / 4, 0.2)];
    let mut img = vec![0.0f64; size * size];
    for (cells, weight) in octaves {
        let cells = cells.max(2);
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.random())
            .collect();
        for y in 0..size {
            for x in 0..size {
                img[y * size + x] += weight * value_noise(&lattice, cells, size, x, y);
            }
        }
    }
    let sz = size as f64;
    for _ in 0..cfg.shapes {
        let (cx, cy) = (rng.random_range(0.0..sz), rng.random_range(0.0..sz));
        let (rx, ry) = (
            rng.random_range(0.05..0.2) * sz,
            rng.random_range(0.05..0.2) * sz,
        );
        let value: f64 = rng.random();
        let ellipse: bool = rng.random();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    img[y * size + x] = 0.3 * img[y * size + x] + 0.7 * value;
                }
            }
        }
    }
    if cfg.flat_fraction > 0.0 {
        let side = ((cfg.flat_fraction.min(1.0) * sz * sz).sqrt().round() as usize).min(size);
        if side > 0 {
            let x0 = rng.random_range(0..=size - side);
            let y0 = rng.random_range(0..=size - side);
            let value: f64 = rng.random();
            for y in y0..y0 + side {
                img[y * size + x0..y * size + x0 + side].fill(value);
            }
        }
    }
    let data = img.into_iter().map(quantize).collect();
    Tensor::new(vec![1, size, size], data).expect("square image")
}

/// Bilinear sample with zero outside the image.
fn bilinear(img: &[f32], size: usize, p: Point2) -> f64 {
    let (x0, y0) = (p.x.floor(), p.y.floor());
    let (tx, ty) = (p.x - x0, p.y - y0);
    let px = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= size as f64 || y >= size as f64 {
            0.0
        } else {
            img[y as usize * size + x as usize] as f64
        }
    };
    let top = px(x0, y0) * (1.0 - tx) + px(x0 + 1.0, y0) * tx;
    let bot = px(x0, y0 + 1.0) * (1.0 - tx) + px(x0 + 1.0, y0 + 1.0) * tx;
    top * (1.0 - ty) + bot * ty
}

/// `image_b(p) = image_a(H^-1 p) + noise`, quantised to 8 bits.
pub fn warp_image(image_a: &Tensor<f32>, h: &Homography, noise_seed: u64) -> Result<Tensor<f32>> {
    let size = image_a.shape()[2];
    let inv = h.inverse()?;
    let mut rng = stream(noise_seed, NOISE_STREAM);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v = inv
                .apply(Point2::new(x as f64, y as f64))
                .map_or(0.0, |src| bilinear(image_a.data(), size, src));
            out.push(quantize(v + noise.sample(&mut rng)));
        }
    }
    Tensor::new(vec![1, size, size], out)
}

/// Samples a homography about the image centre for `difficulty`.
pub fn sample_homography(seed: u64, size: usize, difficulty: Difficulty) -> Result<Homography> {
    let mut rng = stream(seed, HOMOGRAPHY_STREAM);
    let c = (size as f64 - 1.0) / 2.0;
    for _ in 0..MAX_RESAMPLES {
        let (max_rot, max_t, scale, persp) = match difficulty {
            Difficulty::Easy => (10f64, 8.0, (1.0f64, 1.0f64), 0.0),
            Difficulty::Medium => (10.0, 8.0, (0.8, 1.25), 1e-3),
            Difficulty::Hard => (45.0, 8.0, (0.8, 1.25), 3e-3),
        };
        let theta = rng.random_range(-max_rot..=max_rot).to_radians();
        let s = if scale.0 < scale.1 {
            rng.random_range(scale.0.ln()..scale.1.ln()).exp()
        } else {
            1.0
        };
        let (tx, ty) = (
            rng.random_range(-max_t..=max_t),
            rng.random_range(-max_t..=max_t),
        );
        let (p1, p2) = if persp > 0.0 {
            (
                rng.random_range(-persp..persp),
                rng.random_range(-persp..persp),
            )
        } else {
            (0.0, 0.0)
        };
        let (cs, sn) = (s * theta.cos(), s * theta.sin());
        let h = Homography::from_rows([[cs, -sn, tx], [sn, cs, ty], [p1, p2, 1.0]])
            .and_then(|centred| Homography::translation(c, c).compose(&centred))
            .and_then(|h| h.compose(&Homography::translation(-c, -c)));
        if let Ok(h) = h {
            if h.determinant().abs() >= 1e-6 {
                return Ok(h);
            }
        }
    }
    Err(SureError::Degenerate(format!(
        "no usable homography after {MAX_RESAMPLES} draws"
    )))
}

/// Builds the pair for `seed`; `h_override` replaces the sampled homography.
pub fn generate_pair_with(
    seed: u64,
    size: usize,
    difficulty: Difficulty,
    texture: &TextureConfig,
    h_override: Option<Homography>,
) -> Result<SyntheticPair> {
    if size == 0 || size % STRIDE != 0 {
        return Err(SureError::invalid(format!(
            "image size {size} is not divisible by {STRIDE}"
        )));
    }
    let h_true = match h_override {
        Some(h) => h,
        None => sample_homography(seed, size, difficulty)?,
    };
    let image_a = render_texture(seed, size, texture);
    let image_b = warp_image(&image_a, &h_true, seed)?;
    let grid = GridSpec::for_image(size, size, STRIDE)?;
    let gt = make_ground_truth(&h_true, &grid, &grid);
    Ok(SyntheticPair {
        seed,
        difficulty,
        image_a,
        image_b,
        h_true,
        gt,
    })
}

pub fn generate_pair(seed: u64, size: usize, difficulty: Difficulty) -> Result<SyntheticPair> {
    generate_pair_with(seed, size, difficulty, &TextureConfig::default(), None)
}

/// `count` pairs with seeds `pair_seed(base_seed, k)`.
pub fn generate_dataset(
    base_seed: u64,
    count: usize,
    size: usize,
    difficulty: Difficulty,
) -> Result<Vec<SyntheticPair>> {
    (0..count as u64)
        .map(|k| generate_pair(pair_seed(base_seed, k), size, difficulty))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_bit_deterministic() {
        let a = generate_pair(42, 64, Difficulty::Easy).unwrap();
        let b = generate_pair(42, 64, Difficulty::Easy).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a.image_a,
            generate_pair(43, 64, Difficulty::Easy).unwrap().image_a
        );
    }

    #[test]
    fn identity_hook_gives_zero_offsets() {
        let p = generate_pair_with(
            7,
            64,
            Difficulty::Hard,
            &TextureConfig::default(),
            Some(Homography::identity()),
        )
        .unwrap();
        assert_eq!(p.gt.matches.len(), 64);
        assert!(p
            .gt
            .matches
            .iter()
            .all(|m| m.offset == [0.0, 0.0] && m.cell_a == m.cell_b));
        // noise only: pixel differences stay small
        let max = p
            .image_a
            .data()
            .iter()
            .zip(p.image_b.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 0.15, "{max}");
    }

    #[test]
    fn hard_pairs_keep_fewer_cells() {
        let count = |d| -> f64 {
            (0..100)
                .map(|s| sample_homography(pair_seed(9, s), 64, d).unwrap())
                .map(|h| {
                    let g = GridSpec::for_image(64, 64, 8).unwrap();
                    make_ground_truth(&h, &g, &g).matches.len() as f64
                })
                .sum::<f64>()
                / 100.0
        };
        assert!(count(Difficulty::Hard) < count(Difficulty::Easy));
    }

    #[test]
    fn images_are_eight_bit() {
        let p = generate_pair(3, 32, Difficulty::Medium).unwrap();
        for v in p.image_a.data().iter().chain(p.image_b.data()) {
            let k = v * 255.0;
            assert!((k - k.round()).abs() < 1e-3 && (0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn easy_homographies_respect_bounds() {
        for s in 0..50 {
            let h = sample_homography(s, 64, Difficulty::Easy).unwrap();
            let c = Point2::new(31.5, 31.5);
            let w = h.apply(c).unwrap();
            assert!((w.x - c.x).abs() <= 8.0 + 1e-9 && (w.y - c.y).abs() <= 8.0 + 1e-9);
        }
    }

    #[test]
    fn rejects_bad_size() {
        assert!(generate_pair(1, 60, Difficulty::Easy).is_err());
    }

    #[test]
    fn difficulty_parsing() {
        for d in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
            assert_eq!(d.as_str().parse::<Difficulty>().unwrap(), d);
        }
        assert!("extreme".parse::<Difficulty>().is_err());
    }
}
