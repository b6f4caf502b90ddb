//! Procedural stand-in for large-scene satellite imagery.
//!
//! Each scene is rendered once on a canvas three tiles wide; tiles are random
//! crops of it plus per-tile photometric jitter. Scene colors come from a small
//! shared palette so scenes are separable by texture, not by color alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, SceneDataset, SceneId, SceneTile, TileId};
use crate::error::{Error, Result};
use crate::image::Image;

const PALETTE_SIZE: usize = 3;
const CANVAS_TILES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub n_scenes: usize,
    pub tiles_per_scene: usize,
    pub tile_size: usize,
    pub texture_family_seed: u64,
    pub noise_level: f32,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            n_scenes: 8,
            tiles_per_scene: 64,
            tile_size: 32,
            texture_family_seed: 0,
            noise_level: 0.3,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.tiles_per_scene == 0 {
            return Err(Error::param("scene and tile counts must be at least 1"));
        }
        if self.tile_size < 8 {
            return Err(Error::param(format!(
                "tile size must be at least 8, got {}",
                self.tile_size
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::param("noise level must lie in [0,1]"));
        }
        Ok(())
    }
}

struct Blob {
    cy: f32,
    cx: f32,
    radius: f32,
    tint: [f32; 3],
}

struct SceneRecipe {
    base: [f32; 3],
    field: [[f32; 4]; 3],
    stripe_dir: (f32, f32),
    stripe_freq: f32,
    stripe_amp: [f32; 3],
    secondary_freq: f32,
    blobs: Vec<Blob>,
}

impl SceneRecipe {
    fn sample(palette: &[[f32; 3]], scene: usize, canvas: f32, rng: &mut ChaCha8Rng) -> Self {
        let anchor = palette[scene % palette.len()];
        let offset = Normal::new(0.0f32, 0.03).unwrap();
        let base = anchor.map(|v| (v + offset.sample(rng)).clamp(0.15, 0.85));
        // low-frequency color field: amplitude, wavenumbers (ky, kx), phase
        let field = [(); 3].map(|_| {
            [
                rng.random_range(0.03..0.08),
                rng.random_range(0.2..1.0) * std::f32::consts::TAU / canvas,
                rng.random_range(0.2..1.0) * std::f32::consts::TAU / canvas,
                rng.random_range(0.0..std::f32::consts::TAU),
            ]
        });
        let theta = rng.random_range(0.0..std::f32::consts::PI);
        let blobs = (0..rng.random_range(3..7))
            .map(|_| Blob {
                cy: rng.random_range(0.0..canvas),
                cx: rng.random_range(0.0..canvas),
                radius: rng.random_range(2.0..canvas / 8.0),
                tint: [(); 3].map(|_| rng.random_range(-0.2..0.2)),
            })
            .collect();
        Self {
            base,
            field,
            stripe_dir: (theta.sin(), theta.cos()),
            stripe_freq: rng.random_range(0.08..0.3) * std::f32::consts::TAU,
            stripe_amp: [(); 3].map(|_| rng.random_range(0.06..0.16)),
            secondary_freq: rng.random_range(0.3..0.6) * std::f32::consts::TAU,
            blobs,
        }
    }

    fn render(&self, size: usize) -> Image {
        let mut img = Image::zeros(3, size, size);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f32, x as f32);
                let along = fy * self.stripe_dir.0 + fx * self.stripe_dir.1;
                let across = -fy * self.stripe_dir.1 + fx * self.stripe_dir.0;
                let stripe = (along * self.stripe_freq).sin();
                let fine = 0.35 * (across * self.secondary_freq).sin() * stripe;
                for c in 0..3 {
                    let [amp, ky, kx, phase] = self.field[c];
                    let mut v = self.base[c] + amp * (ky * fy + kx * fx + phase).sin();
                    v += self.stripe_amp[c] * (stripe + fine);
                    for b in &self.blobs {
                        let d2 = (fy - b.cy).powi(2) + (fx - b.cx).powi(2);
                        v += b.tint[c] * (-d2 / (2.0 * b.radius * b.radius)).exp();
                    }
                    img.set(c, y, x, v);
                }
            }
        }
        img
    }
}

/// Renders `n_scenes × tiles_per_scene` tiles. Deterministic in `(spec, seed)`.
pub fn generate_synthetic_scenes(spec: &SyntheticSceneSpec, seed: u64) -> Result<SceneDataset> {
    spec.validate()?;
    let mut palette_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.texture_family_seed, 0xFA]));
    let palette: Vec<[f32; 3]> = (0..PALETTE_SIZE)
        .map(|_| [(); 3].map(|_| palette_rng.random_range(0.3..0.7)))
        .collect();

    let ts = spec.tile_size;
    let canvas = ts * CANVAS_TILES;
    let noise = Normal::new(0.0f32, 0.1 * spec.noise_level.max(f32::MIN_POSITIVE)).unwrap();
    let mut tiles = Vec::with_capacity(spec.n_scenes * spec.tiles_per_scene);
    for s in 0..spec.n_scenes {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[seed, spec.texture_family_seed, s as u64]));
        let recipe = SceneRecipe::sample(&palette, s, canvas as f32, &mut rng);
        let scene_img = recipe.render(canvas);
        let scene_id = SceneId(format!("s{s:03}"));
        for k in 0..spec.tiles_per_scene {
            let oy = rng.random_range(0..=canvas - ts);
            let ox = rng.random_range(0..=canvas - ts);
            let gain = 1.0 + rng.random_range(-0.08f32..0.08);
            let bias = rng.random_range(-0.04f32..0.04);
            let mut px = Image::zeros(3, ts, ts);
            for c in 0..3 {
                for y in 0..ts {
                    for x in 0..ts {
                        let mut v = scene_img.get(c, oy + y, ox + x) * gain + bias;
                        if spec.noise_level > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        px.set(c, y, x, v.clamp(0.0, 1.0));
                    }
                }
            }
            tiles.push(SceneTile::new(px, scene_id.clone(), TileId(format!("t{k:04}")))?);
        }
    }
    SceneDataset::new(tiles)
}

/// Pearson correlation between the flattened pixel vectors of two images.
/// Returns 0 when either image is constant.
pub fn pixel_correlation(a: &Image, b: &Image) -> f64 {
    let (x, y) = (a.data(), b.data());
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&u, &v) in x.iter().zip(y) {
        let (du, dv) = (u as f64 - mx, v as f64 - my);
        sxy += du * dv;
        sxx += du * du;
        syy += dv * dv;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
