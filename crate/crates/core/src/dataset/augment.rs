use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SceneId, SceneTile, TileId};
use crate::error::{Error, Result};
use crate::image::Image;

/// Random resized crop: area fraction and aspect ratio ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizedCrop {
    pub scale: (f32, f32),
    pub ratio: (f32, f32),
    /// Output side length; `None` keeps the tile size.
    pub output_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub probability: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop: Option<ResizedCrop>,
    pub jitter: Option<ColorJitter>,
    pub flip_probability: f32,
    pub grayscale_probability: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: Some(ResizedCrop {
                scale: (0.3, 1.0),
                ratio: (3.0 / 4.0, 4.0 / 3.0),
                output_size: None,
            }),
            jitter: Some(ColorJitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                probability: 0.8,
            }),
            flip_probability: 0.5,
            grayscale_probability: 0.2,
        }
    }
}

impl AugmentConfig {
    /// No crop, jitter, flip or grayscale: both views equal the tile.
    pub fn identity() -> Self {
        Self {
            crop: None,
            jitter: None,
            flip_probability: 0.0,
            grayscale_probability: 0.0,
        }
    }

    fn check(&self, tile_size: (usize, usize)) -> Result<()> {
        let prob_ok = |p: f32| (0.0..=1.0).contains(&p);
        if !prob_ok(self.flip_probability) || !prob_ok(self.grayscale_probability) {
            return Err(Error::param("augmentation probabilities must lie in [0,1]"));
        }
        if let Some(crop) = &self.crop {
            let (lo, hi) = crop.scale;
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::param("crop scale must satisfy 0 < lo <= hi <= 1"));
            }
            if !(crop.ratio.0 > 0.0 && crop.ratio.0 <= crop.ratio.1) {
                return Err(Error::param("crop ratio range is invalid"));
            }
            if let Some(out) = crop.output_size {
                if out == 0 || out > tile_size.0.min(tile_size.1) {
                    return Err(Error::param(format!(
                        "crop size {out} exceeds tile size {}x{}",
                        tile_size.0, tile_size.1
                    )));
                }
            }
        }
        if let Some(j) = &self.jitter {
            if !prob_ok(j.probability) || j.brightness < 0.0 || j.contrast < 0.0 || j.saturation < 0.0
            {
                return Err(Error::param("color jitter strengths must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Query and key views of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub query: Image,
    pub key: Image,
    pub scene_id: SceneId,
    pub tile_id: TileId,
}

/// Draws two independent augmentations of `tile`. Deterministic in `(tile, config, seed)`.
pub fn augment_pair(tile: &SceneTile, config: &AugmentConfig, seed: u64) -> Result<AugmentedPair> {
    let img = &tile.pixels;
    config.check((img.height(), img.width()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query = augment_view(img, config, &mut rng);
    let key = augment_view(img, config, &mut rng);
    Ok(AugmentedPair {
        query,
        key,
        scene_id: tile.scene_id.clone(),
        tile_id: tile.tile_id.clone(),
    })
}

fn augment_view(img: &Image, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    let mut out = match &config.crop {
        Some(crop) => random_resized_crop(img, crop, rng),
        None => img.clone(),
    };
    if let Some(j) = &config.jitter {
        if rng.random::<f32>() < j.probability {
            color_jitter(&mut out, j, rng);
        }
    }
    if rng.random::<f32>() < config.grayscale_probability {
        to_grayscale(&mut out);
    }
    if rng.random::<f32>() < config.flip_probability {
        out = hflip(&out);
    }
    out
}

fn random_resized_crop(img: &Image, crop: &ResizedCrop, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (img.height() as f32, img.width() as f32);
    let out = crop.output_size.unwrap_or(img.height().min(img.width()));
    let area = h * w;
    let (log_lo, log_hi) = (crop.ratio.0.ln(), crop.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(crop.scale.0..=crop.scale.1);
        let aspect = if log_hi > log_lo {
            rng.random_range(log_lo..=log_hi).exp()
        } else {
            log_lo.exp()
        };
        let cw = (target * aspect).sqrt();
        let ch = (target / aspect).sqrt();
        if cw <= w && ch <= h && cw >= 1.0 && ch >= 1.0 {
            let y0 = rng.random_range(0.0..=(h - ch));
            let x0 = rng.random_range(0.0..=(w - cw));
            return resample(img, y0, x0, ch, cw, out);
        }
    }
    let side = h.min(w);
    resample(img, (h - side) / 2.0, (w - side) / 2.0, side, side, out)
}

/// Bilinear resampling of the box `(y0, x0, bh, bw)` onto an `out × out` grid,
/// sampling at pixel centers.
fn resample(img: &Image, y0: f32, x0: f32, bh: f32, bw: f32, out: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut dst = Image::zeros(img.channels(), out, out);
    let sy = bh / out as f32;
    let sx = bw / out as f32;
    for oy in 0..out {
        let fy = (y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let (y_lo, ty) = (fy.floor() as usize, fy - fy.floor());
        let y_hi = (y_lo + 1).min(h - 1);
        for ox in 0..out {
            let fx = (x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let (x_lo, tx) = (fx.floor() as usize, fx - fx.floor());
            let x_hi = (x_lo + 1).min(w - 1);
            for c in 0..img.channels() {
                let top = img.get(c, y_lo, x_lo) * (1.0 - tx) + img.get(c, y_lo, x_hi) * tx;
                let bot = img.get(c, y_hi, x_lo) * (1.0 - tx) + img.get(c, y_hi, x_hi) * tx;
                dst.set(c, oy, ox, (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
            }
        }
    }
    dst
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter(img: &mut Image, j: &ColorJitter, rng: &mut ChaCha8Rng) {
    let mut factor = |s: f32| {
        if s > 0.0 {
            rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
        } else {
            1.0
        }
    };
    let (fb, fc, fs) = (factor(j.brightness), factor(j.contrast), factor(j.saturation));
    let (h, w) = (img.height(), img.width());
    for v in img.data_mut() {
        *v = (*v * fb).clamp(0.0, 1.0);
    }
    let mean_luma = {
        let mut acc = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                acc += luma(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            }
        }
        acc / (h * w) as f32
    };
    for v in img.data_mut() {
        *v = ((*v - mean_luma) * fc + mean_luma).clamp(0.0, 1.0);
    }
    for y in 0..h {
        for x in 0..w {
            let g = luma(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            for c in 0..3 {
                let v = img.get(c, y, x);
                img.set(c, y, x, ((v - g) * fs + g).clamp(0.0, 1.0));
            }
        }
    }
}

fn to_grayscale(img: &mut Image) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let g = luma(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            for c in 0..3 {
                img.set(c, y, x, g);
            }
        }
    }
}

fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    let w = img.width();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_scenes, SyntheticSceneSpec};

    fn sample_tile() -> SceneTile {
        let spec = SyntheticSceneSpec {
            n_scenes: 1,
            tiles_per_scene: 1,
            tile_size: 32,
            ..Default::default()
        };
        generate_synthetic_scenes(&spec, 11).unwrap().tiles()[0].clone()
    }

    #[test]
    fn identity_config_copies_tile() {
        let t = sample_tile();
        let pair = augment_pair(&t, &AugmentConfig::identity(), 5).unwrap();
        assert_eq!(pair.query, t.pixels);
        assert_eq!(pair.key, t.pixels);
        assert_eq!(pair.scene_id, t.scene_id);
    }

    #[test]
    fn deterministic_per_seed() {
        let t = sample_tile();
        let cfg = AugmentConfig::default();
        assert_eq!(augment_pair(&t, &cfg, 9).unwrap(), augment_pair(&t, &cfg, 9).unwrap());
        assert_ne!(augment_pair(&t, &cfg, 9).unwrap(), augment_pair(&t, &cfg, 10).unwrap());
    }

    #[test]
    fn oversized_crop_rejected() {
        let t = sample_tile();
        let mut cfg = AugmentConfig::default();
        cfg.crop.as_mut().unwrap().output_size = Some(33);
        assert!(matches!(augment_pair(&t, &cfg, 0), Err(Error::Param(_))));
    }

    #[test]
    fn full_box_resample_is_identity() {
        let t = sample_tile();
        let r = resample(&t.pixels, 0.0, 0.0, 32.0, 32.0, 32);
        for (a, b) in r.data().iter().zip(t.pixels.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hflip_twice_is_identity() {
        let t = sample_tile();
        assert_eq!(hflip(&hflip(&t.pixels)), t.pixels);
    }

    #[test]
    fn views_differ_with_high_probability() {
        let t = sample_tile();
        let cfg = AugmentConfig::default();
        let mut differing = 0;
        for seed in 0..1000 {
            let p = augment_pair(&t, &cfg, seed).unwrap();
            assert!(p.query.is_unit_range() && p.key.is_unit_range());
            assert_eq!(p.query.shape(), p.key.shape());
            if p.query != p.key {
                differing += 1;
            }
        }
        assert!(differing as f64 / 1000.0 >= 0.99, "only {differing}/1000 differ");
    }

    proptest::proptest! {
        #[test]
        fn augmentation_closure(seed in 0u64..10_000, out in 8usize..=32) {
            let t = sample_tile();
            let mut cfg = AugmentConfig::default();
            cfg.crop.as_mut().unwrap().output_size = Some(out);
            let p = augment_pair(&t, &cfg, seed).unwrap();
            proptest::prop_assert_eq!(p.query.shape(), (3, out, out));
            proptest::prop_assert_eq!(p.key.shape(), (3, out, out));
            proptest::prop_assert!(p.query.is_unit_range() && p.key.is_unit_range());
            proptest::prop_assert_eq!(&p.scene_id, &t.scene_id);
        }
    }
}
