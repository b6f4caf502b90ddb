//! Change detection on a frozen encoder: per-level absolute feature
//! differences `|f(a) − f(b)|` feed a small U-shaped decoder that predicts a
//! per-pixel change logit.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{f1_score, ConfusionCounts, F1Score};
use crate::backbone::{Branch, ResidualEncoder};
use crate::dataset::{generate_synthetic_scenes, mix_seed, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Conv2d, GroupNorm, ParamStore};
use crate::optim::{Adam, AdamConfig};

/// Co-registered image pair and its binary change mask (1 channel, values 0/1).
#[derive(Debug, Clone, PartialEq)]
pub struct ChangePair {
    pub id: String,
    pub a: Image,
    pub b: Image,
    pub mask: Image,
}

impl ChangePair {
    pub fn new(id: impl Into<String>, a: Image, b: Image, mask: Image) -> Result<Self> {
        if a.channels() != 3 || b.channels() != 3 || mask.channels() != 1 {
            return Err(Error::contract("change pairs need RGB images and a 1-channel mask"));
        }
        if a.height() != b.height() || a.width() != b.width() || a.height() != mask.height() || a.width() != mask.width() {
            return Err(Error::contract(format!(
                "unregistered pair: a {:?}, b {:?}, mask {:?}",
                a.shape(),
                b.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("mask values must be 0 or 1"));
        }
        Ok(Self { id: id.into(), a, b, mask })
    }

    pub fn changed_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.data().len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChangePairSpec {
    pub n_pairs: usize,
    pub tile_size: usize,
    /// Up to this many square patches are replaced in the second image.
    pub max_squares: usize,
    pub noise_level: f32,
    pub texture_family_seed: u64,
}

impl Default for ChangePairSpec {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            tile_size: 32,
            max_squares: 3,
            noise_level: 0.3,
            texture_family_seed: 0,
        }
    }
}

/// Pairs built from synthetic scene tiles: the second image is a photometrically
/// jittered copy of the first with square patches pasted from tiles of other
/// scenes; the mask marks the pasted squares.
pub fn generate_change_pairs(spec: &ChangePairSpec, seed: u64) -> Result<Vec<ChangePair>> {
    if spec.n_pairs == 0 || spec.max_squares == 0 {
        return Err(Error::param("need at least one pair and one square"));
    }
    let scenes = 8usize;
    let tiles = generate_synthetic_scenes(
        &SyntheticSceneSpec {
            n_scenes: scenes,
            tiles_per_scene: spec.n_pairs.div_ceil(scenes) * 2,
            tile_size: spec.tile_size,
            texture_family_seed: spec.texture_family_seed,
            noise_level: spec.noise_level,
        },
        mix_seed(&[seed, 0xC4]),
    )?;
    let per_scene = tiles.len() / scenes;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xC5]));
    let noise = Normal::new(0.0f32, 0.02 + 0.05 * spec.noise_level).unwrap();
    let size = spec.tile_size;
    let mut pairs = Vec::with_capacity(spec.n_pairs);
    for i in 0..spec.n_pairs {
        let scene = i % scenes;
        let src = &tiles.tiles()[scene * per_scene + i / scenes].pixels;
        let gain = 1.0 + rng.random_range(-0.05f32..0.05);
        let mut b = src.clone();
        for v in b.data_mut() {
            *v = (*v * gain + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        let mut mask = Image::zeros(1, size, size);
        for _ in 0..rng.random_range(1..=spec.max_squares) {
            let donor_scene = (scene + rng.random_range(1..scenes)) % scenes;
            let donor = &tiles.tiles()[donor_scene * per_scene + rng.random_range(0..per_scene)].pixels;
            let side = rng.random_range(size / 6..=size / 3).max(2);
            let (oy, ox) = (rng.random_range(0..=size - side), rng.random_range(0..=size - side));
            for y in oy..oy + side {
                for x in ox..ox + side {
                    for c in 0..3 {
                        b.set(c, y, x, donor.get(c, y, x));
                    }
                    mask.set(0, y, x, 1.0);
                }
            }
        }
        pairs.push(ChangePair::new(format!("p{i:04}"), src.clone(), b, mask)?);
    }
    Ok(pairs)
}

pub fn write_change_directory(pairs: &[ChangePair], root: &Path) -> Result<()> {
    for p in pairs {
        let dir = root.join(&p.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        p.a.save_png(&dir.join("a.png"))?;
        p.b.save_png(&dir.join("b.png"))?;
        p.mask.save_png(&dir.join("mask.png"))?;
    }
    Ok(())
}

fn load_mask(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let data = luma.pixels().map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 }).collect();
    Image::new(1, h as usize, w as usize, data)
}

/// Reads `<root>/<pair_id>/{a,b,mask}.png` for every subdirectory, in name order.
pub fn load_change_directory(root: &Path) -> Result<Vec<ChangePair>> {
    let mut ids: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_dir())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let dir = root.join(&id);
            ChangePair::new(
                id,
                Image::load_png(&dir.join("a.png"))?,
                Image::load_png(&dir.join("b.png"))?,
                load_mask(&dir.join("mask.png"))?,
            )
        })
        .collect()
}

/// `|f(a) − f(b)|` for every pyramid level, detached from the encoder.
pub fn difference_features(encoder: &ResidualEncoder, a: &Tensor, b: &Tensor) -> Result<Vec<Tensor>> {
    if a.dims() != b.dims() {
        return Err(Error::contract("pair images differ in shape"));
    }
    let fa = encoder.forward(a)?.detach();
    let fb = encoder.forward(b)?.detach();
    fa.pyramid()
        .into_iter()
        .zip(fb.pyramid())
        .map(|(x, y)| Ok((x - y)?.abs()?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChangeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability above which a pixel is called changed.
    pub threshold: f64,
    pub width: usize,
    /// Pyramid levels (0 = shallow stem features) that feed the decoder.
    pub levels: Vec<usize>,
    /// Random horizontal flips and 90° rotations applied jointly to a, b, mask.
    pub augment: bool,
    pub seed: u64,
}

impl Default for ChangeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            threshold: 0.5,
            width: 16,
            levels: vec![0, 1, 2, 3, 4],
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl DecoderBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// U-shaped decoder over selected difference levels, deepest first.
#[derive(Debug, Clone)]
pub struct ChangeDecoder {
    levels: Vec<usize>,
    blocks: Vec<DecoderBlock>,
    head: Conv2d,
    pub params: ParamStore,
}

impl ChangeDecoder {
    /// `level_channels[i]` is the channel count of pyramid level `i`.
    pub fn new(level_channels: &[usize], config: &ChangeConfig, device: &Device) -> Result<Self> {
        let mut levels = config.levels.clone();
        levels.sort_unstable();
        levels.dedup();
        if levels.is_empty() || levels.iter().any(|&l| l >= level_channels.len()) {
            return Err(Error::Config(format!(
                "decoder levels {:?} not within 0..{}",
                config.levels,
                level_channels.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0xDE]));
        let mut p = ParamStore::new(device);
        let w = config.width;
        let mut blocks = Vec::new();
        let mut carried = 0;
        for (k, &level) in levels.iter().rev().enumerate() {
            let in_ch = carried + level_channels[level];
            blocks.push(DecoderBlock {
                conv: Conv2d::new(&mut p, &format!("block{k}.conv"), in_ch, w, 3, 1, 1.0, &mut rng)?,
                norm: GroupNorm::new(&mut p, &format!("block{k}.norm"), w, 4)?,
            });
            carried = w;
        }
        let head = Conv2d::new(&mut p, "head", w, 1, 1, 1, 1.0, &mut rng)?;
        Ok(Self {
            levels,
            blocks,
            head,
            params: p,
        })
    }

    /// Per-pixel change logits at the resolution of `image_hw`.
    pub fn forward(&self, diffs: &[Tensor], image_hw: (usize, usize)) -> Result<Tensor> {
        let mut h: Option<Tensor> = None;
        for (block, &level) in self.blocks.iter().zip(self.levels.iter().rev()) {
            let d = diffs
                .get(level)
                .ok_or_else(|| Error::contract(format!("missing difference level {level}")))?;
            let (_, _, dh, dw) = d.dims4()?;
            let input = match h {
                Some(prev) => {
                    let (_, _, ph, pw) = prev.dims4()?;
                    let prev = if (ph, pw) != (dh, dw) { prev.upsample_nearest2d(dh, dw)? } else { prev };
                    Tensor::cat(&[&prev, d], 1)?
                }
                None => d.clone(),
            };
            h = Some(block.forward(&input)?);
        }
        let h = h.expect("at least one level");
        let (_, _, hh, hw) = h.dims4()?;
        let h = if (hh, hw) != image_hw { h.upsample_nearest2d(image_hw.0, image_hw.1)? } else { h };
        self.head.forward(&h)
    }
}

/// Numerically stable mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = logits.relu()?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((pos - (logits * targets)?)? + soft)?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct ChangeModel {
    pub decoder: ChangeDecoder,
    pub config: ChangeConfig,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

fn dihedral(img: &Image, flip: bool, rot: usize) -> Image {
    let (c, h, w) = img.shape();
    let mut cur = img.clone();
    if flip {
        let mut out = Image::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, y, x, cur.get(ch, y, w - 1 - x));
                }
            }
        }
        cur = out;
    }
    for _ in 0..rot {
        let (c, h, w) = cur.shape();
        let mut out = Image::zeros(c, w, h);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, w - 1 - x, y, cur.get(ch, y, x));
                }
            }
        }
        cur = out;
    }
    cur
}

fn level_channels(encoder: &ResidualEncoder) -> Vec<usize> {
    let cfg = encoder.config();
    std::iter::once(cfg.stem_channels).chain(cfg.stage_channels.iter().copied()).collect()
}

fn stack_pairs(pairs: &[&ChangePair], device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((
        Image::stack(&pairs.iter().map(|p| &p.a).collect::<Vec<_>>(), device)?,
        Image::stack(&pairs.iter().map(|p| &p.b).collect::<Vec<_>>(), device)?,
        Image::stack(&pairs.iter().map(|p| &p.mask).collect::<Vec<_>>(), device)?,
    ))
}

/// Trains a decoder on top of the frozen query encoder of `encoder`.
pub fn change_detect_train(pairs: &[ChangePair], encoder: &Branch, config: &ChangeConfig) -> Result<ChangeModel> {
    if pairs.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("change detection needs pairs and a positive batch size".into()));
    }
    let shape = pairs[0].a.shape();
    if pairs.iter().any(|p| p.a.shape() != shape) {
        return Err(Error::contract("all change pairs must share one shape"));
    }
    let device = encoder.params.device().clone();
    let decoder = ChangeDecoder::new(&level_channels(&encoder.encoder), config, &device)?;
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0xCD]));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<ChangePair> = chunk
                .iter()
                .map(|&i| {
                    let p = &pairs[i];
                    if config.augment {
                        let (flip, rot) = (rng.random_bool(0.5), rng.random_range(0..4));
                        ChangePair {
                            id: p.id.clone(),
                            a: dihedral(&p.a, flip, rot),
                            b: dihedral(&p.b, flip, rot),
                            mask: dihedral(&p.mask, flip, rot),
                        }
                    } else {
                        p.clone()
                    }
                })
                .collect();
            let refs: Vec<&ChangePair> = batch.iter().collect();
            let (a, b, mask) = stack_pairs(&refs, &device)?;
            let diffs = difference_features(&encoder.encoder, &a, &b)?;
            let (_, _, h, w) = a.dims4()?;
            let logits = decoder.forward(&diffs, (h, w))?;
            let loss = bce_with_logits(&logits, &mask)?;
            let grads = loss.backward()?;
            opt.step(&decoder.params, &grads)?;
            sum += loss.to_scalar::<f32>()? as f64;
            batches += 1;
        }
        loss_trace.push(sum / batches as f64);
    }
    Ok(ChangeModel {
        decoder,
        config: config.clone(),
        loss_trace,
    })
}

/// Per-pixel change probabilities, `B×1×H×W`.
pub fn change_probabilities(model: &ChangeModel, encoder: &Branch, pairs: &[&ChangePair]) -> Result<Tensor> {
    let device = encoder.params.device().clone();
    let (a, b, _) = stack_pairs(pairs, &device)?;
    let diffs = difference_features(&encoder.encoder, &a, &b)?;
    let (_, _, h, w) = a.dims4()?;
    Ok(candle_nn::ops::sigmoid(&model.decoder.forward(&diffs, (h, w))?.detach())?)
}

/// Pixel-level confusion counts and F1 at the configured threshold.
pub fn change_detect_eval(model: &ChangeModel, encoder: &Branch, pairs: &[ChangePair]) -> Result<(ConfusionCounts, F1Score)> {
    let mut counts = ConfusionCounts::default();
    for chunk in pairs.chunks(model.config.batch_size.max(1)) {
        let refs: Vec<&ChangePair> = chunk.iter().collect();
        let probs = change_probabilities(model, encoder, &refs)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let predicted: Vec<bool> = probs.iter().map(|&p| p as f64 > model.config.threshold).collect();
        let truth: Vec<bool> = chunk
            .iter()
            .flat_map(|p| p.mask.data().iter().map(|&v| v > 0.5))
            .collect();
        counts = counts.merge(ConfusionCounts::from_predictions(&predicted, &truth)?);
    }
    Ok((counts, f1_score(&counts)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn small_pairs(n: usize) -> Vec<ChangePair> {
        generate_change_pairs(
            &ChangePairSpec {
                n_pairs: n,
                tile_size: 16,
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn generated_pairs_are_valid() {
        let pairs = small_pairs(10);
        assert_eq!(pairs.len(), 10);
        for p in &pairs {
            assert!(p.changed_fraction() > 0.0 && p.changed_fraction() < 1.0);
            assert!(p.a.is_unit_range() && p.b.is_unit_range());
        }
        assert_eq!(pairs, small_pairs(10));
    }

    #[test]
    fn unregistered_pair_rejected() {
        let a = Image::zeros(3, 8, 8);
        let b = Image::zeros(3, 8, 16);
        assert!(matches!(
            ChangePair::new("x", a.clone(), b, Image::zeros(1, 8, 8)),
            Err(Error::Contract(_))
        ));
        assert!(ChangePair::new("x", a.clone(), a, Image::filled(1, 8, 8, 0.5)).is_err());
    }

    #[test]
    fn identical_pairs_give_zero_differences() {
        let enc = Branch::new(&BackboneConfig::default(), &Device::Cpu, 3).unwrap();
        let p = &small_pairs(2)[0];
        let a = Image::stack(&[&p.a], &Device::Cpu).unwrap();
        for d in difference_features(&enc.encoder, &a, &a).unwrap() {
            assert_eq!(d.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn difference_is_symmetric() {
        let enc = Branch::new(&BackboneConfig::default(), &Device::Cpu, 3).unwrap();
        let p = &small_pairs(2)[1];
        let a = Image::stack(&[&p.a], &Device::Cpu).unwrap();
        let b = Image::stack(&[&p.b], &Device::Cpu).unwrap();
        let ab = difference_features(&enc.encoder, &a, &b).unwrap();
        let ba = difference_features(&enc.encoder, &b, &a).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert_eq!(
                crate::nn::tensor_fingerprint(x).unwrap(),
                crate::nn::tensor_fingerprint(y).unwrap()
            );
        }
    }

    #[test]
    fn training_keeps_encoder_frozen() {
        let enc = Branch::new(&BackboneConfig::default(), &Device::Cpu, 3).unwrap();
        let before = enc.params.fingerprint().unwrap();
        let cfg = ChangeConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let pairs = small_pairs(8);
        let model = change_detect_train(&pairs, &enc, &cfg).unwrap();
        assert_eq!(model.loss_trace.len(), 2);
        assert_eq!(before, enc.params.fingerprint().unwrap());
        let (counts, _) = change_detect_eval(&model, &enc, &pairs).unwrap();
        assert_eq!(counts.total(), 8 * 16 * 16);
    }

    #[test]
    fn dihedral_transforms() {
        let mut img = Image::zeros(1, 2, 3);
        img.set(0, 0, 0, 1.0);
        let r = dihedral(&img, false, 1);
        assert_eq!(r.shape(), (1, 3, 2));
        assert_eq!(r.get(0, 2, 0), 1.0);
        assert_eq!(dihedral(&img, false, 4), img);
        assert_eq!(dihedral(&dihedral(&img, true, 0), true, 0), img);
    }

    #[test]
    fn stable_bce_matches_reference() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[-30.0f64, -1.0, 0.0, 2.0, 40.0]], &dev).unwrap();
        let y = Tensor::new(&[[0.0f64, 1.0, 1.0, 0.0, 1.0]], &dev).unwrap();
        let got = bce_with_logits(&x, &y).unwrap().to_scalar::<f64>().unwrap();
        // -log σ(l) for positives, -log(1-σ(l)) = log(1+e^l) for negatives
        let reference: f64 = [(-30.0f64, false), (-1.0, true), (0.0, true), (2.0, false), (40.0, true)]
            .iter()
            .map(|&(l, pos)| if pos { (-l).exp().ln_1p() } else { l.exp().ln_1p() })
            .sum::<f64>()
            / 5.0;
        assert!((got - reference).abs() < 1e-12, "{got} vs {reference}");
    }
}
