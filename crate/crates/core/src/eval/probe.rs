//! Classification probes on a pretrained encoder: a linear (or one-hidden-layer)
//! head trained on frozen pooled features, or end-to-end fine-tuning.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::change::bce_with_logits;
use super::metrics::{accuracy, confusion_matrix, map_score, MapScore};
use crate::backbone::Branch;
use crate::dataset::mix_seed;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Linear, ParamStore};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Encoder frozen; only the head is trained.
    Linear,
    /// Encoder and head are both updated.
    Finetune,
}

impl ProbeMode {
    pub fn default_lr(self) -> f64 {
        match self {
            ProbeMode::Linear => 1e-3,
            ProbeMode::Finetune => 1e-5,
        }
    }
}

impl FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear_probe" => Ok(ProbeMode::Linear),
            "finetune" | "fine_tune" => Ok(ProbeMode::Finetune),
            other => Err(Error::Config(format!("unknown probe mode {other:?}"))),
        }
    }
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeMode::Linear => "linear",
            ProbeMode::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    /// Defaults to 1e-3 for linear probing and 1e-5 for fine-tuning.
    pub lr: Option<f64>,
    /// Fractions of `epochs` at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Width of a hidden ReLU layer; 0 gives a single linear layer.
    pub hidden: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Linear,
            epochs: 100,
            lr: None,
            milestones: vec![0.6, 0.8],
            decay_factor: 0.1,
            batch_size: 32,
            hidden: 0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch size must be positive".into()));
        }
        if self.milestones.iter().any(|&m| !(m > 0.0 && m < 1.0)) || self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones {:?} must lie in (0,1) and increase strictly",
                self.milestones
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay factor must lie in (0,1]".into()));
        }
        if self.lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.mode.default_lr())
    }

    /// Learning rate used during 0-based `epoch`. A milestone `m` takes effect
    /// from epoch `round(m · epochs)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.base_lr() * self.decay_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeLabels {
    /// One class index per image; softmax head with cross-entropy.
    Single { labels: Vec<usize>, classes: usize },
    /// One indicator vector per image; per-class sigmoid with binary cross-entropy.
    Multi { labels: Vec<Vec<bool>> },
}

impl ProbeLabels {
    pub fn len(&self) -> usize {
        match self {
            ProbeLabels::Single { labels, .. } => labels.len(),
            ProbeLabels::Multi { labels } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            ProbeLabels::Single { classes, .. } => *classes,
            ProbeLabels::Multi { labels } => labels.first().map_or(0, Vec::len),
        }
    }

    fn check(&self, n_images: usize, classes: usize) -> Result<()> {
        if self.len() != n_images {
            return Err(Error::contract(format!("{} labels for {n_images} images", self.len())));
        }
        if classes == 0 || self.classes() != classes {
            return Err(Error::contract(format!(
                "label arity {} does not match the head's {classes} classes",
                self.classes()
            )));
        }
        match self {
            ProbeLabels::Single { labels, classes } => {
                if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::contract(format!("label {bad} outside 0..{classes}")));
                }
            }
            ProbeLabels::Multi { labels } => {
                if labels.iter().any(|l| l.len() != classes) {
                    return Err(Error::contract("multi-label vectors differ in length"));
                }
            }
        }
        Ok(())
    }

    fn targets(&self, idx: &[usize], device: &Device) -> Result<Tensor> {
        Ok(match self {
            ProbeLabels::Single { labels, .. } => {
                Tensor::from_vec(idx.iter().map(|&i| labels[i] as u32).collect::<Vec<_>>(), idx.len(), device)?
            }
            ProbeLabels::Multi { labels } => {
                let c = self.classes();
                let flat: Vec<f32> = idx
                    .iter()
                    .flat_map(|&i| labels[i].iter().map(|&b| b as u8 as f32))
                    .collect();
                Tensor::from_vec(flat, (idx.len(), c), device)?
            }
        })
    }
}

#[derive(Debug, Clone)]
struct ProbeHead {
    hidden: Option<Linear>,
    out: Linear,
    params: ParamStore,
}

impl ProbeHead {
    fn new(in_dim: usize, hidden: usize, classes: usize, seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9B]));
        let mut params = ParamStore::new(device);
        let (hidden, out) = if hidden > 0 {
            let h = Linear::new(&mut params, "hidden", in_dim, hidden, &mut rng)?;
            (Some(h), Linear::new(&mut params, "out", hidden, classes, &mut rng)?)
        } else {
            (None, Linear::new(&mut params, "out", in_dim, classes, &mut rng)?)
        };
        Ok(Self { hidden, out, params })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.hidden {
            Some(h) => self.out.forward(&h.forward(x)?.relu()?),
            None => self.out.forward(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeModel {
    /// The encoder the head was trained with: an untouched copy in linear
    /// mode, the fine-tuned weights otherwise.
    pub encoder: Branch,
    head: ProbeHead,
    pub multi_label: bool,
    pub classes: usize,
    pub config: ProbeConfig,
    /// Learning rate per epoch.
    pub lr_trace: Vec<f64>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

const FEATURE_CHUNK: usize = 64;

fn pooled_features(encoder: &Branch, images: &[&Image]) -> Result<Tensor> {
    let device = encoder.params.device().clone();
    let parts = images
        .chunks(FEATURE_CHUNK)
        .map(|chunk| Ok(encoder.encoder.pooled(&Image::stack(chunk, &device)?)?.detach()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

fn probe_loss(logits: &Tensor, targets: &Tensor, multi: bool) -> Result<Tensor> {
    if multi {
        bce_with_logits(logits, targets)
    } else {
        Ok(candle_nn::loss::cross_entropy(logits, targets)?)
    }
}

/// Trains a classification head on `encoder`. In linear mode `encoder` is never
/// modified; in fine-tune mode a copy is updated and returned inside the model.
pub fn probe_train(images: &[Image], labels: &ProbeLabels, encoder: &Branch, config: &ProbeConfig) -> Result<ProbeModel> {
    config.validate()?;
    let classes = labels.classes();
    labels.check(images.len(), classes)?;
    if images.is_empty() {
        return Err(Error::contract("probe needs at least one image"));
    }
    let multi = matches!(labels, ProbeLabels::Multi { .. });
    let device = encoder.params.device().clone();
    let branch = encoder.deep_clone()?;
    let head = ProbeHead::new(
        branch.encoder.config().feature_channels(),
        config.hidden,
        classes,
        config.seed,
        &device,
    )?;
    let adam = |lr| {
        Adam::new(AdamConfig {
            lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        })
    };
    let mut head_opt = adam(config.base_lr())?;
    let mut enc_opt = adam(config.base_lr())?;
    let refs: Vec<&Image> = images.iter().collect();
    let frozen = match config.mode {
        ProbeMode::Linear => Some(pooled_features(&branch, &refs)?),
        ProbeMode::Finetune => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x9C]));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let (mut lr_trace, mut loss_trace) = (Vec::new(), Vec::new());
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        head_opt.set_lr(lr);
        enc_opt.set_lr(lr);
        lr_trace.push(lr);
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let feats = match &frozen {
                Some(all) => all.index_select(&Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &device)?, 0)?,
                None => {
                    let batch: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
                    branch.encoder.pooled(&Image::stack(&batch, &device)?)?
                }
            };
            let loss = probe_loss(&head.forward(&feats)?, &labels.targets(idx, &device)?, multi)?;
            let grads = loss.backward()?;
            head_opt.step(&head.params, &grads)?;
            if frozen.is_none() {
                enc_opt.step(&branch.params, &grads)?;
            }
            sum += loss.to_scalar::<f32>()? as f64;
            batches += 1;
        }
        loss_trace.push(sum / batches as f64);
    }
    Ok(ProbeModel {
        encoder: branch,
        head,
        multi_label: multi,
        classes,
        config: config.clone(),
        lr_trace,
        loss_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Top-1 accuracy; single-label only.
    pub accuracy: Option<f64>,
    /// One-vs-rest for single-label heads.
    pub map: MapScore,
    /// `m[truth][predicted]`; single-label only.
    pub confusion: Option<Vec<Vec<u64>>>,
}

impl ProbeModel {
    /// Class probabilities (softmax) or per-class sigmoid scores, one row per image.
    pub fn scores(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&Image> = images.iter().collect();
        let logits = self.head.forward(&pooled_features(&self.encoder, &refs)?)?.detach();
        let probs = if self.multi_label {
            candle_nn::ops::sigmoid(&logits)?
        } else {
            candle_nn::ops::softmax(&logits, D::Minus1)?
        };
        Ok(probs
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?)
    }

    /// Arg-max class per image.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        Ok(self
            .scores(images)?
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map_or(0, |(i, _)| i)
            })
            .collect())
    }

    pub fn evaluate(&self, images: &[Image], labels: &ProbeLabels) -> Result<ProbeReport> {
        labels.check(images.len(), self.classes)?;
        if self.multi_label != matches!(labels, ProbeLabels::Multi { .. }) {
            return Err(Error::contract("label kind does not match the trained head"));
        }
        let scores = self.scores(images)?;
        let indicator = |k: usize| -> Vec<bool> {
            match labels {
                ProbeLabels::Single { labels, .. } => labels.iter().map(|&l| l == k).collect(),
                ProbeLabels::Multi { labels } => labels.iter().map(|l| l[k]).collect(),
            }
        };
        let per_class: Vec<(Vec<f64>, Vec<bool>)> = (0..self.classes)
            .map(|k| (scores.iter().map(|r| r[k]).collect(), indicator(k)))
            .collect();
        let map = map_score(&per_class)?;
        let (accuracy, confusion) = match labels {
            ProbeLabels::Single { labels, classes } => {
                let predicted = self.predict(images)?;
                (
                    Some(accuracy(&predicted, labels)?),
                    Some(confusion_matrix(&predicted, labels, *classes)?),
                )
            }
            ProbeLabels::Multi { .. } => (None, None),
        };
        Ok(ProbeReport { accuracy, map, confusion })
    }
}
