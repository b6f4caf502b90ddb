//! Dual-branch contrastive encoder: a query branch trained by gradient and a
//! key branch that tracks it as an exponential moving average.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, l2_normalize, Conv2d, GroupNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub norm_groups: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    /// Four residual stages, total stride 8.
    fn default() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: vec![16, 32, 32, 32],
            stage_strides: vec![2, 2, 2, 1],
            norm_groups: 4,
            head_hidden: 64,
            embed_dim: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::param("stage channels and strides must be nonempty and aligned"));
        }
        if self.stage_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::param("stage strides must be 1 or 2"));
        }
        if self.stem_channels == 0
            || self.stage_channels.contains(&0)
            || self.head_hidden == 0
            || self.embed_dim == 0
        {
            return Err(Error::param("channel and embedding sizes must be positive"));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated nonempty")
    }

    /// Stable identifier recorded in checkpoints.
    pub fn architecture_id(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(".")
        };
        format!(
            "rescnn-s{}-c{}-st{}-g{}-h{}-d{}",
            self.stem_channels,
            join(&self.stage_channels),
            join(&self.stage_strides),
            self.norm_groups,
            self.head_hidden,
            self.embed_dim
        )
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1.0, rng)?;
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), out_ch, groups)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1.0, rng)?;
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), out_ch, groups)?;
        let shortcut = if in_ch != out_ch || stride != 1 {
            Some(Conv2d::new(store, &format!("{name}.shortcut"), in_ch, out_ch, 1, stride, 1.0, rng)?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Intermediate activations of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    /// Stem output at input resolution.
    pub shallow: Tensor,
    /// Output of every residual stage; the last one is the feature map `q`.
    pub stages: Vec<Tensor>,
}

impl EncoderFeatures {
    pub fn feature_map(&self) -> &Tensor {
        self.stages.last().expect("encoder has at least one stage")
    }

    /// Shallow features followed by every stage output.
    pub fn pyramid(&self) -> Vec<&Tensor> {
        std::iter::once(&self.shallow).chain(self.stages.iter()).collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            shallow: self.shallow.detach(),
            stages: self.stages.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Residual CNN image encoder `f`.
#[derive(Debug, Clone)]
pub struct ResidualEncoder {
    config: BackboneConfig,
    stem: Conv2d,
    stem_norm: GroupNorm,
    blocks: Vec<ResBlock>,
}

impl ResidualEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let g = config.norm_groups;
        let stem = Conv2d::new(store, &format!("{prefix}stem"), 3, config.stem_channels, 3, 1, 1.0, rng)?;
        let stem_norm = GroupNorm::new(store, &format!("{prefix}stem_norm"), config.stem_channels, g)?;
        let mut blocks = Vec::new();
        let mut in_ch = config.stem_channels;
        for (i, (&c, &s)) in config.stage_channels.iter().zip(&config.stage_strides).enumerate() {
            blocks.push(ResBlock::new(store, &format!("{prefix}stage{i}"), in_ch, c, s, g, rng)?);
            in_ch = c;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stem_norm,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let f = self.config.downsample_factor();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::param(format!("encoder expects B×3×H×W input, got {dims:?}")));
        }
        if dims[2] < f || dims[3] < f || dims[2] % f != 0 || dims[3] % f != 0 {
            return Err(Error::param(format!(
                "spatial size {}x{} must be a positive multiple of {f}",
                dims[2], dims[3]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<EncoderFeatures> {
        self.check_input(x)?;
        let shallow = self.stem_norm.forward(&self.stem.forward(x)?)?.relu()?;
        let mut stages = Vec::with_capacity(self.blocks.len());
        let mut h = shallow.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
            stages.push(h.clone());
        }
        Ok(EncoderFeatures { shallow, stages })
    }

    /// Global-average-pooled final feature map, `B×C`.
    pub fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        global_avg_pool(self.forward(x)?.feature_map())
    }
}

/// Two-layer MLP projector followed by L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}fc1"), config.feature_channels(), config.head_hidden, rng)?,
            fc2: Linear::new(store, &format!("{prefix}fc2"), config.head_hidden, config.embed_dim, rng)?,
        })
    }

    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(pooled)?.relu()?;
        l2_normalize(&self.fc2.forward(&h)?)
    }
}

/// Encoder, projection head and the store holding their parameters.
/// Encoder parameters are named `encoder.*`, head parameters `head.*`.
#[derive(Debug, Clone)]
pub struct Branch {
    pub encoder: ResidualEncoder,
    pub head: ProjectionHead,
    pub params: ParamStore,
}

impl Branch {
    pub fn new(config: &BackboneConfig, device: &Device, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(device);
        let encoder = ResidualEncoder::new(&mut params, "encoder.", config, &mut rng)?;
        let head = ProjectionHead::new(&mut params, "head.", config, &mut rng)?;
        Ok(Self { encoder, head, params })
    }

    /// Rebuilds the same architecture around an independent copy of the parameters.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Branch::new(self.encoder.config(), self.params.device(), 0)?;
        copy.params.copy_from(&self.params)?;
        Ok(copy)
    }

    /// Returns the un-pooled feature pyramid and the unit-norm embedding.
    pub fn encode(&self, x: &Tensor) -> Result<(EncoderFeatures, Tensor)> {
        let feats = self.encoder.forward(x)?;
        let z = self.head.forward(&global_avg_pool(feats.feature_map())?)?;
        Ok((feats, z))
    }

    /// Fingerprint of the encoder parameters only (excludes the head).
    pub fn encoder_fingerprint(&self) -> Result<String> {
        let mut enc = ParamStore::new(self.params.device());
        for (k, v) in self.params.iter().filter(|(k, _)| k.starts_with("encoder.")) {
            enc.insert(k.clone(), v.as_tensor().clone())?;
        }
        enc.fingerprint()
    }
}

/// Query/key encoder pair with momentum coefficient `m`.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub query: Branch,
    pub key: Branch,
    momentum: f64,
}

impl EncoderState {
    /// Initializes the query branch from `seed` and copies it into the key branch.
    pub fn new(config: &BackboneConfig, momentum: f64, device: &Device, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::param(format!("momentum {momentum} outside [0,1]")));
        }
        let query = Branch::new(config, device, seed)?;
        let key = query.deep_clone()?;
        Ok(Self { query, key, momentum })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn config(&self) -> &BackboneConfig {
        self.query.encoder.config()
    }

    /// `(q, z_q)`: the feature pyramid (its last map is `q`) and the embedding.
    pub fn encode_query(&self, x: &Tensor) -> Result<(EncoderFeatures, Tensor)> {
        self.query.encode(x)
    }

    /// `z_k`, detached from the graph so no gradient reaches the key branch.
    pub fn encode_key(&self, x: &Tensor) -> Result<Tensor> {
        let (_, z) = self.key.encode(x)?;
        Ok(z.detach())
    }

    /// `θ_k ← m·θ_k + (1−m)·θ_q` for encoder and head.
    pub fn momentum_update(&self) -> Result<()> {
        momentum_update(&self.key.params, &self.query.params, self.momentum)
    }
}

/// Exponential moving average of `source` into `target`, parameter by parameter.
pub fn momentum_update(target: &ParamStore, source: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::param(format!("momentum {m} outside [0,1]")));
    }
    target.check_aligned(source)?;
    for ((_, k), (_, q)) in target.iter().zip(source.iter()) {
        // k + (1−m)(q − k): exactly k wherever q already equals k
        let k_t = k.as_tensor();
        let updated = (k_t + (q.as_tensor() - k_t)?.affine(1.0 - m, 0.0)?)?;
        k.set(&updated)?;
    }
    Ok(())
}
