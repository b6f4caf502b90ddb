//! Small U-Net noise predictor. The deepest activation `n` is concatenated
//! channel-wise with the clean-image feature map `q` from the contrastive
//! encoder before decoding.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{image_grid, Image};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoisePredictorConfig {
    /// Channel width per resolution level; `channels.len() − 1` stride-2
    /// downsamplings, so the bottleneck sits at `1/2^(len−1)` of the input.
    pub channels: Vec<usize>,
    pub time_dim: usize,
    pub norm_groups: usize,
    /// Cut the gradient path from the loss into the conditioning features.
    pub detach_condition: bool,
}

impl Default for NoisePredictorConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 32],
            time_dim: 32,
            norm_groups: 4,
            detach_condition: false,
        }
    }
}

impl NoisePredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::param("noise predictor needs at least two nonzero channel levels"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::param("time embedding dimension must be even and >= 2"));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Sinusoidal embedding of integer steps, `B×dim`: `[sin(t·ω_k), cos(t·ω_k)]`
/// with `ω_k = 10000^{−k/(dim/2)}`.
pub fn timestep_embedding(steps: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let (sin, cos): (Vec<f32>, Vec<f32>) = freqs
            .map(|w| ((t as f64 * w).sin() as f32, (t as f64 * w).cos() as f32))
            .unzip();
        out.extend(sin);
        out.extend(cos);
    }
    Ok(Tensor::from_vec(out, (steps.len(), dim), device)?)
}

#[derive(Debug, Clone)]
struct TimeBlock {
    norm: GroupNorm,
    conv: Conv2d,
    temb: Linear,
    skip: Option<Conv2d>,
}

impl TimeBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        emb_dim: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), in_ch, groups)?,
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, 3, 1, 1.0, rng)?,
            temb: Linear::new(store, &format!("{name}.temb"), emb_dim, out_ch, rng)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(store, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 1.0, rng)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(&self.norm.forward(x)?.silu()?)?;
        let (b, c) = (h.dim(0)?, h.dim(1)?);
        let t = self.temb.forward(emb)?.reshape((b, c, 1, 1))?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h.broadcast_add(&t)? + skip)?)
    }
}

/// `ε_θ(x_t, t, q)`: encoder `f_n` down to the bottleneck, fusion with `q`,
/// decoder `g_n` back to image resolution.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    config: NoisePredictorConfig,
    condition_channels: usize,
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv2d,
    down_blocks: Vec<TimeBlock>,
    downsamples: Vec<Conv2d>,
    mid: TimeBlock,
    fuse: TimeBlock,
    up_blocks: Vec<TimeBlock>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
    pub params: ParamStore,
}

impl NoisePredictor {
    /// `condition_channels` is the channel count of the conditioning map `q`.
    pub fn new(config: &NoisePredictorConfig, condition_channels: usize, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        if condition_channels == 0 {
            return Err(Error::param("conditioning map needs at least one channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new(device);
        let ch = &config.channels;
        let g = config.norm_groups;
        let emb = config.time_dim * 2;
        let time_fc1 = Linear::new(&mut p, "time.fc1", config.time_dim, emb, &mut rng)?;
        let time_fc2 = Linear::new(&mut p, "time.fc2", emb, emb, &mut rng)?;
        let conv_in = Conv2d::new(&mut p, "conv_in", 3, ch[0], 3, 1, 1.0, &mut rng)?;
        let levels = ch.len() - 1;
        let mut down_blocks = Vec::new();
        let mut downsamples = Vec::new();
        for i in 0..levels {
            down_blocks.push(TimeBlock::new(&mut p, &format!("down{i}.block"), ch[i], ch[i], emb, g, &mut rng)?);
            downsamples.push(Conv2d::new(&mut p, &format!("down{i}.sample"), ch[i], ch[i + 1], 3, 2, 1.0, &mut rng)?);
        }
        let deep = ch[levels];
        let mid = TimeBlock::new(&mut p, "mid", deep, deep, emb, g, &mut rng)?;
        let fuse = TimeBlock::new(&mut p, "fuse", deep + condition_channels, deep, emb, 1, &mut rng)?;
        let mut up_blocks = Vec::new();
        for i in (0..levels).rev() {
            up_blocks.push(TimeBlock::new(&mut p, &format!("up{i}"), ch[i + 1] + ch[i], ch[i], emb, 1, &mut rng)?);
        }
        let out_norm = GroupNorm::new(&mut p, "out.norm", ch[0], g)?;
        let conv_out = Conv2d::new(&mut p, "out.conv", ch[0], 3, 3, 1, 0.1, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            condition_channels,
            time_fc1,
            time_fc2,
            conv_in,
            down_blocks,
            downsamples,
            mid,
            fuse,
            up_blocks,
            out_norm,
            conv_out,
            params: p,
        })
    }

    pub fn config(&self) -> &NoisePredictorConfig {
        &self.config
    }

    pub fn condition_channels(&self) -> usize {
        self.condition_channels
    }

    pub fn set_detach_condition(&mut self, detach: bool) {
        self.config.detach_condition = detach;
    }

    /// Predicts the noise in `x_t` (`B×3×H×W`) at per-element `steps`,
    /// conditioned on `q` (`B×C_q×H/f×W/f`).
    pub fn forward(&self, x_t: &Tensor, steps: &[usize], q: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        let f = self.config.downsample_factor();
        if c != 3 || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::param(format!(
                "noise predictor expects B×3×H×W with H, W multiples of {f}, got {:?}",
                x_t.dims()
            )));
        }
        if steps.len() != b {
            return Err(Error::contract("one diffusion step per batch element required"));
        }
        let (qb, qc, qh, qw) = q.dims4()?;
        if qb != b || qc != self.condition_channels || qh != h / f || qw != w / f {
            return Err(Error::contract(format!(
                "conditioning map {:?} does not match bottleneck {:?}",
                q.dims(),
                [b, self.condition_channels, h / f, w / f]
            )));
        }
        let emb = timestep_embedding(steps, self.config.time_dim, x_t.device())?.to_dtype(x_t.dtype())?;
        let emb = self.time_fc2.forward(&self.time_fc1.forward(&emb)?.silu()?)?.silu()?;

        let mut hcur = self.conv_in.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.down_blocks.len());
        for (block, down) in self.down_blocks.iter().zip(&self.downsamples) {
            hcur = block.forward(&hcur, &emb)?;
            skips.push(hcur.clone());
            hcur = down.forward(&hcur)?;
        }
        let n = self.mid.forward(&hcur, &emb)?;
        let cond = if self.config.detach_condition { q.detach() } else { q.clone() };
        hcur = self.fuse.forward(&Tensor::cat(&[&n, &cond], 1)?, &emb)?;
        for block in &self.up_blocks {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4()?;
            let up = hcur.upsample_nearest2d(sh, sw)?;
            hcur = block.forward(&Tensor::cat(&[&up, &skip], 1)?, &emb)?;
        }
        self.conv_out.forward(&self.out_norm.forward(&hcur)?.silu()?)
    }
}

/// Rows of `[x_0, x_t, ε, ε̂]` for visual inspection, each mapped to [0,1].
pub fn noise_dump_grid(x0: &Tensor, x_t: &Tensor, noise: &Tensor, predicted: &Tensor) -> Result<Image> {
    let cols: Vec<Vec<Image>> = [x0, x_t, noise, predicted]
        .iter()
        .map(|t| Image::unstack(&t.to_dtype(DType::F32)?))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<Image>> = (0..cols[0].len())
        .map(|i| cols.iter().map(|c| c[i].normalized_for_display()).collect())
        .collect();
    image_grid(&rows, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor_fingerprint;

    fn setup() -> (NoisePredictor, Tensor, Tensor) {
        let dev = Device::Cpu;
        let net = NoisePredictor::new(&NoisePredictorConfig::default(), 32, &dev, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = crate::nn::normal_tensor(&mut rng, &[2, 3, 16, 16], 1.0, &dev).unwrap();
        let q = crate::nn::normal_tensor(&mut rng, &[2, 32, 2, 2], 1.0, &dev).unwrap();
        (net, x, q)
    }

    #[test]
    fn output_has_input_shape() {
        let (net, x, q) = setup();
        assert_eq!(net.forward(&x, &[1, 100], &q).unwrap().dims(), x.dims());
    }

    #[test]
    fn conditioning_is_live() {
        let (net, x, q) = setup();
        let a = net.forward(&x, &[5, 5], &q).unwrap();
        let b = net.forward(&x, &[5, 5], &q.zeros_like().unwrap()).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn step_changes_output() {
        let (net, x, q) = setup();
        let a = net.forward(&x, &[1, 1], &q).unwrap();
        let b = net.forward(&x, &[150, 150], &q).unwrap();
        assert_ne!(tensor_fingerprint(&a).unwrap(), tensor_fingerprint(&b).unwrap());
    }

    #[test]
    fn deterministic_output() {
        let (net, x, q) = setup();
        let a = tensor_fingerprint(&net.forward(&x, &[3, 9], &q).unwrap()).unwrap();
        let (net2, x2, q2) = setup();
        let b = tensor_fingerprint(&net2.forward(&x2, &[3, 9], &q2).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spatial_mismatch_is_contract_error() {
        let (net, x, _) = setup();
        let bad = Tensor::zeros((2, 32, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x, &[1, 1], &bad), Err(Error::Contract(_))));
        let odd = Tensor::zeros((2, 3, 12, 12), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&odd, &[1, 1], &bad), Err(Error::Param(_))));
    }

    #[test]
    fn gradient_reaches_condition_unless_detached() {
        let (mut net, x, q) = setup();
        let qv = candle_core::Var::from_tensor(&q).unwrap();
        let loss = net.forward(&x, &[4, 4], qv.as_tensor()).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(qv.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap();
        assert!(g.to_scalar::<f32>().unwrap() > 0.0);

        net.set_detach_condition(true);
        let loss = net.forward(&x, &[4, 4], qv.as_tensor()).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(qv.as_tensor()).is_none());
    }

    #[test]
    fn embedding_values() {
        let e = timestep_embedding(&[0, 1], 4, &Device::Cpu).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(e[0], vec![0.0, 0.0, 1.0, 1.0]);
        assert!((e[1][0] - 1f32.sin()).abs() < 1e-7);
        assert!((e[1][1] - 0.01f32.sin()).abs() < 1e-7);
    }
}
