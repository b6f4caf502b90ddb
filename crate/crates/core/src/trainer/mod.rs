//! Joint pre-training: scene-wide matching contrastive loss plus the
//! feature-conditioned denoising loss, combined as `λ_C·L_C + λ_D·L_D`.

mod checkpoint;
mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_query_branch, read_meta, CheckpointMeta, RngState, FORMAT_VERSION};
pub use config::{Ablation, DiffusionConfig, EncoderConfig, LossConfig, OptimizerConfig, TrainConfig};

use crate::backbone::EncoderState;
use crate::dataset::{mix_seed, AugmentedPair, BatchSampler, SceneDataset, SceneId};
use crate::diffusion::{diffusion_loss_tensor, noise_dump_grid, q_sample, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::matching::{build_batch_labels, swim_loss_tensor, targets_tensor, Anchor};
use crate::nn::normal_tensor;
use crate::optim::{Adam, Sgd};
use crate::queue::EmbeddingQueue;

pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
const METRICS_HEADER: &str = "step,L_C,L_D,L,mean_m,grad_norm_q,grad_norm_diff";
const DIAGNOSTICS_HEADER: &str = "step,mean_m,mean_scale,mean_mass,grad_norm_encoder,grad_norm_head";

/// Per-step losses and diagnostics. `total` is `lambda_c·l_c + lambda_d·l_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossReport {
    pub step: u64,
    pub l_c: f64,
    pub l_d: f64,
    pub total: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub mean_m: f64,
    pub mean_scale: f64,
    pub mean_mass: f64,
    /// Query encoder only.
    pub grad_norm_encoder: f64,
    /// Query projection head only.
    pub grad_norm_head: f64,
    /// Whole query branch (encoder and head).
    pub grad_norm_q: f64,
    pub grad_norm_diff: f64,
}

impl JointLossReport {
    fn metrics_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_c, self.l_d, self.total, self.mean_m, self.grad_norm_q, self.grad_norm_diff
        )
    }

    fn diagnostics_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.mean_m, self.mean_scale, self.mean_mass, self.grad_norm_encoder, self.grad_norm_head
        )
    }
}

/// Complete mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    device: Device,
    encoders: EncoderState,
    predictor: NoisePredictor,
    queue: EmbeddingQueue,
    schedule: NoiseSchedule,
    sgd: Sgd,
    adam: Adam,
    rng: ChaCha8Rng,
    sampler: BatchSampler,
    dataset_len: usize,
    step: u64,
}

impl Trainer {
    pub fn new(config: &TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let seed = config.seed;
        let encoders = EncoderState::new(
            &config.encoder.backbone,
            config.encoder.momentum,
            &device,
            mix_seed(&[seed, 1]),
        )?;
        let predictor = NoisePredictor::new(
            &config.diffusion.predictor,
            config.encoder.backbone.feature_channels(),
            &device,
            mix_seed(&[seed, 2]),
        )?;
        Ok(Self {
            config: config.clone(),
            encoders,
            predictor,
            queue: EmbeddingQueue::new(config.encoder.queue_capacity, config.encoder.backbone.embed_dim)?,
            schedule: config.diffusion.schedule.build()?,
            sgd: Sgd::new(config.optimizer.contrastive)?,
            adam: Adam::new(config.optimizer.diffusion)?,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 3])),
            sampler: BatchSampler::new(dataset_len, config.batch_size, mix_seed(&[seed, 4]))?,
            dataset_len,
            step: 0,
            device,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn encoders(&self) -> &EncoderState {
        &self.encoders
    }

    pub fn predictor(&self) -> &NoisePredictor {
        &self.predictor
    }

    pub fn queue(&self) -> &EmbeddingQueue {
        &self.queue
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Trainer-owned generator that draws diffusion steps and noise.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Number of steps `epochs` passes amount to, capped by `max_steps`.
    pub fn planned_steps(&self) -> u64 {
        let per_epoch = self.sampler.batches_per_epoch() as u64;
        let total = per_epoch * self.config.epochs as u64;
        self.config.max_steps.map_or(total, |m| m.min(total))
    }

    /// Draws the next batch from the sampler and trains on it.
    pub fn next_step(&mut self, dataset: &SceneDataset) -> Result<JointLossReport> {
        if dataset.len() != self.dataset_len {
            return Err(Error::Config(format!(
                "trainer was built for {} tiles, dataset has {}",
                self.dataset_len,
                dataset.len()
            )));
        }
        let batch = self.sampler.next_batch();
        let pairs = batch.augment(dataset, &self.config.augment)?;
        self.train_step(&pairs)
    }

    /// One optimization step on a prepared batch.
    pub fn train_step(&mut self, pairs: &[AugmentedPair]) -> Result<JointLossReport> {
        if pairs.is_empty() {
            return Err(Error::contract("training batch is empty"));
        }
        let step = self.step + 1;
        let loss_cfg = self.config.loss;
        let dev = self.device.clone();
        let xq = Image::stack(&pairs.iter().map(|p| &p.query).collect::<Vec<_>>(), &dev)?;
        let xk = Image::stack(&pairs.iter().map(|p| &p.key).collect::<Vec<_>>(), &dev)?;
        let scenes: Vec<SceneId> = pairs.iter().map(|p| p.scene_id.clone()).collect();

        let (feats, zq) = self.encoders.encode_query(&xq)?;
        let zk = self.encoders.encode_key(&xk)?;

        // relabel against the dictionary as it was before this batch
        let zq_rows = zq.to_vec2::<f32>()?;
        let zk_rows = zk.to_vec2::<f32>()?;
        let anchors: Vec<Anchor<'_>> = (0..pairs.len())
            .map(|i| Anchor {
                scene_id: &scenes[i],
                z_q: &zq_rows[i],
                z_k: &zk_rows[i],
            })
            .collect();
        let (labels, diag) = build_batch_labels(&self.queue, &anchors, &self.config.swim)?;
        let positive = (&zq * &zk)?.sum_keepdim(1)?;
        let logits = match self.queue.embeddings_tensor(&dev)? {
            Some(bank) => Tensor::cat(&[&positive, &zq.matmul(&bank.t()?)?], 1)?,
            None => positive,
        };
        let targets = targets_tensor(&labels, DType::F32, &dev)?;
        let l_c = swim_loss_tensor(&logits, &targets, loss_cfg.tau)?;

        // drawn unconditionally so every ablation consumes the same random stream
        let (b, _, h, w) = xq.dims4()?;
        let steps: Vec<usize> = (0..b)
            .map(|_| self.rng.random_range(1..=self.schedule.steps()))
            .collect();
        let noise = normal_tensor(&mut self.rng, &[b, 3, h, w], 1.0, &dev)?;
        let l_d = if loss_cfg.lambda_d > 0.0 {
            let x0 = xq.affine(2.0, -1.0)?;
            let xt = q_sample(&x0, &steps, &noise, &self.schedule)?;
            let predicted = self.predictor.forward(&xt, &steps, feats.feature_map())?;
            Some(diffusion_loss_tensor(&noise, &predicted)?)
        } else {
            None
        };

        let l_c_val = l_c.to_scalar::<f32>()? as f64;
        let l_d_val = match &l_d {
            Some(t) => t.to_scalar::<f32>()? as f64,
            None => 0.0,
        };
        let total = loss_cfg.lambda_c * l_c_val + loss_cfg.lambda_d * l_d_val;
        if !(l_c_val.is_finite() && l_d_val.is_finite() && total.is_finite()) {
            let max_logit = logits.abs()?.max_all()?.to_scalar::<f32>()?;
            return Err(Error::Training {
                step,
                message: format!(
                    "non-finite loss: L_C={l_c_val} L_D={l_d_val} L={total} max|logit|={max_logit} \
                     mean_m={} queue_len={}",
                    diag.mean_m,
                    self.queue.len()
                ),
            });
        }

        let objective = match (loss_cfg.lambda_c > 0.0, l_d) {
            (true, Some(d)) => (l_c.affine(loss_cfg.lambda_c, 0.0)? + d.affine(loss_cfg.lambda_d, 0.0)?)?,
            (true, None) => l_c.affine(loss_cfg.lambda_c, 0.0)?,
            (false, Some(d)) => d.affine(loss_cfg.lambda_d, 0.0)?,
            (false, None) => return Err(Error::Config("loss weights cannot both be zero".into())),
        };
        let grads = objective.backward()?;
        let q_params = &self.encoders.query.params;
        let report = JointLossReport {
            step,
            l_c: l_c_val,
            l_d: l_d_val,
            total,
            lambda_c: loss_cfg.lambda_c,
            lambda_d: loss_cfg.lambda_d,
            mean_m: diag.mean_m,
            mean_scale: diag.mean_scale,
            mean_mass: diag.mean_mass,
            grad_norm_encoder: q_params.grad_norm_prefixed(&grads, "encoder.")?,
            grad_norm_head: q_params.grad_norm_prefixed(&grads, "head.")?,
            grad_norm_q: q_params.grad_norm(&grads)?,
            grad_norm_diff: self.predictor.params.grad_norm(&grads)?,
        };

        self.sgd.step(&self.encoders.query.params, &grads)?;
        if loss_cfg.lambda_d > 0.0 {
            self.adam.step(&self.predictor.params, &grads)?;
        }
        self.encoders.momentum_update()?;
        self.queue.enqueue_tensor(&zk, &scenes)?;
        self.step = step;
        Ok(report)
    }

    /// `[x_0, x_t, ε, ε̂]` rows for a batch, using a private generator so the
    /// training stream is untouched.
    pub fn noise_preview(&self, pairs: &[AugmentedPair], seed: u64) -> Result<Image> {
        if pairs.is_empty() {
            return Err(Error::contract("preview needs at least one pair"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xq = Image::stack(&pairs.iter().map(|p| &p.query).collect::<Vec<_>>(), &self.device)?;
        let (b, _, h, w) = xq.dims4()?;
        let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
        let noise = normal_tensor(&mut rng, &[b, 3, h, w], 1.0, &self.device)?;
        let x0 = xq.affine(2.0, -1.0)?;
        let xt = q_sample(&x0, &steps, &noise, &self.schedule)?;
        let (feats, _) = self.encoders.encode_query(&xq)?;
        let predicted = self.predictor.forward(&xt, &steps, feats.feature_map())?;
        noise_dump_grid(&x0, &xt, &noise, &predicted)
    }

    /// Trains until `planned_steps()`, appending to the metrics logs in
    /// `out_dir` and writing checkpoints under `out_dir/checkpoints`.
    pub fn run(&mut self, dataset: &SceneDataset, out_dir: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut metrics = open_log(&out_dir.join(METRICS_FILE), METRICS_HEADER, self.step)?;
        let mut diagnostics = open_log(&out_dir.join(DIAGNOSTICS_FILE), DIAGNOSTICS_HEADER, self.step)?;
        let target = self.planned_steps();
        let every = self.config.checkpoint_every;
        let mut summary = TrainSummary {
            reports: Vec::new(),
            checkpoints: Vec::new(),
            final_checkpoint: checkpoint_dir(out_dir, self.step),
        };
        while self.step < target {
            let report = match self.next_step(dataset) {
                Ok(r) => r,
                Err(e) => {
                    if let Error::Training { step, message } = &e {
                        let dump = out_dir.join(format!("failure_step_{step}.txt"));
                        fs::write(&dump, message).map_err(|err| Error::io(&dump, err))?;
                    }
                    return Err(e);
                }
            };
            log::debug!("step {} L_C={:.4} L_D={:.4} L={:.4}", report.step, report.l_c, report.l_d, report.total);
            write_line(&mut metrics, &out_dir.join(METRICS_FILE), &report.metrics_row())?;
            write_line(&mut diagnostics, &out_dir.join(DIAGNOSTICS_FILE), &report.diagnostics_row())?;
            summary.reports.push(report);
            if every > 0 && self.step % every == 0 && self.step < target {
                summary.checkpoints.push(self.save(&checkpoint_dir(out_dir, self.step))?);
            }
        }
        let last = checkpoint_dir(out_dir, self.step);
        if !last.join(checkpoint::META_FILE).exists() {
            self.save(&last)?;
        }
        summary.checkpoints.push(last.clone());
        summary.final_checkpoint = last;
        Ok(summary)
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub reports: Vec<JointLossReport>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}"))
}

/// Fresh run: writes the step-0 checkpoint, then trains for the configured budget.
pub fn train(dataset: &SceneDataset, config: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(config, dataset.len())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let initial = trainer.save(&checkpoint_dir(out_dir, 0))?;
    let mut summary = trainer.run(dataset, out_dir)?;
    if summary.checkpoints.first() != Some(&initial) {
        summary.checkpoints.insert(0, initial);
    }
    Ok(summary)
}

/// Continues a run from `checkpoint` until its configured budget.
pub fn resume(checkpoint: &Path, dataset: &SceneDataset, out_dir: &Path) -> Result<TrainSummary> {
    let mut trainer = Trainer::load(checkpoint)?;
    trainer.run(dataset, out_dir)
}

/// Opens a CSV log for appending; rows beyond `keep_through` (left over from a
/// run that went further than the resumed checkpoint) are dropped.
fn open_log(path: &Path, header: &str, keep_through: u64) -> Result<File> {
    let mut kept = vec![header.to_string()];
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("malformed log row in {}", path.display())))?;
            if step <= keep_through {
                kept.push(line);
            }
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

fn write_line(f: &mut File, path: &Path, line: &str) -> Result<()> {
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
