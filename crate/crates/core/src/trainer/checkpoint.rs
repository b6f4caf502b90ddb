//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/tensors.safetensors   named arrays (parameters, optimizer moments, queue)
//! <dir>/meta.json             format version, config, counters, RNG and sampler state
//! ```
//!
//! `meta.json` is written last and records the SHA-256 of the tensor file, so a
//! directory with a missing, truncated or altered tensor file fails to load.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, Trainer};
use crate::backbone::Branch;
use crate::dataset::{BatchSampler, SamplerState, SceneId};
use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::queue::EmbeddingQueue;

pub const FORMAT_VERSION: u32 = 1;
pub(super) const META_FILE: &str = "meta.json";
const TENSORS_FILE: &str = "tensors.safetensors";
const QUEUE_TENSOR: &str = "queue.embeddings";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position (a 128-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub architecture: String,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub step: u64,
    pub schedule: ScheduleSpec,
    pub config: TrainConfig,
    pub dataset_len: usize,
    pub sampler: SamplerState,
    pub rng: RngState,
    pub queue_scenes: Vec<SceneId>,
    pub adam_steps: BTreeMap<String, u64>,
    pub tensors_sha256: String,
}

impl CheckpointMeta {
    /// Short identifier for result records.
    pub fn id(&self) -> String {
        format!("step{}-{}", self.step, &self.tensors_sha256[..12.min(self.tensors_sha256.len())])
    }
}

/// Reads and version-checks `meta.json` without touching the tensor file.
pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Checkpoint("missing format_version".into()))? as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn read_tensors(dir: &Path, meta: &CheckpointMeta, device: &Device) -> Result<HashMap<String, Tensor>> {
    let path = dir.join(TENSORS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != meta.tensors_sha256 {
        return Err(Error::Checkpoint(format!("{} does not match its recorded checksum", path.display())));
    }
    candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Trainer {
    /// Writes the full training state to `dir` (created if needed) and returns it.
    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = HashMap::new();
        self.encoders.query.params.export("query.", &mut tensors)?;
        self.encoders.key.params.export("key.", &mut tensors)?;
        self.predictor.params.export("diffusion.", &mut tensors)?;
        self.sgd.export("sgd.", &mut tensors);
        self.adam.export("adam.", &mut tensors);
        if let Some(bank) = self.queue.embeddings_tensor(&self.device)? {
            tensors.insert(QUEUE_TENSOR.to_string(), bank);
        }
        let tmp = dir.join("tensors.tmp");
        candle_core::safetensors::save(&tensors, &tmp)?;
        let bytes = fs::read(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let tensor_path = dir.join(TENSORS_FILE);
        fs::rename(&tmp, &tensor_path).map_err(|e| Error::io(&tensor_path, e))?;

        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            architecture: self.config.encoder.backbone.architecture_id(),
            momentum: self.encoders.momentum(),
            queue_capacity: self.queue.capacity(),
            step: self.step,
            schedule: self.schedule.spec(),
            config: self.config.clone(),
            dataset_len: self.dataset_len,
            sampler: self.sampler.state(),
            rng: RngState::capture(&self.rng),
            queue_scenes: self.queue.scene_ids(),
            adam_steps: self.adam.steps().clone(),
            tensors_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_atomic(&dir.join(META_FILE), &json)?;
        Ok(dir.to_path_buf())
    }

    /// Rebuilds a trainer from a checkpoint. Either everything is restored or an
    /// error is returned; no partially initialized trainer escapes.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = read_meta(dir)?;
        let mut t = Trainer::new(&meta.config, meta.dataset_len)?;
        if meta.architecture != meta.config.encoder.backbone.architecture_id() {
            return Err(Error::Checkpoint(format!(
                "architecture {} disagrees with its config",
                meta.architecture
            )));
        }
        let tensors = read_tensors(dir, &meta, &t.device)?;
        t.encoders.query.params.import("query.", &tensors)?;
        t.encoders.key.params.import("key.", &tensors)?;
        t.predictor.params.import("diffusion.", &tensors)?;
        t.sgd.import("sgd.", &tensors, &t.encoders.query.params)?;
        t.adam.import("adam.", &tensors, &meta.adam_steps, &t.predictor.params)?;
        let rows = match tensors.get(QUEUE_TENSOR) {
            Some(bank) => bank.to_vec2::<f32>()?,
            None => Vec::new(),
        };
        t.queue = EmbeddingQueue::from_parts(
            meta.queue_capacity,
            meta.config.encoder.backbone.embed_dim,
            rows,
            meta.queue_scenes.clone(),
        )?;
        t.rng = meta.rng.restore()?;
        t.sampler = BatchSampler::resume(
            meta.dataset_len,
            meta.config.batch_size,
            crate::dataset::mix_seed(&[meta.config.seed, 4]),
            meta.sampler,
        )?;
        t.step = meta.step;
        Ok(t)
    }
}

/// Loads only the query branch (encoder and head) for downstream use.
pub fn load_query_branch(dir: &Path) -> Result<(Branch, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let device = Device::Cpu;
    let branch = Branch::new(&meta.config.encoder.backbone, &device, 0)?;
    let tensors = read_tensors(dir, &meta, &device)?;
    branch.params.import("query.", &tensors)?;
    Ok((branch, meta))
}
