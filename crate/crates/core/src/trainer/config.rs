use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::dataset::AugmentConfig;
use crate::diffusion::{NoisePredictorConfig, ScheduleSpec};
use crate::error::{Error, Result};
use crate::matching::SwimConfig;
use crate::optim::{AdamConfig, SgdConfig};

/// Weights of the combined objective `L = λ_C·L_C + λ_D·L_D` and the contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_c: 1.0,
            lambda_d: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    /// Key-encoder EMA coefficient.
    pub momentum: f64,
    pub queue_capacity: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            momentum: 0.999,
            queue_capacity: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleSpec,
    pub predictor: NoisePredictorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub contrastive: SgdConfig,
    pub diffusion: AdamConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            contrastive: SgdConfig::default(),
            diffusion: AdamConfig::default(),
        }
    }
}

/// Full pre-training configuration. Every field has a default, so a TOML file
/// only needs the values it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    /// Write a checkpoint every this many steps (0: initial and final only).
    pub checkpoint_every: u64,
    pub loss: LossConfig,
    pub swim: SwimConfig,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 1,
            max_steps: None,
            batch_size: 32,
            checkpoint_every: 0,
            loss: LossConfig::default(),
            swim: SwimConfig::default(),
            optimizer: OptimizerConfig::default(),
            encoder: EncoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.loss;
        if !(l.tau > 0.0) || !(self.swim.tau_prime > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(l.lambda_c >= 0.0 && l.lambda_d >= 0.0) || !(l.lambda_c.is_finite() && l.lambda_d.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if l.lambda_c == 0.0 && l.lambda_d == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.encoder.queue_capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.encoder.momentum) {
            return Err(Error::Config("encoder momentum must lie in [0,1]".into()));
        }
        let as_config = |e: Error| Error::Config(e.to_string());
        crate::optim::Sgd::new(self.optimizer.contrastive).map_err(as_config)?;
        crate::optim::Adam::new(self.optimizer.diffusion).map_err(as_config)?;
        self.encoder.backbone.validate().map_err(as_config)?;
        self.diffusion.predictor.validate().map_err(as_config)?;
        self.diffusion.schedule.build().map_err(as_config)?;
        let (enc, dif) = (
            self.encoder.backbone.downsample_factor(),
            self.diffusion.predictor.downsample_factor(),
        );
        if enc != dif {
            return Err(Error::Config(format!(
                "encoder downsamples by {enc} but the noise predictor bottleneck by {dif}"
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form; identical configs share a hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config is always serializable");
        hex::encode(Sha256::digest(json))
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::Baseline => {
                self.swim.enabled = false;
                self.loss.lambda_d = 0.0;
            }
            Ablation::SwimOnly => {
                self.swim.enabled = true;
                self.loss.lambda_d = 0.0;
            }
            Ablation::DiffOnly => {
                self.swim.enabled = false;
                if self.loss.lambda_d == 0.0 {
                    self.loss.lambda_d = LossConfig::default().lambda_d;
                }
            }
            Ablation::Full => {
                self.swim.enabled = true;
                if self.loss.lambda_d == 0.0 {
                    self.loss.lambda_d = LossConfig::default().lambda_d;
                }
            }
        }
    }
}

/// Module toggles for the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// One-hot contrastive loss only.
    Baseline,
    /// Scene-wide matching labels, no diffusion branch.
    SwimOnly,
    /// Diffusion branch with one-hot contrastive loss.
    DiffOnly,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::SwimOnly, Ablation::DiffOnly, Ablation::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::SwimOnly => "swim_only",
            Ablation::DiffOnly => "diff_only",
            Ablation::Full => "full",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.loss.tau, c.swim.tau_prime), (0.1, 0.05));
        assert_eq!((c.loss.lambda_c, c.loss.lambda_d), (1.0, 10.0));
        assert_eq!(c.optimizer.contrastive.lr, 0.03);
        assert_eq!(c.optimizer.diffusion.lr, 1e-3);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
        let partial = TrainConfig::from_toml_str("seed = 4\n[loss]\nlambda_d = 1.0\n").unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.loss.lambda_d, 1.0);
        assert_eq!(partial.loss.tau, 0.1);
        assert!(matches!(TrainConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values() {
        let mut c = TrainConfig::default();
        c.loss.lambda_c = 0.0;
        c.loss.lambda_d = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.swim.tau_prime = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.diffusion.predictor.channels = vec![8, 16];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_flags() {
        let mut c = TrainConfig::default();
        c.apply_ablation(Ablation::Baseline);
        assert!(!c.swim.enabled);
        assert_eq!(c.loss.lambda_d, 0.0);
        c.apply_ablation(Ablation::Full);
        assert!(c.swim.enabled);
        assert_eq!((c.loss.lambda_c, c.loss.lambda_d), (1.0, 10.0));
        assert!("nope".parse::<Ablation>().is_err());
        assert_eq!("swim_only".parse::<Ablation>().unwrap(), Ablation::SwimOnly);
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
