//! Seeded ablation grids: pretrain each module combination for a fixed budget,
//! then measure linear-probe scene accuracy and shallow-feature high-frequency
//! energy of the query encoder.

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic_scenes, SceneDataset, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::eval::{high_frequency_energy, probe_train, ProbeConfig, ProbeLabels};
use crate::image::Image;
use crate::trainer::{Ablation, TrainConfig, Trainer};
use crate::backbone::Branch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub dataset: SyntheticSceneSpec,
    pub dataset_seed: u64,
    /// Training config shared by every variant; `seed` is overridden per run.
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Fraction of each scene's tiles used to fit the probe; the rest is scored.
    pub train_fraction: f64,
    pub seeds: Vec<u64>,
    pub variants: Vec<Ablation>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.max_steps = Some(150);
        train.epochs = 100;
        train.encoder.queue_capacity = 512;
        train.encoder.momentum = 0.99;
        Self {
            dataset: SyntheticSceneSpec {
                n_scenes: 8,
                tiles_per_scene: 64,
                tile_size: 32,
                ..Default::default()
            },
            dataset_seed: 0,
            train,
            probe: ProbeConfig {
                epochs: 100,
                lr: Some(1e-2),
                ..Default::default()
            },
            train_fraction: 0.5,
            seeds: vec![0, 1, 2],
            variants: Ablation::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    pub seed: u64,
    pub lambda_d: f64,
    pub steps: u64,
    pub final_loss: f64,
    pub probe_accuracy: f64,
    pub high_frequency_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationResult {
    pub runs: Vec<VariantRun>,
}

impl AblationResult {
    fn mean_of(&self, variant: &str, f: impl Fn(&VariantRun) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.variant == variant).map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_accuracy(&self, variant: &str) -> Option<f64> {
        self.mean_of(variant, |r| r.probe_accuracy)
    }

    pub fn mean_energy(&self, variant: &str) -> Option<f64> {
        self.mean_of(variant, |r| r.high_frequency_energy)
    }
}

/// Images and scene labels of the probe fit and scoring halves.
pub struct ProbeSplit {
    pub train_images: Vec<Image>,
    pub train_labels: ProbeLabels,
    pub test_images: Vec<Image>,
    pub test_labels: ProbeLabels,
}

impl ProbeSplit {
    pub fn new(dataset: &SceneDataset, train_fraction: f64) -> Result<Self> {
        let (train, test) = dataset.split_per_scene(train_fraction)?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("probe split leaves an empty half".into()));
        }
        let labels = dataset.scene_labels();
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let pick = |idx: &[usize]| {
            (
                idx.iter().map(|&i| dataset.tiles()[i].pixels.clone()).collect::<Vec<_>>(),
                ProbeLabels::Single {
                    labels: idx.iter().map(|&i| labels[i]).collect(),
                    classes,
                },
            )
        };
        let (train_images, train_labels) = pick(&train);
        let (test_images, test_labels) = pick(&test);
        Ok(Self {
            train_images,
            train_labels,
            test_images,
            test_labels,
        })
    }

    /// Held-out probe accuracy of a frozen encoder.
    pub fn probe_accuracy(&self, encoder: &Branch, probe: &ProbeConfig) -> Result<f64> {
        let model = probe_train(&self.train_images, &self.train_labels, encoder, probe)?;
        model
            .evaluate(&self.test_images, &self.test_labels)?
            .accuracy
            .ok_or_else(|| Error::contract("single-label probe produced no accuracy"))
    }
}

/// Pretrains one configuration in memory and scores its query encoder.
pub fn run_variant(
    config: &TrainConfig,
    variant: &str,
    dataset: &SceneDataset,
    split: &ProbeSplit,
    probe: &ProbeConfig,
) -> Result<VariantRun> {
    let mut trainer = Trainer::new(config, dataset.len())?;
    let mut final_loss = f64::NAN;
    for _ in 0..trainer.planned_steps() {
        final_loss = trainer.next_step(dataset)?.total;
    }
    let encoder = &trainer.encoders().query;
    let run = VariantRun {
        variant: variant.to_string(),
        seed: config.seed,
        lambda_d: config.loss.lambda_d,
        steps: trainer.step(),
        final_loss,
        probe_accuracy: split.probe_accuracy(encoder, probe)?,
        high_frequency_energy: high_frequency_energy(encoder, &split.test_images)?,
    };
    log::info!(
        "{} seed {}: acc {:.4} hf {:.5} loss {:.4}",
        run.variant,
        run.seed,
        run.probe_accuracy,
        run.high_frequency_energy,
        run.final_loss
    );
    Ok(run)
}

/// Every variant for every seed. `on_run` sees each result as it completes.
pub fn run_ablation(spec: &AblationSpec, mut on_run: impl FnMut(&VariantRun)) -> Result<AblationResult> {
    if spec.seeds.is_empty() || spec.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let dataset = generate_synthetic_scenes(&spec.dataset, spec.dataset_seed)?;
    let split = ProbeSplit::new(&dataset, spec.train_fraction)?;
    let mut result = AblationResult::default();
    for &seed in &spec.seeds {
        for &variant in &spec.variants {
            let mut cfg = spec.train.clone();
            cfg.seed = seed;
            cfg.apply_ablation(variant);
            let run = run_variant(&cfg, variant.name(), &dataset, &split, &spec.probe)?;
            on_run(&run);
            result.runs.push(run);
        }
    }
    Ok(result)
}

/// Full model at each diffusion weight; runs are labelled `lambda_d=<w>`.
pub fn lambda_sweep(spec: &AblationSpec, weights: &[f64], mut on_run: impl FnMut(&VariantRun)) -> Result<AblationResult> {
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::Config("diffusion weights must be finite and nonnegative".into()));
    }
    let dataset = generate_synthetic_scenes(&spec.dataset, spec.dataset_seed)?;
    let split = ProbeSplit::new(&dataset, spec.train_fraction)?;
    let mut result = AblationResult::default();
    for &seed in &spec.seeds {
        for &w in weights {
            let mut cfg = spec.train.clone();
            cfg.seed = seed;
            cfg.swim.enabled = true;
            cfg.loss.lambda_d = w;
            let run = run_variant(&cfg, &format!("lambda_d={w}"), &dataset, &split, &spec.probe)?;
            on_run(&run);
            result.runs.push(run);
        }
    }
    Ok(result)
}
