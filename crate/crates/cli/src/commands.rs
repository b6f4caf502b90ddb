use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use swimdiff::ablation::{lambda_sweep, run_ablation, AblationResult, AblationSpec, ProbeSplit, VariantRun};
use swimdiff::dataset::{
    augment_pair, generate_synthetic_scenes, load_tile_directory, write_tile_directory, SceneDataset,
    SyntheticSceneSpec, MANIFEST_FILE,
};
use swimdiff::diffusion::ScheduleSpec;
use swimdiff::eval::{
    change_detect_eval, change_detect_train, generate_change_pairs, inspect_features, load_change_directory,
    probe_train, write_change_directory, ChangeConfig, ChangePair, ChangePairSpec, ProbeConfig, ProbeLabels,
};
use swimdiff::image::Image;
use swimdiff::trainer::{load_query_branch, read_meta, resume, train, TrainConfig, Trainer, DIAGNOSTICS_FILE, METRICS_FILE};
use swimdiff::{Error, Result};

use crate::args::*;
use crate::run::{append_results, content_id, file_sha256, prepare_output_dir, ResultRecord, Run, RunStatus};

fn results_path(runs_dir: &Path, args: &ResultsArgs) -> PathBuf {
    args.results.clone().unwrap_or_else(|| runs_dir.join("results.jsonl"))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn load_tiles(dir: &Path) -> Result<SceneDataset> {
    load_tile_directory(dir, &dir.join(MANIFEST_FILE))
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    match args.kind {
        DatasetKind::Scenes => {
            let spec = SyntheticSceneSpec {
                n_scenes: args.n_scenes,
                tiles_per_scene: args.tiles_per_scene,
                tile_size: args.tile_size,
                texture_family_seed: args.texture_seed,
                noise_level: args.noise,
            };
            let ds = generate_synthetic_scenes(&spec, args.seed)?;
            prepare_output_dir(&args.out, args.force)?;
            let manifest = write_tile_directory(&ds, &args.out)?;
            print_json(&json!({"tiles": ds.len(), "scenes": spec.n_scenes, "manifest": manifest}));
        }
        DatasetKind::ChangePairs => {
            let spec = ChangePairSpec {
                n_pairs: args.n_pairs,
                tile_size: args.tile_size,
                max_squares: args.max_squares,
                noise_level: args.noise,
                texture_family_seed: args.texture_seed,
            };
            let mut pairs = generate_change_pairs(&spec, args.seed)?;
            if args.identical {
                pairs = pairs
                    .into_iter()
                    .map(|p| {
                        let (c, h, w) = p.mask.shape();
                        ChangePair::new(p.id, p.a.clone(), p.a, Image::zeros(c, h, w))
                    })
                    .collect::<Result<_>>()?;
            }
            prepare_output_dir(&args.out, args.force)?;
            write_change_directory(&pairs, &args.out)?;
            print_json(&json!({"pairs": pairs.len(), "root": args.out}));
        }
    }
    Ok(())
}

/// Config file (or the default), then the ablation preset, then explicit flags.
pub fn resolve_train_config(args: &PretrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(ablation) = args.ablate {
        cfg.apply_ablation(ablation);
    }
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag {
                cfg.$($field)+ = v;
            }
        };
    }
    set!(args.seed => seed);
    set!(args.epochs => epochs);
    set!(args.max_steps.map(Some) => max_steps);
    set!(args.batch_size => batch_size);
    set!(args.tau => loss.tau);
    set!(args.tau_prime => swim.tau_prime);
    set!(args.lambda_c => loss.lambda_c);
    set!(args.lambda_d => loss.lambda_d);
    set!(args.queue_capacity => encoder.queue_capacity);
    set!(args.momentum => encoder.momentum);
    set!(args.lr => optimizer.contrastive.lr);
    set!(args.diffusion_lr => optimizer.diffusion.lr);
    set!(args.checkpoint_every => checkpoint_every);
    set!(args.timesteps.map(ScheduleSpec::rescaled) => diffusion.schedule);
    if args.detach_condition {
        cfg.diffusion.predictor.detach_condition = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn pretrain(runs_dir: &Path, args: &PretrainArgs) -> Result<()> {
    let cfg = match &args.resume {
        Some(ckpt) => read_meta(ckpt)?.config,
        None => resolve_train_config(args)?,
    };
    if args.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let ds = load_tiles(&args.data)?;
    let data_sha = file_sha256(&args.data.join(MANIFEST_FILE))?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| runs_dir.join(format!("pretrain-{}", content_id(&cfg, &[data_sha.as_bytes()]))));
    let config_json = json!({
        "train": serde_json::to_value(&cfg).expect("serializable"),
        "data": args.data,
        "data_manifest_sha256": data_sha,
        "resumed_from": args.resume,
    });
    let mut run = Run::start(&out, "pretrain", config_json, args.force)?;
    let outcome = match &args.resume {
        Some(ckpt) => resume(ckpt, &ds, &out),
        None => train(&ds, &cfg, &out),
    };
    let summary = match outcome {
        Ok(s) => s,
        Err(e) => {
            run.finish(RunStatus::Failed)?;
            return Err(e);
        }
    };
    run.add_artifact(&out.join(METRICS_FILE));
    run.add_artifact(&out.join(DIAGNOSTICS_FILE));
    for c in &summary.checkpoints {
        run.add_artifact(c);
    }
    let trainer = Trainer::load(&summary.final_checkpoint)?;
    let preview: Vec<_> = (0..ds.len().min(4))
        .map(|i| augment_pair(&ds.tiles()[i], &cfg.augment, i as u64))
        .collect::<Result<_>>()?;
    let preview_path = out.join("noise_preview.png");
    trainer.noise_preview(&preview, cfg.seed)?.save_png(&preview_path)?;
    run.add_artifact(&preview_path);
    let run_id = run.id().to_string();
    run.finish(RunStatus::Complete)?;
    let last = summary.reports.last();
    print_json(&json!({
        "run_id": run_id,
        "run_dir": out,
        "final_checkpoint": summary.final_checkpoint,
        "steps": trainer.step(),
        "final_loss": last.map(|r| r.total),
    }));
    Ok(())
}

pub fn change_detect(runs_dir: &Path, args: &ChangeDetectArgs) -> Result<()> {
    let (encoder, meta) = load_query_branch(&args.checkpoint)?;
    let train_pairs = load_change_directory(&args.data)?;
    let test_pairs = match &args.test_data {
        Some(dir) => load_change_directory(dir)?,
        None => train_pairs.clone(),
    };
    if train_pairs.is_empty() || test_pairs.is_empty() {
        return Err(Error::Contract("change-pair directory holds no pairs".into()));
    }
    let cfg = ChangeConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        weight_decay: args.weight_decay,
        threshold: args.threshold,
        levels: args.levels.clone(),
        augment: !args.no_augment,
        seed: args.seed,
        ..Default::default()
    };
    let model = change_detect_train(&train_pairs, &encoder, &cfg)?;
    let (counts, f1) = change_detect_eval(&model, &encoder, &test_pairs)?;
    let dataset = args.test_data.as_ref().unwrap_or(&args.data).display().to_string();
    let record = |metric: &str, value: f64| ResultRecord {
        task: "change_detect".into(),
        dataset: dataset.clone(),
        checkpoint: meta.id(),
        metric: metric.into(),
        value,
        seed: args.seed,
    };
    append_results(
        &results_path(runs_dir, &args.results),
        &[
            record("precision", f1.precision),
            record("recall", f1.recall),
            record("f1", f1.f1),
            record("f1_degenerate", f1.degenerate as u8 as f64),
        ],
    )?;
    print_json(&json!({"counts": counts, "score": f1, "checkpoint": meta.id()}));
    Ok(())
}

pub fn classify(runs_dir: &Path, args: &ClassifyArgs) -> Result<()> {
    let (encoder, meta) = load_query_branch(&args.checkpoint)?;
    let ds = load_tiles(&args.data)?;
    let split = ProbeSplit::new(&ds, args.train_fraction)?;
    let cfg = ProbeConfig {
        mode: args.mode,
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        hidden: args.hidden,
        seed: args.seed,
        ..Default::default()
    };
    let model = probe_train(&split.train_images, &split.train_labels, &encoder, &cfg)?;
    let report = model.evaluate(&split.test_images, &split.test_labels)?;
    let record = |metric: &str, value: f64| ResultRecord {
        task: format!("classify_{}", args.mode),
        dataset: args.data.display().to_string(),
        checkpoint: meta.id(),
        metric: metric.into(),
        value,
        seed: args.seed,
    };
    let mut records = vec![record("map", report.map.map)];
    if let Some(acc) = report.accuracy {
        records.insert(0, record("accuracy", acc));
    }
    append_results(&results_path(runs_dir, &args.results), &records)?;
    print_json(&json!({
        "accuracy": report.accuracy,
        "map": report.map.map,
        "mode": args.mode.to_string(),
        "checkpoint": meta.id(),
    }));
    Ok(())
}

pub fn inspect(runs_dir: &Path, args: &InspectArgs) -> Result<()> {
    let (encoder, meta) = load_query_branch(&args.checkpoint)?;
    let ds = load_tiles(&args.data)?;
    let split = ProbeSplit::new(&ds, 0.5)?;
    let classifier = if args.confusion {
        let cfg = ProbeConfig {
            epochs: args.probe_epochs,
            ..Default::default()
        };
        Some(probe_train(&split.train_images, &split.train_labels, &encoder, &cfg)?)
    } else {
        None
    };
    let labels = match &split.test_labels {
        ProbeLabels::Single { labels, .. } => labels.clone(),
        ProbeLabels::Multi { .. } => unreachable!("scene labels are single-label"),
    };
    // interleave scenes so the grid's first rows cover several of them
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[..i].iter().filter(|&&l| l == labels[i]).count(), labels[i]));
    let images: Vec<Image> = order.iter().map(|&i| split.test_images[i].clone()).collect();
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    prepare_output_dir(&args.out, args.force)?;
    let artifacts = inspect_features(
        &encoder,
        &images,
        &labels,
        classifier.as_ref(),
        args.confusion,
        args.rows,
        &args.out,
    )?;
    append_results(
        &results_path(runs_dir, &args.results),
        &[ResultRecord {
            task: "inspect".into(),
            dataset: args.data.display().to_string(),
            checkpoint: meta.id(),
            metric: "high_frequency_energy".into(),
            value: artifacts.high_frequency_energy,
            seed: 0,
        }],
    )?;
    print_json(&serde_json::to_value(&artifacts).expect("serializable"));
    Ok(())
}

pub fn resolve_sweep_spec(args: &SweepArgs) -> Result<AblationSpec> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => AblationSpec::default(),
    };
    if let Some(s) = &args.seeds {
        spec.seeds = s.clone();
    }
    if let Some(v) = args.max_steps {
        spec.train.max_steps = Some(v);
    }
    if let Some(v) = args.queue_capacity {
        spec.train.encoder.queue_capacity = v;
    }
    if let Some(v) = args.batch_size {
        spec.train.batch_size = v;
    }
    if let Some(v) = args.n_scenes {
        spec.dataset.n_scenes = v;
    }
    if let Some(v) = args.tiles_per_scene {
        spec.dataset.tiles_per_scene = v;
    }
    if let Some(v) = args.tile_size {
        spec.dataset.tile_size = v;
    }
    if let Some(v) = args.probe_epochs {
        spec.probe.epochs = v;
    }
    spec.train.validate()?;
    spec.probe.validate()?;
    Ok(spec)
}

fn means(result: &AblationResult) -> serde_json::Value {
    let mut names: Vec<&str> = Vec::new();
    for r in &result.runs {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            (
                n.to_string(),
                json!({
                    "probe_accuracy": result.mean_accuracy(n),
                    "high_frequency_energy": result.mean_energy(n),
                }),
            )
        })
        .collect::<serde_json::Map<_, _>>()
        .into()
}

pub fn sweep(runs_dir: &Path, args: &SweepArgs) -> Result<()> {
    let spec = resolve_sweep_spec(args)?;
    let kind = match args.kind {
        SweepKind::Ablation => "ablation",
        SweepKind::Lambda => "lambda",
    };
    let lambdas = serde_json::to_vec(&args.lambdas).expect("serializable");
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| runs_dir.join(format!("sweep-{kind}-{}", content_id(&spec, &[kind.as_bytes(), &lambdas]))));
    let config = json!({"kind": kind, "spec": spec, "lambdas": args.lambdas});
    let mut run = Run::start(&out, "sweep", config, args.force)?;
    let runs_file = out.join("runs.jsonl");
    let results = results_path(runs_dir, &args.results);
    let dataset = format!(
        "synthetic-{}x{}x{}-s{}",
        spec.dataset.n_scenes, spec.dataset.tiles_per_scene, spec.dataset.tile_size, spec.dataset_seed
    );
    let mut io_error = None;
    let mut on_run = |r: &VariantRun| {
        let record = |metric: &str, value: f64| ResultRecord {
            task: format!("sweep_{kind}"),
            dataset: dataset.clone(),
            checkpoint: r.variant.clone(),
            metric: metric.into(),
            value,
            seed: r.seed,
        };
        let line = serde_json::to_string(r).expect("serializable");
        let res = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&runs_file)
            .and_then(|mut f| std::io::Write::write_all(&mut f, format!("{line}\n").as_bytes()))
            .map_err(|e| Error::Io {
                path: runs_file.clone(),
                source: e,
            })
            .and_then(|_| {
                append_results(
                    &results,
                    &[
                        record("probe_accuracy", r.probe_accuracy),
                        record("high_frequency_energy", r.high_frequency_energy),
                    ],
                )
            });
        if let Err(e) = res {
            io_error.get_or_insert(e);
        }
    };
    let outcome = match args.kind {
        SweepKind::Ablation => run_ablation(&spec, &mut on_run),
        SweepKind::Lambda => lambda_sweep(&spec, &args.lambdas, &mut on_run),
    };
    let result = match (outcome, io_error) {
        (Ok(r), None) => r,
        (Err(e), _) | (Ok(_), Some(e)) => {
            run.finish(RunStatus::Failed)?;
            return Err(e);
        }
    };
    let summary = json!({"kind": kind, "means": means(&result)});
    let summary_path = out.join("summary.json");
    fs::write(&summary_path, serde_json::to_vec_pretty(&summary).expect("serializable")).map_err(|e| Error::Io {
        path: summary_path.clone(),
        source: e,
    })?;
    run.add_artifact(&runs_file);
    run.add_artifact(&summary_path);
    run.finish(RunStatus::Complete)?;
    print_json(&summary);
    Ok(())
}
