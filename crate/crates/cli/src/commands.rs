use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use lgbm_core::ensemble::ensemble_detections;
use lgbm_core::evaluation::{evaluate, ResultsFile};
use lgbm_core::feature_store::{generate_synthetic_dataset, Dataset, FeatureSequence, Split};
use lgbm_core::localization::{cas_to_activation, localize, Detection};
use lgbm_core::model::{model_forward, ModelConfig};
use lgbm_core::training::{train as run_training, Checkpoint, DirectorySink, TrainingExample};

use crate::config::{self, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::plot::CasPlot;
use crate::ConfigArgs;

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> CliResult<PipelineConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend(extra);
    config::load(args.config.as_deref(), &overrides)
}

fn parse_split(name: &str) -> CliResult<Split> {
    name.parse().map_err(CliError::Config)
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

/// The model must agree with the dataset on feature width and class count.
fn check_compatible(
    model: &ModelConfig,
    data: &Dataset,
    sample: Option<&FeatureSequence>,
) -> CliResult<()> {
    if model.num_classes != data.class_names().len() {
        return Err(CliError::Config(format!(
            "model.num_classes is {} but the dataset has {} classes",
            model.num_classes,
            data.class_names().len()
        )));
    }
    if let Some(seq) = sample {
        if seq.dim() != model.input_dim {
            return Err(CliError::Config(format!(
                "model.input_dim is {} but features have width {}",
                model.input_dim,
                seq.dim()
            )));
        }
    }
    Ok(())
}

pub fn synth(args: &ConfigArgs, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let extra = seed
        .map(|s| format!("synth.seed={s}"))
        .into_iter()
        .collect();
    let cfg = load_config(args, extra)?;
    let data = generate_synthetic_dataset(&cfg.synth)?;
    Dataset::write(
        out,
        &data.manifest,
        &data.annotation_file(),
        &data.sequences,
    )?;
    println!(
        "wrote {} videos ({} classes) to {}",
        data.sequences.len(),
        data.manifest.class_names.len(),
        out.display()
    );
    Ok(())
}

pub fn train(args: &ConfigArgs, data_dir: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let extra = seed
        .map(|s| format!("train.seed={s}"))
        .into_iter()
        .collect();
    let cfg = load_config(args, extra)?;
    let data = Dataset::open(data_dir)?;
    check_compatible(&cfg.model, &data, None)?;
    let videos = data.load_split(Split::Train)?;
    if videos.is_empty() {
        return Err(CliError::Data("the dataset has no training videos".into()));
    }
    check_compatible(&cfg.model, &data, Some(&videos[0].0))?;
    let examples: Vec<TrainingExample> = videos
        .iter()
        .map(|(s, a)| TrainingExample::new(s, a))
        .collect();
    let mut sink = DirectorySink::create(out, &cfg.model, &cfg.train)?;
    let outcome = run_training(&examples, &cfg.model, &cfg.train, &mut sink)?;
    let path = sink.finish(&outcome.params)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "trained {} steps on {} videos, loss {:.4} -> {:.4}; checkpoint {}",
            outcome.log.len(),
            examples.len(),
            first.loss_total,
            last.loss_total,
            path.display()
        );
    }
    Ok(())
}

pub fn detect(
    args: &ConfigArgs,
    ckpt_path: &Path,
    data_dir: &Path,
    split: Option<String>,
    out: &Path,
    workers: Option<usize>,
) -> CliResult<()> {
    let mut extra = Vec::new();
    if let Some(s) = split {
        extra.push(format!("detect.split={}", serde_json::Value::String(s)));
    }
    if let Some(w) = workers {
        extra.push(format!("detect.workers={w}"));
    }
    let cfg = load_config(args, extra)?;
    let split = parse_split(&cfg.detect.split)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let data = Dataset::open(data_dir)?;
    check_compatible(&ckpt.model, &data, None)?;
    let entries: Vec<_> = data.manifest.entries(split).cloned().collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.detect.workers)
        .build()
        .map_err(|e| {
            CliError::Config(format!("cannot start {} workers: {e}", cfg.detect.workers))
        })?;
    let per_video: Vec<Vec<Detection>> = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| -> CliResult<Vec<Detection>> {
                let (seq, _) = data.load_video(entry)?;
                check_compatible(&ckpt.model, &data, Some(&seq))?;
                Ok(localize(&seq, &ckpt.params, &ckpt.model, &cfg.localize)?)
            })
            .collect::<CliResult<_>>()
    })?;
    let dets: Vec<Detection> = per_video.into_iter().flatten().collect();
    let results = ResultsFile::from_detections(
        &dets,
        data.class_names(),
        entries.iter().map(|e| e.video_id.as_str()),
    );
    create_parent(out)?;
    results.save(out)?;
    println!(
        "{} detections over {} {} videos -> {}",
        dets.len(),
        entries.len(),
        split.subset_name(),
        out.display()
    );
    Ok(())
}

pub fn eval(
    args: &ConfigArgs,
    results_path: &Path,
    gt_path: &Path,
    out: Option<&Path>,
    subset: Option<String>,
) -> CliResult<()> {
    let extra = subset
        .map(|s| format!("eval.subset={}", serde_json::Value::String(s)))
        .into_iter()
        .collect();
    let cfg = load_config(args, extra)?;
    let results = ResultsFile::load(results_path)?;
    let gt = lgbm_core::feature_store::AnnotationFile::load(gt_path)?;
    let subset = (cfg.eval.subset != "all").then_some(cfg.eval.subset.as_str());
    if let Some(s) = subset {
        if !gt.database.values().any(|e| e.subset == s) {
            return Err(CliError::Data(format!(
                "no annotated videos in subset {s:?}"
            )));
        }
    }
    let report = evaluate(&results, &gt, subset, &cfg.eval.tiou_thresholds);
    if !report.average_map.is_finite() {
        return Err(CliError::Numerical("average mAP is not finite".into()));
    }
    print!("{}", report.to_table(&cfg.eval.method));
    if report.unknown_label_count > 0 {
        println!(
            "skipped {} detections with unknown labels",
            report.unknown_label_count
        );
    }
    if let Some(path) = out {
        create_parent(path)?;
        let text = serde_json::to_string_pretty(&report).expect("report serialization");
        fs::write(path, text + "\n")
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn ensemble(
    args: &ConfigArgs,
    inputs: &[PathBuf],
    out: &Path,
    weights: Option<Vec<f64>>,
    nms_threshold: Option<f64>,
) -> CliResult<()> {
    let mut extra = Vec::new();
    if let Some(w) = weights {
        extra.push(format!(
            "ensemble.weights={}",
            serde_json::to_string(&w).expect("weights")
        ));
    }
    if let Some(t) = nms_threshold {
        extra.push(format!("ensemble.nms_threshold={t}"));
    }
    let cfg = load_config(args, extra)?;
    let files: Vec<ResultsFile> = inputs
        .iter()
        .map(|p| ResultsFile::load(p))
        .collect::<Result<_, _>>()?;

    let labels: BTreeSet<&str> = files
        .iter()
        .flat_map(|f| f.results.values().flatten().map(|e| e.label.as_str()))
        .collect();
    let class_names: Vec<String> = labels.into_iter().map(String::from).collect();
    let videos: BTreeSet<&str> = files
        .iter()
        .flat_map(|f| f.results.keys().map(String::as_str))
        .collect();
    let models: Vec<Vec<Detection>> = files
        .iter()
        .map(|f| f.to_detections(&class_names).0)
        .collect();

    let weights = if cfg.ensemble.weights.is_empty() {
        vec![1.0; models.len()]
    } else {
        cfg.ensemble.weights.clone()
    };
    let fused = ensemble_detections(&models, &weights, cfg.ensemble.nms_threshold)?;
    let results = ResultsFile::from_detections(&fused.detections, &class_names, videos);
    create_parent(out)?;
    results.save(out)?;
    println!(
        "fused {} inputs: {} detections before NMS, {} after -> {}",
        inputs.len(),
        fused.pre_nms_count,
        fused.detections.len(),
        out.display()
    );
    Ok(())
}

pub fn plot_cas(
    args: &ConfigArgs,
    ckpt_path: &Path,
    data_dir: &Path,
    video: &str,
    out: &Path,
) -> CliResult<()> {
    load_config(args, Vec::new())?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let data = Dataset::open(data_dir)?;
    check_compatible(&ckpt.model, &data, None)?;
    let entry = data
        .entry(video)
        .ok_or_else(|| CliError::Data(format!("video {video:?} is not in the dataset")))?;
    let (seq, ann) = data.load_video(entry)?;
    check_compatible(&ckpt.model, &data, Some(&seq))?;
    let fwd = model_forward(seq.to_f64().view(), &ckpt.params, &ckpt.model)?;
    let activations = cas_to_activation(&fwd.cas_supp);
    let plot = CasPlot {
        activations: &activations,
        attention: &fwd.attention.weights,
        segments: &ann.segments,
        snippet_duration_sec: seq.snippet_duration_sec,
    };
    create_parent(out)?;
    plot.save(out)
        .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}
