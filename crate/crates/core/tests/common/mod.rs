#![allow(dead_code)]

use lgbm_core::evaluation::{default_tiou_thresholds, evaluate, EvalReport, ResultsFile};
use lgbm_core::feature_store::{
    generate_synthetic_dataset, AnnotationFile, FeatureSequence, Split, SynthConfig,
    VideoAnnotation,
};
use lgbm_core::localization::{localize, LocalizeConfig};
use lgbm_core::model::{self, ModelConfig, ModelParams, ParamVisit};
use lgbm_core::training::{
    topk_mean_aggregate, total_loss_and_grads, AttentionTarget, LossWeights, TrainConfig,
    TrainingExample,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Split2 {
    pub train: Vec<TrainingExample>,
    pub val: Vec<(FeatureSequence, VideoAnnotation)>,
    pub annotations: AnnotationFile,
    pub class_names: Vec<String>,
}

pub fn synthetic(cfg: &SynthConfig) -> Split2 {
    let data = generate_synthetic_dataset(cfg).expect("synthetic dataset");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ((entry, seq), ann) in data
        .manifest
        .videos
        .iter()
        .zip(&data.sequences)
        .zip(&data.annotations)
    {
        match entry.split {
            Split::Train => train.push(TrainingExample::new(seq, ann)),
            _ => val.push((seq.clone(), ann.clone())),
        }
    }
    Split2 {
        train,
        val,
        annotations: data.annotation_file(),
        class_names: data.manifest.class_names.clone(),
    }
}

pub fn detect(
    split: &Split2,
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &LocalizeConfig,
) -> ResultsFile {
    let mut dets = Vec::new();
    for (seq, _) in &split.val {
        dets.extend(localize(seq, params, model, cfg).expect("localize"));
    }
    ResultsFile::from_detections(
        &dets,
        &split.class_names,
        split.val.iter().map(|(s, _)| s.video_id.as_str()),
    )
}

pub fn score(split: &Split2, results: &ResultsFile) -> EvalReport {
    evaluate(
        results,
        &split.annotations,
        Some("validation"),
        &default_tiou_thresholds(),
    )
}

/// Top-1 video classification from the suppression branch's aggregated scores.
pub fn video_accuracy(
    split: &Split2,
    params: &ModelParams,
    model: &ModelConfig,
    ratio: usize,
) -> f64 {
    let correct = split
        .val
        .iter()
        .filter(|(seq, ann)| {
            let out = model::model_forward(seq.to_f64().view(), params, model).unwrap();
            let agg = topk_mean_aggregate(&out.cas_supp, ratio);
            let pred = (0..model.num_classes)
                .reduce(|b, c| if agg[c] > agg[b] { c } else { b })
                .unwrap();
            ann.labels[pred]
        })
        .count();
    correct as f64 / split.val.len() as f64
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn random_input(seed: u64, t: usize, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
}

/// Worst relative error between analytic and central-difference gradients
/// over `n_samples` randomly chosen parameters. The denominator is floored
/// at 1e-6 so parameters with (near-)zero gradient are judged absolutely.
/// Each parameter is probed at several step sizes and judged by the best
/// one, since a step can straddle a ReLU or top-k switch; a wrong analytic
/// gradient disagrees at every step size.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model_cfg: &ModelConfig,
    params: &ModelParams,
    x: &Array2<f64>,
    example: &TrainingExample,
    weights: LossWeights,
    ratio: usize,
    n_samples: usize,
    seed: u64,
) -> (f64, String) {
    let (out, tape) = model::forward_with_tape(x.view(), params, model_cfg).unwrap();
    let target: AttentionTarget = lgbm_core::training::attention_target(&out.cas_supp, ratio);
    let (_, grads) = total_loss_and_grads(&out, &example.targets, weights, ratio, Some(&target));
    let mut acc = params.zeros_like();
    model::backward(params, &tape, &grads, &mut acc);
    let analytic = model::flatten(&acc);

    let mut names = Vec::new();
    params.visit("", &mut |name, _, v| {
        names.extend((0..v.len()).map(|i| format!("{name}[{i}]")))
    });
    let base = model::flatten(params);
    let loss_at = |flat: &[f64]| {
        let mut p = params.clone();
        model::assign_flat(&mut p, flat);
        let out = model::model_forward(x.view(), &p, model_cfg).unwrap();
        total_loss_and_grads(&out, &example.targets, weights, ratio, Some(&target))
            .0
            .total
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    for _ in 0..n_samples {
        let i = rng.random_range(0..base.len());
        let (rel, numeric) = [1e-4, 1e-5, 1e-6]
            .into_iter()
            .map(|h| {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let rel =
                    (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
                (rel, numeric)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        if rel > worst.0 || worst.1.is_empty() {
            worst = (
                rel,
                format!(
                    "{} analytic {:e} numeric {:e}",
                    names[i], analytic[i], numeric
                ),
            );
        }
    }
    worst
}

/// Checks that both branches of `params` read the one sub-net, then runs an
/// unshared ablation: from `params`, one extra SGD step in which the supp
/// branch's copy of the sub-net only receives the supp branch's gradient.
/// Returns whether sharing held and the largest CAS difference between the
/// shared and unshared models after that step.
pub fn sharing_check(
    params: &ModelParams,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    example: &TrainingExample,
    x: &Array2<f64>,
) -> (bool, f64) {
    let out = model::model_forward(x.view(), params, cfg).unwrap();
    let a = model::attention_forward(x.view(), params, cfg)
        .unwrap()
        .weights;
    let xs = model::modulate(x.view(), &a);
    let shared_ok = out.cas_base == model::subnet_forward(x.view(), &params.subnet, cfg).unwrap()
        && out.cas_supp == model::subnet_forward(xs.view(), &params.subnet, cfg).unwrap();

    let (fwd, tape) = model::forward_with_tape(example.features.view(), params, cfg).unwrap();
    let (_, g) = total_loss_and_grads(
        &fwd,
        &example.targets,
        train_cfg.loss_weights(),
        train_cfg.topk_ratio,
        None,
    );
    let branch_grad = |keep_base: bool| {
        let mut g = g.clone();
        if keep_base {
            g.d_cas_supp.fill(0.0);
        } else {
            g.d_cas_base.fill(0.0);
        }
        g.d_attention.fill(0.0);
        let mut acc = params.zeros_like();
        model::backward(params, &tape, &g, &mut acc);
        model::flatten(&acc.subnet)
    };
    let (gb, gs) = (branch_grad(true), branch_grad(false));
    let step = |grad: &[f64]| {
        let mut s = params.subnet.clone();
        let flat: Vec<f64> = model::flatten(&s)
            .iter()
            .zip(grad)
            .map(|(p, g)| p - train_cfg.learning_rate * g)
            .collect();
        model::assign_flat(&mut s, &flat);
        s
    };
    let shared = step(&gb.iter().zip(&gs).map(|(a, b)| a + b).collect::<Vec<_>>());
    let supp_only = step(&gs);
    let shared_cas = model::subnet_forward(xs.view(), &shared, cfg).unwrap();
    let unshared_cas = model::subnet_forward(xs.view(), &supp_only, cfg).unwrap();
    let gap = (&shared_cas.scores - &unshared_cas.scores)
        .iter()
        .fold(0.0, |m: f64, v| m.max(v.abs()));
    (shared_ok, gap)
}
