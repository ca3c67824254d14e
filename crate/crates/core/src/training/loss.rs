//! Video-level MIL losses over class activation sequences.

use ndarray::{Array1, Array2, ArrayView2};

use crate::model::{sigmoid, softplus, AttentionWeights, Cas, ForwardOutput, OutputGrads};

/// Number of snippets averaged per class: `max(1, ⌊T / r⌋)`.
pub fn topk_count(t: usize, ratio: usize) -> usize {
    (t / ratio.max(1)).max(1)
}

/// Per-class mean of the `k` largest entries, with the indices that were
/// averaged (ties resolved toward the earlier snippet).
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub scores: Array1<f64>,
    pub indices: Vec<Vec<usize>>,
}

pub fn topk_mean_with_indices(scores: ArrayView2<f64>, ratio: usize) -> TopK {
    let t = scores.nrows();
    assert!(t > 0, "top-k mean of an empty sequence");
    let k = topk_count(t, ratio);
    let mut out = Array1::zeros(scores.ncols());
    let mut indices = Vec::with_capacity(scores.ncols());
    let mut order: Vec<usize> = Vec::with_capacity(t);
    for (c, col) in scores.columns().into_iter().enumerate() {
        order.clear();
        order.extend(0..t);
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        let top = order[..k].to_vec();
        out[c] = top.iter().map(|&i| col[i]).sum::<f64>() / k as f64;
        indices.push(top);
    }
    TopK {
        scores: out,
        indices,
    }
}

pub fn topk_mean_aggregate(cas: &Cas, ratio: usize) -> Array1<f64> {
    topk_mean_with_indices(cas.scores.view(), ratio).scores
}

/// Classification targets for the two branches: the video's labels plus a
/// background bit that is 1 for the base branch and 0 for the suppression branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTargets {
    pub y_base: Array1<f64>,
    pub y_supp: Array1<f64>,
}

impl BranchTargets {
    pub fn from_labels(labels: &[bool]) -> Self {
        let c = labels.len();
        let mut y_base = Array1::zeros(c + 1);
        for (i, &on) in labels.iter().enumerate() {
            if on {
                y_base[i] = 1.0;
            }
        }
        let mut y_supp = y_base.clone();
        y_base[c] = 1.0;
        y_supp[c] = 0.0;
        BranchTargets { y_base, y_supp }
    }
}

/// Mean per-class binary cross-entropy on the top-k aggregated logits,
/// with its gradient w.r.t. the CAS.
pub fn classification_loss_and_grad(
    cas: &Cas,
    targets: &Array1<f64>,
    ratio: usize,
) -> (f64, Array2<f64>) {
    let agg = topk_mean_with_indices(cas.scores.view(), ratio);
    let width = agg.scores.len();
    assert_eq!(width, targets.len(), "target width must match CAS width");
    let mut loss = 0.0;
    let mut grad = Array2::zeros(cas.scores.raw_dim());
    for (c, (&s, &y)) in agg.scores.iter().zip(targets).enumerate() {
        // -y ln σ(s) - (1-y) ln(1-σ(s)) = softplus(s) - y s
        loss += softplus(s) - y * s;
        let ds = (sigmoid(s) - y) / width as f64;
        let k = agg.indices[c].len() as f64;
        for &t in &agg.indices[c] {
            grad[[t, c]] += ds / k;
        }
    }
    (loss / width as f64, grad)
}

pub fn video_classification_loss(cas: &Cas, targets: &Array1<f64>, ratio: usize) -> f64 {
    classification_loss_and_grad(cas, targets, ratio).0
}

/// Detached supervision signal for the attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTarget {
    /// Foreground class with the highest aggregated score.
    pub class_id: usize,
    /// `σ(cas_supp[t, class_id])` per snippet.
    pub profile: Array1<f64>,
}

pub fn attention_target(cas_supp: &Cas, ratio: usize) -> AttentionTarget {
    let agg = topk_mean_aggregate(cas_supp, ratio);
    let fg = cas_supp.num_classes();
    let class_id = (0..fg)
        .reduce(|best, c| if agg[c] > agg[best] { c } else { best })
        .expect("at least one foreground class");
    AttentionTarget {
        class_id,
        profile: cas_supp.scores.column(class_id).mapv(sigmoid),
    }
}

/// Mean squared error between attention and a fixed target, with its
/// gradient w.r.t. the attention weights.
pub fn attention_mse_and_grad(
    attention: &AttentionWeights,
    target: &AttentionTarget,
) -> (f64, Array1<f64>) {
    let diff = &attention.weights - &target.profile;
    let t = diff.len() as f64;
    let loss = diff.dot(&diff) / t;
    (loss, diff * (2.0 / t))
}

pub fn attention_supervision_loss(
    attention: &AttentionWeights,
    cas_supp: &Cas,
    ratio: usize,
) -> f64 {
    attention_mse_and_grad(attention, &attention_target(cas_supp, ratio)).0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub base: f64,
    pub supp: f64,
    pub att: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub base: f64,
    pub supp: f64,
    pub att: f64,
}

/// Weighted two-branch objective and its gradients w.r.t. the forward
/// outputs. `frozen` pins the attention target (it is otherwise computed
/// from `out.cas_supp`); either way no gradient flows through the target.
pub fn total_loss_and_grads(
    out: &ForwardOutput,
    targets: &BranchTargets,
    weights: LossWeights,
    ratio: usize,
    frozen: Option<&AttentionTarget>,
) -> (LossBreakdown, OutputGrads) {
    let (base, mut d_cas_base) =
        classification_loss_and_grad(&out.cas_base, &targets.y_base, ratio);
    let (supp, mut d_cas_supp) =
        classification_loss_and_grad(&out.cas_supp, &targets.y_supp, ratio);
    let computed;
    let target = match frozen {
        Some(t) => t,
        None => {
            computed = attention_target(&out.cas_supp, ratio);
            &computed
        }
    };
    let (att, mut d_attention) = attention_mse_and_grad(&out.attention, target);
    d_cas_base *= weights.base;
    d_cas_supp *= weights.supp;
    d_attention *= weights.att;
    let total = weights.base * base + weights.supp * supp + weights.att * att;
    (
        LossBreakdown {
            total,
            base,
            supp,
            att,
        },
        OutputGrads {
            d_cas_base,
            d_cas_supp,
            d_attention,
        },
    )
}

pub fn total_loss(
    out: &ForwardOutput,
    targets: &BranchTargets,
    weights: LossWeights,
    ratio: usize,
) -> LossBreakdown {
    total_loss_and_grads(out, targets, weights, ratio, None).0
}
