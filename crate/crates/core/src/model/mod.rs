//! Two-branch network: a local-global attention module producing per-snippet
//! foreground weights, and one local-global sub-net, shared by both branches,
//! producing the class activation sequence (CAS).
//!
//! Every block keeps its forward intermediates in a cache so the gradient can
//! be propagated by hand; gradients are accumulated into a structure of the
//! same type as the parameters.

pub mod global;
pub mod layers;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use global::{GlobalOp, GlobalOpKind};
pub use layers::{assign_flat, flatten, num_params, sigmoid, softplus, Conv1d, ParamVisit};

use global::GlobalCache;
use layers::{relu, relu_backward};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("empty feature sequence")]
    EmptySequence,
    #[error("feature width {found} does not match configured input_dim {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameters do not match config: {0}")]
    ParamMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Parallel conv + global op, two fusion convs, sigmoid.
    LocalGlobal,
    /// Ablation: a single temporal conv straight to one channel, then sigmoid.
    LocalConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub global_op: GlobalOpKind,
    pub conv_kernel: usize,
    pub recurrent_bidirectional: bool,
    pub attention: AttentionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            num_classes: 5,
            hidden: 8,
            global_op: GlobalOpKind::Recurrent,
            conv_kernel: 3,
            recurrent_bidirectional: true,
            attention: AttentionKind::LocalGlobal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.global_op == GlobalOpKind::Recurrent
            && self.recurrent_bidirectional
            && self.hidden < 2
        {
            return bad("a bidirectional recurrent op needs hidden >= 2".into());
        }
        Ok(())
    }

    /// CAS width: the action classes plus background.
    pub fn cas_width(&self) -> usize {
        self.num_classes + 1
    }
}

/// `T x (C+1)` logits; the last column is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Cas {
    pub scores: Array2<f64>,
}

impl Cas {
    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.scores.ncols() - 1
    }

    pub fn background(&self) -> ArrayView1<'_, f64> {
        self.scores.column(self.num_classes())
    }
}

/// Per-snippet foreground weights in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub weights: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Upper branch, raw features.
    pub cas_base: Cas,
    /// Lower branch, attention-weighted features.
    pub cas_supp: Cas,
    pub attention: AttentionWeights,
}

/// A temporal conv and a global op run side by side on the same input;
/// outputs concatenated as `[local, global]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGlobal {
    pub local: Conv1d,
    pub global: GlobalOp,
}

#[derive(Debug, Clone)]
struct TrunkCache {
    local_pre: Array2<f64>,
    global: GlobalCache,
}

impl LocalGlobal {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        LocalGlobal {
            local: Conv1d::new(rng, cfg.input_dim, cfg.hidden, cfg.conv_kernel),
            global: GlobalOp::new(
                rng,
                cfg.global_op,
                cfg.input_dim,
                cfg.hidden,
                cfg.recurrent_bidirectional,
            ),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, TrunkCache) {
        let local_pre = self.local.forward(x);
        let (g, global) = self.global.forward(x);
        let out = concatenate![Axis(1), relu(&local_pre), g];
        (out, TrunkCache { local_pre, global })
    }

    fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &TrunkCache,
        dy: &Array2<f64>,
        grad: &mut LocalGlobal,
    ) -> Array2<f64> {
        let h = self.local.out_channels();
        let d_local = relu_backward(&cache.local_pre, &dy.slice(s![.., ..h]).to_owned());
        let mut dx = self.local.backward(x, d_local.view(), &mut grad.local);
        dx += &self
            .global
            .backward(x, &cache.global, dy.slice(s![.., h..]), &mut grad.global);
        dx
    }
}

impl ParamVisit for LocalGlobal {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.local.visit(&layers::join(prefix, "local"), f);
        self.global.visit(&layers::join(prefix, "global"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.local.visit_mut(&layers::join(prefix, "local"), f);
        self.global.visit_mut(&layers::join(prefix, "global"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionModule {
    LocalGlobal {
        trunk: LocalGlobal,
        fuse1: Conv1d,
        fuse2: Conv1d,
    },
    LocalConv {
        conv: Conv1d,
    },
}

#[derive(Debug, Clone)]
enum AttentionCache {
    LocalGlobal {
        trunk: TrunkCache,
        merged: Array2<f64>,
        fuse1_pre: Array2<f64>,
        fuse1_out: Array2<f64>,
    },
    LocalConv,
}

impl AttentionModule {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        match cfg.attention {
            AttentionKind::LocalGlobal => AttentionModule::LocalGlobal {
                trunk: LocalGlobal::new(rng, cfg),
                fuse1: Conv1d::new(rng, 2 * cfg.hidden, cfg.hidden, cfg.conv_kernel),
                fuse2: Conv1d::new(rng, cfg.hidden, 1, cfg.conv_kernel),
            },
            AttentionKind::LocalConv => AttentionModule::LocalConv {
                conv: Conv1d::new(rng, cfg.input_dim, 1, cfg.conv_kernel),
            },
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            AttentionModule::LocalGlobal { trunk, .. } => trunk.local.in_channels(),
            AttentionModule::LocalConv { conv } => conv.in_channels(),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array1<f64>, AttentionCache) {
        let (logits, cache) = match self {
            AttentionModule::LocalGlobal {
                trunk,
                fuse1,
                fuse2,
            } => {
                let (merged, trunk_cache) = trunk.forward(x);
                let fuse1_pre = fuse1.forward(merged.view());
                let fuse1_out = relu(&fuse1_pre);
                let logits = fuse2.forward(fuse1_out.view());
                let cache = AttentionCache::LocalGlobal {
                    trunk: trunk_cache,
                    merged,
                    fuse1_pre,
                    fuse1_out,
                };
                (logits, cache)
            }
            AttentionModule::LocalConv { conv } => (conv.forward(x), AttentionCache::LocalConv),
        };
        (logits.column(0).mapv(sigmoid), cache)
    }

    /// `d_weights` is the gradient w.r.t. the post-sigmoid weights.
    fn backward(
        &self,
        x: ArrayView2<f64>,
        weights: &Array1<f64>,
        cache: &AttentionCache,
        d_weights: &Array1<f64>,
        grad: &mut AttentionModule,
    ) {
        let d_logits = (d_weights * &weights.mapv(|a| a * (1.0 - a))).insert_axis(Axis(1));
        match (self, cache, grad) {
            (
                AttentionModule::LocalGlobal {
                    trunk,
                    fuse1,
                    fuse2,
                },
                AttentionCache::LocalGlobal {
                    trunk: trunk_cache,
                    merged,
                    fuse1_pre,
                    fuse1_out,
                },
                AttentionModule::LocalGlobal {
                    trunk: g_trunk,
                    fuse1: g_fuse1,
                    fuse2: g_fuse2,
                },
            ) => {
                let d_f1 = fuse2.backward(fuse1_out.view(), d_logits.view(), g_fuse2);
                let d_f1_pre = relu_backward(fuse1_pre, &d_f1);
                let d_merged = fuse1.backward(merged.view(), d_f1_pre.view(), g_fuse1);
                trunk.backward(x, trunk_cache, &d_merged, g_trunk);
            }
            (
                AttentionModule::LocalConv { conv },
                AttentionCache::LocalConv,
                AttentionModule::LocalConv { conv: g },
            ) => {
                conv.backward(x, d_logits.view(), g);
            }
            _ => panic!("attention module, cache, and gradient variants disagree"),
        }
    }
}

impl ParamVisit for AttentionModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            AttentionModule::LocalGlobal {
                trunk,
                fuse1,
                fuse2,
            } => {
                trunk.visit(prefix, f);
                fuse1.visit(&layers::join(prefix, "fuse1"), f);
                fuse2.visit(&layers::join(prefix, "fuse2"), f);
            }
            AttentionModule::LocalConv { conv } => conv.visit(&layers::join(prefix, "conv"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            AttentionModule::LocalGlobal {
                trunk,
                fuse1,
                fuse2,
            } => {
                trunk.visit_mut(prefix, f);
                fuse1.visit_mut(&layers::join(prefix, "fuse1"), f);
                fuse2.visit_mut(&layers::join(prefix, "fuse2"), f);
            }
            AttentionModule::LocalConv { conv } => conv.visit_mut(&layers::join(prefix, "conv"), f),
        }
    }
}

/// Local-global trunk, one fusion conv, then the `C+1`-channel classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnet {
    pub trunk: LocalGlobal,
    pub fuse: Conv1d,
    pub classifier: Conv1d,
}

#[derive(Debug, Clone)]
struct SubnetCache {
    trunk: TrunkCache,
    merged: Array2<f64>,
    fuse_pre: Array2<f64>,
    fuse_out: Array2<f64>,
}

impl Subnet {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        Subnet {
            trunk: LocalGlobal::new(rng, cfg),
            fuse: Conv1d::new(rng, 2 * cfg.hidden, cfg.hidden, cfg.conv_kernel),
            classifier: Conv1d::new(rng, cfg.hidden, cfg.cas_width(), cfg.conv_kernel),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, SubnetCache) {
        let (merged, trunk) = self.trunk.forward(x);
        let fuse_pre = self.fuse.forward(merged.view());
        let fuse_out = relu(&fuse_pre);
        let cas = self.classifier.forward(fuse_out.view());
        (
            cas,
            SubnetCache {
                trunk,
                merged,
                fuse_pre,
                fuse_out,
            },
        )
    }

    fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &SubnetCache,
        d_cas: &Array2<f64>,
        grad: &mut Subnet,
    ) -> Array2<f64> {
        let d_fuse_out =
            self.classifier
                .backward(cache.fuse_out.view(), d_cas.view(), &mut grad.classifier);
        let d_fuse_pre = relu_backward(&cache.fuse_pre, &d_fuse_out);
        let d_merged = self
            .fuse
            .backward(cache.merged.view(), d_fuse_pre.view(), &mut grad.fuse);
        self.trunk
            .backward(x, &cache.trunk, &d_merged, &mut grad.trunk)
    }
}

impl ParamVisit for Subnet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.trunk.visit(prefix, f);
        self.fuse.visit(&layers::join(prefix, "fuse"), f);
        self.classifier
            .visit(&layers::join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.trunk.visit_mut(prefix, f);
        self.fuse.visit_mut(&layers::join(prefix, "fuse"), f);
        self.classifier
            .visit_mut(&layers::join(prefix, "classifier"), f);
    }
}

/// All learnable tensors. There is exactly one `subnet`; both branches read it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub attention: AttentionModule,
    pub subnet: Subnet,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attention = AttentionModule::new(&mut rng, cfg);
        let subnet = Subnet::new(&mut rng, cfg);
        Ok(ModelParams { attention, subnet })
    }

    /// Same structure, every entry zero: the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, v| v.fill(0.0));
        z
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Checks tensor shapes against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = ModelParams::init(cfg, 0)?;
        let mut shapes = Vec::new();
        expected.visit("", &mut |name, shape, _| {
            shapes.push((name.to_string(), shape.to_vec()))
        });
        let mut mine = Vec::new();
        self.visit("", &mut |name, shape, _| {
            mine.push((name.to_string(), shape.to_vec()))
        });
        if shapes != mine {
            let diff = shapes
                .iter()
                .zip(&mine)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| {
                    format!("expected {} tensors, found {}", shapes.len(), mine.len())
                });
            return Err(ModelError::ParamMismatch(diff));
        }
        Ok(())
    }
}

impl ParamVisit for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.attention.visit(&layers::join(prefix, "attention"), f);
        self.subnet.visit(&layers::join(prefix, "subnet"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.attention
            .visit_mut(&layers::join(prefix, "attention"), f);
        self.subnet.visit_mut(&layers::join(prefix, "subnet"), f);
    }
}

fn check_input(x: ArrayView2<f64>, expected_dim: usize) -> Result<(), ModelError> {
    if x.nrows() == 0 {
        return Err(ModelError::EmptySequence);
    }
    if x.ncols() != expected_dim {
        return Err(ModelError::DimMismatch {
            expected: expected_dim,
            found: x.ncols(),
        });
    }
    Ok(())
}

fn check_shapes(params: &ModelParams, cfg: &ModelConfig) -> Result<(), ModelError> {
    let sub = &params.subnet;
    if params.attention.input_dim() != cfg.input_dim
        || sub.trunk.local.in_channels() != cfg.input_dim
        || sub.classifier.out_channels() != cfg.cas_width()
        || sub.trunk.global.kind() != cfg.global_op
    {
        return Err(ModelError::ParamMismatch(format!(
            "parameters were not built for input_dim={} num_classes={} global_op={:?}",
            cfg.input_dim, cfg.num_classes, cfg.global_op
        )));
    }
    Ok(())
}

pub fn attention_forward(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<AttentionWeights, ModelError> {
    check_input(x, cfg.input_dim)?;
    check_shapes(params, cfg)?;
    Ok(AttentionWeights {
        weights: params.attention.forward(x).0,
    })
}

pub fn subnet_forward(
    x: ArrayView2<f64>,
    subnet: &Subnet,
    cfg: &ModelConfig,
) -> Result<Cas, ModelError> {
    check_input(x, cfg.input_dim)?;
    if subnet.trunk.local.in_channels() != cfg.input_dim
        || subnet.classifier.out_channels() != cfg.cas_width()
    {
        return Err(ModelError::ParamMismatch("sub-net shape".into()));
    }
    Ok(Cas {
        scores: subnet.forward(x).0,
    })
}

/// Scales row `t` of `x` by `weights[t]`.
pub fn modulate(x: ArrayView2<f64>, weights: &Array1<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for (mut row, &w) in out.rows_mut().into_iter().zip(weights) {
        row *= w;
    }
    out
}

pub fn model_forward(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ForwardOutput, ModelError> {
    Ok(forward_with_tape(x, params, cfg)?.0)
}

/// Runs both branches with externally supplied attention weights in place
/// of the attention module's output.
pub fn model_forward_with_attention(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    attention: &Array1<f64>,
) -> Result<ForwardOutput, ModelError> {
    check_input(x, cfg.input_dim)?;
    check_shapes(params, cfg)?;
    if attention.len() != x.nrows() {
        return Err(ModelError::Config(format!(
            "attention override has length {}, sequence has {}",
            attention.len(),
            x.nrows()
        )));
    }
    let cas_base = subnet_forward(x, &params.subnet, cfg)?;
    let cas_supp = subnet_forward(modulate(x, attention).view(), &params.subnet, cfg)?;
    Ok(ForwardOutput {
        cas_base,
        cas_supp,
        attention: AttentionWeights {
            weights: attention.clone(),
        },
    })
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    x: Array2<f64>,
    x_supp: Array2<f64>,
    weights: Array1<f64>,
    attention: AttentionCache,
    base: SubnetCache,
    supp: SubnetCache,
}

pub fn forward_with_tape(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(ForwardOutput, ForwardTape), ModelError> {
    check_input(x, cfg.input_dim)?;
    check_shapes(params, cfg)?;
    let (weights, attention) = params.attention.forward(x);
    let (cas_base, base) = params.subnet.forward(x);
    let x_supp = modulate(x, &weights);
    let (cas_supp, supp) = params.subnet.forward(x_supp.view());
    let out = ForwardOutput {
        cas_base: Cas { scores: cas_base },
        cas_supp: Cas { scores: cas_supp },
        attention: AttentionWeights {
            weights: weights.clone(),
        },
    };
    let tape = ForwardTape {
        x: x.to_owned(),
        x_supp,
        weights,
        attention,
        base,
        supp,
    };
    Ok((out, tape))
}

/// Upstream gradients of a scalar loss w.r.t. the forward outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub d_cas_base: Array2<f64>,
    pub d_cas_supp: Array2<f64>,
    /// Direct gradient on the attention weights (e.g. from attention supervision).
    pub d_attention: Array1<f64>,
}

/// Backpropagates `grads` and accumulates parameter gradients into `acc`.
/// Both branches add into the single `acc.subnet`.
pub fn backward(
    params: &ModelParams,
    tape: &ForwardTape,
    grads: &OutputGrads,
    acc: &mut ModelParams,
) {
    params.subnet.backward(
        tape.x.view(),
        &tape.base,
        &grads.d_cas_base,
        &mut acc.subnet,
    );
    let dx_supp = params.subnet.backward(
        tape.x_supp.view(),
        &tape.supp,
        &grads.d_cas_supp,
        &mut acc.subnet,
    );
    // x_supp[t] = a[t] * x[t]
    let mut d_weights = (&dx_supp * &tape.x).sum_axis(Axis(1));
    d_weights += &grads.d_attention;
    params.attention.backward(
        tape.x.view(),
        &tape.weights,
        &tape.attention,
        &d_weights,
        &mut acc.attention,
    );
}
