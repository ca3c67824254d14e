//! Sequence-wide ("global") operations: recurrent, non-local, global pooling.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    orthogonal, sigmoid, uniform_fill, visit_tensors, visit_tensors_mut, ParamVisit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalOpKind {
    Recurrent,
    NonLocal,
    GlobalPool,
}

impl std::str::FromStr for GlobalOpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recurrent" | "lstm" => Ok(GlobalOpKind::Recurrent),
            "non_local" | "nonlocal" => Ok(GlobalOpKind::NonLocal),
            "global_pool" | "pool" => Ok(GlobalOpKind::GlobalPool),
            _ => Err(format!("unknown global op {s:?}")),
        }
    }
}

/// One LSTM direction. Gate order in the packed matrices is `[i, f, g, o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
    pub reverse: bool,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    /// Post-activation gates, `T x 4h`.
    gates: Array2<f64>,
    cells: Array2<f64>,
    hidden: Array2<f64>,
}

impl Lstm {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize, reverse: bool) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w_ih = Array2::from_shape_vec(
            (input, 4 * hidden),
            uniform_fill(rng, &[input, 4 * hidden], bound),
        )
        .unwrap();
        let mut w_hh = Array2::zeros((hidden, 4 * hidden));
        for gate in 0..4 {
            let q = orthogonal(rng, hidden);
            w_hh.slice_mut(s![.., gate * hidden..(gate + 1) * hidden])
                .assign(&q);
        }
        Lstm {
            w_ih,
            w_hh,
            bias: Array1::zeros(4 * hidden),
            reverse,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.nrows()
    }

    fn order(&self, t: usize) -> Vec<usize> {
        if self.reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LstmCache) {
        let t = x.nrows();
        let h = self.hidden();
        let mut pre = x.dot(&self.w_ih);
        pre += &self.bias;
        let mut gates = Array2::zeros((t, 4 * h));
        let mut cells = Array2::zeros((t, h));
        let mut hidden = Array2::zeros((t, h));
        let mut h_prev = Array1::<f64>::zeros(h);
        let mut c_prev = Array1::<f64>::zeros(h);
        for step in self.order(t) {
            let mut z = pre.row(step).to_owned();
            general_mat_mul_vec(&h_prev, &self.w_hh, &mut z);
            let mut g = gates.row_mut(step);
            for k in 0..h {
                g[k] = sigmoid(z[k]);
                g[h + k] = sigmoid(z[h + k]);
                g[2 * h + k] = z[2 * h + k].tanh();
                g[3 * h + k] = sigmoid(z[3 * h + k]);
            }
            for k in 0..h {
                let c = g[h + k] * c_prev[k] + g[k] * g[2 * h + k];
                cells[[step, k]] = c;
                hidden[[step, k]] = g[3 * h + k] * c.tanh();
            }
            h_prev.assign(&hidden.row(step));
            c_prev.assign(&cells.row(step));
        }
        (
            hidden.clone(),
            LstmCache {
                gates,
                cells,
                hidden,
            },
        )
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &LstmCache,
        dh_out: ArrayView2<f64>,
        grad: &mut Lstm,
    ) -> Array2<f64> {
        let t = x.nrows();
        let h = self.hidden();
        let order = self.order(t);
        let mut dz_all = Array2::<f64>::zeros((t, 4 * h));
        let mut dh_next = Array1::<f64>::zeros(h);
        let mut dc_next = Array1::<f64>::zeros(h);
        let zero = Array1::<f64>::zeros(h);
        for (pos, &step) in order.iter().enumerate().rev() {
            let prev = (pos > 0).then(|| order[pos - 1]);
            let c_prev = prev.map_or(zero.view(), |p| cache.cells.row(p));
            let g = cache.gates.row(step);
            let mut dz = dz_all.row_mut(step);
            for k in 0..h {
                let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let c = cache.cells[[step, k]];
                let tc = c.tanh();
                let dh = dh_out[[step, k]] + dh_next[k];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                dz[k] = dc * gg * i * (1.0 - i);
                dz[h + k] = dc * c_prev[k] * f * (1.0 - f);
                dz[2 * h + k] = dc * i * (1.0 - gg * gg);
                dz[3 * h + k] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            dh_next = self.w_hh.dot(&dz);
            if let Some(p) = prev {
                let h_prev = cache.hidden.row(p);
                for (r, &hp) in h_prev.iter().enumerate() {
                    if hp != 0.0 {
                        grad.w_hh.row_mut(r).scaled_add(hp, &dz);
                    }
                }
            }
        }
        general_mat_mul(1.0, &x.t(), &dz_all, 1.0, &mut grad.w_ih);
        grad.bias += &dz_all.sum_axis(Axis(0));
        dz_all.dot(&self.w_ih.t())
    }
}

/// `z += v · m` for a row vector `v`.
fn general_mat_mul_vec(v: &Array1<f64>, m: &Array2<f64>, z: &mut Array1<f64>) {
    for (r, &vr) in v.iter().enumerate() {
        if vr != 0.0 {
            z.scaled_add(vr, &m.row(r));
        }
    }
}

impl ParamVisit for Lstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_tensors!(self, prefix, f, [w_ih, w_hh, bias]);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_tensors_mut!(self, prefix, f, [w_ih, w_hh, bias]);
    }
}

/// Forward LSTM plus an optional backward-in-time LSTM; outputs are
/// concatenated `[forward, backward]` along channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Recurrent {
    pub forward: Lstm,
    pub backward: Option<Lstm>,
}

impl Recurrent {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize, bidirectional: bool) -> Self {
        if bidirectional {
            let fwd = hidden - hidden / 2;
            Recurrent {
                forward: Lstm::new(rng, input, fwd, false),
                backward: Some(Lstm::new(rng, input, hidden / 2, true)),
            }
        } else {
            Recurrent {
                forward: Lstm::new(rng, input, hidden, false),
                backward: None,
            }
        }
    }
}

/// Dot-product self-attention over time with a residual connection:
/// `v0 = x·W_in + b`, `y = v0 + softmax(q kᵀ / √h) v`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocal {
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct NonLocalCache {
    v0: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
}

impl NonLocal {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        let mat = |rng: &mut _, r: usize, c: usize| {
            Array2::from_shape_vec((r, c), uniform_fill(rng, &[r, c], 1.0 / (r as f64).sqrt()))
                .unwrap()
        };
        NonLocal {
            w_in: mat(rng, input, hidden),
            b_in: Array1::zeros(hidden),
            w_q: mat(rng, hidden, hidden),
            w_k: mat(rng, hidden, hidden),
            w_v: mat(rng, hidden, hidden),
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.w_q.ncols() as f64).sqrt()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, NonLocalCache) {
        let mut v0 = x.dot(&self.w_in);
        v0 += &self.b_in;
        let q = v0.dot(&self.w_q);
        let k = v0.dot(&self.w_k);
        let v = v0.dot(&self.w_v);
        let mut attn = q.dot(&k.t()) * self.scale();
        for mut row in attn.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let y = &v0 + &attn.dot(&v);
        (y, NonLocalCache { v0, q, k, v, attn })
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &NonLocalCache,
        dy: ArrayView2<f64>,
        grad: &mut NonLocal,
    ) -> Array2<f64> {
        let d_attn = dy.dot(&cache.v.t());
        let dv = cache.attn.t().dot(&dy);
        // softmax backward, row-wise
        let mut ds = &cache.attn * &d_attn;
        let row_dot = ds.sum_axis(Axis(1));
        for ((mut row, a), &rd) in ds
            .rows_mut()
            .into_iter()
            .zip(cache.attn.rows())
            .zip(row_dot.iter())
        {
            row.scaled_add(-rd, &a);
        }
        ds *= self.scale();
        let dq = ds.dot(&cache.k);
        let dk = ds.t().dot(&cache.q);

        general_mat_mul(1.0, &cache.v0.t(), &dq, 1.0, &mut grad.w_q);
        general_mat_mul(1.0, &cache.v0.t(), &dk, 1.0, &mut grad.w_k);
        general_mat_mul(1.0, &cache.v0.t(), &dv, 1.0, &mut grad.w_v);

        let mut dv0 = dy.to_owned();
        general_mat_mul(1.0, &dq, &self.w_q.t(), 1.0, &mut dv0);
        general_mat_mul(1.0, &dk, &self.w_k.t(), 1.0, &mut dv0);
        general_mat_mul(1.0, &dv, &self.w_v.t(), 1.0, &mut dv0);

        general_mat_mul(1.0, &x.t(), &dv0, 1.0, &mut grad.w_in);
        grad.b_in += &dv0.sum_axis(Axis(0));
        dv0.dot(&self.w_in.t())
    }
}

impl ParamVisit for NonLocal {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_tensors!(self, prefix, f, [w_in, b_in, w_q, w_k, w_v]);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_tensors_mut!(self, prefix, f, [w_in, b_in, w_q, w_k, w_v]);
    }
}

/// Temporal mean, projected, and broadcast back to every step.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPool {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl GlobalPool {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        GlobalPool {
            weight: Array2::from_shape_vec(
                (input, hidden),
                uniform_fill(rng, &[input, hidden], 1.0 / (input as f64).sqrt()),
            )
            .unwrap(),
            bias: Array1::zeros(hidden),
        }
    }

    /// The length-`hidden` summary shared by every time step.
    pub fn summary(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mean = x.mean_axis(Axis(0)).expect("non-empty sequence");
        mean.dot(&self.weight) + &self.bias
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let g = self.summary(x);
        g.broadcast((x.nrows(), g.len())).unwrap().to_owned()
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut GlobalPool,
    ) -> Array2<f64> {
        let t = x.nrows();
        let dg = dy.sum_axis(Axis(0));
        let mean = x.mean_axis(Axis(0)).expect("non-empty sequence");
        for (r, &m) in mean.iter().enumerate() {
            grad.weight.row_mut(r).scaled_add(m, &dg);
        }
        grad.bias += &dg;
        let dm = self.weight.dot(&dg) / t as f64;
        dm.broadcast(x.raw_dim()).unwrap().to_owned()
    }
}

impl ParamVisit for GlobalPool {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_tensors!(self, prefix, f, [weight, bias]);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_tensors_mut!(self, prefix, f, [weight, bias]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlobalOp {
    Recurrent(Recurrent),
    NonLocal(NonLocal),
    GlobalPool(GlobalPool),
}

#[derive(Debug, Clone)]
pub enum GlobalCache {
    Recurrent(LstmCache, Option<LstmCache>),
    NonLocal(NonLocalCache),
    GlobalPool,
}

impl GlobalOp {
    pub fn new(
        rng: &mut impl Rng,
        kind: GlobalOpKind,
        input: usize,
        hidden: usize,
        bidirectional: bool,
    ) -> Self {
        match kind {
            GlobalOpKind::Recurrent => {
                GlobalOp::Recurrent(Recurrent::new(rng, input, hidden, bidirectional))
            }
            GlobalOpKind::NonLocal => GlobalOp::NonLocal(NonLocal::new(rng, input, hidden)),
            GlobalOpKind::GlobalPool => GlobalOp::GlobalPool(GlobalPool::new(rng, input, hidden)),
        }
    }

    pub fn kind(&self) -> GlobalOpKind {
        match self {
            GlobalOp::Recurrent(_) => GlobalOpKind::Recurrent,
            GlobalOp::NonLocal(_) => GlobalOpKind::NonLocal,
            GlobalOp::GlobalPool(_) => GlobalOpKind::GlobalPool,
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, GlobalCache) {
        match self {
            GlobalOp::Recurrent(r) => {
                let (hf, cf) = r.forward.forward(x);
                match &r.backward {
                    Some(b) => {
                        let (hb, cb) = b.forward(x);
                        (
                            concatenate![Axis(1), hf, hb],
                            GlobalCache::Recurrent(cf, Some(cb)),
                        )
                    }
                    None => (hf, GlobalCache::Recurrent(cf, None)),
                }
            }
            GlobalOp::NonLocal(n) => {
                let (y, c) = n.forward(x);
                (y, GlobalCache::NonLocal(c))
            }
            GlobalOp::GlobalPool(p) => (p.forward(x), GlobalCache::GlobalPool),
        }
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &GlobalCache,
        dy: ArrayView2<f64>,
        grad: &mut GlobalOp,
    ) -> Array2<f64> {
        match (self, cache, grad) {
            (GlobalOp::Recurrent(r), GlobalCache::Recurrent(cf, cb), GlobalOp::Recurrent(g)) => {
                let hf = r.forward.hidden();
                let mut dx = r
                    .forward
                    .backward(x, cf, dy.slice(s![.., ..hf]), &mut g.forward);
                if let (Some(b), Some(cb), Some(gb)) = (&r.backward, cb, g.backward.as_mut()) {
                    dx += &b.backward(x, cb, dy.slice(s![.., hf..]), gb);
                }
                dx
            }
            (GlobalOp::NonLocal(n), GlobalCache::NonLocal(c), GlobalOp::NonLocal(g)) => {
                n.backward(x, c, dy, g)
            }
            (GlobalOp::GlobalPool(p), GlobalCache::GlobalPool, GlobalOp::GlobalPool(g)) => {
                p.backward(x, dy, g)
            }
            _ => panic!("global op, cache, and gradient variants disagree"),
        }
    }
}

impl ParamVisit for GlobalOp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            GlobalOp::Recurrent(r) => {
                r.forward.visit(&format!("{prefix}.lstm_fwd"), f);
                if let Some(b) = &r.backward {
                    b.visit(&format!("{prefix}.lstm_bwd"), f);
                }
            }
            GlobalOp::NonLocal(n) => n.visit(&format!("{prefix}.non_local"), f),
            GlobalOp::GlobalPool(p) => p.visit(&format!("{prefix}.pool"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            GlobalOp::Recurrent(r) => {
                r.forward.visit_mut(&format!("{prefix}.lstm_fwd"), f);
                if let Some(b) = &mut r.backward {
                    b.visit_mut(&format!("{prefix}.lstm_bwd"), f);
                }
            }
            GlobalOp::NonLocal(n) => n.visit_mut(&format!("{prefix}.non_local"), f),
            GlobalOp::GlobalPool(p) => p.visit_mut(&format!("{prefix}.pool"), f),
        }
    }
}
