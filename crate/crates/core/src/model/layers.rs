use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Visitor over named parameter tensors. Tensors are always in standard
/// (row-major, contiguous) layout.
pub trait ParamVisit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

/// All parameters concatenated in visit order.
pub fn flatten(p: &impl ParamVisit) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

/// Inverse of [`flatten`]; `values` must hold exactly one entry per parameter.
pub fn assign_flat(p: &mut impl ParamVisit, values: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, v| {
        v.copy_from_slice(&values[offset..offset + v.len()]);
        offset += v.len();
    });
    assert_eq!(
        offset,
        values.len(),
        "flat parameter vector has the wrong length"
    );
}

pub fn num_params(p: &impl ParamVisit) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! visit_tensors {
    ($self:ident, $prefix:ident, $f:ident, [$($field:ident),*]) => {
        $(
            $f(
                &crate::model::layers::join($prefix, stringify!($field)),
                $self.$field.shape(),
                $self.$field.as_slice().expect("standard layout"),
            );
        )*
    };
}

macro_rules! visit_tensors_mut {
    ($self:ident, $prefix:ident, $f:ident, [$($field:ident),*]) => {
        $(
            $f(
                &crate::model::layers::join($prefix, stringify!($field)),
                $self.$field.as_slice_mut().expect("standard layout"),
            );
        )*
    };
}

pub(crate) use {visit_tensors, visit_tensors_mut};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn uniform_fill(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Orthonormal columns of a random Gaussian matrix (modified Gram-Schmidt).
pub(crate) fn orthogonal(rng: &mut impl Rng, n: usize) -> Array2<f64> {
    loop {
        let mut m = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
        let mut ok = true;
        for j in 0..n {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let qi = m.column(i).to_owned();
                m.column_mut(j).scaled_add(-proj, &qi);
            }
            let norm = m.column(j).dot(&m.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

/// Temporal convolution with "same" zero padding over a `T x in` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `(kernel, in, out)`
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
}

impl Conv1d {
    pub fn new(rng: &mut impl Rng, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        let shape = [kernel, in_channels, out_channels];
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        Conv1d {
            weight: Array3::from_shape_vec(shape, uniform_fill(rng, &shape, bound)).unwrap(),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv1d {
            weight: Array3::zeros((kernel, in_channels, out_channels)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().2
    }

    /// Row ranges `(out_lo, out_hi, in_lo)` where output row `t` reads input
    /// row `t + offset` for kernel tap `j`.
    fn tap_range(t: usize, offset: isize) -> Option<(usize, usize, usize)> {
        let lo = (-offset).max(0) as usize;
        let hi = (t as isize - offset.max(0)).max(0) as usize;
        (lo < hi).then(|| (lo, hi, (lo as isize + offset) as usize))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let t = x.nrows();
        let pad = (self.kernel() / 2) as isize;
        let mut y = Array2::zeros((t, self.out_channels()));
        y += &self.bias;
        for (j, w) in self.weight.outer_iter().enumerate() {
            if let Some((lo, hi, xlo)) = Self::tap_range(t, j as isize - pad) {
                let n = hi - lo;
                let mut ys = y.slice_mut(s![lo..hi, ..]);
                general_mat_mul(1.0, &x.slice(s![xlo..xlo + n, ..]), &w, 1.0, &mut ys);
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut Conv1d,
    ) -> Array2<f64> {
        let t = x.nrows();
        let pad = (self.kernel() / 2) as isize;
        let mut dx = Array2::zeros(x.raw_dim());
        grad.bias += &dy.sum_axis(Axis(0));
        for (j, w) in self.weight.outer_iter().enumerate() {
            if let Some((lo, hi, xlo)) = Self::tap_range(t, j as isize - pad) {
                let n = hi - lo;
                let xs = x.slice(s![xlo..xlo + n, ..]);
                let dys = dy.slice(s![lo..hi, ..]);
                let mut gw = grad.weight.index_axis_mut(Axis(0), j);
                general_mat_mul(1.0, &xs.t(), &dys, 1.0, &mut gw);
                let mut dxs = dx.slice_mut(s![xlo..xlo + n, ..]);
                general_mat_mul(1.0, &dys, &w.t(), 1.0, &mut dxs);
            }
        }
        dx
    }
}

impl ParamVisit for Conv1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_tensors!(self, prefix, f, [weight, bias]);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_tensors_mut!(self, prefix, f, [weight, bias]);
    }
}

pub(crate) fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its pre-activation input.
pub(crate) fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition: y[t,o] = b[o] + sum_j sum_i x[t+j-pad, i] w[j,i,o].
    fn conv_naive(c: &Conv1d, x: &Array2<f64>) -> Array2<f64> {
        let (t, _) = x.dim();
        let (k, cin, cout) = c.weight.dim();
        let pad = k as isize / 2;
        Array2::from_shape_fn((t, cout), |(tt, o)| {
            let mut acc = c.bias[o];
            for j in 0..k {
                let src = tt as isize + j as isize - pad;
                if src < 0 || src >= t as isize {
                    continue;
                }
                for i in 0..cin {
                    acc += x[[src as usize, i]] * c.weight[[j, i, o]];
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(t, k) in &[(1, 3), (2, 3), (7, 1), (7, 5), (3, 7)] {
            let c = Conv1d::new(&mut rng, 4, 3, k);
            let x = Array2::from_shape_fn((t, 4), |_| rng.random_range(-1.0..1.0));
            let y = c.forward(x.view());
            let y_ref = conv_naive(&c, &x);
            for (a, b) in y.iter().zip(y_ref.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Conv1d::new(&mut rng, 3, 2, 3);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let dy = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let loss = |c: &Conv1d, x: &Array2<f64>| (&c.forward(x.view()) * &dy).sum();
        let mut grad = Conv1d::zeros(3, 2, 3);
        let dx = c.backward(x.view(), dy.view(), &mut grad);
        let h = 1e-6;
        for idx in 0..c.weight.len() {
            let mut cp = c.clone();
            cp.weight.as_slice_mut().unwrap()[idx] += h;
            let mut cm = c.clone();
            cm.weight.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - grad.weight.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&c, &xp) - loss(&c, &xm)) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
        assert_eq!(grad.bias, dy.sum_axis(Axis(0)));
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!(softplus(800.0).is_finite());
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = orthogonal(&mut rng, 6);
        let qtq = q.t().dot(&q);
        for ((i, j), v) in qtq.indexed_iter() {
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn relu_backward_masks() {
        let pre = array![[-1.0, 2.0], [0.0, 3.0]];
        let dy = array![[5.0, 5.0], [5.0, 5.0]];
        assert_eq!(relu_backward(&pre, &dy), array![[0.0, 5.0], [0.0, 5.0]]);
        assert_eq!(relu(&pre), array![[0.0, 2.0], [0.0, 3.0]]);
    }
}
