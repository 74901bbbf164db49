//! Differentiable building blocks with explicit backward passes.
//!
//! Layout conventions: the affine map takes columns as samples
//! (`x: [in][n] -> [out][n]`); sequence blocks take one row per sequence
//! (`x: [rows][T]`).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{ParamBuilder, ParamModule};
use crate::error::{HintsError, Result};

fn expect_dim(what: &str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(HintsError::shape(
            format!("{what} {}x{}", expected.0, expected.1),
            format!("{}x{}", found.0, found.1),
        ));
    }
    Ok(())
}

/// `y = W x + b` with `W: [out][in]`, `x: [in][n]`.
pub fn affine_forward(
    w: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
    x: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if x.nrows() != w.ncols() || b.len() != w.nrows() {
        return Err(HintsError::shape(
            format!("input with {} rows", w.ncols()),
            format!("{} rows", x.nrows()),
        ));
    }
    let mut y = w.dot(&x);
    y += &b.insert_axis(Axis(1));
    Ok(y)
}

pub struct AffineGrads {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
    pub dx: Array2<f64>,
}

pub fn affine_backward(
    w: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
) -> AffineGrads {
    AffineGrads {
        dw: dy.dot(&x.t()),
        db: dy.sum_axis(Axis(1)),
        dx: w.t().dot(&dy),
    }
}

/// Named affine layer inside a [`ParamModule`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Affine {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, b: ParamBuilder, rng: &mut impl Rng) -> ParamBuilder {
        b.uniform(&self.weight, &[self.out_dim, self.in_dim], self.in_dim, rng)
            .zeros(&self.bias, &[self.out_dim])
    }

    pub fn forward(&self, p: &ParamModule, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        affine_forward(p.view2(&self.weight), p.view1(&self.bias), x)
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    pub fn backward(
        &self,
        p: &ParamModule,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let g = affine_backward(p.view2(&self.weight), x, dy);
        p.grad_view2(grads, &self.weight).scaled_add(1.0, &g.dw);
        p.grad_view1(grads, &self.bias).scaled_add(1.0, &g.db);
        g.dx
    }
}

/// Same-padded 1-D cross-correlation over each row of `x`. Row `r` uses
/// kernel row `r % kernels.nrows()`, so a single kernel row is shared by all
/// rows and `C` rows give depthwise kernels for row-major `(sample, channel)`
/// stacking.
pub fn conv1d_forward(
    x: ArrayView2<'_, f64>,
    kernels: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    let (rows, t) = x.dim();
    let (c, k) = kernels.dim();
    if k % 2 == 0 {
        return Err(HintsError::InvalidArgument(format!("kernel size must be odd, got {k}")));
    }
    if bias.len() != c || c == 0 || rows % c != 0 {
        return Err(HintsError::shape(
            format!("rows divisible by {c} kernel channels"),
            format!("{rows} rows"),
        ));
    }
    let pad = (k - 1) / 2;
    let mut y = Array2::zeros((rows, t));
    for r in 0..rows {
        let ch = r % c;
        let kr = kernels.row(ch);
        let xr = x.row(r);
        let mut yr = y.row_mut(r);
        for s in 0..t {
            let mut acc = bias[ch];
            for j in 0..k {
                let idx = s as isize + j as isize - pad as isize;
                if idx >= 0 && (idx as usize) < t {
                    acc += kr[j] * xr[idx as usize];
                }
            }
            yr[s] = acc;
        }
    }
    Ok(y)
}

pub struct ConvGrads {
    pub dk: Array2<f64>,
    pub db: Array1<f64>,
    pub dx: Array2<f64>,
}

pub fn conv1d_backward(
    x: ArrayView2<'_, f64>,
    kernels: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
) -> ConvGrads {
    let (rows, t) = x.dim();
    let (c, k) = kernels.dim();
    let pad = (k - 1) / 2;
    let mut dk = Array2::zeros((c, k));
    let mut db = Array1::zeros(c);
    let mut dx = Array2::zeros((rows, t));
    for r in 0..rows {
        let ch = r % c;
        for s in 0..t {
            let g = dy[[r, s]];
            db[ch] += g;
            for j in 0..k {
                let idx = s as isize + j as isize - pad as isize;
                if idx >= 0 && (idx as usize) < t {
                    let i = idx as usize;
                    dk[[ch, j]] += g * x[[r, i]];
                    dx[[r, i]] += g * kernels[[ch, j]];
                }
            }
        }
    }
    ConvGrads { dk, db, dx }
}

/// Named depthwise (or shared) convolution inside a [`ParamModule`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv1d {
    pub kernel: String,
    pub bias: String,
    pub channels: usize,
    pub size: usize,
}

impl Conv1d {
    pub fn new(prefix: &str, channels: usize, size: usize) -> Self {
        Self {
            kernel: format!("{prefix}.kernel"),
            bias: format!("{prefix}.bias"),
            channels,
            size,
        }
    }

    pub fn init(&self, b: ParamBuilder, rng: &mut impl Rng) -> ParamBuilder {
        b.uniform(&self.kernel, &[self.channels, self.size], self.size, rng)
            .zeros(&self.bias, &[self.channels])
    }

    pub fn forward(&self, p: &ParamModule, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        conv1d_forward(x, p.view2(&self.kernel), p.view1(&self.bias))
    }

    pub fn backward(
        &self,
        p: &ParamModule,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let g = conv1d_backward(x, p.view2(&self.kernel), dy);
        p.grad_view2(grads, &self.kernel).scaled_add(1.0, &g.dk);
        p.grad_view1(grads, &self.bias).scaled_add(1.0, &g.db);
        g.dx
    }
}

pub fn tanh_forward(x: ArrayView2<'_, f64>) -> Array2<f64> {
    x.mapv(f64::tanh)
}

/// Backward through tanh given its output `y`.
pub fn tanh_backward(y: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(&y).for_each(|g, &v| *g *= 1.0 - v * v);
    dx
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

/// Backward through row-wise softmax given its output `y`.
pub fn softmax_rows_backward(y: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.dim());
    for ((yr, gr), mut out) in y.rows().into_iter().zip(dy.rows()).zip(dx.rows_mut()) {
        let dot = yr.dot(&gr);
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    dx
}

/// Mean of squared differences.
pub fn mse(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    expect_dim("target", pred.dim(), target.dim())?;
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        acc += (p - t) * (p - t);
    }
    Ok(acc / n)
}

pub fn mse_backward(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = pred.len() as f64;
    (&pred - &target) * (2.0 / n)
}

pub fn mae(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    expect_dim("target", pred.dim(), target.dim())?;
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        acc += (p - t).abs();
    }
    Ok(acc / n)
}

/// `[len][len]` matrix of a width-`width` moving average with edge
/// replication (the first and last values repeated `(width-1)/2` times).
pub fn replicate_ma_matrix(len: usize, width: usize) -> Result<Array2<f64>> {
    if width == 0 || width % 2 == 0 {
        return Err(HintsError::InvalidArgument(format!(
            "moving-average width must be odd, got {width}"
        )));
    }
    let pad = (width - 1) / 2;
    let mut m = Array2::zeros((len, len));
    let inv = 1.0 / width as f64;
    for t in 0..len {
        for i in t..t + width {
            let src = (i as isize - pad as isize).clamp(0, len as isize - 1) as usize;
            m[[t, src]] += inv;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::super::grad_check;
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_m(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn affine_identity_and_literal() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let id = Array2::eye(2);
        let y = affine_forward(id.view(), Array1::zeros(2).view(), x.view()).unwrap();
        assert_eq!(y, x);
        let w = array![[1.0, 2.0], [3.0, 4.0]];
        let y = affine_forward(w.view(), array![0.5, -1.0].view(), array![[1.0], [1.0]].view()).unwrap();
        assert_eq!(y, array![[3.5], [6.0]]);
        assert!(affine_forward(w.view(), array![0.0, 0.0].view(), Array2::zeros((3, 1)).view()).is_err());
    }

    #[test]
    fn affine_sum_of_squares_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = Affine::new("fc", 4, 3);
        let m = layer.init(ParamModule::builder(), &mut rng).build();
        let mut m = m;
        for v in m.params_mut().iter_mut().skip(12) {
            *v = 0.3;
        }
        let x = rand_m(4, 5, &mut rng);
        let report = grad_check(
            &m,
            |p| {
                let y = layer.forward(p, x.view()).unwrap();
                let loss = y.iter().map(|v| v * v).sum::<f64>();
                let mut g = p.zero_grads();
                layer.backward(p, x.view(), (&y * 2.0).view(), &mut g);
                (loss, g)
            },
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn conv_delta_and_average_kernels() {
        let x = array![[1.0, -2.0, 3.0, 0.5]];
        let y = conv1d_forward(x.view(), array![[0.0, 1.0, 0.0]].view(), array![0.0].view()).unwrap();
        assert_eq!(y, x);
        let c = Array2::from_elem((1, 6), 3.0);
        let k = Array2::from_elem((1, 3), 1.0 / 3.0);
        let y = conv1d_forward(c.view(), k.view(), array![0.0].view()).unwrap();
        for t in 1..5 {
            assert!((y[[0, t]] - 3.0).abs() < 1e-15);
        }
        assert!((y[[0, 0]] - 2.0).abs() < 1e-15);
        assert!((y[[0, 5]] - 2.0).abs() < 1e-15);
        assert!(conv1d_forward(c.view(), Array2::zeros((1, 2)).view(), array![0.0].view()).is_err());
    }

    #[test]
    fn conv_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv1d::new("conv", 2, 5);
        let mut m = conv.init(ParamModule::builder(), &mut rng).build();
        let n = m.len();
        m.params_mut()[n - 2] = 0.1;
        m.params_mut()[n - 1] = -0.2;
        let x = rand_m(6, 9, &mut rng);
        let target = rand_m(6, 9, &mut rng);
        let report = grad_check(
            &m,
            |p| {
                let y = conv.forward(p, x.view()).unwrap();
                let loss = mse(y.view(), target.view()).unwrap();
                let mut g = p.zero_grads();
                conv.backward(p, x.view(), mse_backward(y.view(), target.view()).view(), &mut g);
                (loss, g)
            },
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn softmax_properties() {
        let y = softmax_rows(Array2::from_elem((2, 4), 1.7).view());
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let y = softmax_rows(array![[100.0, 0.0, 0.0, 0.0]].view());
        assert!((y[[0, 0]] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn softmax_jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_m(1, 7, &mut rng);
        let v = rand_m(1, 7, &mut rng);
        let cot = rand_m(1, 7, &mut rng);
        // <cot, J v> via the backward pass equals <J^T cot, v>.
        let y = softmax_rows(x.view());
        let jt_cot = softmax_rows_backward(y.view(), cot.view());
        let analytic: f64 = (&jt_cot * &v).sum();
        let eps = 1e-5;
        let up = softmax_rows((&x + &(&v * eps)).view());
        let down = softmax_rows((&x - &(&v * eps)).view());
        let numeric: f64 = (&((&up - &down) / (2.0 * eps)) * &cot).sum();
        assert!(super::super::relative_error(analytic, numeric) < 1e-4);
    }

    #[test]
    fn mse_cases() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mse(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(mse((&a + 1.0).view(), a.view()).unwrap(), 1.0);
        assert!(mse(a.view(), Array2::zeros((1, 2)).view()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_m(3, 4, &mut rng);
        let t = rand_m(3, 4, &mut rng);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                acc += (p[[i, j]] - t[[i, j]]).powi(2);
            }
        }
        assert!((mse(p.view(), t.view()).unwrap() - acc / 12.0).abs() < 1e-12);
    }

    #[test]
    fn replicate_ma_rows_sum_to_one() {
        let m = replicate_ma_matrix(10, 5).unwrap();
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let x = Array1::from_elem(10, 2.5);
        assert!(m.dot(&x).iter().all(|v| (v - 2.5).abs() < 1e-12));
        // replicated edges: first output averages x0 three times with x1, x2
        assert!((m[[0, 0]] - 3.0 / 5.0).abs() < 1e-15);
        assert_eq!(replicate_ma_matrix(4, 1).unwrap(), Array2::<f64>::eye(4));
        assert!(replicate_ma_matrix(4, 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tanh_bounded_softmax_stochastic(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
                let x = Array2::from_shape_vec((3, 4), vals).unwrap();
                let t = tanh_forward(x.view());
                prop_assert!(t.iter().all(|v| *v >= -1.0 && *v <= 1.0));
                let s = softmax_rows(x.view());
                for row in s.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|v| *v >= 0.0));
                }
            }

            #[test]
            fn forward_is_pure(seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let conv = Conv1d::new("c", 1, 3);
                let m = conv.init(ParamModule::builder(), &mut rng).build();
                let x = rand_m(2, 8, &mut rng);
                let a = conv.forward(&m, x.view()).unwrap();
                let b = conv.forward(&m, x.view()).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
