//! Minimal differentiable substrate.
//!
//! Each model is a hand-wired graph of the blocks in [`blocks`]; parameters
//! live in a flat [`ParamModule`] and gradients in a `Vec<f64>` aligned
//! with it. There is no tape: every model writes its own backward pass.

pub mod blocks;
pub mod checkpoint;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HintsError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors packed into one flat parameter vector. The layout is fixed
/// at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamModule {
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl ParamBuilder {
    pub fn tensor(mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "tensor `{name}` value count");
        assert!(self.specs.iter().all(|s| s.name != name), "duplicate tensor `{name}`");
        self.specs.push(TensorSpec {
            name: name.to_owned(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        self.data.extend(values);
        self
    }

    pub fn zeros(self, name: &str, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        self.tensor(name, shape, vec![0.0; n])
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.tensor(name, shape, values)
    }

    pub fn build(self) -> ParamModule {
        ParamModule {
            specs: self.specs,
            data: self.data,
        }
    }
}

impl ParamModule {
    pub fn builder() -> ParamBuilder {
        ParamBuilder::default()
    }

    pub fn from_parts(specs: Vec<TensorSpec>, data: Vec<f64>) -> Result<Self> {
        let mut offset = 0;
        for s in &specs {
            if s.offset != offset {
                return Err(HintsError::CorruptCheckpoint(format!("tensor `{}` misaligned", s.name)));
            }
            offset += s.numel();
        }
        if offset != data.len() {
            return Err(HintsError::CorruptCheckpoint(format!(
                "expected {offset} parameters, found {}",
                data.len()
            )));
        }
        Ok(Self { specs, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no tensor named `{name}`"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.specs.iter().any(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let s = self.spec(name);
        &self.data[s.offset..s.offset + s.numel()]
    }

    pub fn view1(&self, name: &str) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(name))
    }

    pub fn view2(&self, name: &str) -> ArrayView2<'_, f64> {
        let s = self.spec(name);
        assert_eq!(s.shape.len(), 2, "tensor `{name}` is not 2-D");
        ArrayView2::from_shape((s.shape[0], s.shape[1]), self.slice(name)).expect("shape matches numel")
    }

    pub fn grad_slice<'g>(&self, grads: &'g mut [f64], name: &str) -> &'g mut [f64] {
        let s = self.spec(name);
        &mut grads[s.offset..s.offset + s.numel()]
    }

    pub fn grad_view1<'g>(&self, grads: &'g mut [f64], name: &str) -> ArrayViewMut1<'g, f64> {
        ArrayViewMut1::from(self.grad_slice(grads, name))
    }

    pub fn grad_view2<'g>(&self, grads: &'g mut [f64], name: &str) -> ArrayViewMut2<'g, f64> {
        let s = self.spec(name).clone();
        ArrayViewMut2::from_shape((s.shape[0], s.shape[1]), self.grad_slice(grads, name))
            .expect("shape matches numel")
    }

    /// SHA-256 over names, shapes and little-endian parameter bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.specs {
            h.update((s.name.len() as u64).to_le_bytes());
            h.update(s.name.as_bytes());
            for d in &s.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Plain SGD with optional heavy-ball momentum:
/// `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(HintsError::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(HintsError::InvalidArgument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, module: &mut ParamModule, grads: &[f64]) {
        assert_eq!(grads.len(), module.len(), "gradient length");
        if self.velocity.len() != grads.len() {
            self.velocity = vec![0.0; grads.len()];
        }
        for ((p, g), v) in module.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `loss` against central
/// differences taken on each parameter in turn.
pub fn grad_check<F>(module: &ParamModule, loss: F, step: f64) -> GradReport
where
    F: Fn(&ParamModule) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss(module);
    let mut probe = module.clone();
    let mut numeric = Vec::with_capacity(module.len());
    for k in 0..module.len() {
        let orig = probe.params()[k];
        probe.params_mut()[k] = orig + step;
        let up = loss(&probe).0;
        probe.params_mut()[k] = orig - step;
        let down = loss(&probe).0;
        probe.params_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);
    GradReport {
        analytic,
        numeric,
        max_rel_error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(p: f64) -> ParamModule {
        ParamModule::builder().tensor("p", &[1], vec![p]).build()
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut m = scalar(1.5);
        let mut opt = Sgd::new(0.0, 0.9).unwrap();
        for _ in 0..10 {
            opt.step(&mut m, &[3.0]);
        }
        assert_eq!(m.params(), &[1.5]);
    }

    #[test]
    fn quadratic_converges_and_matches_scalar_loop() {
        let mut m = scalar(0.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        let mut p = 0.0f64;
        for _ in 0..100 {
            let g = 2.0 * (m.params()[0] - 3.0);
            opt.step(&mut m, &[g]);
            p -= 0.1 * 2.0 * (p - 3.0);
            assert!((m.params()[0] - p).abs() < 1e-12);
        }
        assert!((m.params()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn momentum_matches_scalar_loop() {
        let mut m = scalar(0.0);
        let mut opt = Sgd::new(0.05, 0.5).unwrap();
        let (mut p, mut v) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            let g = 2.0 * (m.params()[0] - 3.0);
            opt.step(&mut m, &[g]);
            v = 0.5 * v + 2.0 * (p - 3.0);
            p -= 0.05 * v;
            assert!((m.params()[0] - p).abs() < 1e-12);
        }
        assert!((p - 3.0).abs() < 1e-6);
    }

    #[test]
    fn grad_check_zero_loss_reports_zero() {
        let m = scalar(0.4);
        let r = grad_check(&m, |_| (0.0, vec![0.0]), 1e-5);
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.numeric, vec![0.0]);
    }

    #[test]
    fn hash_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ParamModule::builder().uniform("w", &[2, 3], 3, &mut rng).zeros("b", &[2]).build();
        let mut m2 = m.clone();
        assert_eq!(m.hash(), m2.hash());
        m2.params_mut()[0] += 1e-12;
        assert_ne!(m.hash(), m2.hash());
        assert!(m.params()[..6].iter().all(|v| v.abs() <= 1.0 / 3f64.sqrt()));
    }
}
