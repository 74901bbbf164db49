//! Friedkin-Johnsen machinery.
//!
//! The expected Human Factor for variable `i` at step `t` (0-based, `t >= 1`)
//! combines three terms:
//!
//! ```text
//! social(i,t) = beta  * sum_j w[i][j] * (lambda * R[j][t-1] + (1 - lambda) * Hhat[j][t-1])
//! memory(i,t) = delta * (lambda * R[i][t-1] + (1 - lambda) * Hhat[i][t-1])
//! bias(i,t)   = (1 - beta - delta) * B[i][t]
//! ```
//!
//! where `B[i][t]` is the mean of `R[i][tau]` over `tau in max(0, t-W)..t`.
//! The reference DeGroot and FJ opinion simulators live here too; they are
//! used as test oracles and to generate planted synthetic data.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HintsError, Result};
use crate::series::MultivariateSeries;

/// Correlation-based influence weights `w[i][j]` (influence of `j` on `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    w: Array2<f64>,
    zero_rows: Vec<usize>,
}

impl InfluenceMatrix {
    /// Validates zero diagonal, nonnegativity and row sums of 1 (or 0).
    pub fn new(w: Array2<f64>) -> Result<Self> {
        let (r, c) = w.dim();
        if r != c || r == 0 {
            return Err(HintsError::shape("square non-empty matrix", format!("{r}x{c}")));
        }
        let mut zero_rows = Vec::new();
        for (i, row) in w.rows().into_iter().enumerate() {
            if row[i] != 0.0 || row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(HintsError::InvalidArgument(format!(
                    "influence row {i} must be nonnegative with zero diagonal"
                )));
            }
            let s = row.sum();
            if s == 0.0 {
                zero_rows.push(i);
            } else if (s - 1.0).abs() > 1e-9 {
                return Err(HintsError::InvalidArgument(format!("influence row {i} sums to {s}")));
            }
        }
        Ok(Self { w, zero_rows })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// Rows left all-zero because the variable had no correlated peers.
    pub fn zero_rows(&self) -> &[usize] {
        &self.zero_rows
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("var");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, row) in self.w.rows().into_iter().enumerate() {
            out.push_str(names.get(i).map(String::as_str).unwrap_or("?"));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        std::fs::write(path, self.to_csv(names)).map_err(|e| HintsError::io(path, e))
    }
}

/// `|pearson(R_i, R_j)|` off the diagonal, each row normalized to sum 1.
pub fn build_influence_matrix(residuals: ArrayView2<'_, f64>) -> Result<InfluenceMatrix> {
    let (d, t) = residuals.dim();
    if t < 3 {
        return Err(HintsError::InvalidArgument(format!(
            "need at least 3 steps to estimate correlations, got {t}"
        )));
    }
    let n = t as f64;
    let mut centered = residuals.to_owned();
    let mut norms = Vec::with_capacity(d);
    for (i, mut row) in centered.rows_mut().into_iter().enumerate() {
        let m = row.sum() / n;
        row.mapv_inplace(|v| v - m);
        let ss = row.dot(&row);
        if ss <= 0.0 || !ss.is_finite() || ss.sqrt() <= 1e-12 * m.abs() {
            return Err(HintsError::DegenerateVariable(i));
        }
        norms.push(ss.sqrt());
    }
    let mut w = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let r = centered.row(i).dot(&centered.row(j)) / (norms[i] * norms[j]);
                w[[i, j]] = r.abs().min(1.0);
            }
        }
    }
    for mut row in w.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    InfluenceMatrix::new(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FjConfig {
    pub beta: f64,
    pub delta: f64,
    pub lambda: f64,
    pub bias_window: usize,
}

impl Default for FjConfig {
    fn default() -> Self {
        Self {
            beta: 0.4,
            delta: 0.4,
            lambda: 0.5,
            bias_window: 24,
        }
    }
}

impl FjConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("delta", self.delta), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(HintsError::Usage {
                    key: name.into(),
                    message: format!("must lie in [0, 1], got {v}"),
                });
            }
        }
        if self.beta + self.delta > 1.0 + 1e-12 {
            return Err(HintsError::ConfigConflict {
                first: format!("beta={}", self.beta),
                second: format!("delta={}", self.delta),
                message: "beta + delta must be <= 1".into(),
            });
        }
        if self.bias_window == 0 {
            return Err(HintsError::Usage {
                key: "bias_window".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Coefficient of the Dynamic Bias term.
    pub fn bias_coef(&self) -> f64 {
        (1.0 - self.beta - self.delta).max(0.0)
    }
}

/// Rolling mean of `residuals[i][tau]` for `tau in max(0, t - window)..t`.
///
/// Panics if `t == 0` (no past residuals).
pub fn rolling_bias(residuals: ArrayView2<'_, f64>, window: usize, t: usize) -> Array1<f64> {
    assert!(t >= 1 && t <= residuals.ncols(), "rolling_bias needs 1 <= t <= T");
    let lo = t.saturating_sub(window);
    let count = (t - lo) as f64;
    residuals
        .rows()
        .into_iter()
        .map(|row| {
            let mut s = 0.0;
            for tau in lo..t {
                s += row[tau];
            }
            s / count
        })
        .collect()
}

/// The three additive contributions to the expected Human Factor at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FjTerms {
    pub social: Array1<f64>,
    pub memory: Array1<f64>,
    pub bias: Array1<f64>,
}

impl FjTerms {
    pub fn total(&self) -> Array1<f64> {
        &self.social + &self.memory + &self.bias
    }
}

fn check_shapes(r: ArrayView2<'_, f64>, hhat: ArrayView2<'_, f64>, w: &InfluenceMatrix) -> Result<()> {
    if r.dim() != hhat.dim() {
        return Err(HintsError::shape(format!("{:?}", r.dim()), format!("{:?}", hhat.dim())));
    }
    if w.dim() != r.nrows() {
        return Err(HintsError::shape(
            format!("{} variables", r.nrows()),
            format!("{}x{} influence matrix", w.dim(), w.dim()),
        ));
    }
    Ok(())
}

pub fn fj_terms(
    r: ArrayView2<'_, f64>,
    hhat: ArrayView2<'_, f64>,
    w: &InfluenceMatrix,
    cfg: &FjConfig,
    t: usize,
) -> Result<FjTerms> {
    check_shapes(r, hhat, w)?;
    if t == 0 || t >= r.ncols() {
        return Err(HintsError::InvalidArgument(format!(
            "step {t} outside 1..{}",
            r.ncols()
        )));
    }
    let lam = cfg.lambda;
    let mixed: Array1<f64> = r
        .column(t - 1)
        .iter()
        .zip(hhat.column(t - 1))
        .map(|(rv, hv)| lam * rv + (1.0 - lam) * hv)
        .collect();
    let social = w.weights().dot(&mixed) * cfg.beta;
    let memory = &mixed * cfg.delta;
    let bias = rolling_bias(r, cfg.bias_window, t) * cfg.bias_coef();
    Ok(FjTerms {
        social,
        memory,
        bias,
    })
}

pub fn expected_human_factor(
    r: ArrayView2<'_, f64>,
    hhat: ArrayView2<'_, f64>,
    w: &InfluenceMatrix,
    cfg: &FjConfig,
    t: usize,
) -> Result<Array1<f64>> {
    Ok(fj_terms(r, hhat, w, cfg, t)?.total())
}

/// Expected Human Factor for every step `1..T`; column 0 is left at zero.
pub fn expected_trajectory(
    r: ArrayView2<'_, f64>,
    hhat: ArrayView2<'_, f64>,
    w: &InfluenceMatrix,
    cfg: &FjConfig,
) -> Result<Array2<f64>> {
    check_shapes(r, hhat, w)?;
    let (d, n) = r.dim();
    let mut out = Array2::zeros((d, n));
    for t in 1..n {
        out.column_mut(t).assign(&expected_human_factor(r, hhat, w, cfg, t)?);
    }
    Ok(out)
}

/// State of the N-agent opinion simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionState {
    pub z: Array1<f64>,
    pub s: Array1<f64>,
    pub lam: Array1<f64>,
    pub w_sim: Array2<f64>,
}

fn check_row_stochastic(w: &Array2<f64>) -> Result<()> {
    let (r, c) = w.dim();
    if r != c {
        return Err(HintsError::shape("square matrix", format!("{r}x{c}")));
    }
    for (i, row) in w.rows().into_iter().enumerate() {
        if row.iter().any(|v| *v < 0.0) || (row.sum() - 1.0).abs() > 1e-9 {
            return Err(HintsError::InvalidArgument(format!("row {i} is not stochastic")));
        }
    }
    Ok(())
}

impl OpinionState {
    pub fn validate(&self) -> Result<()> {
        check_row_stochastic(&self.w_sim)?;
        let n = self.w_sim.nrows();
        if self.z.len() != n || self.s.len() != n || self.lam.len() != n {
            return Err(HintsError::shape(format!("{n} agents"), "inconsistent vector lengths"));
        }
        if self.lam.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(HintsError::InvalidArgument("susceptibilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Iterates `z(t+1) = lam * (W z(t)) + (1 - lam) * s`; column `k` of the
/// result is the state after `k + 1` updates.
pub fn simulate_fj(state: &OpinionState, steps: usize) -> Result<Array2<f64>> {
    state.validate()?;
    let n = state.z.len();
    let mut traj = Array2::zeros((n, steps));
    let mut z = state.z.clone();
    let stubborn = state.s.iter().zip(&state.lam).map(|(s, l)| (1.0 - l) * s).collect::<Array1<f64>>();
    for k in 0..steps {
        z = &(state.w_sim.dot(&z) * &state.lam) + &stubborn;
        traj.column_mut(k).assign(&z);
    }
    Ok(traj)
}

/// Iterates `x(t+1) = W x(t)`; column `k` is the state after `k + 1` updates.
pub fn simulate_degroot(z0: ArrayView1<'_, f64>, w_sim: &Array2<f64>, steps: usize) -> Result<Array2<f64>> {
    check_row_stochastic(w_sim)?;
    if z0.len() != w_sim.nrows() {
        return Err(HintsError::shape(format!("{} agents", w_sim.nrows()), z0.len()));
    }
    let mut traj = Array2::zeros((z0.len(), steps));
    let mut z = z0.to_owned();
    for k in 0..steps {
        z = w_sim.dot(&z);
        traj.column_mut(k).assign(&z);
    }
    Ok(traj)
}

pub fn trajectory_csv(traj: &Array2<f64>) -> String {
    let mut out = String::from("step");
    for i in 0..traj.nrows() {
        let _ = write!(out, ",agent{i}");
    }
    out.push('\n');
    for (k, col) in traj.columns().into_iter().enumerate() {
        let _ = write!(out, "{}", k + 1);
        for v in col {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Settings for [`generate_planted_series`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    /// Dynamics driving the latent factor.
    pub fj: FjConfig,
    /// Standard deviation of the white observation noise.
    pub noise_scale: f64,
    /// Standard deviation of the innovations entering the latent factor.
    pub shock_scale: f64,
    /// Per-step probability of a latent shock (jump) for each variable.
    pub shock_rate: f64,
    pub trend_slope: f64,
    pub seasonal_amplitude: f64,
    pub period: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            fj: FjConfig::default(),
            noise_scale: 0.1,
            shock_scale: 1.0,
            shock_rate: 0.05,
            trend_slope: 0.002,
            seasonal_amplitude: 1.0,
            period: 24,
        }
    }
}

/// Planted series together with every component that built it.
#[derive(Debug, Clone)]
pub struct PlantedSeries {
    pub series: MultivariateSeries,
    pub latent: Array2<f64>,
    pub trend: Array2<f64>,
    pub seasonal: Array2<f64>,
    pub noise: Array2<f64>,
    pub influence: InfluenceMatrix,
}

/// Random zero-diagonal row-stochastic matrix.
pub fn random_influence(d: usize, rng: &mut impl Rng) -> InfluenceMatrix {
    let mut w = Array2::zeros((d, d));
    if d > 1 {
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                if i != j {
                    let v: f64 = rng.random_range(0.1..1.0);
                    w[[i, j]] = v;
                    s += v;
                }
            }
            for j in 0..d {
                w[[i, j]] /= s;
            }
        }
    }
    InfluenceMatrix::new(w).expect("constructed row-stochastic")
}

/// Synthetic series `trend + seasonal + latent + noise`.
///
/// The latent factor follows the expected-Human-Factor recursion with the
/// observed residual `latent + noise` playing the role of `R` and the latent
/// itself playing `Hhat`, driven by sparse Gaussian shocks:
/// `latent[t] = H(t) + shock[t]`. Deterministic for a given seed.
pub fn generate_planted_series(cfg: &PlantedConfig, d: usize, t: usize, seed: u64) -> Result<PlantedSeries> {
    cfg.fj.validate()?;
    if d == 0 || t < 2 || cfg.period == 0 {
        return Err(HintsError::InvalidArgument("planted series needs d >= 1, t >= 2, period >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let influence = random_influence(d, &mut rng);
    let noise_dist = Normal::new(0.0, cfg.noise_scale.max(0.0)).map_err(|e| HintsError::InvalidArgument(e.to_string()))?;
    let shock_dist = Normal::new(0.0, cfg.shock_scale.max(0.0)).map_err(|e| HintsError::InvalidArgument(e.to_string()))?;

    let slopes: Vec<f64> = (0..d).map(|_| cfg.trend_slope * rng.random_range(-1.0..1.0)).collect();
    let offsets: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let phases: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let amps: Vec<f64> = (0..d).map(|_| cfg.seasonal_amplitude * rng.random_range(0.5..1.5)).collect();

    let trend = Array2::from_shape_fn((d, t), |(i, k)| offsets[i] + slopes[i] * k as f64);
    let seasonal = Array2::from_shape_fn((d, t), |(i, k)| {
        amps[i] * (std::f64::consts::TAU * k as f64 / cfg.period as f64 + phases[i]).sin()
    });
    let noise = Array2::from_shape_fn((d, t), |_| if cfg.noise_scale > 0.0 { noise_dist.sample(&mut rng) } else { 0.0 });

    let mut latent = Array2::zeros((d, t));
    let mut observed = Array2::zeros((d, t));
    for i in 0..d {
        latent[[i, 0]] = shock_dist.sample(&mut rng);
        observed[[i, 0]] = latent[[i, 0]] + noise[[i, 0]];
    }
    for k in 1..t {
        let h = expected_human_factor(observed.view(), latent.view(), &influence, &cfg.fj, k)?;
        for i in 0..d {
            let shock = if rng.random::<f64>() < cfg.shock_rate {
                shock_dist.sample(&mut rng)
            } else {
                0.0
            };
            latent[[i, k]] = h[i] + shock;
            observed[[i, k]] = latent[[i, k]] + noise[[i, k]];
        }
    }
    let values = &trend + &seasonal + &latent + &noise;
    let series = MultivariateSeries::from_values(values)?;
    Ok(PlantedSeries {
        series,
        latent,
        trend,
        seasonal,
        noise,
        influence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rand_matrix(d: usize, t: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((d, t), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn perfect_correlation_pair() {
        let r1: Vec<f64> = vec![0.3, -1.0, 2.0, 0.5, 0.1];
        let mut r = Array2::zeros((2, 5));
        for (k, v) in r1.iter().enumerate() {
            r[[0, k]] = *v;
            r[[1, k]] = 2.0 * v;
        }
        let w = build_influence_matrix(r.view()).unwrap();
        let expected = array![[0.0, 1.0], [1.0, 0.0]];
        for (a, b) in w.weights().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn influence_matches_naive_pairwise() {
        let r = rand_matrix(3, 40, 9);
        let w = build_influence_matrix(r.view()).unwrap();
        let n = 40.0;
        let mut naive = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let (mut mi, mut mj) = (0.0, 0.0);
                for k in 0..40 {
                    mi += r[[i, k]];
                    mj += r[[j, k]];
                }
                mi /= n;
                mj /= n;
                let (mut sij, mut sii, mut sjj) = (0.0, 0.0, 0.0);
                for k in 0..40 {
                    sij += (r[[i, k]] - mi) * (r[[j, k]] - mj);
                    sii += (r[[i, k]] - mi).powi(2);
                    sjj += (r[[j, k]] - mj).powi(2);
                }
                naive[i][j] = (sij / (sii * sjj).sqrt()).abs();
            }
            let s: f64 = naive[i].iter().sum();
            for v in naive[i].iter_mut() {
                *v /= s;
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((w.weights()[[i, j]] - naive[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singleton_influence_is_zero_row() {
        let r = array![[1.0, 2.0, 0.5, 3.0]];
        let w = build_influence_matrix(r.view()).unwrap();
        assert_eq!(w.weights(), &array![[0.0]]);
        assert_eq!(w.zero_rows(), &[0]);
    }

    #[test]
    fn degenerate_residual_rejected() {
        let r = array![[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]];
        assert!(matches!(build_influence_matrix(r.view()), Err(HintsError::DegenerateVariable(1))));
    }

    #[test]
    fn rolling_bias_cases() {
        let r = array![[1.0, 2.0, 3.0, 4.0]];
        assert_eq!(rolling_bias(r.view(), 3, 3)[0], 2.0);
        let c = Array2::from_elem((2, 10), 0.7);
        for t in 1..10 {
            for v in rolling_bias(c.view(), 4, t).iter() {
                assert!((v - 0.7).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rolling_bias_matches_naive_resummation() {
        let r = rand_matrix(3, 120, 4);
        for t in 1..120 {
            let b = rolling_bias(r.view(), 24, t);
            for i in 0..3 {
                let lo = if t > 24 { t - 24 } else { 0 };
                let mut s = 0.0;
                let mut c = 0;
                let mut tau = lo;
                while tau < t {
                    s += r[[i, tau]];
                    c += 1;
                    tau += 1;
                }
                assert!((b[i] - s / c as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expected_factor_zero_fixed_point_and_lag_copy() {
        let z = Array2::zeros((3, 8));
        let w = build_influence_matrix(rand_matrix(3, 8, 1).view()).unwrap();
        let h = expected_trajectory(z.view(), z.view(), &w, &FjConfig::default()).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));

        let r = rand_matrix(3, 8, 2);
        let hh = rand_matrix(3, 8, 3);
        let cfg = FjConfig {
            beta: 0.0,
            delta: 1.0,
            lambda: 1.0,
            bias_window: 3,
        };
        for t in 1..8 {
            let e = expected_human_factor(r.view(), hh.view(), &w, &cfg, t).unwrap();
            for i in 0..3 {
                assert_eq!(e[i], r[[i, t - 1]]);
            }
        }
    }

    #[test]
    fn fj_config_rejects_overweight() {
        let cfg = FjConfig {
            beta: 0.7,
            delta: 0.5,
            ..FjConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(HintsError::ConfigConflict { .. })));
    }

    #[test]
    fn stubborn_agents_stay_put() {
        let state = OpinionState {
            z: array![5.0, -3.0, 1.0],
            s: array![0.2, 0.4, 0.9],
            lam: Array1::zeros(3),
            w_sim: Array2::from_elem((3, 3), 1.0 / 3.0),
        };
        let traj = simulate_fj(&state, 10).unwrap();
        for col in traj.columns() {
            assert_eq!(col, state.s);
        }
    }

    #[test]
    fn two_agent_fixed_point() {
        let state = OpinionState {
            z: array![0.0, 0.0],
            s: array![0.0, 1.0],
            lam: array![0.5, 0.5],
            w_sim: array![[0.0, 1.0], [1.0, 0.0]],
        };
        let traj = simulate_fj(&state, 200).unwrap();
        // (I - L W) z = (I - L) s with L = diag(0.5, 0.5):
        // [[1, -0.5], [-0.5, 1]] z = [0, 0.5]
        let (a, b, c, dd) = (1.0, -0.5, -0.5, 1.0);
        let (r0, r1) = (0.0, 0.5);
        let det = a * dd - b * c;
        let z0 = (dd * r0 - b * r1) / det;
        let z1 = (a * r1 - c * r0) / det;
        assert!((traj[[0, 199]] - z0).abs() < 1e-8);
        assert!((traj[[1, 199]] - z1).abs() < 1e-8);
    }

    #[test]
    fn degroot_consensus_and_constant() {
        let w = array![[0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [0.3, 0.3, 0.4]];
        let c = simulate_degroot(array![2.0, 2.0, 2.0].view(), &w, 20).unwrap();
        assert!(c.iter().all(|v| (v - 2.0).abs() < 1e-14));
        let traj = simulate_degroot(array![1.0, -4.0, 9.0].view(), &w, 400).unwrap();
        let last = traj.column(399);
        assert!((last[0] - last[1]).abs() < 1e-6 && (last[1] - last[2]).abs() < 1e-6);
    }

    #[test]
    fn fj_reduces_to_degroot() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_influence(4, &mut rng).weights().clone();
        let z0: Array1<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let state = OpinionState {
            z: z0.clone(),
            s: Array1::from_elem(4, 7.0),
            lam: Array1::ones(4),
            w_sim: w.clone(),
        };
        let fj = simulate_fj(&state, 50).unwrap();
        let dg = simulate_degroot(z0.view(), &w, 50).unwrap();
        for (a, b) in fj.iter().zip(dg.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degroot_matches_naive_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_influence(3, &mut rng).weights().clone();
        let z0 = [0.3, -0.8, 1.7];
        let traj = simulate_degroot(ArrayView1::from(&z0), &w, 50).unwrap();
        let mut z = z0;
        for k in 0..50 {
            let mut next = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    next[i] += w[[i, j]] * z[j];
                }
            }
            z = next;
            for i in 0..3 {
                assert!((traj[[i, k]] - z[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn planted_series_is_deterministic() {
        let cfg = PlantedConfig::default();
        let a = generate_planted_series(&cfg, 3, 300, 7).unwrap();
        let b = generate_planted_series(&cfg, 3, 300, 7).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.latent, b.latent);
        let c = generate_planted_series(&cfg, 3, 300, 8).unwrap();
        assert_ne!(a.series, c.series);
    }

    #[test]
    fn planted_noiseless_components_add_up() {
        let cfg = PlantedConfig {
            noise_scale: 0.0,
            ..PlantedConfig::default()
        };
        let p = generate_planted_series(&cfg, 3, 400, 1).unwrap();
        let recovered = p.series.values() - &p.trend - &p.seasonal;
        for (a, b) in recovered.iter().zip(p.latent.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    fn lag1(x: ArrayView1<'_, f64>) -> f64 {
        let n = x.len();
        let m = x.sum() / n as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..n {
            den += (x[k] - m).powi(2);
            if k + 1 < n {
                num += (x[k] - m) * (x[k + 1] - m);
            }
        }
        num / den
    }

    #[test]
    fn planted_latent_more_autocorrelated_than_noise() {
        let p = generate_planted_series(&PlantedConfig::default(), 4, 1000, 3).unwrap();
        for i in 0..4 {
            assert!(lag1(p.latent.row(i)) > lag1(p.noise.row(i)));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn linear_in_inputs(seed in 0u64..500, c in -5.0f64..5.0, t in 1usize..10) {
                let r = rand_matrix(3, 10, seed);
                let hh = rand_matrix(3, 10, seed + 1000);
                let w = build_influence_matrix(rand_matrix(3, 10, seed + 2000).view()).unwrap();
                let cfg = FjConfig { beta: 0.3, delta: 0.5, lambda: 0.25, bias_window: 3 };
                let base = expected_human_factor(r.view(), hh.view(), &w, &cfg, t).unwrap();
                let scaled = expected_human_factor((&r * c).view(), (&hh * c).view(), &w, &cfg, t).unwrap();
                for (a, b) in base.iter().zip(scaled.iter()) {
                    prop_assert!((a * c - b).abs() < 1e-12 * (1.0 + b.abs()));
                }
            }

            #[test]
            fn terms_partition_total(seed in 0u64..500, beta in 0.0f64..0.5, delta in 0.0f64..0.5, lambda in 0.0f64..1.0, t in 1usize..12) {
                let r = rand_matrix(4, 12, seed);
                let hh = rand_matrix(4, 12, seed + 7);
                let w = build_influence_matrix(rand_matrix(4, 12, seed + 9).view()).unwrap();
                let cfg = FjConfig { beta, delta, lambda, bias_window: 5 };
                let terms = fj_terms(r.view(), hh.view(), &w, &cfg, t).unwrap();
                let full = expected_human_factor(r.view(), hh.view(), &w, &cfg, t).unwrap();
                for i in 0..4 {
                    prop_assert!((terms.social[i] + terms.memory[i] + terms.bias[i] - full[i]).abs() < 1e-12);
                }
            }

            #[test]
            fn influence_permutation_equivariant(seed in 0u64..500) {
                let r = rand_matrix(4, 30, seed);
                let perm = [2usize, 0, 3, 1];
                let mut rp = Array2::zeros((4, 30));
                for (new, &old) in perm.iter().enumerate() {
                    rp.row_mut(new).assign(&r.row(old));
                }
                let w = build_influence_matrix(r.view()).unwrap();
                let wp = build_influence_matrix(rp.view()).unwrap();
                for a in 0..4 {
                    for b in 0..4 {
                        prop_assert!((wp.weights()[[a, b]] - w.weights()[[perm[a], perm[b]]]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
