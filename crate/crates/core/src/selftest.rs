//! Runtime oracle and invariant checks, run by `hints selftest`.
//!
//! Each check compares the library against an independent computation
//! (scalar loops, closed forms, finite differences) on small seeded inputs.

use std::time::Instant;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::decompose::{decompose_values, DecompositionConfig, DecompositionMode};
use crate::extractor::{ExtractorModel, FjObjective};
use crate::fj::{
    build_influence_matrix, expected_trajectory, random_influence, simulate_degroot, simulate_fj, FjConfig,
    OpinionState,
};
use crate::forecaster::{train_stage2, Stage2Config, Stage2Model};
use crate::grad::blocks::{
    mse, mse_backward, softmax_rows, softmax_rows_backward, tanh_backward, tanh_forward, Affine, Conv1d,
};
use crate::grad::checkpoint::Checkpoint;
use crate::grad::{grad_check, ParamModule};
use crate::harness::improvement_avg;
use crate::series::WindowPair;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn rand_m(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Scalar-loop expected Human Factor for every `t >= 1`.
pub fn naive_expected(r: &Array2<f64>, hhat: &Array2<f64>, w: &Array2<f64>, cfg: &FjConfig) -> Array2<f64> {
    let (d, n) = r.dim();
    let mut out = Array2::zeros((d, n));
    for t in 1..n {
        for i in 0..d {
            let mut social = 0.0;
            for j in 0..d {
                social += w[[i, j]] * (cfg.lambda * r[[j, t - 1]] + (1.0 - cfg.lambda) * hhat[[j, t - 1]]);
            }
            let memory = cfg.lambda * r[[i, t - 1]] + (1.0 - cfg.lambda) * hhat[[i, t - 1]];
            let lo = t.saturating_sub(cfg.bias_window);
            let mut b = 0.0;
            for tau in lo..t {
                b += r[[i, tau]];
            }
            b /= (t - lo) as f64;
            out[[i, t]] = cfg.beta * social + cfg.delta * memory + (1.0 - cfg.beta - cfg.delta) * b;
        }
    }
    out
}

/// Largest deviation between the library and the scalar loop over `trials`
/// random `3 x 10` inputs.
pub fn fj_oracle_error(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rand_m(3, 10, &mut rng);
        let hhat = rand_m(3, 10, &mut rng);
        let w = build_influence_matrix(rand_m(3, 40, &mut rng).view()).expect("random residuals");
        let cfg = FjConfig {
            beta: rng.random_range(0.0..0.5),
            delta: rng.random_range(0.0..0.5),
            lambda: rng.random_range(0.0..1.0),
            bias_window: rng.random_range(1..6),
        };
        let lib = expected_trajectory(r.view(), hhat.view(), &w, &cfg).expect("valid shapes");
        let oracle = naive_expected(&r, &hhat, w.weights(), &cfg);
        for (a, b) in lib.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Errors of the two-agent simulator against its closed-form fixed point
/// and of the `lambda = 1` reduction against a plain DeGroot loop.
pub fn simulator_errors() -> (f64, f64) {
    let s = array![0.3, -1.2];
    let lam = array![0.6, 0.8];
    let w = array![[0.25, 0.75], [0.5, 0.5]];
    let state = OpinionState {
        z: array![2.0, -2.0],
        s: s.clone(),
        lam: lam.clone(),
        w_sim: w.clone(),
    };
    let traj = simulate_fj(&state, 200).expect("valid state");
    // (I - L W) z* = (I - L) s, solved by Cramer's rule
    let a = [
        [1.0 - lam[0] * w[[0, 0]], -lam[0] * w[[0, 1]]],
        [-lam[1] * w[[1, 0]], 1.0 - lam[1] * w[[1, 1]]],
    ];
    let rhs = [(1.0 - lam[0]) * s[0], (1.0 - lam[1]) * s[1]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let z0 = (rhs[0] * a[1][1] - a[0][1] * rhs[1]) / det;
    let z1 = (a[0][0] * rhs[1] - a[1][0] * rhs[0]) / det;
    let fixed = (traj[[0, 199]] - z0).abs().max((traj[[1, 199]] - z1).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let wd = random_influence(4, &mut rng).weights().clone();
    let x0: Array1<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fj = simulate_fj(
        &OpinionState {
            z: x0.clone(),
            s: Array1::from_elem(4, 5.0),
            lam: Array1::ones(4),
            w_sim: wd.clone(),
        },
        60,
    )
    .expect("valid state");
    let dg = simulate_degroot(x0.view(), &wd, 60).expect("stochastic");
    let mut x = x0.to_vec();
    let mut degroot = 0.0f64;
    for k in 0..60 {
        let mut next = vec![0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                next[i] += wd[[i, j]] * x[j];
            }
        }
        x = next;
        for i in 0..4 {
            degroot = degroot.max((fj[[i, k]] - x[i]).abs()).max((dg[[i, k]] - x[i]).abs());
        }
    }
    (fixed, degroot)
}

/// Worst reconstruction error over `trials` random series in both modes and
/// the largest residual of a pure sine in classical mode.
pub fn decomposition_errors(trials: u64) -> (f64, f64) {
    let mut recon = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let period = rng.random_range(2..13);
        let len = rng.random_range(2 * period..2 * period + 120);
        let x = rand_m(2, len, &mut rng) * 10.0;
        for mode in [DecompositionMode::Classical, DecompositionMode::Stl] {
            let dec = decompose_values(x.view(), period, mode).expect("long enough");
            let sum = &dec.trend + &dec.seasonal + &dec.residual;
            for (a, b) in sum.iter().zip(&x) {
                recon = recon.max((a - b).abs());
            }
        }
    }
    let period = 24;
    let sine = Array2::from_shape_fn((1, 10 * period), |(_, k)| {
        (2.0 * std::f64::consts::PI * k as f64 / period as f64).sin()
    });
    let dec = decompose_values(sine.view(), period, DecompositionMode::Classical).expect("long enough");
    let resid = dec.residual.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (recon, resid)
}

type LossFn = Box<dyn Fn(&ParamModule) -> (f64, Vec<f64>)>;

/// A module with an input tensor `x` plus layer parameters and the loss
/// `sum(c * f(x))` whose gradient the block's backward pass produces.
fn block_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, ParamModule, LossFn)> {
    let mut out: Vec<(&'static str, ParamModule, LossFn)> = Vec::new();

    let aff = Affine::new("a", 5, 3);
    let m = aff.init(ParamModule::builder(), rng).tensor("x", &[5, 4], rand_m(5, 4, rng).into_raw_vec_and_offset().0);
    let mut m = m.build();
    for v in m.params_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let c = rand_m(3, 4, rng);
    out.push((
        "affine",
        m,
        Box::new(move |p: &ParamModule| {
            let x = p.view2("x");
            let y = aff.forward(p, x).expect("shapes");
            let mut g = p.zero_grads();
            let dx = aff.backward(p, x, c.view(), &mut g);
            p.grad_view2(&mut g, "x").assign(&dx);
            ((&y * &c).sum(), g)
        }),
    ));

    let conv = Conv1d::new("k", 2, 3);
    let m = conv.init(ParamModule::builder(), rng).tensor("x", &[4, 7], rand_m(4, 7, rng).into_raw_vec_and_offset().0);
    let mut m = m.build();
    for v in m.params_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let c = rand_m(4, 7, rng);
    out.push((
        "conv1d",
        m,
        Box::new(move |p: &ParamModule| {
            let x = p.view2("x");
            let y = conv.forward(p, x).expect("shapes");
            let mut g = p.zero_grads();
            let dx = conv.backward(p, x, c.view(), &mut g);
            p.grad_view2(&mut g, "x").assign(&dx);
            ((&y * &c).sum(), g)
        }),
    ));

    let x_only = |rng: &mut ChaCha8Rng, r, c| {
        ParamModule::builder()
            .tensor("x", &[r, c], (rand_m(r, c, rng) * 2.0).into_raw_vec_and_offset().0)
            .build()
    };
    let c = rand_m(3, 6, rng);
    let c2 = c.clone();
    out.push((
        "tanh",
        x_only(rng, 3, 6),
        Box::new(move |p: &ParamModule| {
            let y = tanh_forward(p.view2("x"));
            let mut g = p.zero_grads();
            p.grad_view2(&mut g, "x").assign(&tanh_backward(y.view(), c.view()));
            ((&y * &c).sum(), g)
        }),
    ));
    out.push((
        "softmax",
        x_only(rng, 3, 6),
        Box::new(move |p: &ParamModule| {
            let y = softmax_rows(p.view2("x"));
            let mut g = p.zero_grads();
            p.grad_view2(&mut g, "x").assign(&softmax_rows_backward(y.view(), c2.view()));
            ((&y * &c2).sum(), g)
        }),
    ));
    let target = rand_m(3, 6, rng);
    out.push((
        "mse",
        x_only(rng, 3, 6),
        Box::new(move |p: &ParamModule| {
            let x = p.view2("x");
            let mut g = p.zero_grads();
            p.grad_view2(&mut g, "x").assign(&mse_backward(x, target.view()));
            (mse(x, target.view()).expect("shapes"), g)
        }),
    ));

    // FJ objective with respect to Hhat, coupled (true gradient) and
    // detached (target recomputed from a frozen copy).
    let r = rand_m(3, 12, rng);
    let w = build_influence_matrix(rand_m(3, 30, rng).view()).expect("random residuals");
    let cfg = FjConfig::default();
    let h0 = rand_m(3, 12, rng);
    let steps: Vec<usize> = (1..12).collect();
    {
        let (r, w, steps) = (r.clone(), w.clone(), steps.clone());
        out.push((
            "fj_loss_coupled",
            ParamModule::builder()
                .tensor("h", &[3, 12], h0.clone().into_raw_vec_and_offset().0)
                .build(),
            Box::new(move |p: &ParamModule| {
                let mut obj = FjObjective::new(r.view(), &w, &cfg).expect("valid");
                obj.target_detached = false;
                let (l, g) = obj.loss_grad(p.view2("h"), &steps);
                (l, g.into_raw_vec_and_offset().0)
            }),
        ));
    }
    {
        let (r, w, steps) = (r.clone(), w.clone(), steps.clone());
        let frozen = expected_trajectory(r.view(), h0.view(), &w, &cfg).expect("shapes");
        let h_at = h0.clone();
        out.push((
            "fj_loss_detached",
            ParamModule::builder()
                .tensor("h", &[3, 12], h0.clone().into_raw_vec_and_offset().0)
                .build(),
            Box::new(move |p: &ParamModule| {
                // the analytic gradient is taken at the frozen point
                let obj = FjObjective::new(r.view(), &w, &cfg).expect("valid");
                let (_, g) = obj.loss_grad(h_at.view(), &steps);
                let h = p.view2("h");
                let mut l = 0.0;
                for i in 0..3 {
                    for &t in &steps {
                        l += (h[[i, t]] - frozen[[i, t]]).powi(2);
                    }
                }
                (l / (3 * steps.len()) as f64, g.into_raw_vec_and_offset().0)
            }),
        ));
    }
    for per_variable in [false, true] {
        let (r, w, steps) = (r.clone(), w.clone(), steps.clone());
        let ex = ExtractorModel::new(3, per_variable, rng);
        out.push((
            if per_variable { "extractor_per_variable" } else { "extractor_shared" },
            ex.params().clone(),
            Box::new(move |p: &ParamModule| {
                let mut e = ex.clone();
                e.set_params(p.clone());
                let mut obj = FjObjective::new(r.view(), &w, &cfg).expect("valid");
                obj.target_detached = false;
                let hhat = e.extract(r.view()).expect("shapes");
                let (l, d) = obj.loss_grad(hhat.view(), &steps);
                (l, e.param_grads(r.view(), d.view()))
            }),
        ));
    }

    for attn_scale in [false, true] {
        let cfg = Stage2Config {
            lookback: 8,
            horizon: 4,
            kernel: 3,
            ma_kernel: 5,
            gamma: rng.random_range(0.1..1.0),
            attn_scale,
            ..Stage2Config::default()
        };
        let mut model = Stage2Model::new(2, &cfg, true).expect("valid config");
        for v in model.params_mut().params_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = rand_m(6, 8, rng);
        let h = rand_m(6, 8, rng) * 2.0;
        let y = rand_m(6, 4, rng);
        let params = model.params().clone();
        out.push((
            if attn_scale { "stage2_graph_scaled" } else { "stage2_graph" },
            params,
            Box::new(move |p: &ParamModule| {
                let mut m = model.clone();
                *m.params_mut() = p.clone();
                m.loss_grad(x.view(), Some(h.view()), y.view()).expect("shapes")
            }),
        ));
    }
    out
}

/// Worst central-difference relative error per block over `trials` random
/// parameterizations.
pub fn gradient_suite(trials: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for (name, module, loss) in block_cases(&mut rng) {
            let err = grad_check(&module, loss, 1e-6).max_rel_error;
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some((_, e)) => *e = e.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    worst
}

fn toy_windows(n: usize, d: usize, l: usize, h: usize, seed: u64) -> Vec<WindowPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = n + l + h;
    let series = Array2::from_shape_fn((d, t), |(i, k)| {
        (k as f64 * 0.4 + i as f64).sin() + 0.2 * rng.random_range(-1.0..1.0)
    });
    (0..n)
        .map(|s0| WindowPair {
            start: s0,
            input: series.slice(ndarray::s![.., s0..s0 + l]).to_owned(),
            target: series.slice(ndarray::s![.., s0 + l..s0 + l + h]).to_owned(),
        })
        .collect()
}

/// Trains a gamma = 0 attention model and a bare backbone with the same
/// seed and reports whether every forecast agrees bitwise.
pub fn gamma_zero_identity() -> bool {
    let win = toy_windows(60, 2, 16, 4, 5);
    let (train, val) = win.split_at(45);
    let cfg = Stage2Config {
        gamma: 0.0,
        lookback: 16,
        horizon: 4,
        ma_kernel: 5,
        epochs: 3,
        seed: 17,
        ..Stage2Config::default()
    };
    let dec = DecompositionConfig {
        period: 4,
        mode: DecompositionMode::Classical,
    };
    let ex = ExtractorModel::from_affine(2, 1.3, -0.2);
    let (Ok(hints), Ok(bare)) = (
        train_stage2(train, val, Some(&ex), &dec, &cfg),
        train_stage2(train, val, None, &dec, &cfg),
    ) else {
        return false;
    };
    let Ok(p_h) = crate::forecaster::prepare_windows(val, Some(&ex), &dec) else {
        return false;
    };
    let Ok(p_b) = crate::forecaster::prepare_windows(val, None, &dec) else {
        return false;
    };
    let idx: Vec<usize> = (0..p_h.len()).collect();
    let (x, hh, _) = p_h.batch(&idx);
    let (xb, _, _) = p_b.batch(&idx);
    match (
        hints.model.forecast(x.view(), hh.as_ref().map(|m| m.view())),
        bare.model.forecast(xb.view(), None),
    ) {
        (Ok(a), Ok(b)) => a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()),
        _ => false,
    }
}

/// Published Exchange/DLinear rows (MSE, MAE) for horizons 96..720.
pub const EXCHANGE_DLINEAR: [(f64, f64); 4] = [(0.081, 0.203), (0.157, 0.293), (0.305, 0.414), (0.643, 0.601)];
pub const EXCHANGE_HINTS_DLINEAR: [(f64, f64); 4] = [(0.077, 0.198), (0.150, 0.284), (0.258, 0.380), (0.550, 0.579)];

/// Horizon-averaged improvement in percent on the published rows.
pub fn published_improvement() -> (f64, f64) {
    let b_mse: Vec<f64> = EXCHANGE_DLINEAR.iter().map(|r| r.0).collect();
    let h_mse: Vec<f64> = EXCHANGE_HINTS_DLINEAR.iter().map(|r| r.0).collect();
    let b_mae: Vec<f64> = EXCHANGE_DLINEAR.iter().map(|r| r.1).collect();
    let h_mae: Vec<f64> = EXCHANGE_HINTS_DLINEAR.iter().map(|r| r.1).collect();
    (
        100.0 * improvement_avg(&b_mse, &h_mse).expect("four rows"),
        100.0 * improvement_avg(&b_mae, &h_mae).expect("four rows"),
    )
}

fn checkpoint_round_trip() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ex = ExtractorModel::new(4, true, &mut rng);
    let bytes = ex.to_checkpoint().to_bytes();
    let Ok(ck) = Checkpoint::read_from(&bytes[..]) else {
        return false;
    };
    let truncated = Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err();
    matches!(ExtractorModel::from_checkpoint(&ck, Some(4)), Ok(back) if back.hash() == ex.hash()) && truncated
}

fn config_round_trip() -> bool {
    let mut cfg = RunConfig::default();
    cfg.stage2.gamma = 0.3;
    cfg.fj.lambda = 0.25;
    matches!(cfg.render().parse::<RunConfig>(), Ok(back) if back.hash() == cfg.hash())
}

pub fn run_all() -> Vec<Check> {
    let mut out = Vec::new();
    let e = fj_oracle_error(20);
    out.push(check("fj_scalar_loop_oracle", e < 1e-12, format!("max abs error {e:.3e}")));
    let (fixed, degroot) = simulator_errors();
    out.push(check(
        "opinion_simulator_fixed_point",
        fixed < 1e-8 && degroot < 1e-12,
        format!("fixed point error {fixed:.3e}, DeGroot reduction error {degroot:.3e}"),
    ));
    let (recon, resid) = decomposition_errors(30);
    out.push(check(
        "decomposition_identity",
        recon < 1e-9 && resid < 1e-6,
        format!("reconstruction {recon:.3e}, sine residual {resid:.3e}"),
    ));
    let started = Instant::now();
    let grads = gradient_suite(10);
    let worst = grads.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
    let blame = grads
        .iter()
        .filter(|(_, e)| *e >= 1e-3)
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect::<Vec<_>>();
    out.push(check(
        "gradient_suite",
        blame.is_empty(),
        format!(
            "{} blocks, worst relative error {worst:.2e} in {:.1}s{}",
            grads.len(),
            started.elapsed().as_secs_f64(),
            if blame.is_empty() { String::new() } else { format!("; failing: {}", blame.join(", ")) }
        ),
    ));
    out.push(check("gamma_zero_identity", gamma_zero_identity(), "bitwise forecast comparison"));
    let (mse, mae) = published_improvement();
    out.push(check(
        "improvement_arithmetic",
        (mse - 12.7).abs() <= 0.1 && (mae - 4.63).abs() <= 0.1,
        format!("MSE {mse:.2}%, MAE {mae:.2}%"),
    ));
    out.push(check("checkpoint_round_trip", checkpoint_round_trip(), "extractor bytes and truncation"));
    out.push(check("config_round_trip", config_round_trip(), "rendered config re-parses to the same hash"));
    out
}

pub fn render(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| format!("{} {:<32} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let checks = run_all();
        assert!(checks.iter().all(|c| c.passed), "{}", render(&checks));
    }

    #[test]
    fn oracle_detects_a_perturbed_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = rand_m(2, 6, &mut rng);
        let w = build_influence_matrix(rand_m(2, 20, &mut rng).view()).unwrap();
        let cfg = FjConfig::default();
        let lib = expected_trajectory(r.view(), r.view(), &w, &cfg).unwrap();
        let off = naive_expected(&r, &r, w.weights(), &FjConfig { beta: 0.41, ..cfg });
        assert!(lib.iter().zip(&off).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}
