//! Stage 2: attention from the Human Factor, input modulation and the
//! DLinear-style backbone.
//!
//! For one window with input `X: [D][L]` and factor `Hhat: [D][L]`:
//!
//! ```text
//! A  = softmax_over_time(tanh(conv1d(Hhat)))      (optionally scaled by L)
//! X~ = X * (1 + gamma * A)
//! Y  = trend_head(ma(X~)) + remainder_head(X~ - ma(X~))
//! ```
//!
//! Windows are stacked row-wise (`row = window * D + variable`) so the
//! depthwise kernel for a row is `row % D`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::decompose::{residual_of, DecompositionConfig};
use crate::error::{HintsError, Result};
use crate::extractor::ExtractorModel;
use crate::grad::blocks::{
    mse, mse_backward, replicate_ma_matrix, softmax_rows, softmax_rows_backward, tanh_backward, tanh_forward, Affine,
    Conv1d,
};
use crate::grad::checkpoint::Checkpoint;
use crate::grad::{ParamModule, Sgd};
use crate::seed::stage_rng;
use crate::series::WindowPair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lookback: usize,
    pub horizon: usize,
    /// Attention kernel size (odd).
    pub kernel: usize,
    /// Backbone moving-average width (odd).
    pub ma_kernel: usize,
    /// Windows per mini-batch.
    pub batch: usize,
    pub momentum: f64,
    pub patience: usize,
    /// Multiply the attention map by `L` before modulation.
    pub attn_scale: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lr: 1e-2,
            epochs: 100,
            seed: 0,
            lookback: 96,
            horizon: 96,
            kernel: 3,
            ma_kernel: 25,
            batch: 32,
            momentum: 0.9,
            patience: 10,
            attn_scale: false,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let usage = |key: &str, message: String| HintsError::Usage {
            key: key.into(),
            message,
        };
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(usage("stage2.gamma", format!("must lie in [0, 1], got {}", self.gamma)));
        }
        if self.epochs == 0 {
            return Err(usage("stage2.epochs", "must be at least 1".into()));
        }
        if self.lookback == 0 || self.horizon == 0 {
            return Err(usage("stage2.lookback", "lookback and horizon must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(usage("stage2.kernel", format!("must be odd, got {}", self.kernel)));
        }
        if self.ma_kernel % 2 == 0 {
            return Err(usage("stage2.ma_kernel", format!("must be odd, got {}", self.ma_kernel)));
        }
        if self.batch == 0 {
            return Err(usage("stage2.batch", "must be at least 1".into()));
        }
        Sgd::new(self.lr, self.momentum).map(|_| ())
    }
}

/// `X * (1 + gamma * A)`, elementwise. Exactly `X` when `gamma == 0`.
pub fn modulate(x: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>, gamma: f64) -> Result<Array2<f64>> {
    if x.dim() != a.dim() {
        return Err(HintsError::shape(format!("{:?}", x.dim()), format!("{:?}", a.dim())));
    }
    let mut out = x.to_owned();
    Zip::from(&mut out).and(&a).for_each(|v, &w| *v *= 1.0 + gamma * w);
    Ok(out)
}

const TREND: &str = "trend";
const REMAINDER: &str = "remainder";
const ATTN: &str = "attn";

/// Attention network plus backbone, with the hyperparameters that fix
/// their shapes.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    params: ParamModule,
    num_vars: usize,
    lookback: usize,
    horizon: usize,
    kernel: usize,
    ma_kernel: usize,
    gamma: f64,
    attn_scale: bool,
    with_attention: bool,
    ma: Array2<f64>,
    trend: Affine,
    remainder: Affine,
    conv: Conv1d,
    extractor_hash: Option<String>,
}

struct Forward {
    /// Only present with attention.
    act: Option<(Array2<f64>, Array2<f64>)>,
    trend_t: Array2<f64>,
    rem_t: Array2<f64>,
    y: Array2<f64>,
}

impl Stage2Model {
    /// Backbone weights come from the `stage2.backbone` stream and attention
    /// weights from `stage2.attention`, so a baseline and an attention model
    /// built from the same seed share their backbone initialization.
    pub fn new(num_vars: usize, cfg: &Stage2Config, with_attention: bool) -> Result<Self> {
        cfg.validate()?;
        let (l, h) = (cfg.lookback, cfg.horizon);
        let trend = Affine::new(TREND, l, h);
        let remainder = Affine::new(REMAINDER, l, h);
        let conv = Conv1d::new(ATTN, num_vars, cfg.kernel);
        let mut b = ParamModule::builder();
        let mut rng = stage_rng(cfg.seed, "stage2.backbone");
        b = trend.init(b, &mut rng);
        b = remainder.init(b, &mut rng);
        if with_attention {
            b = conv.init(b, &mut stage_rng(cfg.seed, "stage2.attention"));
        }
        Ok(Self {
            params: b.build(),
            num_vars,
            lookback: l,
            horizon: h,
            kernel: cfg.kernel,
            ma_kernel: cfg.ma_kernel,
            gamma: cfg.gamma,
            attn_scale: cfg.attn_scale,
            with_attention,
            ma: replicate_ma_matrix(l, cfg.ma_kernel)?,
            trend,
            remainder,
            conv,
            extractor_hash: None,
        })
    }

    pub fn params(&self) -> &ParamModule {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamModule {
        &mut self.params
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_attention(&self) -> bool {
        self.with_attention
    }

    pub fn extractor_hash(&self) -> Option<&str> {
        self.extractor_hash.as_deref()
    }

    /// Records which frozen extractor produced this model's factors.
    pub fn with_extractor_hash(mut self, hash: Option<String>) -> Self {
        self.extractor_hash = hash;
        self
    }

    /// The backbone tensors alone, for comparing against a baseline.
    pub fn backbone_params(&self) -> ParamModule {
        let mut b = ParamModule::builder();
        for s in self.params.specs().iter().filter(|s| !s.name.starts_with(ATTN)) {
            b = b.tensor(&s.name, &s.shape, self.params.slice(&s.name).to_vec());
        }
        b.build()
    }

    fn check_rows(&self, m: ArrayView2<'_, f64>, cols: usize, what: &str) -> Result<()> {
        if m.ncols() != cols || m.nrows() % self.num_vars != 0 || m.nrows() == 0 {
            return Err(HintsError::shape(
                format!("{what} with a multiple of {} rows and {cols} columns", self.num_vars),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        Ok(())
    }

    /// Attention for stacked windows `[n*D][L]`; each row sums to 1
    /// (or to `L` with attention scaling).
    pub fn attention_map(&self, hhat: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if !self.with_attention {
            return Err(HintsError::InvalidArgument("baseline model has no attention block".into()));
        }
        self.check_rows(hhat, self.lookback, "factor window")?;
        let z = self.conv.forward(&self.params, hhat)?;
        let a = softmax_rows(tanh_forward(z.view()).view());
        Ok(if self.attn_scale { a * self.lookback as f64 } else { a })
    }

    /// Backbone only, on stacked (already modulated) windows `[n*D][L]`.
    pub fn backbone_forecast(&self, x_tilde: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x_tilde.ncols() != self.lookback {
            return Err(HintsError::shape(
                format!("{} input steps", self.lookback),
                format!("{}", x_tilde.ncols()),
            ));
        }
        let xt = x_tilde.t();
        let trend_t = self.ma.dot(&xt);
        let rem_t = &xt - &trend_t;
        let y = self.trend.forward(&self.params, trend_t.view())? + self.remainder.forward(&self.params, rem_t.view())?;
        Ok(y.reversed_axes())
    }

    fn forward(&self, x: ArrayView2<'_, f64>, hhat: Option<ArrayView2<'_, f64>>) -> Result<Forward> {
        self.check_rows(x, self.lookback, "input window")?;
        let (act, x_tilde) = match (self.with_attention, hhat) {
            (true, Some(hh)) => {
                if hh.dim() != x.dim() {
                    return Err(HintsError::shape(format!("{:?}", x.dim()), format!("{:?}", hh.dim())));
                }
                let z = self.conv.forward(&self.params, hh)?;
                let t = tanh_forward(z.view());
                let a0 = softmax_rows(t.view());
                let a = if self.attn_scale { &a0 * self.lookback as f64 } else { a0.clone() };
                let xm = modulate(x, a.view(), self.gamma)?;
                (Some((t, a0)), xm)
            }
            (true, None) => {
                return Err(HintsError::InvalidArgument("attention model needs a factor window".into()));
            }
            (false, _) => (None, x.to_owned()),
        };
        let x_tilde_t = x_tilde.reversed_axes();
        let trend_t = self.ma.dot(&x_tilde_t);
        let rem_t = &x_tilde_t - &trend_t;
        let y_t = self.trend.forward(&self.params, trend_t.view())? + self.remainder.forward(&self.params, rem_t.view())?;
        Ok(Forward {
            act,
            trend_t,
            rem_t,
            y: y_t.reversed_axes(),
        })
    }

    /// Forecast for stacked windows: `x` and `hhat` are `[n*D][L]`; the
    /// result is `[n*D][h]`. `hhat` is ignored by a baseline model.
    pub fn forecast(&self, x: ArrayView2<'_, f64>, hhat: Option<ArrayView2<'_, f64>>) -> Result<Array2<f64>> {
        Ok(self.forward(x, hhat)?.y)
    }

    /// Mean squared error on `target` and its parameter gradient.
    pub fn loss_grad(
        &self,
        x: ArrayView2<'_, f64>,
        hhat: Option<ArrayView2<'_, f64>>,
        target: ArrayView2<'_, f64>,
    ) -> Result<(f64, Vec<f64>)> {
        let f = self.forward(x, hhat)?;
        let loss = mse(f.y.view(), target)?;
        let dy_t = mse_backward(f.y.view(), target).reversed_axes();
        let mut grads = self.params.zero_grads();
        let d_trend = self.trend.backward(&self.params, f.trend_t.view(), dy_t.view(), &mut grads);
        let d_rem = self.remainder.backward(&self.params, f.rem_t.view(), dy_t.view(), &mut grads);
        if let (Some((t, a0)), Some(hh)) = (&f.act, hhat) {
            // dX~ (transposed) = d_rem + M^T (d_trend - d_rem)
            let d_xt_t = &d_rem + &self.ma.t().dot(&(&d_trend - &d_rem));
            let scale = if self.attn_scale { self.lookback as f64 } else { 1.0 };
            let mut d_a0 = d_xt_t.reversed_axes();
            Zip::from(&mut d_a0).and(&x).for_each(|g, &xv| *g *= self.gamma * scale * xv);
            let d_t = softmax_rows_backward(a0.view(), d_a0.view());
            let d_z = tanh_backward(t.view(), d_t.view());
            self.conv.backward(&self.params, hh, d_z.view(), &mut grads);
        }
        Ok((loss, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "forecaster")
            .with_meta("num_vars", self.num_vars)
            .with_meta("lookback", self.lookback)
            .with_meta("horizon", self.horizon)
            .with_meta("kernel", self.kernel)
            .with_meta("ma_kernel", self.ma_kernel)
            .with_meta("gamma", format!("{:?}", self.gamma))
            .with_meta("attn_scale", self.attn_scale)
            .with_meta("with_attention", self.with_attention)
            .with_meta("extractor_hash", self.extractor_hash.clone().unwrap_or_default())
    }

    pub fn from_checkpoint(ck: &Checkpoint, expected_vars: Option<usize>) -> Result<Self> {
        ck.expect_meta("kind", "forecaster")?;
        if let Some(d) = expected_vars {
            ck.expect_meta("num_vars", d)?;
        }
        let num = |key: &str| -> Result<usize> {
            ck.meta(key)?
                .parse()
                .map_err(|_| HintsError::CorruptCheckpoint(format!("`{key}` is not an integer")))
        };
        let gamma: f64 = ck
            .meta("gamma")?
            .parse()
            .map_err(|_| HintsError::CorruptCheckpoint("`gamma` is not a number".into()))?;
        let cfg = Stage2Config {
            gamma,
            lookback: num("lookback")?,
            horizon: num("horizon")?,
            kernel: num("kernel")?,
            ma_kernel: num("ma_kernel")?,
            attn_scale: ck.meta("attn_scale")? == "true",
            ..Stage2Config::default()
        };
        let mut model = Self::new(num("num_vars")?, &cfg, ck.meta("with_attention")? == "true")
            .map_err(|e| HintsError::CorruptCheckpoint(e.to_string()))?;
        if model.params.specs() != ck.params.specs() {
            return Err(HintsError::CorruptCheckpoint("tensor layout does not match metadata".into()));
        }
        model.params = ck.params.clone();
        let hash = ck.meta("extractor_hash")?;
        model.extractor_hash = (!hash.is_empty()).then(|| hash.to_owned());
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path, expected_vars: Option<usize>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, expected_vars)
    }
}

/// Windows stacked for batched evaluation, with per-window factors.
#[derive(Debug, Clone)]
pub struct PreparedWindows {
    pub starts: Vec<usize>,
    /// `[n][D][L]`
    pub x: Array3<f64>,
    /// `[n][D][L]`; empty when no extractor was supplied.
    pub hhat: Option<Array3<f64>>,
    /// `[n][D][h]`
    pub y: Array3<f64>,
}

impl PreparedWindows {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    fn stack(a: &Array3<f64>, idx: &[usize]) -> Array2<f64> {
        let (_, d, c) = a.dim();
        let mut out = Array2::zeros((idx.len() * d, c));
        for (k, &w) in idx.iter().enumerate() {
            out.slice_mut(s![k * d..(k + 1) * d, ..]).assign(&a.index_axis(Axis(0), w));
        }
        out
    }

    /// `(x, hhat, y)` stacked row-wise for the given window indices.
    pub fn batch(&self, idx: &[usize]) -> (Array2<f64>, Option<Array2<f64>>, Array2<f64>) {
        (
            Self::stack(&self.x, idx),
            self.hhat.as_ref().map(|h| Self::stack(h, idx)),
            Self::stack(&self.y, idx),
        )
    }
}

/// Decomposes each lookback window on its own and runs the frozen
/// extractor on the residual. Without an extractor only inputs and
/// targets are stacked.
pub fn prepare_windows(
    windows: &[WindowPair],
    extractor: Option<&ExtractorModel>,
    decomposition: &DecompositionConfig,
) -> Result<PreparedWindows> {
    let n = windows.len();
    let (d, l, h) = match windows.first() {
        Some(w) => (w.input.nrows(), w.lookback(), w.horizon()),
        None => (0, 0, 0),
    };
    let mut x = Array3::zeros((n, d, l));
    let mut y = Array3::zeros((n, d, h));
    let mut hh = extractor.map(|_| Array3::zeros((n, d, l)));
    for (k, w) in windows.iter().enumerate() {
        if w.input.dim() != (d, l) || w.target.dim() != (d, h) {
            return Err(HintsError::shape(format!("windows of {d}x{l} -> {d}x{h}"), format!("{:?}", w.input.dim())));
        }
        x.index_axis_mut(Axis(0), k).assign(&w.input);
        y.index_axis_mut(Axis(0), k).assign(&w.target);
        if let (Some(ex), Some(hh)) = (extractor, hh.as_mut()) {
            let r = residual_of(w.input.view(), decomposition)?;
            hh.index_axis_mut(Axis(0), k).assign(&ex.extract(r.view())?);
        }
    }
    Ok(PreparedWindows {
        starts: windows.iter().map(|w| w.start).collect(),
        x,
        hhat: hh,
        y,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

const EVAL_CHUNK: usize = 256;

/// Per-window MSE/MAE averaged over windows (equal-sized windows make this
/// the global mean). Accumulated sequentially in window order.
pub fn evaluate(model: &Stage2Model, windows: &PreparedWindows) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(HintsError::EmptyTestSet);
    }
    let idx: Vec<usize> = (0..windows.len()).collect();
    let d = model.num_vars;
    let mut mse_acc = 0.0;
    let mut mae_acc = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, hh, y) = windows.batch(chunk);
        let pred = model.forecast(x.view(), hh.as_ref().map(|m| m.view()))?;
        for k in 0..chunk.len() {
            let p = pred.slice(s![k * d..(k + 1) * d, ..]);
            let t = y.slice(s![k * d..(k + 1) * d, ..]);
            let (m2, m1) = window_errors(p, t);
            mse_acc += m2;
            mae_acc += m1;
        }
    }
    let n = windows.len() as f64;
    Ok(Metrics {
        mse: mse_acc / n,
        mae: mae_acc / n,
    })
}

fn window_errors(p: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>) -> (f64, f64) {
    let mut sq = 0.0;
    let mut ab = 0.0;
    for (a, b) in p.iter().zip(t) {
        sq += (a - b) * (a - b);
        ab += (a - b).abs();
    }
    let c = p.len() as f64;
    (sq / c, ab / c)
}

/// CSV with columns `window,variable,step,prediction,target`.
pub fn prediction_dump(model: &Stage2Model, windows: &PreparedWindows, names: &[String]) -> Result<String> {
    let d = model.num_vars;
    let mut out = String::from("window,variable,step,prediction,target\n");
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, hh, y) = windows.batch(chunk);
        let pred = model.forecast(x.view(), hh.as_ref().map(|m| m.view()))?;
        for (k, &w) in chunk.iter().enumerate() {
            for v in 0..d {
                let name = names.get(v).map(String::as_str).unwrap_or("?");
                for step in 0..model.horizon {
                    let _ = writeln!(
                        out,
                        "{w},{name},{},{},{}",
                        step + 1,
                        pred[[k * d + v, step]],
                        y[[k * d + v, step]]
                    );
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    /// Parameters from the epoch with the lowest validation MSE.
    pub model: Stage2Model,
    /// Mean mini-batch loss per epoch.
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Fits attention and backbone on prepared windows. `with_attention`
/// requires factors in `train` and `val`.
pub fn fit_stage2(
    train: &PreparedWindows,
    val: &PreparedWindows,
    cfg: &Stage2Config,
    with_attention: bool,
) -> Result<Stage2Result> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HintsError::InvalidSeries("no training windows".into()));
    }
    if with_attention && (train.hhat.is_none() || (!val.is_empty() && val.hhat.is_none())) {
        return Err(HintsError::InvalidArgument("attention training needs extracted factors".into()));
    }
    let d = train.x.dim().1;
    let mut model = Stage2Model::new(d, cfg, with_attention)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut order_rng = stage_rng(cfg.seed, "stage2.shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamModule, usize)> = None;
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut acc = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch) {
            let (x, hh, y) = train.batch(idx);
            let (loss, grads) = model.loss_grad(x.view(), hh.as_ref().map(|m| m.view()), y.view())?;
            if !loss.is_finite() {
                return Err(HintsError::Numerical(format!(
                    "stage-2 loss diverged at epoch {epoch} (lr {})",
                    cfg.lr
                )));
            }
            opt.step(&mut model.params, &grads);
            acc += loss;
            batches += 1;
        }
        let train_loss = acc / batches as f64;
        train_curve.push(train_loss);
        let score = if val.is_empty() {
            train_loss
        } else {
            evaluate(&model, val)?.mse
        };
        if !score.is_finite() {
            return Err(HintsError::Numerical(format!("validation loss diverged at epoch {epoch}")));
        }
        val_curve.push(score);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, model.params.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(Stage2Result {
        model,
        train_curve,
        val_curve,
        best_epoch,
    })
}

/// Prepares windows with the frozen extractor (or none, for the bare
/// backbone) and fits Stage 2. The extractor is checked to be unchanged.
pub fn train_stage2(
    train: &[WindowPair],
    val: &[WindowPair],
    extractor: Option<&ExtractorModel>,
    decomposition: &DecompositionConfig,
    cfg: &Stage2Config,
) -> Result<Stage2Result> {
    let before = extractor.map(ExtractorModel::hash);
    let tr = prepare_windows(train, extractor, decomposition)?;
    let va = prepare_windows(val, extractor, decomposition)?;
    let mut res = fit_stage2(&tr, &va, cfg, extractor.is_some())?;
    let after = extractor.map(ExtractorModel::hash);
    assert_eq!(before, after, "extractor parameters changed during stage 2");
    res.model.extractor_hash = after;
    Ok(res)
}
