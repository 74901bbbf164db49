//! Additive trend/seasonal/residual decomposition.
//!
//! Two modes are available:
//!
//! * `Classical`: a centered moving average estimates a preliminary trend,
//!   period-indexed means of the detrended interior give the seasonal
//!   pattern (re-centered to zero sum), and the final trend is the same
//!   moving average applied to the deseasonalized series. Near the ends the
//!   averaging window shrinks symmetrically, so nothing is extrapolated.
//! * `Stl`: the LOESS-based inner loop of Cleveland et al. with degree-1
//!   local fits, two inner passes and a single outer pass (no robustness
//!   reweighting).
//!
//! In both modes the residual is computed as `value - trend - seasonal`, so
//! the three parts always add back up to the input.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HintsError, Result};
use crate::series::MultivariateSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecompositionMode {
    #[default]
    Classical,
    Stl,
}

impl fmt::Display for DecompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecompositionMode::Classical => "classical",
            DecompositionMode::Stl => "stl",
        })
    }
}

impl FromStr for DecompositionMode {
    type Err = HintsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(Self::Classical),
            "stl" => Ok(Self::Stl),
            other => Err(HintsError::InvalidArgument(format!(
                "unknown decomposition mode `{other}` (expected classical|stl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    pub mode: DecompositionMode,
    pub period: usize,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            mode: DecompositionMode::Classical,
            period: 24,
        }
    }
}

/// Per-variable components, each `[D][T]`.
///
/// The seasonal part has zero mean over every full period-aligned window
/// `[k*period, (k+1)*period)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub trend: Array2<f64>,
    pub seasonal: Array2<f64>,
    pub residual: Array2<f64>,
    pub period: usize,
}

pub fn decompose(
    series: &MultivariateSeries,
    period: usize,
    mode: DecompositionMode,
) -> Result<Decomposition> {
    decompose_values(series.values().view(), period, mode)
}

pub fn decompose_values(
    values: ArrayView2<'_, f64>,
    period: usize,
    mode: DecompositionMode,
) -> Result<Decomposition> {
    let (d, n) = values.dim();
    if period == 0 {
        return Err(HintsError::InvalidArgument("period must be positive".into()));
    }
    if n < 2 * period {
        return Err(HintsError::PeriodTooLarge { len: n, period });
    }
    if mode == DecompositionMode::Stl && period < 2 {
        return Err(HintsError::InvalidArgument("stl mode needs period >= 2".into()));
    }
    let mut trend = Array2::zeros((d, n));
    let mut seasonal = Array2::zeros((d, n));
    for (i, row) in values.axis_iter(Axis(0)).enumerate() {
        let (t, s) = match mode {
            DecompositionMode::Classical => classical(row, period),
            DecompositionMode::Stl => stl(row, period, &StlParams::for_period(period)),
        };
        trend.row_mut(i).assign(&ArrayView1::from(&t));
        seasonal.row_mut(i).assign(&ArrayView1::from(&s));
    }
    let residual = &values - &trend - &seasonal;
    Ok(Decomposition {
        trend,
        seasonal,
        residual,
        period,
    })
}

/// Residual only, for callers that decompose many short windows.
pub fn residual_of(values: ArrayView2<'_, f64>, cfg: &DecompositionConfig) -> Result<Array2<f64>> {
    Ok(decompose_values(values, cfg.period, cfg.mode)?.residual)
}

/// Centered moving average whose full-width weights remove any zero-sum
/// pattern of the given period (a 2xP average for even periods). Near the
/// ends the window shrinks to the largest symmetric equal-weight window.
fn centered_ma(x: &[f64], period: usize) -> Vec<f64> {
    let n = x.len();
    let half = period / 2;
    let mut out = vec![0.0; n];
    for (t, o) in out.iter_mut().enumerate() {
        if t >= half && t + half < n {
            if period % 2 == 1 {
                *o = x[t - half..=t + half].iter().sum::<f64>() / period as f64;
            } else {
                let inner: f64 = x[t - half + 1..t + half].iter().sum();
                *o = (inner + 0.5 * (x[t - half] + x[t + half])) / period as f64;
            }
        } else {
            let m = t.min(n - 1 - t);
            *o = x[t - m..=t + m].iter().sum::<f64>() / (2 * m + 1) as f64;
        }
    }
    out
}

fn classical(x: ArrayView1<'_, f64>, period: usize) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = x.to_vec();
    let n = x.len();
    if period == 1 {
        return (x, vec![0.0; n]);
    }
    let half = period / 2;
    let prelim = centered_ma(&x, period);
    let mut sums = vec![0.0; period];
    let mut counts = vec![0usize; period];
    for t in half..n - half {
        sums[t % period] += x[t] - prelim[t];
        counts[t % period] += 1;
    }
    let mut index: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let level = index.iter().sum::<f64>() / period as f64;
    index.iter_mut().for_each(|v| *v -= level);
    let seasonal: Vec<f64> = (0..n).map(|t| index[t % period]).collect();
    let deseason: Vec<f64> = x.iter().zip(&seasonal).map(|(a, s)| a - s).collect();
    (centered_ma(&deseason, period), seasonal)
}

/// LOESS spans for the STL inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StlParams {
    pub seasonal_span: usize,
    pub lowpass_span: usize,
    pub trend_span: usize,
    pub inner_iterations: usize,
}

fn next_odd(x: usize) -> usize {
    if x % 2 == 0 {
        x + 1
    } else {
        x
    }
}

impl StlParams {
    /// Cleveland's defaults: seasonal span 7, low-pass span the smallest odd
    /// integer >= period, trend span the smallest odd integer >=
    /// 1.5 * period / (1 - 1.5 / seasonal_span).
    pub fn for_period(period: usize) -> Self {
        let seasonal_span = 7;
        let trend = (1.5 * period as f64 / (1.0 - 1.5 / seasonal_span as f64)).ceil() as usize;
        Self {
            seasonal_span,
            lowpass_span: next_odd(period),
            trend_span: next_odd(trend.max(3)),
            inner_iterations: 2,
        }
    }
}

/// Degree-1 LOESS fit of `y` (sampled at 0, 1, ..., n-1) evaluated at `x0`,
/// using the `span` nearest points and tricube weights.
fn loess_at(y: &[f64], span: usize, x0: f64) -> f64 {
    let n = y.len();
    let q = span.max(2);
    let (left, right, h) = if q >= n {
        let h = x0.max((n - 1) as f64 - x0).max(x0 - 0.0) + (q - n) as f64 / 2.0;
        (0, n - 1, h)
    } else {
        let mut left = ((x0.round() as isize) - (q as isize / 2)).clamp(0, (n - q) as isize) as usize;
        while left + q < n && x0 - left as f64 > (left + q) as f64 - x0 {
            left += 1;
        }
        while left > 0 && (left + q - 1) as f64 - x0 > x0 - (left - 1) as f64 {
            left -= 1;
        }
        let right = left + q - 1;
        (left, right, (x0 - left as f64).max(right as f64 - x0))
    };
    let h = h.max(1e-12);
    let (h_hi, h_lo) = (0.999 * h, 0.001 * h);
    let mut w = Vec::with_capacity(right - left + 1);
    let mut wsum = 0.0;
    for j in left..=right {
        let r = (j as f64 - x0).abs();
        let wj = if r <= h_lo {
            1.0
        } else if r <= h_hi {
            let u = r / h;
            (1.0 - u * u * u).powi(3)
        } else {
            0.0
        };
        wsum += wj;
        w.push(wj);
    }
    if wsum <= 0.0 {
        let nearest = x0.round().clamp(0.0, (n - 1) as f64) as usize;
        return y[nearest];
    }
    let mut xbar = 0.0;
    let mut ybar = 0.0;
    for (k, j) in (left..=right).enumerate() {
        xbar += w[k] * j as f64;
        ybar += w[k] * y[j];
    }
    xbar /= wsum;
    ybar /= wsum;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (k, j) in (left..=right).enumerate() {
        let dx = j as f64 - xbar;
        sxx += w[k] * dx * dx;
        sxy += w[k] * dx * (y[j] - ybar);
    }
    let range = (n - 1) as f64;
    if sxx.sqrt() > 1e-3 * range.max(1.0) {
        ybar + sxy / sxx * (x0 - xbar)
    } else {
        ybar
    }
}

fn loess_smooth(y: &[f64], span: usize) -> Vec<f64> {
    (0..y.len()).map(|t| loess_at(y, span, t as f64)).collect()
}

fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    x.windows(width)
        .map(|w| w.iter().sum::<f64>() / width as f64)
        .collect()
}

fn stl(x: ArrayView1<'_, f64>, period: usize, params: &StlParams) -> (Vec<f64>, Vec<f64>) {
    let y: Vec<f64> = x.to_vec();
    let n = y.len();
    let mut trend = vec![0.0; n];
    let mut seasonal = vec![0.0; n];
    for _ in 0..params.inner_iterations {
        let detrended: Vec<f64> = y.iter().zip(&trend).map(|(a, b)| a - b).collect();
        // Cycle-subseries smoothing, extended by one period at each end.
        let mut cycle = vec![0.0; n + 2 * period];
        for phase in 0..period {
            let sub: Vec<f64> = detrended.iter().skip(phase).step_by(period).copied().collect();
            let m = sub.len();
            for k in -1..=(m as isize) {
                let v = loess_at(&sub, params.seasonal_span, k as f64);
                let idx = (phase as isize + (k + 1) * period as isize) as usize;
                cycle[idx] = v;
            }
        }
        let low = moving_average(&moving_average(&moving_average(&cycle, period), period), 3);
        let low = loess_smooth(&low, params.lowpass_span);
        for t in 0..n {
            seasonal[t] = cycle[t + period] - low[t];
        }
        let deseason: Vec<f64> = y.iter().zip(&seasonal).map(|(a, s)| a - s).collect();
        trend = loess_smooth(&deseason, params.trend_span);
    }
    // Move each full aligned cycle's seasonal mean into the trend.
    for start in (0..n).step_by(period) {
        if start + period > n {
            break;
        }
        let m = seasonal[start..start + period].iter().sum::<f64>() / period as f64;
        for t in start..start + period {
            seasonal[t] -= m;
            trend[t] += m;
        }
    }
    (trend, seasonal)
}

/// Writes one CSV per variable, `<dir>/<name>_decomposition.csv`, with
/// columns `t,value,trend,seasonal,residual`.
pub fn write_debug_csv(dir: &Path, series: &MultivariateSeries, dec: &Decomposition) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HintsError::io(dir, e))?;
    for (i, name) in series.names().iter().enumerate() {
        let path = dir.join(format!("{name}_decomposition.csv"));
        let mut f = std::fs::File::create(&path).map_err(|e| HintsError::io(&path, e))?;
        let mut out = String::from("t,value,trend,seasonal,residual\n");
        for t in 0..series.len() {
            out.push_str(&format!(
                "{t},{},{},{},{}\n",
                series.values()[[i, t]],
                dec.trend[[i, t]],
                dec.seasonal[[i, t]],
                dec.residual[[i, t]]
            ));
        }
        f.write_all(out.as_bytes()).map_err(|e| HintsError::io(&path, e))?;
    }
    Ok(())
}
