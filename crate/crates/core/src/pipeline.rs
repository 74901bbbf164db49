//! End-to-end run: data, split, normalize, decompose, Stage 1, Stage 2,
//! evaluate.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decompose::decompose_values;
use crate::error::{HintsError, Result};
use crate::extractor::{train_stage1, ExtractorModel, Stage1Result};
use crate::fj::{generate_planted_series, FjConfig, PlantedSeries};
use crate::forecaster::{evaluate, fit_stage2, prepare_windows, Metrics, PreparedWindows, Stage2Result};
use crate::series::{fit_normalizer, load_csv, MultivariateSeries, Normalizer, SplitRanges, SplitWindows};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub series: MultivariateSeries,
    /// Ground truth when the data came from the planted generator.
    pub planted: Option<PlantedSeries>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data_path.is_empty() {
        let p = generate_planted_series(&cfg.planted_config(), cfg.synth_vars, cfg.synth_len, cfg.synth_seed())?;
        Ok(Dataset {
            id: cfg.dataset_id(),
            series: p.series.clone(),
            planted: Some(p),
        })
    } else {
        Ok(Dataset {
            id: cfg.dataset_id(),
            series: load_csv(&cfg.data_path, &cfg.schema())?,
            planted: None,
        })
    }
}

/// Normalized data with its split and the training residuals.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub normalized: MultivariateSeries,
    pub normalizer: Normalizer,
    pub ranges: SplitRanges,
    pub windows: SplitWindows,
    /// Residuals of the training split, decomposed as one sequence.
    pub train_residual: Array2<f64>,
}

pub fn prepare_data(cfg: &RunConfig, data: &Dataset) -> Result<PreparedData> {
    let ranges = cfg.split.ranges(data.series.len())?;
    let normalizer = fit_normalizer(&data.series, ranges.train.clone())?;
    let normalized = normalizer.transform(&data.series)?;
    let windows = cfg
        .split
        .windows(&normalized, cfg.stage2.lookback, cfg.stage2.horizon)?;
    let train_block = normalized.values().slice(s![.., ranges.train.clone()]);
    let dec = decompose_values(train_block, cfg.decomposition.period, cfg.decomposition.mode)?;
    Ok(PreparedData {
        normalized,
        normalizer,
        ranges,
        windows,
        train_residual: dec.residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoSocial,
    NoMemoryBias,
    NoFjLoss,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [Self::Full, Self::NoSocial, Self::NoMemoryBias, Self::NoFjLoss];

    /// Coefficients with the removed terms' mass spread proportionally over
    /// the remaining ones. `None` for `NoFjLoss`, which skips Stage 1.
    pub fn fj_config(self, base: &FjConfig) -> Result<Option<FjConfig>> {
        let c = base.bias_coef();
        Ok(match self {
            Self::Full => Some(*base),
            Self::NoSocial => {
                let rest = base.delta + c;
                if rest <= 0.0 {
                    return Err(HintsError::InvalidArgument(
                        "no_social needs delta + bias coefficient > 0".into(),
                    ));
                }
                Some(FjConfig {
                    beta: 0.0,
                    delta: base.delta / rest,
                    ..*base
                })
            }
            Self::NoMemoryBias => {
                if base.beta <= 0.0 {
                    return Err(HintsError::InvalidArgument("no_memory_bias needs beta > 0".into()));
                }
                Some(FjConfig {
                    beta: 1.0,
                    delta: 0.0,
                    ..*base
                })
            }
            Self::NoFjLoss => None,
        })
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoSocial => "no_social",
            Self::NoMemoryBias => "no_memory_bias",
            Self::NoFjLoss => "no_fj_loss",
        }
    }
}

/// What one run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "ablation")]
pub enum Variant {
    /// Bare backbone.
    Baseline,
    /// Attention-modulated backbone with a Stage-1 extractor.
    Hints(AblationVariant),
}

impl Variant {
    pub const HINTS: Variant = Variant::Hints(AblationVariant::Full);
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => f.write_str("baseline"),
            Variant::Hints(AblationVariant::Full) => f.write_str("hints"),
            Variant::Hints(a) => f.write_str(a.tag()),
        }
    }
}

impl FromStr for Variant {
    type Err = HintsError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Variant::Baseline,
            "hints" | "full" => Variant::HINTS,
            "no_social" => Variant::Hints(AblationVariant::NoSocial),
            "no_memory_bias" => Variant::Hints(AblationVariant::NoMemoryBias),
            "no_fj_loss" => Variant::Hints(AblationVariant::NoFjLoss),
            other => {
                return Err(HintsError::Usage {
                    key: "variant".into(),
                    message: format!("unknown variant {other:?}"),
                })
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub variant: Variant,
    pub extractor: Option<ExtractorModel>,
    pub stage1: Option<Stage1Result>,
    pub stage2: Stage2Result,
    pub val: Metrics,
    pub test: Metrics,
}

/// Stage 1 for a variant: `None` for the baseline, the identity map when
/// the FJ loss is ablated.
pub fn run_stage1(cfg: &RunConfig, data: &PreparedData, variant: Variant) -> Result<Option<Stage1Result>> {
    let Variant::Hints(ablation) = variant else {
        return Ok(None);
    };
    match ablation.fj_config(&cfg.fj)? {
        Some(fj) => {
            let s1 = crate::extractor::Stage1Config {
                fj,
                ..cfg.stage1_config()
            };
            Ok(Some(train_stage1(data.train_residual.view(), &s1)?))
        }
        None => Ok(None),
    }
}

fn extractor_for(variant: Variant, stage1: Option<&Stage1Result>, num_vars: usize) -> Option<ExtractorModel> {
    match (variant, stage1) {
        (Variant::Baseline, _) => None,
        (_, Some(s1)) => Some(s1.model.clone()),
        (_, None) => Some(ExtractorModel::identity(num_vars)),
    }
}

pub struct PreparedSplits {
    pub train: PreparedWindows,
    pub val: PreparedWindows,
    pub test: PreparedWindows,
}

pub fn prepare_splits(
    cfg: &RunConfig,
    data: &PreparedData,
    extractor: Option<&ExtractorModel>,
) -> Result<PreparedSplits> {
    let dec = &cfg.decomposition;
    Ok(PreparedSplits {
        train: prepare_windows(&data.windows.train, extractor, dec)?,
        val: prepare_windows(&data.windows.val, extractor, dec)?,
        test: prepare_windows(&data.windows.test, extractor, dec)?,
    })
}

/// Stage 2 and evaluation on already prepared windows.
pub fn run_stage2(
    cfg: &RunConfig,
    splits: &PreparedSplits,
    extractor: Option<&ExtractorModel>,
) -> Result<(Stage2Result, Metrics, Metrics)> {
    let before = extractor.map(ExtractorModel::hash);
    let mut s2 = fit_stage2(&splits.train, &splits.val, &cfg.stage2_config(), extractor.is_some())?;
    let after = extractor.map(ExtractorModel::hash);
    assert_eq!(before, after, "extractor parameters changed during stage 2");
    s2.model = s2.model.with_extractor_hash(after);
    let val = if splits.val.is_empty() {
        Metrics {
            mse: f64::NAN,
            mae: f64::NAN,
        }
    } else {
        evaluate(&s2.model, &splits.val)?
    };
    let test = evaluate(&s2.model, &splits.test)?;
    Ok((s2, val, test))
}

pub fn run_variant(cfg: &RunConfig, data: &PreparedData, variant: Variant) -> Result<RunOutput> {
    let stage1 = run_stage1(cfg, data, variant)?;
    let extractor = extractor_for(variant, stage1.as_ref(), data.normalized.num_vars());
    let splits = prepare_splits(cfg, data, extractor.as_ref())?;
    let (stage2, val, test) = run_stage2(cfg, &splits, extractor.as_ref())?;
    Ok(RunOutput {
        variant,
        extractor,
        stage1,
        stage2,
        val,
        test,
    })
}

/// Loads, prepares and runs one variant.
pub fn run(cfg: &RunConfig, variant: Variant) -> Result<RunOutput> {
    let data = load_dataset(cfg)?;
    let prepared = prepare_data(cfg, &data)?;
    run_variant(cfg, &prepared, variant)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth_vars = 3;
        cfg.synth_len = 600;
        cfg.stage1.epochs = 5;
        cfg.stage2.epochs = 3;
        cfg.stage2.lookback = 48;
        cfg.stage2.horizon = 12;
        cfg
    }

    #[test]
    fn renormalized_ablation_coefficients() {
        let base = FjConfig::default();
        let ns = AblationVariant::NoSocial.fj_config(&base).unwrap().unwrap();
        assert_eq!(ns.beta, 0.0);
        assert!((ns.delta - 2.0 / 3.0).abs() < 1e-15);
        assert!((ns.bias_coef() - 1.0 / 3.0).abs() < 1e-15);
        let nm = AblationVariant::NoMemoryBias.fj_config(&base).unwrap().unwrap();
        assert_eq!((nm.beta, nm.delta, nm.bias_coef()), (1.0, 0.0, 0.0));
        assert!(AblationVariant::NoFjLoss.fj_config(&base).unwrap().is_none());
        assert_eq!(AblationVariant::Full.fj_config(&base).unwrap(), Some(base));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Baseline, Variant::HINTS]
            .into_iter()
            .chain(AblationVariant::ALL.iter().skip(1).map(|a| Variant::Hints(*a)))
        {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = quick();
        let a = run(&cfg, Variant::HINTS).unwrap();
        let b = run(&cfg, Variant::HINTS).unwrap();
        assert_eq!(a.test, b.test);
        assert!(a.test.mse.is_finite() && a.test.mae > 0.0);
        assert_eq!(a.stage2.model.extractor_hash(), Some(a.extractor.unwrap().hash().as_str()));
    }

    #[test]
    fn no_fj_loss_uses_identity_extractor() {
        let cfg = quick();
        let out = run(&cfg, Variant::Hints(AblationVariant::NoFjLoss)).unwrap();
        assert!(out.stage1.is_none());
        assert_eq!(out.extractor.unwrap().coef(0), (1.0, 0.0));
        let base = run(&cfg, Variant::Baseline).unwrap();
        assert!(base.extractor.is_none() && !base.stage2.model.with_attention());
    }
}
