//! Flat `key = value` run configuration.
//!
//! Resolution order: built-in defaults, then a config file, then explicit
//! overrides (command-line flags). `#` starts a comment. The canonical form
//! lists every key in a fixed order with shortest round-trip number
//! formatting; its SHA-256 is the config hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::decompose::DecompositionConfig;
use crate::error::{HintsError, Result};
use crate::extractor::{Reduction, Stage1Config};
use crate::fj::{FjConfig, PlantedConfig};
use crate::forecaster::Stage2Config;
use crate::seed::derive_seed;
use crate::series::{CsvSchema, SplitSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "config file",
            Source::Flag => "flag",
        })
    }
}

/// Every setting that influences a run's numbers, plus the output dir.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Empty path means the planted synthetic generator.
    pub data_path: String,
    pub data_columns: Vec<String>,
    pub data_timestamp: String,
    pub data_delimiter: char,
    pub synth_vars: usize,
    pub synth_len: usize,
    pub planted: PlantedConfig,
    pub decomposition: DecompositionConfig,
    pub fj: FjConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub split: SplitSpec,
    pub seed: u64,
    /// Not part of the canonical form.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: String::new(),
            data_columns: Vec::new(),
            data_timestamp: String::new(),
            data_delimiter: ',',
            synth_vars: 5,
            synth_len: 2000,
            planted: PlantedConfig::default(),
            decomposition: DecompositionConfig::default(),
            fj: FjConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config {
                horizon: 24,
                ..Stage2Config::default()
            },
            split: SplitSpec::default(),
            seed: 0,
            out_dir: PathBuf::from("hints_out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| HintsError::Usage {
        key: key.to_owned(),
        message: format!("cannot parse {value:?}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(HintsError::Usage {
            key: key.to_owned(),
            message: format!("expected true or false, got {other:?}"),
        }),
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// `(key, value)` pairs of the canonical form, in fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.planted;
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        vec![
            ("data.path", self.data_path.clone()),
            ("data.columns", self.data_columns.join(",")),
            ("data.timestamp", self.data_timestamp.clone()),
            ("data.delimiter", self.data_delimiter.to_string()),
            ("synth.vars", self.synth_vars.to_string()),
            ("synth.len", self.synth_len.to_string()),
            ("synth.noise", fmt_f(p.noise_scale)),
            ("synth.shock_scale", fmt_f(p.shock_scale)),
            ("synth.shock_rate", fmt_f(p.shock_rate)),
            ("synth.trend_slope", fmt_f(p.trend_slope)),
            ("synth.seasonal_amplitude", fmt_f(p.seasonal_amplitude)),
            ("synth.period", p.period.to_string()),
            ("decomp.mode", self.decomposition.mode.to_string()),
            ("decomp.period", self.decomposition.period.to_string()),
            ("fj.beta", fmt_f(self.fj.beta)),
            ("fj.delta", fmt_f(self.fj.delta)),
            ("fj.lambda", fmt_f(self.fj.lambda)),
            ("fj.window", self.fj.bias_window.to_string()),
            ("stage1.lr", fmt_f(s1.lr)),
            ("stage1.epochs", s1.epochs.to_string()),
            ("stage1.momentum", fmt_f(s1.momentum)),
            ("stage1.batch", s1.batch_steps.to_string()),
            ("stage1.target_detached", s1.target_detached.to_string()),
            ("stage1.per_variable", s1.per_variable.to_string()),
            (
                "stage1.reduction",
                match s1.reduction {
                    Reduction::Mean => "mean",
                    Reduction::Sum => "sum",
                }
                .to_string(),
            ),
            ("stage2.gamma", fmt_f(s2.gamma)),
            ("stage2.lr", fmt_f(s2.lr)),
            ("stage2.epochs", s2.epochs.to_string()),
            ("stage2.lookback", s2.lookback.to_string()),
            ("stage2.horizon", s2.horizon.to_string()),
            ("stage2.kernel", s2.kernel.to_string()),
            ("stage2.ma_kernel", s2.ma_kernel.to_string()),
            ("stage2.batch", s2.batch.to_string()),
            ("stage2.momentum", fmt_f(s2.momentum)),
            ("stage2.patience", s2.patience.to_string()),
            ("stage2.attn_scale", s2.attn_scale.to_string()),
            ("split.train", fmt_f(self.split.train_frac)),
            ("split.val", fmt_f(self.split.val_frac)),
            ("split.test", fmt_f(self.split.test_frac)),
            ("split.stride", self.split.stride.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.path" => self.data_path = v.to_owned(),
            "data.columns" => {
                self.data_columns = v.split(',').map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect()
            }
            "data.timestamp" => self.data_timestamp = v.to_owned(),
            "data.delimiter" => {
                let mut chars = v.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii() => self.data_delimiter = c,
                    _ => {
                        return Err(HintsError::Usage {
                            key: key.into(),
                            message: "must be a single ascii character".into(),
                        })
                    }
                }
            }
            "synth.vars" => self.synth_vars = parse(key, v)?,
            "synth.len" => self.synth_len = parse(key, v)?,
            "synth.noise" => self.planted.noise_scale = parse(key, v)?,
            "synth.shock_scale" => self.planted.shock_scale = parse(key, v)?,
            "synth.shock_rate" => self.planted.shock_rate = parse(key, v)?,
            "synth.trend_slope" => self.planted.trend_slope = parse(key, v)?,
            "synth.seasonal_amplitude" => self.planted.seasonal_amplitude = parse(key, v)?,
            "synth.period" => self.planted.period = parse(key, v)?,
            "decomp.mode" => self.decomposition.mode = parse(key, v)?,
            "decomp.period" => self.decomposition.period = parse(key, v)?,
            "fj.beta" => self.fj.beta = parse(key, v)?,
            "fj.delta" => self.fj.delta = parse(key, v)?,
            "fj.lambda" => self.fj.lambda = parse(key, v)?,
            "fj.window" => self.fj.bias_window = parse(key, v)?,
            "stage1.lr" => self.stage1.lr = parse(key, v)?,
            "stage1.epochs" => self.stage1.epochs = parse(key, v)?,
            "stage1.momentum" => self.stage1.momentum = parse(key, v)?,
            "stage1.batch" => self.stage1.batch_steps = parse(key, v)?,
            "stage1.target_detached" => self.stage1.target_detached = parse_bool(key, v)?,
            "stage1.per_variable" => self.stage1.per_variable = parse_bool(key, v)?,
            "stage1.reduction" => {
                self.stage1.reduction = match v {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    other => {
                        return Err(HintsError::Usage {
                            key: key.into(),
                            message: format!("expected mean or sum, got {other:?}"),
                        })
                    }
                }
            }
            "stage2.gamma" => self.stage2.gamma = parse(key, v)?,
            "stage2.lr" => self.stage2.lr = parse(key, v)?,
            "stage2.epochs" => self.stage2.epochs = parse(key, v)?,
            "stage2.lookback" => self.stage2.lookback = parse(key, v)?,
            "stage2.horizon" => self.stage2.horizon = parse(key, v)?,
            "stage2.kernel" => self.stage2.kernel = parse(key, v)?,
            "stage2.ma_kernel" => self.stage2.ma_kernel = parse(key, v)?,
            "stage2.batch" => self.stage2.batch = parse(key, v)?,
            "stage2.momentum" => self.stage2.momentum = parse(key, v)?,
            "stage2.patience" => self.stage2.patience = parse(key, v)?,
            "stage2.attn_scale" => self.stage2.attn_scale = parse_bool(key, v)?,
            "split.train" => self.split.train_frac = parse(key, v)?,
            "split.val" => self.split.val_frac = parse(key, v)?,
            "split.test" => self.split.test_frac = parse(key, v)?,
            "split.stride" => self.split.stride = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => {
                return Err(HintsError::Usage {
                    key: other.into(),
                    message: "unknown configuration key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Canonical form preceded by a comment header and the output dir;
    /// parseable by [`RunConfig::resolve`].
    pub fn render(&self) -> String {
        format!(
            "# hints run configuration\n# config hash {}\nout_dir = {}\n{}",
            self.hash(),
            self.out_dir.display(),
            self.canonical()
        )
    }

    /// Parses `key = value` lines, rejecting unknown keys and duplicates.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut seen = BTreeMap::new();
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| HintsError::Usage {
                key: format!("line {}", n + 1),
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let k = k.trim().to_owned();
            if seen.insert(k.clone(), n + 1).is_some() {
                return Err(HintsError::Usage {
                    key: k,
                    message: format!("set twice (line {})", n + 1),
                });
            }
            out.push((k, v.trim().to_owned()));
        }
        Ok(out)
    }

    /// Defaults, then `file_text`, then `overrides`; validated.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut sources: BTreeMap<String, Source> = BTreeMap::new();
        if let Some(text) = file_text {
            for (k, v) in Self::parse_pairs(text)? {
                cfg.set(&k, &v)?;
                sources.insert(k, Source::File);
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
            sources.insert(k.clone(), Source::Flag);
        }
        cfg.validate_with(&sources)?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| HintsError::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(&BTreeMap::new())
    }

    fn validate_with(&self, sources: &BTreeMap<String, Source>) -> Result<()> {
        let src = |k: &str| sources.get(k).copied().unwrap_or(Source::Default);
        if let Err(e) = self.fj.validate() {
            return Err(match e {
                HintsError::ConfigConflict { message, .. } => HintsError::ConfigConflict {
                    first: format!("fj.beta = {} ({})", self.fj.beta, src("fj.beta")),
                    second: format!("fj.delta = {} ({})", self.fj.delta, src("fj.delta")),
                    message,
                },
                HintsError::Usage { key, message } => HintsError::Usage {
                    key: format!("fj.{}", if key == "bias_window" { "window" } else { &key }),
                    message,
                },
                other => other,
            });
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.split.validate()?;
        if self.decomposition.period == 0 {
            return Err(HintsError::Usage {
                key: "decomp.period".into(),
                message: "must be positive".into(),
            });
        }
        if self.stage2.lookback < 2 * self.decomposition.period {
            return Err(HintsError::ConfigConflict {
                first: format!("stage2.lookback = {} ({})", self.stage2.lookback, src("stage2.lookback")),
                second: format!(
                    "decomp.period = {} ({})",
                    self.decomposition.period,
                    src("decomp.period")
                ),
                message: "each lookback window is decomposed, so it must span at least two periods".into(),
            });
        }
        if self.data_path.is_empty() && (self.synth_vars == 0 || self.synth_len < 2) {
            return Err(HintsError::Usage {
                key: "synth.vars".into(),
                message: "synthetic data needs at least one variable and two steps".into(),
            });
        }
        Ok(())
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            columns: self.data_columns.clone(),
            timestamp: (!self.data_timestamp.is_empty()).then(|| self.data_timestamp.clone()),
            delimiter: self.data_delimiter as u8,
        }
    }

    /// Short dataset id used in file names.
    pub fn dataset_id(&self) -> String {
        if self.data_path.is_empty() {
            "planted".into()
        } else {
            Path::new(&self.data_path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into())
        }
    }

    /// Stage-1 settings with the stage seed split off the master seed.
    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            fj: self.fj,
            seed: derive_seed(self.seed, "stage1"),
            ..self.stage1.clone()
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config {
            seed: derive_seed(self.seed, "stage2"),
            ..self.stage2
        }
    }

    pub fn synth_seed(&self) -> u64 {
        derive_seed(self.seed, "synth")
    }

    pub fn planted_config(&self) -> PlantedConfig {
        PlantedConfig {
            fj: self.fj,
            ..self.planted.clone()
        }
    }
}

impl std::str::FromStr for RunConfig {
    type Err = HintsError;

    fn from_str(s: &str) -> Result<Self> {
        Self::resolve(Some(s), &[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_render() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let again: RunConfig = cfg.render().parse().unwrap();
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(again, cfg);
    }

    #[test]
    fn every_key_round_trips() {
        let mut cfg = RunConfig::default();
        for (k, v) in cfg.clone().entries() {
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let file = "stage2.gamma = 0.3\nstage1.lr = 0.001 # comment\n";
        let cfg = RunConfig::resolve(Some(file), &flags(&[("stage2.gamma", "0.9")])).unwrap();
        assert_eq!(cfg.stage2.gamma, 0.9);
        assert_eq!(cfg.stage1.lr, 0.001);
        assert_eq!(cfg.stage2.lookback, 96);
    }

    #[test]
    fn beta_delta_conflict_names_both_sources() {
        let err = RunConfig::resolve(Some("fj.beta = 0.7\n"), &flags(&[("fj.delta", "0.5")])).unwrap_err();
        match err {
            HintsError::ConfigConflict { first, second, message } => {
                assert!(first.contains("config file") && second.contains("flag"));
                assert!(message.contains("beta + delta must be <= 1"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_inputs_are_usage_errors() {
        for (k, v) in [
            ("nope", "1"),
            ("stage2.gamma", "abc"),
            ("stage2.gamma", "1.5"),
            ("stage2.kernel", "4"),
            ("fj.lambda", "2"),
        ] {
            let e = RunConfig::resolve(None, &flags(&[(k, v)])).unwrap_err();
            assert_eq!(e.kind(), crate::ErrorKind::Usage, "{k}={v}: {e}");
        }
        assert!(RunConfig::resolve(Some("seed = 1\nseed = 2\n"), &[]).is_err());
        assert!(RunConfig::resolve(Some("just words\n"), &[]).is_err());
    }

    #[test]
    fn hash_tracks_content_not_out_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.stage2.gamma = 0.3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_seeds_split_from_master() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.stage1_config().seed, cfg.stage2_config().seed);
        assert_eq!(cfg.stage2_config().seed, derive_seed(0, "stage2"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rendered_config_parses_to_same_hash(
                gamma in 0.0f64..1.0,
                beta in 0.0f64..0.5,
                delta in 0.0f64..0.5,
                lookback in 48usize..200,
                seed in any::<u64>(),
            ) {
                let mut cfg = RunConfig::default();
                cfg.stage2.gamma = gamma;
                cfg.fj.beta = beta;
                cfg.fj.delta = delta;
                cfg.stage2.lookback = lookback;
                cfg.seed = seed;
                let again: RunConfig = cfg.render().parse().unwrap();
                prop_assert_eq!(again.hash(), cfg.hash());
                prop_assert_eq!(again, cfg);
            }
        }
    }
}
