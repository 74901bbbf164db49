//! Experiment orchestration: paired baseline/HINTS comparisons, ablations,
//! gamma sweeps, an append-only record store and plot-data export.
//!
//! Records are JSON lines with fields in declaration order of
//! [`ExperimentRecord`]. A record is identified by its config hash, the
//! SHA-256 of the canonical config followed by a `variant = <tag>` line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::decompose::residual_of;
use crate::error::{HintsError, Result};
use crate::extractor::ExtractorModel;
use crate::forecaster::{Metrics, Stage2Model};
use crate::pipeline::{
    load_dataset, prepare_data, prepare_splits, run_stage1, run_stage2, run_variant, AblationVariant, Dataset,
    PreparedData, Variant,
};

/// The learning-rate and modulation grids searched in the original study.
pub const LR_GRID: [f64; 4] = [1e-2, 1e-3, 5e-4, 1e-4];
pub const GAMMA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub dataset: String,
    pub horizon: usize,
    pub variant: String,
    pub seed: u64,
    pub gamma: f64,
    pub mse: f64,
    pub mae: f64,
    /// `None` when the split has no validation windows.
    pub val_mse: Option<f64>,
    pub val_mae: Option<f64>,
    pub best_epoch: usize,
    pub config_hash: String,
    /// Canonical config text; enough to re-run the record.
    pub config: String,
    pub wall_time_s: f64,
}

pub fn run_hash(cfg: &RunConfig, variant: Variant) -> String {
    let text = format!("{}variant = {variant}\n", cfg.canonical());
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Record for a finished run; `started` marks the beginning of the run.
pub fn make_record(
    cfg: &RunConfig,
    variant: Variant,
    val: Metrics,
    test: Metrics,
    best_epoch: usize,
    started: Instant,
) -> ExperimentRecord {
    ExperimentRecord {
        dataset: cfg.dataset_id(),
        horizon: cfg.stage2.horizon,
        variant: variant.to_string(),
        seed: cfg.seed,
        gamma: if matches!(variant, Variant::Baseline) { 0.0 } else { cfg.stage2.gamma },
        mse: test.mse,
        mae: test.mae,
        val_mse: finite(val.mse),
        val_mae: finite(val.mae),
        best_epoch,
        config_hash: run_hash(cfg, variant),
        config: cfg.canonical(),
        wall_time_s: started.elapsed().as_secs_f64(),
    }
}

/// Append-only JSON-lines store guarded by a single-writer lock.
#[derive(Debug)]
pub struct RecordStore {
    path: PathBuf,
    lock: Mutex<()>,
}

impl RecordStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HintsError::io(dir, e))?;
        }
        Ok(Self {
            path,
            lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Completed records; a trailing line without a newline is an append
    /// in progress and is skipped.
    pub fn load(&self) -> Result<Vec<ExperimentRecord>> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(HintsError::io(&self.path, e)),
        };
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        complete
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(HintsError::from))
            .collect()
    }

    pub fn find(&self, hash: &str) -> Result<Option<ExperimentRecord>> {
        Ok(self.load()?.into_iter().find(|r| r.config_hash == hash))
    }

    pub fn append(&self, rec: &ExperimentRecord) -> Result<()> {
        let mut line = serde_json::to_string(rec)?;
        line.push('\n');
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| HintsError::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| HintsError::io(&self.path, e))
    }
}

/// Result of asking the harness for one run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub record: ExperimentRecord,
    /// True when an existing record with the same hash was returned.
    pub reused: bool,
}

/// Runs experiments, optionally persisting records. Without `force`, a run
/// whose hash is already stored is skipped and the stored record returned.
#[derive(Debug)]
pub struct Harness {
    pub store: Option<RecordStore>,
    pub jobs: usize,
    pub force: bool,
}

impl Default for Harness {
    fn default() -> Self {
        Self {
            store: None,
            jobs: 1,
            force: false,
        }
    }
}

impl Harness {
    pub fn new(jobs: usize) -> Self {
        Self {
            jobs: jobs.max(1),
            ..Self::default()
        }
    }

    pub fn with_store(mut self, store: RecordStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn forced(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    fn cached(&self, hash: &str) -> Result<Option<ExperimentRecord>> {
        match (&self.store, self.force) {
            (Some(store), false) => store.find(hash),
            _ => Ok(None),
        }
    }

    fn persist(&self, rec: &ExperimentRecord) -> Result<()> {
        if let Some(store) = &self.store {
            store.append(rec)?;
        }
        Ok(())
    }

    fn parallel<T, R>(&self, items: Vec<T>, f: impl Fn(T) -> Result<R> + Sync + Send) -> Result<Vec<R>>
    where
        T: Send,
        R: Send,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| HintsError::InvalidArgument(format!("cannot start worker pool: {e}")))?;
        let results: Vec<Result<R>> = pool.install(|| items.into_par_iter().map(&f).collect());
        results.into_iter().collect()
    }

    /// One run, loading and preparing the data itself.
    pub fn execute(&self, cfg: &RunConfig, variant: Variant) -> Result<Outcome> {
        cfg.validate()?;
        let hash = run_hash(cfg, variant);
        if let Some(record) = self.cached(&hash)? {
            log::info!("skipping {variant} seed {} h {}: record {hash} exists", cfg.seed, cfg.stage2.horizon);
            return Ok(Outcome { record, reused: true });
        }
        let started = Instant::now();
        let data = load_dataset(cfg)?;
        let prepared = prepare_data(cfg, &data)?;
        let out = run_variant(cfg, &prepared, variant)?;
        let record = make_record(cfg, variant, out.val, out.test, out.stage2.best_epoch, started);
        self.persist(&record)?;
        Ok(Outcome { record, reused: false })
    }

    /// Paired baseline and HINTS runs for every `(horizon, seed)`.
    pub fn run_comparison(
        &self,
        base: &RunConfig,
        horizons: &[usize],
        seeds: &[u64],
    ) -> Result<(Vec<ExperimentRecord>, ComparisonTable)> {
        nonempty(horizons, "horizons")?;
        nonempty(seeds, "seeds")?;
        let mut jobs = Vec::new();
        for &h in horizons {
            for &seed in seeds {
                for variant in [Variant::Baseline, Variant::HINTS] {
                    let mut cfg = base.clone();
                    cfg.stage2.horizon = h;
                    cfg.seed = seed;
                    jobs.push((cfg, variant));
                }
            }
        }
        let records: Vec<ExperimentRecord> = self
            .parallel(jobs, |(cfg, v)| self.execute(&cfg, v))?
            .into_iter()
            .map(|o| o.record)
            .collect();
        let table = ComparisonTable::from_records(&base.dataset_id(), &records)?;
        Ok((records, table))
    }

    /// All ablation variants at one horizon, one run per seed.
    pub fn run_ablation(&self, base: &RunConfig, seeds: &[u64]) -> Result<(Vec<ExperimentRecord>, AblationTable)> {
        nonempty(seeds, "seeds")?;
        for a in AblationVariant::ALL {
            a.fj_config(&base.fj)?;
        }
        let mut jobs = Vec::new();
        for &seed in seeds {
            for a in AblationVariant::ALL {
                let mut cfg = base.clone();
                cfg.seed = seed;
                jobs.push((cfg, Variant::Hints(a)));
            }
        }
        let records: Vec<ExperimentRecord> = self
            .parallel(jobs, |(cfg, v)| self.execute(&cfg, v))?
            .into_iter()
            .map(|o| o.record)
            .collect();
        let table = AblationTable::from_records(&base.dataset_id(), base.stage2.horizon, &records)?;
        Ok((records, table))
    }

    /// HINTS at every gamma in `grid` for every seed. Stage 1 runs once per
    /// seed, since it does not depend on gamma.
    pub fn run_gamma_sweep(
        &self,
        base: &RunConfig,
        grid: &[f64],
        seeds: &[u64],
    ) -> Result<(Vec<ExperimentRecord>, SweepCurve)> {
        validate_grid(grid)?;
        nonempty(seeds, "seeds")?;
        let per_seed = self.parallel(seeds.to_vec(), |seed| self.sweep_seed(base, grid, seed))?;
        let records: Vec<ExperimentRecord> = per_seed.into_iter().flatten().collect();
        let curve = SweepCurve::from_records(&base.dataset_id(), base.stage2.horizon, grid, &records)?;
        Ok((records, curve))
    }

    fn sweep_seed(&self, base: &RunConfig, grid: &[f64], seed: u64) -> Result<Vec<ExperimentRecord>> {
        let mut shared: Option<(RunConfig, Option<ExtractorModel>, crate::pipeline::PreparedSplits)> = None;
        let mut out = Vec::with_capacity(grid.len());
        for &gamma in grid {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.stage2.gamma = gamma;
            cfg.validate()?;
            let hash = run_hash(&cfg, Variant::HINTS);
            if let Some(rec) = self.cached(&hash)? {
                out.push(rec);
                continue;
            }
            let started = Instant::now();
            if shared.is_none() {
                let data = load_dataset(&cfg)?;
                let prepared = prepare_data(&cfg, &data)?;
                let s1 = run_stage1(&cfg, &prepared, Variant::HINTS)?.expect("full variant trains stage 1");
                let splits = prepare_splits(&cfg, &prepared, Some(&s1.model))?;
                shared = Some((cfg.clone(), Some(s1.model), splits));
            }
            let (_, extractor, splits) = shared.as_ref().expect("initialized above");
            let (s2, val, test) = run_stage2(&cfg, splits, extractor.as_ref())?;
            let rec = make_record(&cfg, Variant::HINTS, val, test, s2.best_epoch, started);
            self.persist(&rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Finds a stored record by hash and runs its config again.
    pub fn rerun_hash(&self, hash: &str) -> Result<ExperimentRecord> {
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| HintsError::InvalidArgument("no record store configured".into()))?;
        let rec = store
            .find(hash)?
            .ok_or_else(|| HintsError::InvalidArgument(format!("no record with hash {hash}")))?;
        rerun(&rec)
    }
}

/// Re-runs a record from its stored config, without consulting any store.
pub fn rerun(record: &ExperimentRecord) -> Result<ExperimentRecord> {
    let cfg: RunConfig = record.config.parse()?;
    let variant: Variant = record.variant.parse()?;
    let hash = run_hash(&cfg, variant);
    if hash != record.config_hash {
        return Err(HintsError::InvalidArgument(format!(
            "record config hashes to {hash}, not {}",
            record.config_hash
        )));
    }
    Ok(Harness::default().execute(&cfg, variant)?.record)
}

fn nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(HintsError::InvalidArgument(format!("{what} list is empty")));
    }
    Ok(())
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    nonempty(grid, "gamma")?;
    for (i, g) in grid.iter().enumerate() {
        if !(0.0..=1.0).contains(g) {
            return Err(HintsError::InvalidArgument(format!("gamma {g} outside [0, 1]")));
        }
        if grid[..i].contains(g) {
            return Err(HintsError::InvalidArgument(format!("gamma {g} listed twice")));
        }
    }
    Ok(())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Relative improvement `(baseline - hints) / baseline`.
pub fn improvement(baseline: f64, hints: f64) -> f64 {
    (baseline - hints) / baseline
}

/// Improvement of the horizon-averaged metrics: the means over horizons
/// are compared, not the per-horizon percentages.
pub fn improvement_avg(baseline: &[f64], hints: &[f64]) -> Result<f64> {
    if baseline.is_empty() || baseline.len() != hints.len() {
        return Err(HintsError::shape(
            format!("{} hints values", baseline.len()),
            format!("{}", hints.len()),
        ));
    }
    let b = mean(baseline);
    if b == 0.0 {
        return Err(HintsError::InvalidArgument("baseline mean is zero".into()));
    }
    Ok(improvement(b, mean(hints)))
}

fn metric_of<'a>(
    records: &'a [ExperimentRecord],
    pred: impl Fn(&ExperimentRecord) -> bool + 'a,
) -> impl Iterator<Item = &'a ExperimentRecord> + 'a {
    records.iter().filter(move |r| pred(r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub horizon: usize,
    pub baseline: Metrics,
    pub hints: Metrics,
    pub mse_improvement: f64,
    pub mae_improvement: f64,
    /// Seeds where HINTS has the lower validation MSE.
    pub val_wins: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub dataset: String,
    pub rows: Vec<ComparisonRow>,
    pub imp_avg_mse: f64,
    pub imp_avg_mae: f64,
}

impl ComparisonTable {
    pub fn from_records(dataset: &str, records: &[ExperimentRecord]) -> Result<Self> {
        let mut by_h: BTreeMap<usize, (BTreeMap<u64, &ExperimentRecord>, BTreeMap<u64, &ExperimentRecord>)> =
            BTreeMap::new();
        for r in records {
            let e = by_h.entry(r.horizon).or_default();
            match r.variant.as_str() {
                "baseline" => e.0.insert(r.seed, r),
                "hints" => e.1.insert(r.seed, r),
                _ => None,
            };
        }
        let mut rows = Vec::new();
        for (h, (base, hints)) in by_h {
            let seeds: Vec<u64> = base.keys().filter(|s| hints.contains_key(s)).copied().collect();
            if seeds.is_empty() {
                continue;
            }
            let avg = |m: &BTreeMap<u64, &ExperimentRecord>| Metrics {
                mse: mean(&seeds.iter().map(|s| m[s].mse).collect::<Vec<_>>()),
                mae: mean(&seeds.iter().map(|s| m[s].mae).collect::<Vec<_>>()),
            };
            let (b, x) = (avg(&base), avg(&hints));
            let val_wins = seeds
                .iter()
                .filter(|s| matches!((hints[s].val_mse, base[s].val_mse), (Some(a), Some(c)) if a < c))
                .count();
            rows.push(ComparisonRow {
                horizon: h,
                baseline: b,
                hints: x,
                mse_improvement: improvement(b.mse, x.mse),
                mae_improvement: improvement(b.mae, x.mae),
                val_wins,
                seeds: seeds.len(),
            });
        }
        if rows.is_empty() {
            return Err(HintsError::InvalidArgument("no paired baseline/hints records".into()));
        }
        let col = |f: fn(&ComparisonRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let imp_avg_mse = improvement_avg(&col(|r| r.baseline.mse), &col(|r| r.hints.mse))?;
        let imp_avg_mae = improvement_avg(&col(|r| r.baseline.mae), &col(|r| r.hints.mae))?;
        Ok(Self {
            dataset: dataset.to_owned(),
            rows,
            imp_avg_mse,
            imp_avg_mae,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:>8} {:>12} {:>12} {:>12} {:>12} {:>9} {:>9} {:>8}\n",
            "horizon", "base_mse", "hints_mse", "base_mae", "hints_mae", "imp_mse%", "imp_mae%", "val_wins"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>8} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>9.2} {:>9.2} {:>5}/{:<2}",
                r.horizon,
                r.baseline.mse,
                r.hints.mse,
                r.baseline.mae,
                r.hints.mae,
                100.0 * r.mse_improvement,
                100.0 * r.mae_improvement,
                r.val_wins,
                r.seeds
            );
        }
        let _ = writeln!(
            s,
            "Imp.(Avg.): MSE {:.2}%  MAE {:.2}%",
            100.0 * self.imp_avg_mse,
            100.0 * self.imp_avg_mae
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,baseline_mse,hints_mse,baseline_mae,hints_mae,mse_improvement,mae_improvement\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.horizon,
                r.baseline.mse,
                r.hints.mse,
                r.baseline.mae,
                r.hints.mae,
                r.mse_improvement,
                r.mae_improvement
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub mse: f64,
    pub mae: f64,
    pub mse_std: f64,
    pub mae_std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub dataset: String,
    pub horizon: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn from_records(dataset: &str, horizon: usize, records: &[ExperimentRecord]) -> Result<Self> {
        let mut rows = Vec::new();
        for a in AblationVariant::ALL {
            let tag = Variant::Hints(a).to_string();
            let picked: Vec<&ExperimentRecord> =
                metric_of(records, |r| r.variant == tag && r.horizon == horizon).collect();
            if picked.is_empty() {
                return Err(HintsError::InvalidArgument(format!("no records for ablation {}", a.tag())));
            }
            let mse: Vec<f64> = picked.iter().map(|r| r.mse).collect();
            let mae: Vec<f64> = picked.iter().map(|r| r.mae).collect();
            rows.push(AblationRow {
                variant: a,
                mse: mean(&mse),
                mae: mean(&mae),
                mse_std: std_dev(&mse),
                mae_std: std_dev(&mae),
                seeds: picked.len(),
            });
        }
        Ok(Self {
            dataset: dataset.to_owned(),
            horizon,
            rows,
        })
    }

    pub fn row(&self, a: AblationVariant) -> &AblationRow {
        self.rows.iter().find(|r| r.variant == a).expect("every variant has a row")
    }

    /// Full model no worse than every ablation on mean MSE.
    pub fn full_is_best(&self) -> bool {
        let full = self.row(AblationVariant::Full).mse;
        self.rows.iter().all(|r| full <= r.mse)
    }

    /// Strict order full < no_social < no_memory_bias < no_fj_loss.
    pub fn strict_order_holds(&self) -> bool {
        AblationVariant::ALL
            .windows(2)
            .all(|w| self.row(w[0]).mse < self.row(w[1]).mse)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:>16} {:>12} {:>10} {:>12} {:>10}\n",
            "variant", "mse", "mse_std", "mae", "mae_std"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>16} {:>12.6} {:>10.6} {:>12.6} {:>10.6}",
                r.variant.tag(),
                r.mse,
                r.mse_std,
                r.mae,
                r.mae_std
            );
        }
        let _ = writeln!(
            s,
            "full <= every ablation on MSE: {}; strict order full < no_social < no_memory_bias < no_fj_loss: {}",
            self.full_is_best(),
            self.strict_order_holds()
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mse,mse_std,mae,mae_std,seeds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.variant.tag(), r.mse, r.mse_std, r.mae, r.mae_std, r.seeds);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSeed {
    pub seed: u64,
    pub val_mse: Option<f64>,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub gamma: f64,
    pub mse: f64,
    pub mae: f64,
    pub mse_std: f64,
    pub mae_std: f64,
    pub per_seed: Vec<SweepSeed>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub dataset: String,
    pub horizon: usize,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn from_records(dataset: &str, horizon: usize, grid: &[f64], records: &[ExperimentRecord]) -> Result<Self> {
        let mut points = Vec::new();
        for &g in grid {
            let mut per_seed: Vec<SweepSeed> =
                metric_of(records, |r| r.variant == "hints" && r.gamma == g && r.horizon == horizon)
                    .map(|r| SweepSeed {
                        seed: r.seed,
                        val_mse: r.val_mse,
                        mse: r.mse,
                        mae: r.mae,
                    })
                    .collect();
            if per_seed.is_empty() {
                return Err(HintsError::InvalidArgument(format!("no records for gamma {g}")));
            }
            per_seed.sort_by_key(|p| p.seed);
            let mse: Vec<f64> = per_seed.iter().map(|p| p.mse).collect();
            let mae: Vec<f64> = per_seed.iter().map(|p| p.mae).collect();
            points.push(SweepPoint {
                gamma: g,
                mse: mean(&mse),
                mae: mean(&mae),
                mse_std: std_dev(&mse),
                mae_std: std_dev(&mae),
                per_seed,
            });
        }
        Ok(Self {
            dataset: dataset.to_owned(),
            horizon,
            points,
        })
    }

    fn seed_entry(&self, gamma: f64, seed: u64) -> Option<&SweepSeed> {
        self.points
            .iter()
            .find(|p| p.gamma == gamma)?
            .per_seed
            .iter()
            .find(|s| s.seed == seed)
    }

    /// Gamma with the lowest validation MSE for `seed`; ties go to the
    /// earlier grid point.
    pub fn best_gamma(&self, seed: u64) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for p in &self.points {
            let v = self.seed_entry(p.gamma, seed)?.val_mse?;
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((p.gamma, v));
            }
        }
        best.map(|(g, _)| g)
    }

    /// Test MSE of `seed` at `gamma`.
    pub fn test_mse(&self, gamma: f64, seed: u64) -> Option<f64> {
        self.seed_entry(gamma, seed).map(|s| s.mse)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("gamma,mse,mse_std,mae,mae_std,seeds\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.gamma,
                p.mse,
                p.mse_std,
                p.mae,
                p.mae_std,
                p.per_seed.len()
            );
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:>6} {:>12} {:>10} {:>12} {:>10}\n", "gamma", "mse", "mse_std", "mae", "mae_std");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:>6} {:>12.6} {:>10.6} {:>12.6} {:>10.6}",
                p.gamma, p.mse, p.mse_std, p.mae, p.mae_std
            );
        }
        s
    }
}

/// Plot-data file name: `<dataset>_<experiment>_<h>.csv`.
pub fn plot_file_name(dataset: &str, experiment: &str, horizon: usize) -> String {
    format!("{dataset}_{experiment}_{horizon}.csv")
}

pub fn write_plot_csv(dir: &Path, dataset: &str, experiment: &str, horizon: usize, body: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| HintsError::io(dir, e))?;
    let path = dir.join(plot_file_name(dataset, experiment, horizon));
    std::fs::write(&path, body).map_err(|e| HintsError::io(&path, e))?;
    Ok(path)
}

/// Plain-text listing of records.
pub fn render_records(records: &[ExperimentRecord]) -> String {
    let mut s = format!(
        "{:>10} {:>4} {:>15} {:>20} {:>5} {:>12} {:>12} {:>8}\n",
        "dataset", "h", "variant", "seed", "gamma", "mse", "mae", "hash"
    );
    for r in records {
        let _ = writeln!(
            s,
            "{:>10} {:>4} {:>15} {:>20} {:>5} {:>12.6} {:>12.6} {:>8}",
            r.dataset,
            r.horizon,
            r.variant,
            r.seed,
            r.gamma,
            r.mse,
            r.mae,
            &r.config_hash[..8]
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub value: f64,
    pub hhat: f64,
    pub attention: f64,
}

/// Raw value, extracted factor and attention of one variable over `range`,
/// which is cut into consecutive lookback windows. Each window is
/// decomposed on its own, as the forecaster sees it.
pub fn human_factor_trace(
    cfg: &RunConfig,
    data: &Dataset,
    prepared: &PreparedData,
    extractor: &ExtractorModel,
    model: &Stage2Model,
    variable: &str,
    range: Range<usize>,
) -> Result<Vec<TraceRow>> {
    let idx = data
        .series
        .var_index(variable)
        .ok_or_else(|| HintsError::UnknownVariable(variable.to_owned()))?;
    let l = model.lookback();
    if range.is_empty() || range.len() % l != 0 || range.end > data.series.len() {
        return Err(HintsError::InvalidArgument(format!(
            "trace range {range:?} must be a non-empty multiple of the lookback {l} within {} steps",
            data.series.len()
        )));
    }
    let mut rows = Vec::with_capacity(range.len());
    for start in range.clone().step_by(l) {
        let window = prepared.normalized.values().slice(s![.., start..start + l]);
        let residual = residual_of(window, &cfg.decomposition)?;
        let hhat = extractor.extract(residual.view())?;
        let a = model.attention_map(hhat.view())?;
        for k in 0..l {
            rows.push(TraceRow {
                t: start + k,
                value: data.series.values()[[idx, start + k]],
                hhat: hhat[[idx, k]],
                attention: a[[idx, k]],
            });
        }
    }
    Ok(rows)
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("t,value,hhat,attention\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.t, r.value, r.hhat, r.attention);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth_vars = 3;
        cfg.synth_len = 500;
        cfg.stage1.epochs = 3;
        cfg.stage2.epochs = 2;
        cfg.stage2.lookback = 48;
        cfg.stage2.horizon = 12;
        cfg
    }

    fn rec(variant: &str, h: usize, seed: u64, mse: f64, mae: f64) -> ExperimentRecord {
        ExperimentRecord {
            dataset: "x".into(),
            horizon: h,
            variant: variant.into(),
            seed,
            gamma: 0.5,
            mse,
            mae,
            val_mse: Some(mse),
            val_mae: Some(mae),
            best_epoch: 1,
            config_hash: format!("{variant}{h}{seed}"),
            config: String::new(),
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn improvement_avg_compares_means() {
        let b = [1.0, 3.0];
        let h = [0.5, 2.5];
        assert!((improvement_avg(&b, &h).unwrap() - 0.25).abs() < 1e-15);
        // Averaging per-horizon percentages would give 0.333...
        assert!(improvement_avg(&b, &h[..1]).is_err());
        assert!(improvement_avg(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn comparison_table_from_records() {
        let records = vec![
            rec("baseline", 96, 1, 0.2, 0.4),
            rec("hints", 96, 1, 0.1, 0.3),
            rec("baseline", 96, 2, 0.4, 0.6),
            rec("hints", 96, 2, 0.5, 0.5),
            rec("baseline", 192, 1, 1.0, 1.0),
            rec("hints", 192, 1, 0.8, 1.0),
        ];
        let t = ComparisonTable::from_records("x", &records).unwrap();
        assert_eq!(t.rows.len(), 2);
        let r = &t.rows[0];
        assert_eq!((r.horizon, r.seeds, r.val_wins), (96, 2, 1));
        assert!((r.baseline.mse - 0.3).abs() < 1e-15 && (r.hints.mse - 0.3).abs() < 1e-15);
        // means over horizons: baseline (0.3 + 1.0)/2, hints (0.3 + 0.8)/2
        assert!((t.imp_avg_mse - 0.2 / 1.3).abs() < 1e-12);
        assert!(t.render().contains("Imp.(Avg.)"));
        assert_eq!(t.to_csv().lines().count(), 3);
    }

    #[test]
    fn ablation_ordering_checks() {
        let mut records = Vec::new();
        for (tag, m) in [("hints", 0.1), ("no_social", 0.2), ("no_memory_bias", 0.3), ("no_fj_loss", 0.4)] {
            records.push(rec(tag, 24, 0, m, m));
            records.push(rec(tag, 24, 1, m + 0.1, m));
        }
        let t = AblationTable::from_records("x", 24, &records).unwrap();
        assert!(t.full_is_best() && t.strict_order_holds());
        assert!((t.row(AblationVariant::Full).mse - 0.15).abs() < 1e-15);
        assert!((t.row(AblationVariant::Full).mse_std - 0.1 / 2f64.sqrt()).abs() < 1e-12);
        records[0].mse = 0.9;
        let t = AblationTable::from_records("x", 24, &records).unwrap();
        assert!(!t.full_is_best());
    }

    #[test]
    fn grid_validation() {
        validate_grid(&GAMMA_GRID).unwrap();
        validate_grid(&[0.0]).unwrap();
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[1.5]).is_err());
        assert!(validate_grid(&[0.3, 0.3]).is_err());
        assert!(validate_grid(&[f64::NAN]).is_err());
    }

    #[test]
    fn sweep_curve_best_gamma_uses_validation() {
        let mut records = Vec::new();
        for (g, val, test) in [(0.1, 0.5, 0.1), (0.5, 0.2, 0.3), (1.0, 0.2, 0.0)] {
            let mut r = rec("hints", 24, 7, test, test);
            r.gamma = g;
            r.val_mse = Some(val);
            records.push(r);
        }
        let c = SweepCurve::from_records("x", 24, &[0.1, 0.5, 1.0], &records).unwrap();
        assert_eq!(c.points.len(), 3);
        assert_eq!(c.best_gamma(7), Some(0.5));
        assert_eq!(c.test_mse(0.5, 7), Some(0.3));
        assert_eq!(c.best_gamma(8), None);
        assert_eq!(c.to_csv().lines().count(), 4);
    }

    #[test]
    fn store_skips_duplicates_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick();
        let h = Harness::new(1).with_store(RecordStore::open(dir.path().join("r/records.jsonl")).unwrap());
        let a = h.execute(&cfg, Variant::Baseline).unwrap();
        assert!(!a.reused);
        let b = h.execute(&cfg, Variant::Baseline).unwrap();
        assert!(b.reused);
        assert_eq!(a.record, b.record);
        assert_eq!(h.store.as_ref().unwrap().load().unwrap().len(), 1);
        let h = h.forced(true);
        let c = h.execute(&cfg, Variant::Baseline).unwrap();
        assert!(!c.reused);
        assert_eq!((c.record.mse, c.record.mae), (a.record.mse, a.record.mae));
        assert_eq!(h.store.as_ref().unwrap().load().unwrap().len(), 2);
    }

    #[test]
    fn partial_last_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::open(dir.path().join("records.jsonl")).unwrap();
        store.append(&rec("hints", 1, 1, 0.1, 0.1)).unwrap();
        let mut f = OpenOptions::new().append(true).open(store.path()).unwrap();
        f.write_all(b"{\"dataset\":").unwrap();
        assert_eq!(store.load().unwrap().len(), 1);
        assert!(store.find("hints11").unwrap().is_some());
    }

    #[test]
    fn hash_depends_on_variant_and_config() {
        let cfg = quick();
        assert_ne!(run_hash(&cfg, Variant::Baseline), run_hash(&cfg, Variant::HINTS));
        let mut other = cfg.clone();
        other.stage2.gamma = 0.3;
        assert_ne!(run_hash(&cfg, Variant::HINTS), run_hash(&other, Variant::HINTS));
        other = cfg.clone();
        other.out_dir = "elsewhere".into();
        assert_eq!(run_hash(&cfg, Variant::HINTS), run_hash(&other, Variant::HINTS));
    }

    #[test]
    fn rerun_reproduces_record() {
        let cfg = quick();
        let a = Harness::default().execute(&cfg, Variant::HINTS).unwrap().record;
        let b = rerun(&a).unwrap();
        assert_eq!((a.mse, a.mae, &a.config_hash), (b.mse, b.mae, &b.config_hash));
        let mut bad = a.clone();
        bad.config_hash = "0".repeat(64);
        assert!(rerun(&bad).is_err());
    }

    #[test]
    fn gamma_zero_sweep_point_equals_baseline() {
        let cfg = quick();
        let h = Harness::default();
        let (_, curve) = h.run_gamma_sweep(&cfg, &[0.0, 0.5], &[3]).unwrap();
        let mut bcfg = cfg.clone();
        bcfg.seed = 3;
        let base = h.execute(&bcfg, Variant::Baseline).unwrap().record;
        assert_eq!(curve.test_mse(0.0, 3), Some(base.mse));
        assert_eq!(curve.points[0].mae, base.mae);
    }

    #[test]
    fn sweep_shares_stage1_with_single_runs() {
        let mut cfg = quick();
        cfg.seed = 4;
        let (records, _) = Harness::default().run_gamma_sweep(&cfg, &[0.5], &[4]).unwrap();
        let single = Harness::default().execute(&cfg, Variant::HINTS).unwrap().record;
        assert_eq!((records[0].mse, records[0].mae), (single.mse, single.mae));
        assert_eq!(records[0].config_hash, single.config_hash);
    }

    #[test]
    fn trace_rows_and_errors() {
        let mut cfg = quick();
        cfg.synth_vars = 2;
        let data = load_dataset(&cfg).unwrap();
        let prepared = prepare_data(&cfg, &data).unwrap();
        let out = run_variant(&cfg, &prepared, Variant::HINTS).unwrap();
        let ex = out.extractor.unwrap();
        let model = out.stage2.model;
        let name = data.series.names()[1].clone();
        let rows = human_factor_trace(&cfg, &data, &prepared, &ex, &model, &name, 48..144).unwrap();
        assert_eq!(rows.len(), 96);
        for chunk in rows.chunks(48) {
            let sum: f64 = chunk.iter().map(|r| r.attention).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert_eq!(rows[0].value, data.series.values()[[1, 48]]);
        assert!(matches!(
            human_factor_trace(&cfg, &data, &prepared, &ex, &model, "nope", 0..48),
            Err(HintsError::UnknownVariable(_))
        ));
        assert!(human_factor_trace(&cfg, &data, &prepared, &ex, &model, &name, 0..50).is_err());
        let csv = trace_csv(&rows);
        assert!(csv.starts_with("t,value,hhat,attention\n"));
        assert_eq!(csv.lines().count(), 97);
    }
}
