//! `hints` command-line driver.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use hints_core::config::RunConfig;
use hints_core::decompose::{decompose, write_debug_csv};
use hints_core::extractor::{freeze_and_save, load_frozen, loss_curve_csv, ExtractorModel};
use hints_core::fj::generate_planted_series;
use hints_core::forecaster::{evaluate, prediction_dump, prepare_windows, Stage2Model};
use hints_core::harness::{
    human_factor_trace, make_record, render_records, trace_csv, write_plot_csv, Harness, RecordStore,
    GAMMA_GRID,
};
use hints_core::pipeline::{
    load_dataset, prepare_data, prepare_splits, run_stage1, run_stage2, AblationVariant, Variant,
};
use hints_core::series::write_series_csv;
use hints_core::{selftest, ErrorKind, HintsError, Result};

#[derive(Parser, Debug)]
#[command(name = "hints", version, about = "Two-stage human-factor extraction and attention-modulated forecasting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[arg(long, global = true, env = "HINTS_OUT_DIR", value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Maximum parallel runs in compare, ablate and sweep.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// CSV file; omit for the planted synthetic generator.
    #[arg(long, global = true, value_name = "CSV")]
    data: Option<String>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Dynamic-bias rolling window.
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    lookback: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Seasonal period used by the decomposition.
    #[arg(long, global = true)]
    period: Option<usize>,
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and split the data and print a summary.
    Ingest,
    /// Write per-variable trend/seasonal/residual CSVs.
    Decompose,
    /// Train and freeze the human-factor extractor.
    Stage1,
    /// Train the forecaster (bare backbone or attention-modulated).
    Stage2 {
        #[arg(long, default_value = "hints")]
        variant: Variant,
        #[arg(long)]
        gamma: Option<f64>,
        /// Frozen extractor checkpoint; trained in-process when omitted.
        #[arg(long, value_name = "CKPT")]
        extractor: Option<PathBuf>,
    },
    /// Evaluate a saved forecaster on the test split and dump predictions.
    Evaluate {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_name = "CKPT")]
        extractor: Option<PathBuf>,
    },
    /// Paired baseline and HINTS runs with an improvement table.
    Compare {
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Re-run even when a record with the same hash exists.
        #[arg(long)]
        force: bool,
    },
    /// Component ablation table.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Modulation-strength sweep.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        gamma: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Export raw value, extracted factor and attention for one variable.
    Trace {
        #[arg(long)]
        variable: String,
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Number of steps; a multiple of the lookback (default: one lookback).
        #[arg(long)]
        len: Option<usize>,
        /// Directory holding `extractor.ckpt` and `forecaster.ckpt`
        /// (default: `<out_dir>/stage2`).
        #[arg(long, value_name = "DIR")]
        bundle: Option<PathBuf>,
    },
    /// Write a planted-dynamics synthetic series.
    Synth {
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        /// Also write the planted latent factor next to the series.
        #[arg(long)]
        latent: bool,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

fn overrides(c: &Common) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| HintsError::Usage {
            key: "--set".into(),
            message: format!("expected KEY=VALUE, got {kv:?}"),
        })?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((key.to_owned(), v));
        }
    };
    flag("out_dir", c.out_dir.as_ref().map(|p| p.display().to_string()));
    flag("seed", c.seed.map(|v| v.to_string()));
    flag("data.path", c.data.clone());
    flag("fj.beta", c.beta.map(|v| v.to_string()));
    flag("fj.delta", c.delta.map(|v| v.to_string()));
    flag("fj.lambda", c.lambda.map(|v| v.to_string()));
    flag("fj.window", c.window.map(|v| v.to_string()));
    flag("stage2.lookback", c.lookback.map(|v| v.to_string()));
    flag("stage2.horizon", c.horizon.map(|v| v.to_string()));
    flag("decomp.period", c.period.map(|v| v.to_string()));
    Ok(out)
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HintsError::Io {
            path: dir.to_owned(),
            source: e,
        })?;
    }
    std::fs::write(path, body).map_err(|e| HintsError::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn seeds_or_default(seeds: &[u64], cfg: &RunConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    }
}

fn harness(cfg: &RunConfig, jobs: Option<usize>, force: bool) -> Result<Harness> {
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(Harness::new(jobs)
        .with_store(RecordStore::open(cfg.out_dir.join("records.jsonl"))?)
        .forced(force))
}

fn run(cli: Cli) -> Result<()> {
    let overrides = overrides(&cli.common)?;
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    if let Some(Command::Stage2 { gamma: Some(g), .. }) = &cli.command {
        cfg.set("stage2.gamma", &g.to_string())?;
        cfg.validate()?;
    }
    if cli.common.print_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(HintsError::Usage {
            key: "command".into(),
            message: "no subcommand given (see --help)".into(),
        });
    };
    let out = cfg.out_dir.clone();
    match command {
        Command::Ingest => {
            let data = load_dataset(&cfg)?;
            let prepared = prepare_data(&cfg, &data)?;
            let mut s = String::new();
            let _ = writeln!(s, "dataset {}", data.id);
            let _ = writeln!(s, "variables {} ({})", data.series.num_vars(), data.series.names().join(", "));
            let _ = writeln!(s, "steps {}", data.series.len());
            let r = &prepared.ranges;
            let _ = writeln!(s, "train {:?} val {:?} test {:?}", r.train, r.val, r.test);
            let w = &prepared.windows;
            let _ = writeln!(
                s,
                "windows (lookback {}, horizon {}): train {} val {} test {}",
                cfg.stage2.lookback,
                cfg.stage2.horizon,
                w.train.len(),
                w.val.len(),
                w.test.len()
            );
            let _ = writeln!(s, "config hash {}", cfg.hash());
            print!("{s}");
            write(&out.join("ingest_summary.txt"), &s)?;
        }
        Command::Decompose => {
            let data = load_dataset(&cfg)?;
            let dec = decompose(&data.series, cfg.decomposition.period, cfg.decomposition.mode)?;
            let dir = out.join("decomposition");
            write_debug_csv(&dir, &data.series, &dec)?;
            println!("wrote {} files to {}", data.series.num_vars(), dir.display());
        }
        Command::Stage1 => {
            let data = load_dataset(&cfg)?;
            let prepared = prepare_data(&cfg, &data)?;
            let s1 = run_stage1(&cfg, &prepared, Variant::HINTS)?.expect("full variant trains stage 1");
            let dir = out.join("stage1");
            freeze_and_save(&s1.model, &dir.join("extractor.ckpt"))?;
            write(&dir.join("loss_curve.csv"), &loss_curve_csv(&s1.loss_curve))?;
            s1.influence.write_csv(&dir.join("influence.csv"), data.series.names())?;
            let first = s1.loss_curve[0];
            let last = *s1.loss_curve.last().expect("non-empty curve");
            let (w, b) = s1.model.coef(0);
            println!(
                "stage 1: loss {first:.6} -> {last:.6} ({:.2}% of initial); f(r) = {w:.6} r + {b:.6}",
                100.0 * last / first
            );
            println!("extractor {} written to {}", s1.model.hash(), dir.display());
        }
        Command::Stage2 { variant, extractor, .. } => {
            let started = Instant::now();
            let data = load_dataset(&cfg)?;
            let prepared = prepare_data(&cfg, &data)?;
            let dir = out.join("stage2");
            let (ex, from_file) = match (variant, extractor) {
                (Variant::Baseline, _) => (None, false),
                (_, Some(path)) => (Some(load_frozen(&path, Some(data.series.num_vars()))?), true),
                (v, None) => {
                    let s1 = run_stage1(&cfg, &prepared, v)?;
                    let model = match s1 {
                        Some(s1) => s1.model,
                        None => ExtractorModel::identity(data.series.num_vars()),
                    };
                    (Some(model), false)
                }
            };
            let splits = prepare_splits(&cfg, &prepared, ex.as_ref())?;
            let (s2, val, test) = run_stage2(&cfg, &splits, ex.as_ref())?;
            if let Some(e) = &ex {
                freeze_and_save(e, &dir.join("extractor.ckpt"))?;
            }
            s2.model.save(&dir.join("forecaster.ckpt"))?;
            let mut curves = String::from("epoch,train_loss,val_mse\n");
            for (k, (t, v)) in s2.train_curve.iter().zip(&s2.val_curve).enumerate() {
                let _ = writeln!(curves, "{},{t},{v}", k + 1);
            }
            write(&dir.join("curves.csv"), &curves)?;
            println!(
                "{variant}: best epoch {} val mse {:.6} mae {:.6}; test mse {:.6} mae {:.6}",
                s2.best_epoch, val.mse, val.mae, test.mse, test.mae
            );
            if !from_file {
                let rec = make_record(&cfg, variant, val, test, s2.best_epoch, started);
                RecordStore::open(out.join("records.jsonl"))?.append(&rec)?;
                println!("record {}", rec.config_hash);
            }
        }
        Command::Evaluate { model, extractor } => {
            let data = load_dataset(&cfg)?;
            let prepared = prepare_data(&cfg, &data)?;
            let d = data.series.num_vars();
            let m = Stage2Model::load(&model, Some(d))?;
            let ex = match (m.with_attention(), extractor) {
                (true, Some(p)) => Some(load_frozen(&p, Some(d))?),
                (true, None) => {
                    return Err(HintsError::Usage {
                        key: "--extractor".into(),
                        message: "attention model needs its frozen extractor".into(),
                    })
                }
                (false, _) => None,
            };
            if let (Some(e), Some(h)) = (&ex, m.extractor_hash()) {
                if e.hash() != h {
                    return Err(HintsError::VersionMismatch {
                        expected: format!("extractor {h}"),
                        found: format!("extractor {}", e.hash()),
                    });
                }
            }
            let test = prepare_windows(&prepared.windows.test, ex.as_ref(), &cfg.decomposition)?;
            let metrics = evaluate(&m, &test)?;
            write(
                &out.join("predictions.csv"),
                &prediction_dump(&m, &test, data.series.names())?,
            )?;
            println!("test mse {:.6} mae {:.6} over {} windows", metrics.mse, metrics.mae, test.len());
        }
        Command::Compare { horizons, seeds, force } => {
            let h = harness(&cfg, cli.common.jobs, force)?;
            let horizons = if horizons.is_empty() { vec![cfg.stage2.horizon] } else { horizons };
            let (records, table) = h.run_comparison(&cfg, &horizons, &seeds_or_default(&seeds, &cfg))?;
            for &hz in &horizons {
                let mut s = String::from("seed,baseline_mse,hints_mse,baseline_mae,hints_mae\n");
                let pick = |v: &str, seed| {
                    records
                        .iter()
                        .find(|r| r.horizon == hz && r.seed == seed && r.variant == v)
                        .expect("paired runs")
                };
                for seed in seeds_or_default(&seeds, &cfg) {
                    let (b, x) = (pick("baseline", seed), pick("hints", seed));
                    let _ = writeln!(s, "{seed},{},{},{},{}", b.mse, x.mse, b.mae, x.mae);
                }
                write_plot_csv(&out, &cfg.dataset_id(), "compare", hz, &s)?;
            }
            print!("{}", table.render());
            write(&out.join("compare_table.txt"), &table.render())?;
        }
        Command::Ablate { seeds, force } => {
            let h = harness(&cfg, cli.common.jobs, force)?;
            let (_, table) = h.run_ablation(&cfg, &seeds_or_default(&seeds, &cfg))?;
            write_plot_csv(&out, &cfg.dataset_id(), "ablation", cfg.stage2.horizon, &table.to_csv())?;
            print!("{}", table.render());
            if table.row(AblationVariant::Full).seeds < 2 {
                log::warn!("single seed: ordering is not meaningful");
            }
        }
        Command::Sweep { gamma, seeds, force } => {
            let h = harness(&cfg, cli.common.jobs, force)?;
            let grid = if gamma.is_empty() { GAMMA_GRID.to_vec() } else { gamma };
            let (_, curve) = h.run_gamma_sweep(&cfg, &grid, &seeds_or_default(&seeds, &cfg))?;
            let path = write_plot_csv(&out, &cfg.dataset_id(), "sweep", cfg.stage2.horizon, &curve.to_csv())?;
            print!("{}", curve.render());
            println!("curve written to {}", path.display());
        }
        Command::Trace { variable, start, len, bundle } => {
            let dir = bundle.unwrap_or_else(|| out.join("stage2"));
            let data = load_dataset(&cfg)?;
            let prepared = prepare_data(&cfg, &data)?;
            let d = data.series.num_vars();
            let model = Stage2Model::load(&dir.join("forecaster.ckpt"), Some(d))?;
            let ex = load_frozen(&dir.join("extractor.ckpt"), Some(d))?;
            let len = len.unwrap_or(model.lookback());
            let rows = human_factor_trace(&cfg, &data, &prepared, &ex, &model, &variable, start..start + len)?;
            let path = write_plot_csv(
                &out,
                &cfg.dataset_id(),
                &format!("trace-{variable}"),
                model.horizon(),
                &trace_csv(&rows),
            )?;
            println!("{} rows written to {}", rows.len(), path.display());
        }
        Command::Synth { out: path, latent } => {
            let p = generate_planted_series(&cfg.planted_config(), cfg.synth_vars, cfg.synth_len, cfg.synth_seed())?;
            write_series_csv(&p.series, &path)?;
            if latent {
                let lat = p.series.with_values(p.latent.clone())?;
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                write_series_csv(&lat, &path.with_file_name(format!("{stem}_latent.csv")))?;
                p.influence
                    .write_csv(&path.with_file_name(format!("{stem}_influence.csv")), p.series.names())?;
            }
            println!(
                "{} variables x {} steps written to {}",
                p.series.num_vars(),
                p.series.len(),
                path.display()
            );
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            print!("{}", selftest::render(&checks));
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(HintsError::Numerical(format!("{failed} self-test checks failed")));
            }
        }
    }
    if log::log_enabled!(log::Level::Info) {
        if let Ok(records) = RecordStore::open(out.join("records.jsonl")).and_then(|s| s.load()) {
            if !records.is_empty() {
                log::info!("records so far:\n{}", render_records(&records));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &HintsError) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
