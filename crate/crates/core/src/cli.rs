//! Experiment command line.
//!
//! Output root precedence: `--out`, then `CIDER_OUT`, then the config's
//! `output` field. Every command writes `manifest.json` next to its results.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{grid_points, ExperimentConfig, ParamAxis, Variant};
use crate::data::{load_domain_pair, InteractionDataset, Split};
use crate::eval::{
    aggregate_runs, csv_err, evaluate, overlap_ratio_harness, train_and_evaluate, write_ratio_csv, EvalPools,
    MetricReport,
};
use crate::model::CiderModel;
use crate::synthetic::generate_synthetic;
use crate::train::{train, write_run};

pub const OUT_ENV: &str = "CIDER_OUT";
pub const VERSION: &str = env!("CIDER_VERSION");

#[derive(Debug, Parser)]
#[command(name = "cider", version = VERSION, about = "Cross-domain recommendation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML experiment config; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root (overrides CIDER_OUT and the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Retained overlap, as a fraction (0.5) or percentage (50%).
    #[arg(long, global = true, value_parser = parse_ratio)]
    pub ratio: Option<f64>,
    /// `key=value` override, or `key=v1,v2,...` grid axis for `grid`.
    #[arg(long = "param", global = true)]
    pub params: Vec<ParamAxis>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its checkpoint directory.
    Train,
    /// Score a checkpoint on its dataset's held-out users.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Every variant, averaged over `--runs` seeds.
    Ablate {
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Retrain at several retained-overlap ratios.
    OverlapSweep {
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1", value_parser = parse_ratio)]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Cartesian sweep over the `--param` axes.
    Grid,
    /// Write the configured synthetic dataset as two interaction files.
    MakeSynthetic,
}

fn parse_ratio(raw: &str) -> Result<f64, String> {
    let (num, scale) = match raw.strip_suffix('%') {
        Some(p) => (p, 100.0),
        None => (raw, 1.0),
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("not a ratio: {raw:?}"))?;
    let v = v / scale;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("ratio {raw} outside [0, 1]"));
    }
    Ok(v)
}

fn parse_split(raw: &str) -> Result<Split, String> {
    match raw {
        "test" => Ok(Split::Test),
        "validation" | "valid" => Ok(Split::Validation),
        other => Err(format!("unknown split {other:?}; use test or validation")),
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    args: Vec<String>,
    config: &'a ExperimentConfig,
}

fn write_manifest(dir: &Path, command: &str, config: &ExperimentConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        command,
        version: VERSION,
        seed: config.train.seed,
        args: std::env::args().collect(),
        config,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Config after file, flags and single-valued `--param` overrides.
pub fn resolve_config(common: &Common, allow_axes: bool) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for axis in &common.params {
        if axis.values.len() > 1 {
            if allow_axes {
                continue;
            }
            bail!("--param {} lists several values; only `grid` sweeps", axis.key);
        }
        cfg.set(&axis.key, &axis.values[0])?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(v) = common.variant {
        cfg.train.variant = v;
    }
    if let Some(r) = common.ratio {
        cfg.train.overlap_ratio = r;
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    } else if let Some(env) = std::env::var_os(OUT_ENV) {
        cfg.output = PathBuf::from(env);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> anyhow::Result<InteractionDataset> {
    let d = &cfg.data;
    Ok(match (&d.x, &d.y, &d.synthetic) {
        (Some(x), Some(y), _) => load_domain_pair(x, y, d.seed)?,
        (_, _, Some(spec)) => generate_synthetic(spec)?,
        _ => bail!("config names no dataset"),
    })
}

fn seeds(base: u64, runs: usize) -> anyhow::Result<Vec<u64>> {
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    Ok((0..runs as u64).map(|i| base + i).collect())
}

fn averaged(dataset: &InteractionDataset, cfg: &ExperimentConfig, runs: usize) -> anyhow::Result<MetricReport> {
    let mut reports = Vec::new();
    for seed in seeds(cfg.train.seed, runs)? {
        let mut c = cfg.clone();
        c.train.seed = seed;
        reports.push(train_and_evaluate(dataset, &c)?.1);
    }
    Ok(aggregate_runs(&reports)?)
}

fn cmd_train(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let ds = load_dataset(cfg)?;
    let dir = cfg.output.clone();
    let outcome = train(&ds, cfg)?;
    write_run(&outcome, &dir)?;
    write_manifest(&dir, "train", cfg)?;
    log::info!("checkpoint written to {}", dir.display());
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoint: &Path, split: Split) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(checkpoint.join(crate::model::CONFIG_FILE))
        .with_context(|| format!("{} is not a checkpoint directory", checkpoint.display()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    let ds = load_dataset(&cfg)?;
    let model = CiderModel::load(checkpoint, &ds)?;
    let pools = EvalPools::sample(&ds, cfg.eval.pool_size, cfg.train.seed)?;
    let cross_all = crate::data::PairingPlan::new(&ds, cfg.train.overlap_ratio, cfg.train.seed)
        .paired
        .is_empty();
    let report = evaluate(&model, &ds, &pools, split, cross_all)?;
    let dir = common.out.clone().unwrap_or_else(|| checkpoint.to_path_buf());
    report.write(&dir, "report")?;
    write_manifest(&dir, "evaluate", &cfg)?;
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{}", report.to_json()?) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(e.into());
        }
    }
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig, runs: usize) -> anyhow::Result<()> {
    let ds = load_dataset(cfg)?;
    let dir = cfg.output.join("ablate");
    std::fs::create_dir_all(&dir)?;
    let mut table = BTreeMap::new();
    for v in Variant::ALL {
        let mut c = cfg.clone();
        c.train.variant = v;
        let report = averaged(&ds, &c, runs)?;
        log::info!("variant {v}: MRR {:?}", report.domain_average("MRR"));
        table.insert(v.to_string(), report);
    }
    let mut w = csv::Writer::from_path(dir.join("ablation.csv")).map_err(csv_err)?;
    w.write_record(["variant", "domain", "metric", "mean", "std"]).map_err(csv_err)?;
    for v in Variant::ALL {
        for (d, k, s) in table[&v.to_string()].rows() {
            w.write_record([v.to_string(), d, k, s.mean.to_string(), s.std.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    write_manifest(&dir, "ablate", cfg)?;
    Ok(())
}

fn cmd_overlap(cfg: &ExperimentConfig, ratios: &[f64], runs: usize) -> anyhow::Result<()> {
    let ds = load_dataset(cfg)?;
    let dir = cfg.output.join("overlap");
    std::fs::create_dir_all(&dir)?;
    let mut per_seed = Vec::new();
    for seed in seeds(cfg.train.seed, runs)? {
        let mut c = cfg.clone();
        c.train.seed = seed;
        per_seed.push(overlap_ratio_harness(&ds, ratios, &c)?);
    }
    let rows: Vec<_> = ratios
        .iter()
        .enumerate()
        .map(|(i, &ratio)| {
            let reports: Vec<MetricReport> = per_seed.iter().map(|rows| rows[i].report.clone()).collect();
            Ok(crate::eval::RatioRow {
                ratio,
                report: aggregate_runs(&reports)?,
            })
        })
        .collect::<crate::Result<_>>()?;
    write_ratio_csv(&rows, &dir.join("overlap.csv"))?;
    std::fs::write(dir.join("overlap.json"), serde_json::to_string_pretty(&rows)?)?;
    write_manifest(&dir, "overlap-sweep", cfg)?;
    Ok(())
}

fn cmd_grid(common: &Common, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let axes: Vec<ParamAxis> = common.params.iter().filter(|a| a.values.len() > 1).cloned().collect();
    if axes.is_empty() {
        bail!("grid needs at least one --param key=v1,v2,... axis");
    }
    let ds = load_dataset(cfg)?;
    let dir = cfg.output.join("grid");
    std::fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("grid.csv")).map_err(csv_err)?;
    let mut header: Option<Vec<(String, String)>> = None;
    for point in grid_points(&axes) {
        let mut c = cfg.clone();
        for (k, v) in &point {
            c.set(k, v)?;
        }
        let (_, report) = train_and_evaluate(&ds, &c)?;
        let cols: Vec<(String, String)> = report.rows().into_iter().map(|(d, k, _)| (d, k)).collect();
        if header.is_none() {
            let mut names: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
            names.extend(cols.iter().map(|(d, k)| format!("{d}:{k}")));
            w.write_record(&names).map_err(csv_err)?;
            header = Some(cols);
        }
        let mut rec: Vec<String> = point.iter().map(|(_, v)| v.clone()).collect();
        rec.extend(report.rows().into_iter().map(|(_, _, s)| s.mean.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
        w.flush()?;
    }
    write_manifest(&dir, "grid", cfg)?;
    Ok(())
}

fn cmd_make_synthetic(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let Some(spec) = &cfg.data.synthetic else {
        bail!("config has no synthetic spec");
    };
    let ds = generate_synthetic(spec)?;
    let dir = cfg.output.clone();
    std::fs::create_dir_all(&dir)?;
    for (name, data) in [("x.csv", &ds.x), ("y.csv", &ds.y)] {
        let mut w = csv::Writer::from_path(dir.join(name)).map_err(csv_err)?;
        w.write_record(["user_id", "item_id", "timestamp"]).map_err(csv_err)?;
        for (t, &(u, v)) in data.interactions.iter().enumerate() {
            w.write_record([data.users[u].as_str(), data.items[v].as_str(), &t.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
    }
    write_manifest(&dir, "make-synthetic", cfg)?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let grid = matches!(cli.command, Command::Grid);
    match &cli.command {
        Command::Evaluate { checkpoint, split } => cmd_evaluate(&cli.common, checkpoint, *split),
        cmd => {
            let cfg = resolve_config(&cli.common, grid)?;
            match cmd {
                Command::Train => cmd_train(&cfg),
                Command::Ablate { runs } => cmd_ablate(&cfg, *runs),
                Command::OverlapSweep { ratios, runs } => cmd_overlap(&cfg, ratios, *runs),
                Command::Grid => cmd_grid(&cli.common, &cfg),
                Command::MakeSynthetic => cmd_make_synthetic(&cfg),
                Command::Evaluate { .. } => unreachable!(),
            }
        }
    }
}

/// Parses `argv` and runs it; returns the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
