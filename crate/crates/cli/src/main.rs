//! `odmt`: data generation, training, evaluation, ablations and sweeps.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use odmt::checkpoint;
use odmt::config::{ExperimentConfig, Variant};
use odmt::datagen::{generate_synthetic, save_catalog, save_interactions};
use odmt::eval::{evaluate, Split, ENSEMBLE};
use odmt::experiment::{self, prepare_data, SweepGrid, ABLATION_FILE, METRICS_FILE, POPULARITY_FILE, SWEEP_FILE};
use odmt::model::Model;

use manifest::{timestamp, RunManifest};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "ODMT_OUT";

#[derive(Parser)]
#[command(name = "odmt", version, about = "Multi-modal sequential recommendation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.T=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root (default: $ODMT_OUT, else `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run directory name under the output root (default: the command name).
    #[arg(long, global = true)]
    name: Option<String>,
    /// Validate the configuration and print the plan without running it.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog and interaction log.
    Gen,
    /// Train one model and evaluate it on the test split.
    Train,
    /// Re-evaluate a finished training run from its checkpoint.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Train every ablation variant plus the full model.
    Ablate,
    /// Grid over distillation temperature, ramp length and FST depth.
    Sweep {
        /// Temperatures (default 0.1..0.6 in steps of 0.1).
        #[arg(long = "t", value_delimiter = ',')]
        temperatures: Vec<f64>,
        /// Ramp lengths (default 10..60 in steps of 10).
        #[arg(long = "alpha", value_delimiter = ',')]
        alphas: Vec<f64>,
        /// FST layer counts (default: the configured one).
        #[arg(long = "layers", value_delimiter = ',')]
        layers: Vec<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::Sweep { .. } => "sweep",
        }
    }
}

struct Session {
    common: Common,
    command: &'static str,
    cfg: ExperimentConfig,
    started: String,
}

impl Session {
    fn run_dir(&self) -> PathBuf {
        let root = self
            .common
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let default = if self.command == "gen" { "data" } else { self.command };
        root.join(self.common.name.as_deref().unwrap_or(default))
    }

    fn finish(&self, dir: &Path, cfg: &ExperimentConfig, outputs: Vec<String>) -> Result<()> {
        RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.train.seed,
            config_file: self.common.config.as_ref().map(|p| p.display().to_string()),
            overrides: self.common.overrides.clone(),
            config: cfg.to_toml(),
            started: self.started.clone(),
            finished: timestamp(),
            outputs,
        }
        .write(dir)?;
        println!("wrote {}", dir.display());
        Ok(())
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn path_strings(dir: &Path, files: &[&str]) -> Vec<String> {
    files.iter().map(|f| dir.join(f).display().to_string()).collect()
}

fn print_plan(s: &Session, cfg: &ExperimentConfig, runs: &[String]) {
    println!("command: {}", s.command);
    println!("output: {}", s.run_dir().display());
    println!("runs:");
    for r in runs {
        println!("  {r}");
    }
    println!("--- resolved config ---\n{}", cfg.to_toml());
}

fn cmd_gen(s: &Session) -> Result<()> {
    let syn = &s.cfg.data.synthetic;
    if s.common.dry_run {
        print_plan(s, &s.cfg, &[format!("generate {} items, {} users (seed {})", syn.n_items, syn.n_users, syn.seed)]);
        return Ok(());
    }
    let dir = s.run_dir();
    let data = generate_synthetic(syn)?;
    save_catalog(&dir, &data.catalog)?;
    save_interactions(&dir, &data.interactions)?;
    let outputs = path_strings(&dir, &["manifest.json", "visual.f64", "textual.f64", "interactions.csv"]);
    s.finish(&dir, &s.cfg, outputs)
}

fn cmd_train(s: &Session) -> Result<()> {
    if s.common.dry_run {
        print_plan(s, &s.cfg, &[format!("train {} epochs, seed {}", s.cfg.train.epochs, s.cfg.train.seed)]);
        return Ok(());
    }
    let dir = s.run_dir();
    let data = prepare_data(&s.cfg.data)?;
    let out = experiment::run(&s.cfg, &data)?;
    let k = s.cfg.eval.select_k;
    println!(
        "test recall@{k} {:.4} ndcg@{k} {:.4} (best epoch {:?})",
        out.test.get(ENSEMBLE, "recall", k),
        out.test.get(ENSEMBLE, "ndcg", k),
        out.outcome.best_epoch
    );
    let outputs = experiment::write_run(&dir, &s.cfg, &out)?;
    s.finish(&dir, &s.cfg, outputs)
}

fn cmd_eval(s: &Session, run: &Path) -> Result<()> {
    let cfg_path = run.join(experiment::CONFIG_FILE);
    let cfg = ExperimentConfig::load(&cfg_path)
        .with_context(|| format!("{} is not a training run directory", run.display()))?
        .with_overrides(&s.common.overrides)?;
    cfg.validate()?;
    if s.common.dry_run {
        print_plan(s, &cfg, &[format!("evaluate {}", run.join(experiment::CHECKPOINT_FILE).display())]);
        return Ok(());
    }
    let data = prepare_data(&cfg.data)?;
    let (model, mut store) = Model::new(&cfg.model, &data.catalog, data.interactions.max_len, cfg.train.seed)?;
    checkpoint::load_into(&run.join(experiment::CHECKPOINT_FILE), &mut store)?;
    let report = evaluate(&model, &store, &data.catalog, &data.interactions, Split::Test, &cfg.eval)?;
    let k = cfg.eval.select_k;
    println!(
        "test recall@{k} {:.4} ndcg@{k} {:.4}",
        report.get(ENSEMBLE, "recall", k),
        report.get(ENSEMBLE, "ndcg", k)
    );
    let dir = s.run_dir();
    fs::create_dir_all(&dir)?;
    experiment::write_metrics(&dir.join(METRICS_FILE), &report)?;
    experiment::write_popularity(&dir.join(POPULARITY_FILE), &report)?;
    s.finish(&dir, &cfg, path_strings(&dir, &[METRICS_FILE, POPULARITY_FILE]))
}

fn cmd_ablate(s: &Session) -> Result<()> {
    if s.common.dry_run {
        let runs: Vec<String> = Variant::ABLATION.iter().map(|v| v.label().to_string()).collect();
        print_plan(s, &s.cfg, &runs);
        return Ok(());
    }
    let dir = s.run_dir();
    fs::create_dir_all(&dir)?;
    let data = prepare_data(&s.cfg.data)?;
    let k = s.cfg.eval.select_k;
    let rows = experiment::run_ablation(&s.cfg, &data, &Variant::ABLATION, |r| {
        println!("{:<28} recall@{k} {:.4}", r.label, r.report.get(ENSEMBLE, "recall", k));
    })?;
    experiment::write_ablation(&dir.join(ABLATION_FILE), &rows)?;
    s.finish(&dir, &s.cfg, path_strings(&dir, &[ABLATION_FILE]))
}

fn cmd_sweep(s: &Session, temperatures: &[f64], alphas: &[f64], layers: &[usize]) -> Result<()> {
    let mut grid = SweepGrid::standard(&s.cfg);
    if !temperatures.is_empty() {
        grid.temperatures = temperatures.to_vec();
    }
    if !alphas.is_empty() {
        grid.alphas = alphas.to_vec();
    }
    if !layers.is_empty() {
        grid.fst_layers = layers.to_vec();
    }
    for cell in grid.cells() {
        SweepGrid::config(&s.cfg, cell)
            .validate()
            .with_context(|| format!("sweep cell T={} alpha={} fst_layers={}", cell.0, cell.1, cell.2))?;
    }
    if s.common.dry_run {
        let runs: Vec<String> = grid
            .cells()
            .iter()
            .map(|(t, a, l)| format!("T={t} alpha={a} fst_layers={l}"))
            .collect();
        print_plan(s, &s.cfg, &runs);
        return Ok(());
    }
    let dir = s.run_dir();
    fs::create_dir_all(&dir)?;
    let data = prepare_data(&s.cfg.data)?;
    let rows = experiment::run_sweep(&s.cfg, &data, &grid, |r| {
        println!(
            "T={:<4} alpha={:<4} layers={} recall@10 {:.4} ndcg@10 {:.4}",
            r.temperature, r.alpha, r.fst_layers, r.recall_at_10, r.ndcg_at_10
        );
    })?;
    experiment::write_sweep(&dir.join(SWEEP_FILE), &rows)?;
    s.finish(&dir, &s.cfg, path_strings(&dir, &[SWEEP_FILE]))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = cli.command.name();
    let cfg = match &cli.command {
        // the run directory carries its own configuration
        Command::Eval { .. } => ExperimentConfig::default(),
        _ => resolve_config(&cli.common)?,
    };
    let session = Session {
        common: cli.common,
        command,
        cfg,
        started: timestamp(),
    };
    match &cli.command {
        Command::Gen => cmd_gen(&session),
        Command::Train => cmd_train(&session),
        Command::Eval { run } => cmd_eval(&session, run),
        Command::Ablate => cmd_ablate(&session),
        Command::Sweep {
            temperatures,
            alphas,
            layers,
        } => {
            if temperatures.iter().chain(alphas).any(|x| !x.is_finite()) {
                bail!("sweep values must be finite");
            }
            cmd_sweep(&session, temperatures, alphas, layers)
        }
    }
}
