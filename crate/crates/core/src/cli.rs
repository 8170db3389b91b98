//! Command-line front end.
//!
//! Configuration is resolved in three layers, later ones winning: built-in
//! defaults, the TOML file given with `--config`, then individual flags. The
//! fully resolved [`RunConfig`] is written as `run.toml` into every output
//! directory; passing that file back with `--config` reproduces the run.
//!
//! Output locations default to subdirectories of `$MMTOC_OUT` (or `runs`):
//! `data/`, `train/`, `eval/` and `sweep/`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::channel::{parse_db, ChannelConfig, ChannelFamily, SnrPolicy};
use crate::data::{generate_synthetic, load_dir, write_dir, Dataset, Split, SyntheticSpec, SPLIT_FILES};
use crate::eval::{default_snr_grid, results_csv, snr_sweep, sweep_channels};
use crate::pipeline::{load_checkpoint, save_checkpoint, train_with, EpochLog, ModelState, TrainConfig};
use crate::redundancy::GrlPlacement;
use crate::selftest::{run_all, Fixtures};

pub const OUT_ENV: &str = "MMTOC_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const CONFIG_ECHO: &str = "run.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
    /// Directory holding the split files.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub split: Split,
    /// Channel for `eval`.
    pub channel: ChannelFamily,
    #[serde(with = "crate::channel::db_value")]
    pub snr_db: f64,
    pub equalize: bool,
    /// Families covered by `sweep`.
    pub families: Vec<ChannelFamily>,
    #[serde(with = "crate::channel::db_values")]
    pub snr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Also estimate pairwise latent MI (slow).
    pub mi: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            channel: ChannelFamily::Awgn,
            snr_db: f64::INFINITY,
            equalize: true,
            families: vec![ChannelFamily::Awgn, ChannelFamily::Rayleigh],
            snr_grid: default_snr_grid(),
            seeds: vec![0, 1, 2],
            mi: false,
        }
    }
}

/// Everything a command needs, fully resolved before any compute.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmtoc", version, about = "Multi-modal task-oriented communication simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tri-modal dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus per-epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one SNR.
    Eval(EvalArgs),
    /// Evaluate a checkpoint over an SNR grid and channel families.
    Sweep(SweepArgs),
    /// Run the numerical self-checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub shared_dim: Option<usize>,
    #[arg(long)]
    pub private_dim: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_red: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training channel family (awgn|rayleigh).
    #[arg(long)]
    pub channel: Option<ChannelFamily>,
    /// Training SNR: a dB value, `inf`, or a range `lo:hi` sampled per batch.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_snr_policy)]
    pub snr: Option<SnrPolicy>,
    /// Disable Rayleigh equalisation.
    #[arg(long)]
    pub no_equalize: bool,
    #[arg(long)]
    pub grl_placement: Option<GrlPlacement>,
    #[arg(long)]
    pub transmit_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalCommon {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    /// Comma-separated channel seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub no_equalize: bool,
    /// Estimate pairwise latent MI.
    #[arg(long)]
    pub mi: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: EvalCommon,
    #[arg(long)]
    pub channel: Option<ChannelFamily>,
    /// dB value or `inf`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_db)]
    pub snr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub shared: EvalCommon,
    /// Comma-separated families.
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<ChannelFamily>>,
    /// Comma-separated dB values; `inf` allowed.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, value_parser = parse_db)]
    pub snr_grid: Option<Vec<f64>>,
}

pub fn parse_snr_policy(text: &str) -> Result<SnrPolicy, String> {
    let policy = match text.split_once(':') {
        Some((lo, hi)) => SnrPolicy::Uniform {
            lo: parse_db(lo)?,
            hi: parse_db(hi)?,
        },
        None => SnrPolicy::Fixed { db: parse_db(text)? },
    };
    policy.validate().map_err(|e| e.to_string())?;
    Ok(policy)
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or missing inputs.
    Config(String),
    /// Failure while computing or writing results.
    Runtime(String),
    SelftestFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::SelftestFailed(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::SelftestFailed(n) => write!(f, "{n} self-check(s) failed"),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from)
}

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn fill_defaults(cfg: &mut RunConfig, command_dir: &str) {
    let root = out_root();
    cfg.paths.out_dir.get_or_insert_with(|| root.join(command_dir));
    cfg.paths.data_dir.get_or_insert_with(|| root.join("data"));
    cfg.paths.checkpoint.get_or_insert_with(|| root.join("train").join(CHECKPOINT_FILE));
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn resolve_gen_data(args: &GenDataArgs) -> Result<RunConfig, CliError> {
    let mut cfg = base_config(&args.common)?;
    let d = &mut cfg.data;
    set(&mut d.n_samples, args.n_samples);
    set(&mut d.rho, args.rho);
    set(&mut d.noise_std, args.noise_std);
    set(&mut d.shared_dim, args.shared_dim);
    set(&mut d.private_dim, args.private_dim);
    set(&mut d.seed, args.data_seed);
    d.validate().map_err(config_err)?;
    // generated data lands in the output directory
    if cfg.paths.out_dir.is_none() {
        cfg.paths.out_dir = Some(out_root().join("data"));
    }
    cfg.paths.data_dir = cfg.paths.out_dir.clone();
    fill_defaults(&mut cfg, "data");
    Ok(cfg)
}

pub fn resolve_train(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(d) = &args.data {
        cfg.paths.data_dir = Some(d.clone());
    }
    let t = &mut cfg.train;
    set(&mut t.epochs, args.epochs);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.lambda_red, args.lambda_red);
    set(&mut t.warmup_epochs, args.warmup_epochs);
    set(&mut t.beta, args.beta);
    set(&mut t.gamma, args.gamma);
    set(&mut t.learning_rate, args.learning_rate);
    set(&mut t.seed, args.seed);
    set(&mut t.channel.family, args.channel);
    set(&mut t.channel.snr, args.snr);
    set(&mut t.grl_placement, args.grl_placement);
    set(&mut t.transmit_dim, args.transmit_dim);
    if args.no_equalize {
        t.channel.equalize = false;
    }
    t.validate().map_err(config_err)?;
    fill_defaults(&mut cfg, "train");
    // training always writes its checkpoint next to the epoch log
    cfg.paths.checkpoint = cfg.paths.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    Ok(cfg)
}

fn resolve_eval_common(shared: &EvalCommon, command_dir: &str) -> Result<RunConfig, CliError> {
    let mut cfg = base_config(&shared.common)?;
    if let Some(d) = &shared.data {
        cfg.paths.data_dir = Some(d.clone());
    }
    if let Some(c) = &shared.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    let e = &mut cfg.eval;
    set(&mut e.split, shared.split);
    set(&mut e.seeds, shared.seeds.clone());
    if shared.no_equalize {
        e.equalize = false;
    }
    if shared.mi {
        e.mi = true;
    }
    if e.seeds.is_empty() {
        return Err(config_err("at least one channel seed is required"));
    }
    fill_defaults(&mut cfg, command_dir);
    Ok(cfg)
}

pub fn resolve_eval(args: &EvalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = resolve_eval_common(&args.shared, "eval")?;
    set(&mut cfg.eval.channel, args.channel);
    set(&mut cfg.eval.snr_db, args.snr);
    SnrPolicy::Fixed { db: cfg.eval.snr_db }.validate().map_err(config_err)?;
    Ok(cfg)
}

pub fn resolve_sweep(args: &SweepArgs) -> Result<RunConfig, CliError> {
    let mut cfg = resolve_eval_common(&args.shared, "sweep")?;
    set(&mut cfg.eval.families, args.families.clone());
    set(&mut cfg.eval.snr_grid, args.snr_grid.clone());
    if cfg.eval.families.is_empty() || cfg.eval.snr_grid.is_empty() {
        return Err(config_err("sweep needs at least one family and one SNR"));
    }
    for &db in &cfg.eval.snr_grid {
        SnrPolicy::Fixed { db }.validate().map_err(config_err)?;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> &Path {
    cfg.paths.out_dir.as_deref().expect("resolved config has an output directory")
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = out_dir(cfg).to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| runtime_err(format!("cannot create {}: {e}", dir.display())))?;
    let echo = dir.join(CONFIG_ECHO);
    fs::write(&echo, cfg.to_toml()).map_err(|e| runtime_err(format!("cannot write {}: {e}", echo.display())))?;
    Ok(dir)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = cfg.paths.data_dir.as_deref().expect("resolved");
    for (_, name) in SPLIT_FILES {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(config_err(format!(
                "dataset file {} not found (run `mmtoc gen-data --out {}` first)",
                p.display(),
                dir.display()
            )));
        }
    }
    load_dir(dir).map_err(config_err)
}

fn load_model(cfg: &RunConfig, ds: &Dataset) -> Result<(ModelState, TrainConfig), CliError> {
    let path = cfg.paths.checkpoint.as_deref().expect("resolved");
    if !path.is_file() {
        return Err(config_err(format!("checkpoint {} not found", path.display())));
    }
    let (model, train_cfg) = load_checkpoint(path).map_err(config_err)?;
    if model.arch.input_dims != ds.dims() {
        return Err(config_err(format!(
            "checkpoint expects modality dims {:?} but dataset has {:?}",
            model.arch.input_dims,
            ds.dims()
        )));
    }
    Ok((model, train_cfg))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let ds = generate_synthetic(&cfg.data).map_err(config_err)?;
    let dir = prepare_out(cfg)?;
    write_dir(&dir, &ds).map_err(runtime_err)
}

/// Trains and writes the checkpoint. The epoch log is flushed after every
/// epoch so a divergence abort leaves the completed epochs on disk.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<EpochLog>, CliError> {
    let ds = load_dataset(cfg)?;
    let dir = prepare_out(cfg)?;
    let log_path = dir.join(EPOCH_LOG);
    let file = File::create(&log_path).map_err(|e| runtime_err(format!("cannot create {}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(file);
    let mut io_error = None;
    let mut write_line = |log: &mut BufWriter<File>, line: &str| {
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_error.get_or_insert(e);
        }
    };
    write_line(&mut log, &EpochLog::csv_header(&cfg.train.val_snr_db));
    let outcome = train_with(&cfg.train, &ds, |e| {
        write_line(&mut log, &e.csv_row());
        eprintln!(
            "epoch {:>3}  total {:.4}  mvib {:.4}  red {:.4}",
            e.epoch, e.total, e.mvib, e.redundancy
        );
    });
    if let Some(e) = io_error {
        return Err(runtime_err(format!("writing {}: {e}", log_path.display())));
    }
    let outcome = outcome.map_err(runtime_err)?;
    let ckpt = cfg.paths.checkpoint.as_deref().expect("resolved");
    save_checkpoint(ckpt, &outcome.model, &cfg.train).map_err(runtime_err)?;
    Ok(outcome.log)
}

fn write_results(cfg: &RunConfig, channels: &[ChannelConfig], grid: &[f64]) -> Result<String, CliError> {
    let all = load_dataset(cfg)?;
    let (model, train_cfg) = load_model(cfg, &all)?;
    let ds = all.split(cfg.eval.split);
    let mut echo = cfg.clone();
    echo.train = train_cfg;
    let dir = prepare_out(&echo)?;
    let tables = channels
        .iter()
        .map(|ch| snr_sweep(&model, &ds, grid, ch, &cfg.eval.seeds, cfg.eval.mi))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(runtime_err)?;
    let csv = results_csv(&tables);
    let path = dir.join(RESULTS_FILE);
    fs::write(&path, &csv).map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))?;
    Ok(csv)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let channel = sweep_channels(&[cfg.eval.channel], cfg.eval.equalize);
    write_results(cfg, &channel, &[cfg.eval.snr_db])
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<String, CliError> {
    let channels = sweep_channels(&cfg.eval.families, cfg.eval.equalize);
    write_results(cfg, &channels, &cfg.eval.snr_grid)
}

pub fn cmd_selftest() -> Result<(), CliError> {
    let outcomes = run_all(&Fixtures::default());
    for o in &outcomes {
        println!("{o}");
    }
    match outcomes.iter().filter(|o| !o.passed).count() {
        0 => Ok(()),
        n => Err(CliError::SelftestFailed(n)),
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mmtoc: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => {
            let cfg = resolve_gen_data(a)?;
            for p in cmd_gen_data(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Train(a) => {
            let cfg = resolve_train(a)?;
            cmd_train(&cfg)?;
            println!("{}", cfg.paths.checkpoint.as_deref().expect("resolved").display());
        }
        Command::Eval(a) => print!("{}", cmd_eval(&resolve_eval(a)?)?),
        Command::Sweep(a) => print!("{}", cmd_sweep(&resolve_sweep(a)?)?),
        Command::Selftest => cmd_selftest()?,
    }
    Ok(())
}
