//! Argument parsing and command dispatch for the `splatwave` binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use splatwave::bench::{synth_teacher, CompareConfig, SynthConfig};
use splatwave::dataset::Dataset;
use splatwave::fitting::{FitConfig, Ranks, ALL, APPEARANCE, GEOMETRY};
use splatwave::pipeline::{run_bench, run_eval, run_fit, BenchConfig};
use splatwave::Error;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "splatwave", version, about = "Wavelet-factorized blendshapes for splat avatar textures")]
pub struct Cli {
    /// Worker threads. The default of 1 keeps every output bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// TOML file with `[synth]`, `[fit]` and `[bench]` tables; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic teacher dataset.
    GenSynth(GenSynthArgs),
    /// Fit a model bundle to a dataset.
    Fit(FitArgs),
    /// Evaluate a model bundle on a dataset.
    Eval(EvalArgs),
    /// Cost accounting and baseline comparison.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Paper,
    Toy,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Texture side length; must be divisible by 16.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Channel count; 23 gives the full splat attribute layout.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Rank preset; `paper` is LL 192 / levels 128, 96 for geometry and 128 / 128, 96 for appearance.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// `LL,L3,L2` for every group set, or `geometry=...;appearance=...`.
    #[arg(long)]
    pub ranks: Option<String>,
    /// Wavelet decomposition depth.
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory for the model bundle and fit report.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Pose history length fed to the coefficient predictor.
    #[arg(long)]
    pub window_k: Option<usize>,
    /// Joint refinement steps after ALS and MLP training; 0 skips it.
    #[arg(long)]
    pub refine_steps: Option<usize>,
    /// Optimizer steps per predictor network.
    #[arg(long)]
    pub mlp_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Bundle directory written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write world-space Gaussians per frame.
    #[arg(long)]
    pub export_gaussians: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub synth: Option<SynthConfig>,
    pub fit: Option<FitConfig>,
    pub bench: Option<CompareConfig>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Run(Error::Io { .. }) => EXIT_FAILURE,
            CliError::Run(_) => EXIT_USAGE,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_triple(s: &str) -> CliResult<Ranks> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("ranks `{s}` must be comma-separated integers")))?;
    match v.split_first() {
        Some((&ll, levels)) if !levels.is_empty() => Ok(Ranks::new(ll, levels.to_vec())),
        _ => Err(usage(format!("ranks `{s}` need an LL rank and at least one level rank"))),
    }
}

/// Parses `--ranks` into `(group set, ranks)` pairs; a bare list applies to every set.
pub fn parse_ranks(s: &str) -> CliResult<Vec<(String, Ranks)>> {
    if !s.contains('=') {
        let r = parse_triple(s)?;
        return Ok([GEOMETRY, APPEARANCE, ALL].iter().map(|n| (n.to_string(), r.clone())).collect());
    }
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let (name, list) =
                part.split_once('=').ok_or_else(|| usage(format!("rank entry `{part}` is not `set=LL,...`")))?;
            let name = name.trim();
            if ![GEOMETRY, APPEARANCE, ALL].contains(&name) {
                return Err(usage(format!("unknown group set `{name}`")));
            }
            Ok((name.to_string(), parse_triple(list)?))
        })
        .collect()
}

fn load_config_file(path: Option<&Path>) -> CliResult<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn existing_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.as_os_str().is_empty() {
        return Err(usage(format!("--{what} must not be empty")));
    }
    if !path.is_dir() {
        return Err(usage(format!("--{what} {} is not a directory", path.display())));
    }
    Ok(())
}

fn output_dir(path: &Path) -> CliResult<()> {
    if path.as_os_str().is_empty() {
        return Err(usage("--out must not be empty"));
    }
    if path.exists() && !path.is_dir() {
        return Err(usage(format!("--out {} exists and is not a directory", path.display())));
    }
    Ok(())
}

/// Fit configuration from the file, preset and flags, in increasing priority.
pub fn fit_config(file: Option<FitConfig>, model: &ModelArgs) -> CliResult<FitConfig> {
    let mut cfg = match (model.preset, file) {
        (Some(Preset::Paper), _) => FitConfig::paper(),
        (Some(Preset::Toy), _) => FitConfig::default(),
        (None, Some(f)) => f,
        (None, None) => FitConfig::default(),
    };
    if let Some(levels) = model.levels {
        cfg.levels = levels;
    }
    if let Some(seed) = model.seed {
        cfg.seed = seed;
    }
    if let Some(spec) = &model.ranks {
        for (name, r) in parse_ranks(spec)? {
            cfg.ranks.insert(name, r);
        }
    }
    Ok(cfg)
}

fn gen_synth(args: &GenSynthArgs, file: ConfigFile) -> CliResult<()> {
    output_dir(&args.out)?;
    let mut cfg = file.synth.unwrap_or_default();
    if let Some(v) = args.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = args.frames {
        cfg.frames = v;
    }
    if let Some(v) = args.channels {
        cfg.channels = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let dataset = synth_teacher(&cfg)?;
    dataset.save(&args.out)?;
    println!("wrote {} frames to {}", dataset.len(), args.out.display());
    Ok(())
}

fn fit(args: &FitArgs, file: ConfigFile) -> CliResult<()> {
    existing_dir(&args.dataset, "dataset")?;
    output_dir(&args.out)?;
    let mut cfg = fit_config(file.fit, &args.model)?;
    if let Some(k) = args.window_k {
        cfg.window_k = k;
    }
    if let Some(n) = args.refine_steps {
        cfg.refine_steps = n;
    }
    if let Some(n) = args.mlp_steps {
        cfg.mlp_steps = n;
    }
    cfg.validate()?;
    let dataset = Dataset::load(&args.dataset)?;
    let report = run_fit(&dataset, &cfg, &args.out)?;
    println!(
        "fitted {} frames: {} parameters, {} FLOPs/frame, subband L1 {:.6e}",
        report.frames, report.params, report.flops, report.subband_l1
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    existing_dir(&args.dataset, "dataset")?;
    existing_dir(&args.model, "model")?;
    output_dir(&args.out)?;
    let dataset = Dataset::load(&args.dataset)?;
    let result = run_eval(&args.model, &dataset, &args.out, args.export_gaussians)?;
    let m = result.mean();
    println!(
        "evaluated {} frames: texture L1 {:.6e}, subband L1 {:.6e}",
        result.frames.len(),
        m.texture_l1,
        m.subband_l1
    );
    Ok(())
}

fn bench(args: &BenchArgs, file: ConfigFile) -> CliResult<()> {
    existing_dir(&args.dataset, "dataset")?;
    output_dir(&args.out)?;
    let mut cfg = match args.model.preset {
        Some(Preset::Paper) => BenchConfig::paper(),
        _ => BenchConfig::toy(),
    };
    if let Some(c) = file.bench {
        cfg.compare = c;
    }
    if let Some(levels) = args.model.levels {
        cfg.compare.levels = levels;
    }
    if let Some(seed) = args.model.seed {
        cfg.compare.seed = seed;
    }
    if let Some(spec) = &args.model.ranks {
        let ranks = parse_ranks(spec)?;
        let all = ranks.iter().find(|(n, _)| n == ALL).or_else(|| ranks.first());
        if let Some((_, r)) = all {
            cfg.compare.ranks = r.clone();
        }
    }
    let dataset = Dataset::load(&args.dataset)?;
    let result = run_bench(&dataset, &cfg, &args.out)?;
    for row in &result.comparison.rows {
        println!(
            "{:<13} size {:>4}  params {:>10}  held-out L1 {:.6e}",
            row.method, row.size, row.params, row.heldout_l1
        );
    }
    Ok(())
}

fn init_threads(n: usize) -> CliResult<()> {
    if n == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot start {n} worker threads: {e}")))
}

pub fn run(cli: Cli) -> CliResult<()> {
    init_threads(cli.threads)?;
    let file = load_config_file(cli.config.as_deref())?;
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a, file),
        Command::Fit(a) => fit(a, file),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a, file),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
