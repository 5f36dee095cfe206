mod commands;
mod config;
mod runspec;
mod tuning;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use runspec::RunSpec;

/// Bad invocation: exits with code 1 instead of 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "phototune",
    version,
    about = "Tune photo-finishing sliders to match a goal image"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// finishing or stylization.
    #[arg(long, global = true, value_parser = ["finishing", "stylization"])]
    task: Option<String>,
    /// Restrict sampling, rendering and search to the exposure slider.
    #[arg(long, global = true)]
    exposure_only: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic input/goal pairs and a manifest.
    GenerateData(GenerateArgs),
    /// Train the TD3 tuner on a generated dataset.
    Train(TrainArgs),
    /// Tune one image pair and print the result as JSON.
    Tune(TuneCliArgs),
    /// Evaluate tuners over a dataset; writes CSV and JSON.
    Eval(EvalArgs),
    /// Time tuners across image resolutions.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    /// Side length of the square scenes.
    #[arg(long)]
    size: Option<usize>,
    /// Dataset seed (defaults to the data section of the config).
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON-lines log (default: next to the checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    stop_at_psnr: Option<f64>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Continue from an existing checkpoint, appending to its log.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct TuneCliArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    goal: PathBuf,
    /// cmaes, random, greedy or rl.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the JSON result here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// PNG strip: input, renders along the trajectory, goal.
    #[arg(long)]
    strip: Option<PathBuf>,
    /// Directory for one PNG per query.
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// method@budget, repeatable (e.g. --run rl@10 --run cmaes@200).
    #[arg(long = "run")]
    runs: Vec<RunSpec>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// eval, train or all.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// 720p, 1k, 2k, 4k or WxH; repeatable.
    #[arg(long = "resolution")]
    resolutions: Vec<String>,
    #[arg(long = "run")]
    runs: Vec<RunSpec>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    memory_limit_mb: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(|e| UsageError(format!("{e:#}")))?;
    set(&mut cfg.seed, cli.seed);
    if let Some(t) = &cli.task {
        cfg.task = serde_json::from_value(serde_json::Value::String(t.clone()))?;
    }
    cfg.exposure_only |= cli.exposure_only;
    match &cli.command {
        Command::GenerateData(a) => {
            set(&mut cfg.data.count, a.count);
            set(&mut cfg.data.size, a.size);
            set(&mut cfg.data.seed, a.data_seed);
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            t.data = a.data.clone().or(t.data.take());
            t.checkpoint = a.checkpoint.clone().or(t.checkpoint.take());
            t.log = a.log.clone().or(t.log.take());
            set(&mut t.episodes, a.episodes);
            set(&mut t.eval_every, a.eval_every);
            t.stop_at_eval_psnr = a.stop_at_psnr.or(t.stop_at_eval_psnr);
            t.resume |= a.resume;
            set(&mut cfg.td3.hidden_width, a.hidden_width);
            set(&mut cfg.td3.warmup_random_steps, a.warmup_steps);
        }
        Command::Tune(a) => {
            let t = &mut cfg.tune;
            if let Some(m) = &a.method {
                let spec = match a.budget {
                    Some(b) => format!("{m}@{b}"),
                    None => m.clone(),
                };
                t.run = RunSpec::parse(&spec).map_err(UsageError)?;
            } else if let Some(b) = a.budget {
                t.run.budget = b;
            }
            t.checkpoint = a.checkpoint.clone().or(t.checkpoint.take());
        }
        Command::Eval(a) => {
            let e = &mut cfg.eval;
            e.data = a.data.clone().or(e.data.take());
            if !a.runs.is_empty() {
                e.runs = a.runs.clone();
            }
            e.checkpoint = a.checkpoint.clone().or(e.checkpoint.take());
            set(&mut e.split, a.split.clone());
            e.limit = a.limit.or(e.limit);
            e.out_dir = a.out_dir.clone().or(e.out_dir.take());
        }
        Command::Bench(a) => {
            let b = &mut cfg.bench;
            if !a.resolutions.is_empty() {
                b.resolutions = a.resolutions.clone();
            }
            if !a.runs.is_empty() {
                b.runs = a.runs.clone();
            }
            b.checkpoint = a.checkpoint.clone().or(b.checkpoint.take());
            set(&mut b.repeats, a.repeats);
            set(&mut b.memory_limit_mb, a.memory_limit_mb);
            b.out_dir = a.out_dir.clone().or(b.out_dir.take());
        }
    }
    cfg.validate().map_err(|e| UsageError(format!("{e:#}")))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    log::info!("resolved config: {}", cfg.to_json());
    match &cli.command {
        Command::GenerateData(a) => commands::generate_data(&cfg, &a.out),
        Command::Train(_) => commands::train_cmd(&cfg),
        Command::Tune(a) => commands::tune_cmd(
            &cfg,
            &commands::TuneArgs {
                input: a.input.clone(),
                goal: a.goal.clone(),
                out: a.out.clone(),
                strip: a.strip.clone(),
                frames: a.frames.clone(),
            },
        ),
        Command::Eval(_) => commands::eval_cmd(&cfg),
        Command::Bench(_) => commands::bench_cmd(&cfg),
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
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
