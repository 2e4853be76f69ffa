use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtl_cli::commands::{cmd_ablate, cmd_baseline, cmd_finetune, cmd_generate, cmd_report, cmd_train};
use mtl_cli::config::{preset, resolve, ExperimentConfig};
use mtl_cli::{exit_code, EXIT_DIVERGED, EXIT_OK};
use mtl_core::{Error, Result};

/// Multi-task learning experiments on synthetic or ingested datasets.
#[derive(Parser)]
#[command(name = "mtl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and export it to the run directory.
    Generate,
    /// Train the multi-task model, one run per seed.
    Train,
    /// Train one single-task model per task.
    TrainBaseline,
    /// Run the variant x task-count grid and compare variants.
    Ablate,
    /// Fine-tune from random init or checkpoints on the selected tasks.
    Finetune,
    /// Compare finished runs; the first is the baseline row.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the resolved configuration.
    Config,
}

#[derive(Args)]
struct Opts {
    /// Config file (TOML, one section per module).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting point before the config file: `default` or `bench`.
    #[arg(long, global = true, default_value = "default")]
    preset: String,
    /// Override any key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    name: Option<String>,
    /// Output root (default `$MTL_OUTPUT_ROOT`, else `runs`).
    #[arg(long, global = true)]
    out: Option<String>,
    /// Dataset directory to ingest instead of generating.
    #[arg(long, global = true)]
    data: Option<String>,
    /// Task ids to keep, e.g. `0-19`.
    #[arg(long, global = true)]
    tasks: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, global = true)]
    seeds: Option<String>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    num_tasks: Option<usize>,
    /// Append a task this many times larger than the largest.
    #[arg(long, global = true)]
    oversized: Option<usize>,
    /// Alpha schedule: constant, linear, exponential, cosine, demon.
    #[arg(long, global = true)]
    sampler: Option<String>,
    #[arg(long, global = true)]
    alpha_start: Option<f64>,
    #[arg(long, global = true)]
    alpha_end: Option<f64>,
    /// Quartile head widths: on or off.
    #[arg(long, global = true)]
    dypa: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Consecutive iterations per sampled task.
    #[arg(long, global = true)]
    repetition: Option<usize>,
    /// fixed, freeze_then_unfreeze or warmup_step.
    #[arg(long, global = true)]
    lr_policy: Option<String>,
    /// `random` or a checkpoint path (`{seed}` expands); repeatable.
    #[arg(long, global = true)]
    init: Vec<String>,
}

impl Opts {
    fn overrides(&self) -> Vec<String> {
        let mut out = self.sets.clone();
        let mut add = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{key}={v}"));
            }
        };
        add("run.name", self.name.clone());
        add("run.output_dir", self.out.clone());
        add("data.path", self.data.clone());
        add("data.tasks", self.tasks.clone());
        add("run.seeds", self.seeds.clone());
        add("run.jobs", self.jobs.map(|v| v.to_string()));
        add("generate.num_tasks", self.num_tasks.map(|v| v.to_string()));
        add("data.oversized", self.oversized.map(|v| v.to_string()));
        add("sampler.schedule", self.sampler.clone());
        add("sampler.alpha_start", self.alpha_start.map(|v| v.to_string()));
        add("sampler.alpha_end", self.alpha_end.map(|v| v.to_string()));
        add("dypa.enabled", self.dypa.clone());
        add("train.epochs", self.epochs.map(|v| v.to_string()));
        add("sampler.repetition", self.repetition.map(|v| v.to_string()));
        add("lr.policy", self.lr_policy.clone());
        if !self.init.is_empty() {
            // Quote each entry so paths survive the literal parser.
            let items: Vec<String> = self.init.iter().map(|i| format!("{i:?}")).collect();
            out.push(format!("finetune.init=[{}]", items.join(", ")));
        }
        out
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = preset(&self.preset)?;
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?),
            None => None,
        };
        let file = self.config.as_deref().zip(text.as_deref());
        resolve(&base, file, &self.overrides())
    }
}

fn run(cli: Cli) -> Result<i32> {
    let cfg = cli.opts.resolve()?;
    let name = cfg.run.name.clone();
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::Generate => {
            let (dir, ds) = cmd_generate(&cfg)?;
            println!("{} tasks, {} training examples -> {}", ds.num_tasks(), ds.total_train(), dir.display());
        }
        Command::Train => {
            let s = cmd_train(&cfg)?;
            println!("{}", s.text(&name));
            if s.any_diverged() {
                return Ok(EXIT_DIVERGED);
            }
        }
        Command::TrainBaseline => {
            let s = cmd_baseline(&cfg)?;
            println!("{}", s.text(&format!("{name} (baseline)")));
            if s.any_diverged() {
                return Ok(EXIT_DIVERGED);
            }
        }
        Command::Ablate => {
            let r = cmd_ablate(&cfg)?;
            print!("{}", r.text());
            if r.failures().next().is_some() {
                return Ok(mtl_cli::EXIT_OTHER);
            }
        }
        Command::Finetune => print!("{}", cmd_finetune(&cfg)?.text()),
        Command::Report { runs } => {
            let out = cli.opts.out.as_ref().map(PathBuf::from);
            print!("{}", cmd_report(&runs, out.as_deref())?);
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = run(cli).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    });
    ExitCode::from(code as u8)
}
