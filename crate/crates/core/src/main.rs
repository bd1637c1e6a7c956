use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use peftlab::budget::flops_count;
use peftlab::experiment::{
    ablate_placement, bench, error_json, load_budget_input, load_spec, run, sweep_lambda, RunOptions, OUTPUT_ROOT_ENV,
};
use peftlab::LabError;

#[derive(Parser)]
#[command(
    name = "peftlab",
    version,
    about = "Adapter/LoRA fine-tuning lab with initial-residual injection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set peft.lambda=0.3`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct OutputArgs {
    /// Directory that relative `output_dir`s are resolved under.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
    /// Write the resolved config and budget only.
    #[arg(long)]
    dry_run: bool,
}

impl OutputArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            output_root: self.output_root.clone(),
            dry_run: self.dry_run,
            force: self.force,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write its run directory.
    Run {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// One run per lambda with shared seeds.
    SweepLambda {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Comma-separated lambdas; defaults to `sweeps.lambdas`.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Matched-seed runs of each injection placement.
    AblatePlacement {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Comma-separated seeds; defaults to `sweeps.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Trainable parameters and per-token PEFT FLOPs (reads `model` and `peft` only).
    Budget {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Time forward+backward passes, vanilla vs SIBO.
    Bench {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 200)]
        iters: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Run { .. } => "run",
            Command::SweepLambda { .. } => "sweep-lambda",
            Command::AblatePlacement { .. } => "ablate-placement",
            Command::Budget { .. } => "budget",
            Command::Bench { .. } => "bench",
        }
    }

    fn spec_args(&self) -> &SpecArgs {
        match self {
            Command::Run { spec, .. }
            | Command::SweepLambda { spec, .. }
            | Command::AblatePlacement { spec, .. }
            | Command::Budget { spec }
            | Command::Bench { spec, .. } => spec,
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> Result<String, LabError> {
    serde_json::to_string_pretty(value).map_err(|e| LabError::Format(e.to_string()))
}

fn execute(command: &Command) -> Result<String, LabError> {
    match command {
        Command::Run { spec, out } => {
            let s = load_spec(&spec.config, &spec.overrides)?;
            let summary = run(&s, &out.options())?;
            log::info!("wrote {}", summary.dir.display());
            json(&summary)
        }
        Command::SweepLambda { spec, out, lambdas } => {
            let s = load_spec(&spec.config, &spec.overrides)?;
            let lambdas = lambdas
                .clone()
                .or_else(|| s.sweeps.lambdas.clone())
                .ok_or_else(|| LabError::config("no lambdas: pass --lambdas or set sweeps.lambdas"))?;
            json(&sweep_lambda(&s, &lambdas, &out.options())?)
        }
        Command::AblatePlacement { spec, out, seeds } => {
            let mut s = load_spec(&spec.config, &spec.overrides)?;
            if let Some(seeds) = seeds {
                s.sweeps.seeds = Some(seeds.clone());
                s.validate()?;
            }
            json(&ablate_placement(&s, &out.options())?)
        }
        Command::Budget { spec } => {
            let (model, peft) = load_budget_input(&spec.config, &spec.overrides)?;
            json(&flops_count(&model, &peft)?)
        }
        Command::Bench { spec, iters } => {
            let s = load_spec(&spec.config, &spec.overrides)?;
            json(&bench(&s, *iters)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let args = cli.command.spec_args();
            let mut context = BTreeMap::from([
                ("command".to_string(), cli.command.name().to_string()),
                ("config".to_string(), args.config.display().to_string()),
            ]);
            if !args.overrides.is_empty() {
                context.insert("overrides".to_string(), args.overrides.join(" "));
            }
            eprintln!("{}", error_json(&err, &context));
            ExitCode::FAILURE
        }
    }
}
