mod check;
mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use check::{CheckOptions, Suite};
use commands::{EvalRequest, CHECKPOINT_FILE};
use error::{CliError, CliResult};
use settings::Settings;

#[derive(Parser)]
#[command(name = "vegn", version, about = "Equivariant graph networks with virtual nodes on charged N-body data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a charged N-body dataset and write it to one file.
    Generate(GenerateArgs),
    /// Train a model, optionally across several simulated devices.
    Train(TrainArgs),
    /// Score a trained checkpoint, or roll it out over several steps.
    Eval(EvalArgs),
    /// Run the built-in property suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct Layering {
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Layering {
    fn base(&self, start: Settings) -> CliResult<Settings> {
        let mut s = start;
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        s.apply_env()?;
        s.apply_pairs(&self.set)?;
        Ok(s)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    n_particles: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    input_frame: Option<usize>,
    #[arg(long)]
    delta_t: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    layering: Layering,
}

#[derive(Args)]
struct ModelFlags {
    /// egnn, fast_egnn, fast_rf or fast_schnet.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    virtual_nodes: Option<usize>,
    #[arg(long)]
    drop_rate: Option<f64>,
    #[arg(long)]
    message_mode: Option<String>,
}

impl ModelFlags {
    fn apply(&self, s: &mut Settings) -> CliResult<()> {
        s.flag("backbone", &self.backbone)?;
        s.flag("layers", &self.layers)?;
        s.flag("hidden", &self.hidden)?;
        s.flag("virtual_nodes", &self.virtual_nodes)?;
        s.flag("drop_rate", &self.drop_rate)?;
        s.flag("message_mode", &self.message_mode)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_period: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mmd_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train through the distributed runtime with this many devices.
    #[arg(long)]
    devices: Option<usize>,
    /// random or grid.
    #[arg(long)]
    partition: Option<String>,
    /// fixed or dynamic.
    #[arg(long)]
    radius_mode: Option<String>,
    #[arg(long)]
    radius: Option<f64>,
    /// inproc or socket.
    #[arg(long)]
    transport: Option<String>,
    #[command(flatten)]
    layering: Layering,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    /// Checkpoint file; needs --config describing its model.
    #[arg(long, requires = "config")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    rotations: Option<usize>,
    #[arg(long)]
    reflections: bool,
    #[arg(long)]
    translation: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory whose evaluation time is the denominator of relative_time.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Feed predictions back as inputs for this many steps.
    #[arg(long)]
    rollout: Option<usize>,
    #[arg(long, default_value_t = 0)]
    rollout_sample: usize,
    /// Where the per-step coordinates go (JSON, steps x nodes x 3).
    #[arg(long)]
    rollout_out: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    layering: Layering,
}

#[derive(Args)]
struct CheckArgs {
    /// all, equivariance, gradcheck, dist-oracle or mmd.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Overrides every selected suite's own tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Corrupt each check on purpose; the suites must then fail.
    #[arg(long)]
    negative_control: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print(value: &Value) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn generate(args: GenerateArgs) -> CliResult<()> {
    let mut s = args.layering.base(Settings::default())?;
    s.flag("particles", &args.n_particles)?;
    s.flag("train_samples", &args.train)?;
    s.flag("val_samples", &args.val)?;
    s.flag("test_samples", &args.test)?;
    s.flag("input_frame", &args.input_frame)?;
    s.flag("delta_t", &args.delta_t)?;
    s.flag("seed", &args.seed)?;
    print(&commands::generate(&s, &args.out, args.force)?)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn train(args: TrainArgs) -> CliResult<()> {
    let mut s = args.layering.base(Settings::default())?;
    s.flag("data", &path_flag(&args.data))?;
    args.model.apply(&mut s)?;
    s.flag("epochs", &args.epochs)?;
    s.flag("patience", &args.patience)?;
    s.flag("batch_size", &args.batch_size)?;
    s.flag("eval_period", &args.eval_period)?;
    s.flag("lr", &args.lr)?;
    s.flag("mmd_weight", &args.mmd_weight)?;
    s.flag("seed", &args.seed)?;
    s.flag("devices", &args.devices)?;
    s.flag("partition", &args.partition)?;
    s.flag("radius_mode", &args.radius_mode)?;
    s.flag("radius", &args.radius)?;
    s.flag("transport", &args.transport)?;
    print(&commands::train_run(&s, &args.out, args.force)?)
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let (start, checkpoint) = match (&args.run, &args.checkpoint) {
        (Some(dir), None) => (commands::settings_of_run(dir)?, dir.join(CHECKPOINT_FILE)),
        (None, Some(file)) => (Settings::default(), file.clone()),
        _ => return Err(CliError::Usage("pass either --run or --checkpoint with --config".into())),
    };
    let mut s = args.layering.base(start)?;
    s.flag("data", &path_flag(&args.data))?;
    s.flag("rotations", &args.rotations)?;
    if args.reflections {
        s.flag("reflections", &Some(true))?;
    }
    s.flag("translation", &args.translation)?;
    s.flag("seed", &args.seed)?;
    let run = commands::load_run(s, &checkpoint)?;
    let report = commands::eval_run(
        &run,
        &EvalRequest {
            split: args.split,
            baseline: args.baseline,
            rollout: args.rollout,
            rollout_sample: args.rollout_sample,
            rollout_out: args.rollout_out,
        },
    )?;
    if let Some(out) = &args.out {
        commands::save_report(out, &report)?;
    }
    print(&report)
}

fn check(args: CheckArgs) -> CliResult<()> {
    let suite: Suite = args.suite.parse()?;
    let reports = check::run(
        suite,
        &CheckOptions {
            tolerance: args.tolerance,
            negative_control: args.negative_control,
            seed: args.seed,
        },
    )?;
    for r in &reports {
        print!("{}", r.table());
    }
    let passed = reports.iter().all(|r| r.passed);
    if let Some(out) = &args.out {
        commands::save_report(out, &json!({ "passed": passed, "suites": reports }))?;
    }
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.suite.as_str()).collect();
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Check(a) => check(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
