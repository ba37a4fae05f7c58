use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use argus_gate::config::{parse_override, RunConfig};
use argus_gate::pipeline::{execute, replay, run_dir, Command, Manifest};
use argus_gate::Error;

#[derive(Parser)]
#[command(
    name = "argus-gate",
    version,
    about = "Preemptive verification of action chunks"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory name under $ARGUS_GATE_OUT (default: the command name).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out the toy policy and write episode traces.
    Gen(RunArgs),
    /// Label trace windows and attach backbone features.
    Label(RunArgs),
    /// Train the verifier on labeled samples.
    Train(RunArgs),
    /// Score a checkpoint on labeled samples.
    Eval(RunArgs),
    /// Run closed-loop episodes for one arm.
    Simulate(RunArgs),
    /// Re-run the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Parse { .. }
        | Error::Validation { .. }
        | Error::WindowOutOfRange { .. }
        | Error::Shape(_)
        | Error::EmptyBuffer(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<Manifest, Error> {
    let (cmd, args) = match cli.command {
        Cmd::Gen(a) => (Command::Gen, a),
        Cmd::Label(a) => (Command::Label, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Replay { manifest, out } => {
            let m = Manifest::read(&manifest)?;
            let dir = run_dir(&out.unwrap_or_else(|| format!("{}-replay", m.command.name())));
            return replay(&m, &dir);
        }
    };
    let overrides = args
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    let (cfg, _) = RunConfig::load(args.config.as_deref(), &overrides)?;
    let dir = run_dir(args.out.as_deref().unwrap_or(cmd.name()));
    execute(cmd, &cfg, &dir)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(m) => {
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} ok: {}", m.command.name(), m.outputs.join(", "));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
