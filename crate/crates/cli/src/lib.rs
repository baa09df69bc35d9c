//! Command-line front end: training, evaluation, profiling, codec sweeps,
//! BD metrics and plots.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kdlic::metrics::BdFit;
use kdlic::model::Role;
use kdlic::profiler::FlopConvention;
use kdlic::Error;

use commands::ModelSource;
use config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "kdlic", version, about = "Learned image compression with knowledge distillation")]
pub struct Cli {
    /// Log progress to stderr (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Teacher,
    Student,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Teacher => Role::Teacher,
            RoleArg::Student => Role::Student,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FitArg {
    Cubic,
    Pchip,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConventionArg {
    MacAsOne,
    TwoPerMac,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the checksum manifest of a training image directory.
    Index { root: PathBuf },
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a directory of lossless images.
    Eval(EvalArgs),
    /// Measure parameters, memory, FLOPs, throughput and energy.
    Profile(ProfileArgs),
    /// Evaluate a classical codec at several quality settings.
    CodecSweep(CodecSweepArgs),
    /// Bjøntegaard deltas between two RD curves.
    Bd(BdArgs),
    /// Render RD and resource figures from results files.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Pre-trained quality level 1-8; replaces the configured multiplier.
    #[arg(long, conflicts_with = "rd_lambda")]
    pub rd_quality: Option<u8>,
    #[arg(long)]
    pub rd_lambda: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "student")]
    pub role: RoleArg,
    #[arg(long)]
    pub eval_root: PathBuf,
    /// Results file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Curve name; defaults to the checkpoint file stem.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Point label; defaults to the model id.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub append: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, required_unless_present = "width", conflicts_with = "width")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "student")]
    pub role: RoleArg,
    /// Profile a freshly initialised model of this width (128 is the teacher).
    #[arg(long)]
    pub width: Option<usize>,
    /// Time these images instead of random frames.
    #[arg(long)]
    pub eval_root: Option<PathBuf>,
    /// Number of random frames of the input shape.
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Shape for FLOP counting and random frames, HxW.
    #[arg(long, default_value = "512x768")]
    pub input_shape: String,
    #[arg(long, default_value_t = 50)]
    pub passes: usize,
    /// telemetry, proxy:<watts> or none.
    #[arg(long, default_value = "none")]
    pub meter: String,
    #[arg(long, value_enum, default_value = "mac-as-one")]
    pub flop_convention: ConventionArg,
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub append: bool,
}

#[derive(Debug, Args)]
pub struct CodecSweepArgs {
    /// jpeg, webp or jpeg2000.
    #[arg(long)]
    pub codec: String,
    /// Comma-separated quality values (compression ratios for jpeg2000, 0 for its default).
    #[arg(long, value_delimiter = ',', required = true)]
    pub qualities: Vec<u32>,
    /// Codec mode flag, key=value; repeatable.
    #[arg(long = "flag")]
    pub flags: Vec<String>,
    #[arg(long)]
    pub eval_root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub append: bool,
    /// Also time each setting with this many passes.
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long, default_value = "none")]
    pub meter: String,
    /// Timing reports (JSON lines); needs --passes.
    #[arg(long, requires = "passes")]
    pub profile_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BdArgs {
    pub reference: PathBuf,
    pub test: PathBuf,
    /// Curve to use when the reference file holds several.
    #[arg(long)]
    pub reference_id: Option<String>,
    #[arg(long)]
    pub test_id: Option<String>,
    #[arg(long, value_enum, default_value = "cubic")]
    pub fit: FitArg,
    /// Also write the outcome as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "rate-distortion")]
    pub title: String,
}

/// 0 success, 1 bad input or configuration, 2 missing capability or
/// environment failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Capability(_) | Error::Tensor(_) => 2,
        Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 2,
        Error::Evaluation { source, .. } => exit_code(source),
        _ => 1,
    }
}

pub fn execute(cli: Cli) -> kdlic::Result<String> {
    match cli.command {
        Command::Index { root } => commands::index(&root),
        Command::Train(a) => commands::train(
            &a.config,
            &Overrides {
                rd_quality: a.rd_quality,
                rd_lambda: a.rd_lambda,
                steps: a.steps,
                seed: a.seed,
                tag: a.tag,
                output_dir: a.output_dir,
            },
        ),
        Command::Eval(a) => commands::eval(commands::EvalArgs {
            checkpoint: &a.checkpoint,
            role: a.role.into(),
            eval_root: &a.eval_root,
            out: &a.out,
            model_id: a.model_id,
            label: a.label,
            append: a.append,
        }),
        Command::Profile(a) => {
            let source = match (&a.checkpoint, a.width) {
                (Some(p), _) => ModelSource::Checkpoint(p, a.role.into()),
                (None, Some(n)) => ModelSource::Width(n),
                (None, None) => return Err(Error::config("checkpoint", "give --checkpoint or --width")),
            };
            commands::profile(commands::ProfileArgs {
                source,
                eval_root: a.eval_root.as_deref(),
                frames: a.frames,
                input_shape: commands::parse_shape(&a.input_shape)?,
                passes: a.passes,
                meter: &a.meter,
                convention: match a.flop_convention {
                    ConventionArg::MacAsOne => FlopConvention::MacAsOne,
                    ConventionArg::TwoPerMac => FlopConvention::TwoPerMac,
                },
                model_id: a.model_id,
                out: a.out.as_deref(),
                append: a.append,
            })
        }
        Command::CodecSweep(a) => commands::codec_sweep(commands::CodecArgs {
            codec: &a.codec,
            qualities: &a.qualities,
            flags: &a.flags,
            eval_root: &a.eval_root,
            out: &a.out,
            append: a.append,
            passes: a.passes,
            meter: &a.meter,
            profile_out: a.profile_out.as_deref(),
        }),
        Command::Bd(a) => commands::bd(commands::BdArgs {
            reference: &a.reference,
            test: &a.test,
            reference_id: a.reference_id.as_deref(),
            test_id: a.test_id.as_deref(),
            fit: match a.fit {
                FitArg::Cubic => BdFit::Cubic,
                FitArg::Pchip => BdFit::Pchip,
            },
            out: a.out.as_deref(),
        }),
        Command::Plot(a) => commands::plot(&a.results, &a.out_dir, &a.title),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::config("x", "y")), 1);
        assert_eq!(exit_code(&Error::Capability("webp".into())), 2);
        assert_eq!(exit_code(&Error::TrainingAborted { step: 3, reason: "nan".into() }), 1);
        let missing = Error::io("reading", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code(&missing), 1);
        let denied = Error::io("reading", std::io::Error::from(std::io::ErrorKind::PermissionDenied));
        assert_eq!(exit_code(&denied), 2);
        let nested = Error::Evaluation { image: "a.png".into(), source: Box::new(Error::Capability("x".into())) };
        assert_eq!(exit_code(&nested), 2);
    }
}
