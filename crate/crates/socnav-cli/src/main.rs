//! `socnav`: data generation, training, evaluation, and baseline
//! comparison for the social-navigation behavior-cloning pipeline.
//!
//! Every command takes the same experiment TOML (`--spec`); outputs land
//! under `--out` (default `runs/<experiment name>`). Exit codes: 0
//! success, 2 validation error, 3 missing prerequisite, 4 numerical
//! failure.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use socnav_core::network::Modality;

mod compare;
mod data;
mod plot;
mod spec;
mod train_cmd;
mod voxelize_cmd;

use spec::ExperimentSpec;

/// A prerequisite artifact (manifest, episode, checkpoint, input file) is
/// missing; maps to exit code 3.
#[derive(Debug)]
pub struct MissingPrereq(pub String);

impl fmt::Display for MissingPrereq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingPrereq {}

#[derive(Parser)]
#[command(
    name = "socnav",
    version,
    about = "Behavior-cloning pipeline for social robot navigation",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug)]
struct VariantArg(Modality);

impl FromStr for VariantArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rgb" => Ok(VariantArg(Modality::Rgb)),
            "lidar" => Ok(VariantArg(Modality::Lidar)),
            "multimodal" => Ok(VariantArg(Modality::Multimodal)),
            other => Err(format!("unknown variant {other:?}; expected rgb|lidar|multimodal")),
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment TOML file.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (default: runs/<experiment name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test episode splits and the data manifest.
    GenData {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Regenerate even if the data directory already holds episodes.
        #[arg(long)]
        force: bool,
    },
    /// Train one run per (variant, seed); writes history.csv and
    /// checkpoints.
    Train {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Restrict to these variants (repeatable); default: all in the
        /// spec.
        #[arg(long = "variant", value_name = "VARIANT")]
        variants: Vec<VariantArg>,
        /// Retrain even if the run directory already holds results.
        #[arg(long)]
        force: bool,
    },
    /// Score variants and baselines on the test split; writes
    /// comparison.csv, samples.csv, and loss plots.
    Compare {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Restrict to these variants (repeatable); default: all in the
        /// spec.
        #[arg(long = "variant", value_name = "VARIANT")]
        variants: Vec<VariantArg>,
    },
    /// Voxelize a raw point file (f32 x,y,z triplets) into grid.vox.
    Voxelize {
        /// Point file to voxelize.
        pts: PathBuf,
        /// Optional grid-spec TOML overriding the default crop.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for grid.vox (default: alongside the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_out(spec: &ExperimentSpec, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("runs").join(&spec.name))
}

fn resolve_variants(spec: &ExperimentSpec, requested: &[VariantArg]) -> Vec<Modality> {
    if requested.is_empty() {
        spec.model.variants.clone()
    } else {
        requested.iter().map(|v| v.0).collect()
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, force } => {
            let spec = ExperimentSpec::load(&common.spec)?;
            let out = resolve_out(&spec, common.out);
            data::cmd_gen_data(&spec, &out, force)
        }
        Command::Train { common, variants, force } => {
            let spec = ExperimentSpec::load(&common.spec)?;
            let out = resolve_out(&spec, common.out);
            let variants = resolve_variants(&spec, &variants);
            train_cmd::cmd_train(&spec, &out, &variants, force)
        }
        Command::Compare { common, variants } => {
            let spec = ExperimentSpec::load(&common.spec)?;
            let out = resolve_out(&spec, common.out);
            let variants = resolve_variants(&spec, &variants);
            compare::cmd_compare(&spec, &common.spec, &out, &variants)
        }
        Command::Voxelize { pts, spec, out } => {
            voxelize_cmd::cmd_voxelize(&pts, spec.as_deref(), out.as_deref())
        }
    }
}

/// Maps an error chain to the documented exit codes: missing
/// prerequisites and unreadable inputs are 3, non-finite training losses
/// are 4, and everything else (validation, format, refusal) is 2.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<MissingPrereq>().is_some() {
            return 3;
        }
        if let Some(core) = cause.downcast_ref::<socnav_core::Error>() {
            return match core {
                socnav_core::Error::NonFiniteLoss { .. } => 4,
                socnav_core::Error::Io { .. } => 3,
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return match io.kind() {
                std::io::ErrorKind::NotFound => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("socnav: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
