use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "mbtf", version, about = "Multi-band singing voice enhancement toolkit")]
pub struct Cli {
    /// key=value file whose entries override the subcommand's flags (keys are long flag names).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance one WAV file.
    Enhance(EnhanceArgs),
    /// Build a simulated test set, or regenerate one from its manifest.
    Simulate(SimulateArgs),
    /// Train the toy configuration on synthetic data.
    TrainToy(TrainArgs),
    /// SI-SNR of estimates against references, matched by file name.
    Evaluate(EvaluateArgs),
    /// Describe a weights file.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Sve,
    #[value(name = "sve+ipe")]
    SveIpe,
    Pe,
}

/// `0`, `1`, any value in between, or `trained` for the λ stored with the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaArg {
    Value(f64),
    Trained,
}

impl FromStr for LambdaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "trained" {
            return Ok(Self::Trained);
        }
        match s.parse::<f64>() {
            Ok(v) if (0.0..=1.0).contains(&v) => Ok(Self::Value(v)),
            _ => Err(format!("expected 0, 1, a value in between or \"trained\", got {s:?}")),
        }
    }
}

impl fmt::Display for LambdaArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Value(v) => write!(f, "{v}"),
            Self::Trained => f.write_str("trained"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Sve,
    Ipe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Debug, clap::Args)]
pub struct EnhanceArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, short)]
    pub weights: PathBuf,
    /// Defaults to pe with --enroll and to sve+ipe otherwise.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Update threshold for sve+ipe.
    #[arg(long)]
    pub lambda: Option<LambdaArg>,
    /// Smoothing factor of the embedding update.
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    /// Chunk length for the update decisions; one second when omitted.
    #[arg(long)]
    pub chunk_secs: Option<f64>,
    /// Enrollment audio (WAV) or a raw f32 embedding file; selects pe mode.
    #[arg(long)]
    pub enroll: Option<PathBuf>,
    /// Resample inputs whose rate differs from the model's.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub resample: bool,
    /// Print per-chunk mean scores and update decisions.
    #[arg(long, short, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub verbose: bool,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub vocals: PathBuf,
    #[arg(long)]
    pub accomps: Option<PathBuf>,
    #[arg(long)]
    pub noises: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// without | random | selected
    #[arg(long, default_value = "without")]
    pub kind: String,
    /// Mixtures per vocal.
    #[arg(long, default_value_t = mbtf_core::simulate::testset::DEFAULT_COUNT_PER_VOCAL)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rebuild the items of an existing manifest instead of drawing new ones.
    #[arg(long, value_name = "MANIFEST")]
    pub regenerate: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Checkpoint path (weights plus optimizer state).
    #[arg(long, short)]
    pub out: PathBuf,
    /// SVE weights to start from; required for the ipe stage.
    #[arg(long)]
    pub sve_weights: Option<PathBuf>,
    /// Tab-separated loss log, one line per step.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Topology as key=value lines over the toy defaults (sve stage only).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of synthetic items; 4 for sve and 8 for ipe when omitted.
    #[arg(long)]
    pub items: Option<usize>,
    /// Item length in seconds; 0.25 for sve and 0.5 for ipe when omitted.
    #[arg(long)]
    pub secs: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub eval_every: u64,
    /// Stop once the evaluated SI-SNR gain reaches this many dB.
    #[arg(long)]
    pub target_gain_db: Option<f64>,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DTypeArg,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Also write the table as TSV.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct InspectArgs {
    #[arg(long, short)]
    pub weights: PathBuf,
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value, got {line:?}", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::usage(format!("config line {}: empty key", i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Value of `--config`, looked up before parsing so the file may also supply required flags.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1).filter_map(|a| a.to_str());
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Parses the command line with the config file entries appended, so they win over flags.
pub fn parse(argv: Vec<OsString>) -> Result<Cli, CliError> {
    let Some(path) = config_path(&argv) else {
        return Cli::try_parse_from(argv).map_err(clap_error);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("cannot read config file {}: {e}", path.display())))?;
    let entries = parse_config_file(&text)?;
    let mut cmd = Cli::command();
    let name = argv
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find(|a| cmd.find_subcommand(a).is_some())
        .map(str::to_owned)
        .ok_or_else(|| CliError::usage("--config needs a subcommand"))?;
    cmd = cmd.mut_subcommand(&name, |s| s.args_override_self(true));
    let sub = cmd.find_subcommand(&name).expect("subcommand exists");
    let mut argv = argv;
    for (key, value) in entries {
        let known = key != "config" && sub.get_arguments().any(|a| a.get_long() == Some(key.as_str()));
        if !known {
            return Err(CliError::usage(format!("unknown config key {key:?} for {name}")));
        }
        argv.push(format!("--{key}={value}").into());
    }
    let matches = cmd.try_get_matches_from(argv).map_err(clap_error)?;
    <Cli as clap::FromArgMatches>::from_arg_matches(&matches).map_err(clap_error)
}

/// Help and version requests print to stdout and exit with success; everything else is a usage error.
fn clap_error(e: clap::Error) -> CliError {
    if !e.use_stderr() {
        e.exit();
    }
    e.into()
}
