mod detect;
mod generate;
mod model;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use printdefect::segmentation::{Channel, ThresholdMethod};

/// Exit status when every input was processed.
const EXIT_OK: u8 = 0;
/// Bad flags, unreadable config, missing model and similar setup errors.
const EXIT_USAGE: u8 = 1;
/// At least one page failed; the others were still processed.
const EXIT_PARTIAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "printdefect", version, about = "Detect gray and solid spots on scanned print pages")]
struct Cli {
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Analyze pages and write defect reports.
    Detect(DetectArgs),
    /// Train a decision tree on blockwise datasets.
    Train(TrainArgs),
    /// Cross-validated miss rate and false alarm over a range of costs.
    Roc(RocArgs),
    /// Render a synthetic test page with known defects.
    Gen(GenArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ChannelArg {
    #[value(name = "delta_e")]
    DeltaE,
    #[value(name = "l_star")]
    LStar,
}

impl From<ChannelArg> for Channel {
    fn from(c: ChannelArg) -> Self {
        match c {
            ChannelArg::DeltaE => Channel::DeltaE,
            ChannelArg::LStar => Channel::LStar,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Otsu,
    Valley,
}

impl From<MethodArg> for ThresholdMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Otsu => ThresholdMethod::Otsu,
            MethodArg::Valley => ThresholdMethod::Valley,
        }
    }
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// PNG pages or directories of pages.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Where results go; defaults to each input's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// TOML file with defaults for any of the settings below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained tree; without it every segmented candidate is reported.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dpi: Option<u32>,
    /// Minimum baseline-corrected DDE of a candidate block.
    #[arg(long)]
    threshold: Option<f64>,
    /// Running-median window, in blocks.
    #[arg(long)]
    baseline_window: Option<usize>,
    #[arg(long, value_enum)]
    channel: Option<ChannelArg>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Histogram bins used for segmentation.
    #[arg(long)]
    bins: Option<usize>,
    /// Ground truth for labeling blocks (single input only). Otherwise
    /// `<stem>.truth.json` next to each page is used when present.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Pages processed in parallel; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    /// Write raw, baseline and corrected DDE of every block to this CSV.
    #[arg(long)]
    dump_dde: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Blockwise dataset CSV; repeat to combine several.
    #[arg(long, required = true)]
    dataset: Vec<PathBuf>,
    /// Cost of missing a defect (false alarms cost 1).
    #[arg(long, default_value_t = 1.0)]
    cost: f64,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Run report path; defaults to `<out stem>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RocArgs {
    #[arg(long, required = true)]
    dataset: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4,8")]
    costs: Vec<f64>,
    #[arg(long, default_value_t = printdefect::classifier::DEFAULT_FOLDS)]
    folds: usize,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long, default_value = "roc.csv")]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Page spec JSON. Without it the standard two-tint layout is used.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Seed for the standard layout.
    #[arg(long, default_value_t = 0, conflicts_with = "spec")]
    seed: u64,
    /// Number of random spots on the standard layout.
    #[arg(long, default_value_t = 10, conflicts_with = "spec")]
    spots: usize,
    #[arg(long)]
    out: PathBuf,
    /// Ground truth path; defaults to `<out stem>.truth.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Detect(args) => detect::run(args, cli.verbose),
        Command::Train(args) => model::train(args).map(|_| EXIT_OK),
        Command::Roc(args) => model::roc(args).map(|_| EXIT_OK),
        Command::Gen(args) => generate::run(args).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
