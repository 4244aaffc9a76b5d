//! `mobilesal` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mobilesal", version, about = "Lightweight RGB-D salient object detection")]
struct Cli {
    /// Worker threads for kernel parallelism. 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a dataset root with `RGB/`, `depth/` and `GT/` subdirectories.
    Train(TrainArgs),
    /// Predict saliency maps from a checkpoint.
    Infer(InferArgs),
    /// Score predicted maps against ground truth.
    Eval(EvalArgs),
    /// Parameter and multiply-accumulate counts per scope.
    Stats(StatsArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic RGB-D dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overfit preset for small synthetic sets. Explicit flags still apply.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated training resolutions, each a multiple of 32.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<usize>>,
    #[arg(long)]
    pub width_mult: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Single RGB image; requires `--depth`.
    #[arg(long, requires = "depth", conflicts_with = "data")]
    pub rgb: Option<PathBuf>,
    #[arg(long, requires = "rgb")]
    pub depth: Option<PathBuf>,
    /// Dataset root; predicts every id present in both `RGB/` and `depth/`.
    #[arg(long, required_unless_present = "rgb")]
    pub data: Option<PathBuf>,
    /// Output image for `--rgb`, output directory for `--data`.
    #[arg(long)]
    pub out: PathBuf,
    /// Expected network config (`config.json` from `train`, or a bare config).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BetaArg {
    /// β² = 0.3.
    Squared,
    /// β = 0.3.
    Plain,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "dataset")]
    pub dataset: String,
    #[arg(long, value_enum, default_value_t = BetaArg::Squared)]
    pub beta: BetaArg,
    /// Restored depth maps, scored with PSNR and SSIM against `--depth-dir`.
    #[arg(long, requires = "depth_dir")]
    pub restored_dir: Option<PathBuf>,
    #[arg(long, requires = "restored_dir")]
    pub depth_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, default_value_t = 1.0)]
    pub width_mult: f64,
    #[arg(long, default_value_t = 320)]
    pub input_size: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all, irb, attention, cmf, cpr, idr, losses, bce, dice, ssim or network.
    #[arg(long, default_value = "all")]
    pub block: String,
    /// Largest accepted relative error. The network check defaults to its
    /// own looser setting.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(commands::EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
