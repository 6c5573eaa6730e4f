//! Command-line front end: dataset generation, the staged pipeline, metric
//! evaluation, and heatmap rendering.
//!
//! Every pipeline subcommand takes a TOML config (see
//! [`mmnr::pipeline::PipelineConfig`]); artifacts land in a run directory
//! named by the config's content hash, so repeated invocations with the same
//! config resume/overwrite the same run. Exit codes: 0 success, 2
//! configuration error, 3 data/format error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmnr::bundle::read_map;
use mmnr::encoders::{EncoderConfig, EncoderKind};
use mmnr::error::{Error, Result};
use mmnr::pipeline::{self, Phase, PipelineConfig, RunOutcome};
use mmnr::synth::{generate_synthetic_dataset, SynthSpec};
use mmnr::tensor::ScoreGrid;

#[derive(Parser)]
#[command(
    name = "mmnr",
    version,
    about = "Noise-resistant multimodal (RGB + point cloud) anomaly detection"
)]
struct Cli {
    /// Cap the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB + point-cloud dataset.
    GenData(GenDataArgs),
    /// Zero-shot scoring and reference selection.
    Stage1(ConfigArgs),
    /// Training-set denoising.
    Stage2(ConfigArgs),
    /// Train the multimodal fusion head.
    TrainUff(ConfigArgs),
    /// Build memory banks and decision SVMs.
    BuildBanks(ConfigArgs),
    /// Score the test set.
    Infer(ConfigArgs),
    /// Recompute metrics for an already-scored run.
    Eval(ReportArgs),
    /// Run every phase end to end.
    Run(ReportArgs),
    /// Render a stored score map as a PNG heatmap.
    Render(RenderArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Pipeline configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Also write a per-class CSV summary to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of classes (ignored with --spec).
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Toy-encoder feature dimension (ignored with --spec).
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Full generator spec (TOML), overriding the flags above.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Input score map (.mmnm).
    #[arg(long)]
    map: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Rendered pixels per map cell.
    #[arg(long, default_value_t = 16)]
    scale: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Errors only when a pool already exists, which is fine to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Stage1(args) => run_phase(args, Phase::Stage1),
        Command::Stage2(args) => run_phase(args, Phase::Stage2),
        Command::TrainUff(args) => run_phase(args, Phase::TrainUff),
        Command::BuildBanks(args) => run_phase(args, Phase::BuildBanks),
        Command::Infer(args) => run_phase(args, Phase::Infer),
        Command::Eval(args) => {
            let config = PipelineConfig::load(&args.config)?;
            let outcome = pipeline::evaluate_existing(&config)?;
            print_report(&outcome, args.csv.as_deref())
        }
        Command::Run(args) => {
            let config = PipelineConfig::load(&args.config)?;
            let outcome = pipeline::run_pipeline(&config)?;
            print_report(&outcome, args.csv.as_deref())
        }
        Command::Render(args) => render(args),
    }
}

fn run_phase(args: ConfigArgs, phase: Phase) -> Result<()> {
    let config = PipelineConfig::load(&args.config)?;
    let outcome = pipeline::run_to_phase(&config, phase)?;
    println!("run directory: {}", outcome.run_dir.display());
    println!("artifacts: {}", outcome.hashes.len());
    Ok(())
}

fn print_report(outcome: &RunOutcome, csv: Option<&Path>) -> Result<()> {
    let report = outcome
        .report
        .as_ref()
        .expect("evaluated runs carry a report");
    println!("run directory: {}", outcome.run_dir.display());
    let row = |name: &str, i: f64, p: f64, a: f64, noise: f64| {
        println!("{name:<12} i-auroc {i:.4}  p-auroc {p:.4}  aupro {a:.4}  noise {noise:.4}");
    };
    for class in &report.classes {
        row(
            &class.class_name,
            class.eval.i_auroc,
            class.eval.p_auroc,
            class.eval.aupro,
            class.noise_level,
        );
    }
    row(
        "mean",
        report.mean_i_auroc,
        report.mean_p_auroc,
        report.mean_aupro,
        report.mean_noise_level,
    );
    if let Some(path) = csv {
        std::fs::write(path, pipeline::report_csv(report)).map_err(|e| Error::io(path, e))?;
        println!("csv: {}", path.display());
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let spec: SynthSpec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(Error::from)?
        }
        None => SynthSpec::desk(
            args.classes,
            EncoderConfig {
                dim: args.dim,
                seed: 0,
                kind: EncoderKind::Toy,
            },
        ),
    };
    let classes = generate_synthetic_dataset(&spec, args.seed, &args.out)?;
    for class in &classes {
        println!(
            "{}: {} train / {} test -> {}",
            class.class_name,
            class.train.samples.len(),
            class.test.samples.len(),
            class.class_dir.display()
        );
    }
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    let (h, w, scores) = read_map(&args.map)?;
    let grid = ScoreGrid::from_scores(h, w, scores)?;
    pipeline::render_heatmap(&grid, args.scale, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
