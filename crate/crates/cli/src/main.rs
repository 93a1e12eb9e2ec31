use std::path::PathBuf;
use std::process::ExitCode;

use ccr_cli::{Mode, Pipeline, PipelineConfig};
use ccr_core::detsim::Part;
use ccr_core::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ccr", version = ccr_cli::pipeline::VERSION, about = "Count, crop and recognise")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Regenerate the dataset even if one exists.
    #[arg(long, global = true)]
    force: bool,

    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Recogniser input for `train-recog`.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Restrict `train-tracknets` to one part.
    #[arg(long, global = true, value_enum)]
    part: Option<PartArg>,

    /// Directory that relative configuration paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    Gen,
    /// Train the counting network.
    TrainCount,
    /// Write crop proposals and CAM images for every frame.
    Propose,
    /// Train a recogniser on proposed crops or on whole frames.
    TrainRecog,
    /// Train the face and body track classifiers.
    TrainTracknets,
    /// Evaluate every trained method and write the report.
    Eval,
    /// Localise labelled identities in the test frames.
    Localise,
    /// Write overlay images for a few test frames.
    Viz,
    /// Run gen through eval.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ccr,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Face,
    Body,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingPrerequisite(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> ccr_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let p = Pipeline::new(cfg, &cli.out)?;
    match cli.command {
        Command::Gen => print!("{}", p.gen(cli.force)?.render()),
        Command::TrainCount => {
            let h = p.train_count()?;
            println!("count network: {:?}", h.last());
        }
        Command::Propose => {
            let props = p.propose()?;
            println!("{} proposals written to {}", props.len(), p.proposals_path().display());
        }
        Command::TrainRecog => {
            let mode = match cli.mode {
                Some(ModeArg::Baseline) => Mode::Baseline,
                Some(ModeArg::Ccr) | None => Mode::Ccr,
            };
            let h = p.train_recog(mode)?;
            println!("{} recogniser: {:?}", mode.name(), h.last());
        }
        Command::TrainTracknets => {
            let parts = match cli.part {
                Some(PartArg::Face) => vec![Part::Face],
                Some(PartArg::Body) => vec![Part::Body],
                None => vec![Part::Face, Part::Body],
            };
            for part in parts {
                let h = p.train_tracknet(part)?;
                println!("{} track classifier: {:?}", part.name(), h.last());
            }
        }
        Command::Eval => {
            let report = p.eval()?;
            print!("{}", report.table());
            println!("report written to {}", p.report_path().display());
        }
        Command::Localise => {
            let s = p.localise()?;
            println!(
                "{} localisations, {:.1}% of centroids inside the body box; written to {}",
                s.localisations,
                100.0 * s.centroid_hit_rate,
                p.localisations_path().display()
            );
        }
        Command::Viz => {
            let files = p.viz()?;
            println!("{} overlays written to {}", files.len(), p.viz_dir().display());
        }
        Command::Run => {
            p.run_all(cli.force, &mut |line| println!("{line}"))?;
            println!("report written to {}", p.report_path().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
