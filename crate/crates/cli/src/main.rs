use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use dmsort::cmc::{self, TransformSource};
use dmsort::io::{self, IoError, RunConfig};
use dmsort::papermath::{self, Suite};
use dmsort::tracker::{attach_embeddings, interpolate_tracklets, run_sequence};

#[derive(Parser)]
#[command(name = "dmsort", version, about = "Multi-object tracking for moving platforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track detections and write MOT result rows.
    Track(TrackArgs),
    /// Score results against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic scene.
    Simulate(SimulateArgs),
    /// Run the numeric self-checks.
    Mathcheck(MathcheckArgs),
    /// Estimate per-frame platform transforms from point correspondences.
    EstimateCmc(EstimateArgs),
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long, required_unless_present = "print_config")]
    det: Option<PathBuf>,
    /// Required unless appearance is disabled in the config.
    #[arg(long)]
    emb: Option<PathBuf>,
    /// Per-frame transforms file.
    #[arg(long, group = "motion")]
    cmc: Option<PathBuf>,
    /// Point correspondences; transforms are estimated with RANSAC.
    #[arg(long, group = "motion")]
    cmc_corr: Option<PathBuf>,
    /// Assume a static platform.
    #[arg(long, group = "motion")]
    cmc_identity: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Fill short gaps inside tracks.
    #[arg(long)]
    interpolate: bool,
    /// Print the effective configuration.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    res: PathBuf,
    /// Also write a key=value report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MathcheckArgs {
    #[arg(long, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    corr: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Exit 1 for bad input, 2 for failures while running.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => Failure::Runtime(e.into()),
            _ => Failure::Validation(e.into()),
        }
    }
}

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn track(args: TrackArgs) -> Result<(), Failure> {
    let cfg = load_config(args.config.as_deref())?;
    if args.print_config {
        print!("{}", cfg.dump());
    }
    let (Some(det), Some(out)) = (args.det, args.out) else {
        return Ok(());
    };
    let mut dets = io::read_detections(&det)?;
    match &args.emb {
        Some(p) => {
            let emb = io::read_embeddings(p)?;
            attach_embeddings(&mut dets, &emb).map_err(validation)?;
        }
        None if cfg.tracker.appearance_enabled => {
            return Err(validation(anyhow!("--emb is required unless appearance_enabled=false")));
        }
        None => {}
    }

    let read_cmc = |p: &Path| -> Result<String, Failure> { Ok(io::read_text(p)?) };
    let source = if let Some(p) = &args.cmc {
        let map = cmc::parse_transforms(&read_cmc(p)?).with_context(|| p.display().to_string()).map_err(validation)?;
        TransformSource::File(map)
    } else if let Some(p) = &args.cmc_corr {
        let sets =
            cmc::parse_correspondences(&read_cmc(p)?).with_context(|| p.display().to_string()).map_err(validation)?;
        TransformSource::Correspondences { sets, config: cfg.cmc }
    } else {
        TransformSource::Identity
    };

    let mut frames = dets.iter().map(|d| d.frame).max().unwrap_or(0);
    match &source {
        TransformSource::File(m) => frames = frames.max(m.keys().last().copied().unwrap_or(0)),
        TransformSource::Correspondences { sets, .. } => frames = frames.max(sets.keys().last().copied().unwrap_or(0)),
        TransformSource::Identity => {}
    }

    let mut results = run_sequence(&dets, &source, frames, &cfg.tracker).map_err(runtime)?;
    if args.interpolate {
        results = interpolate_tracklets(&results, cfg.interpolation_max_gap);
    }
    io::write_results(&out, &results)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let gt = io::read_gt(&args.gt)?;
    let res = io::read_results(&args.res)?;
    let report = dmsort::metrics::evaluate(&gt, &res).map_err(validation)?;
    print!("{}", report.to_text());
    if let Some(p) = &args.report {
        io::write_text(p, &report.to_key_values())?;
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut cfg = dmsort::sim::preset(&args.preset).map_err(validation)?;
    cfg.seed = args.seed;
    let bundle = dmsort::sim::generate(&cfg).map_err(validation)?;
    std::fs::create_dir_all(&args.out).with_context(|| args.out.display().to_string()).map_err(runtime)?;
    let transforms: BTreeMap<u32, _> = bundle.transforms.iter().enumerate().map(|(i, t)| (i as u32 + 1, t)).collect();
    let files = [
        ("gt.txt", io::format_gt(&bundle.gt)),
        ("det.txt", io::format_detections(&bundle.detections)),
        ("emb.txt", io::format_embeddings(&bundle.detections)),
        ("transforms.txt", cmc::format_transforms(transforms)),
        ("correspondences.txt", cmc::format_correspondences(&bundle.correspondences)),
    ];
    for (name, text) in files {
        io::write_text(&args.out.join(name), &text)?;
    }
    Ok(())
}

fn mathcheck(args: MathcheckArgs) -> Result<(), Failure> {
    let reports = papermath::run_suite(args.suite, args.seed);
    for r in &reports {
        println!("{r}");
    }
    if reports.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(runtime(anyhow!("mathcheck failed")))
    }
}

fn estimate_cmc(args: EstimateArgs) -> Result<(), Failure> {
    let cfg = load_config(args.config.as_deref())?;
    let sets = cmc::parse_correspondences(&io::read_text(&args.corr)?).map_err(validation)?;
    let last = sets.keys().last().copied().unwrap_or(0);
    let source = TransformSource::Correspondences { sets, config: cfg.cmc };
    let transforms = source.stream(last).collect::<Result<Vec<_>, _>>().map_err(runtime)?;
    let text = cmc::format_transforms(transforms.iter().enumerate().map(|(i, t)| (i as u32 + 1, t)));
    io::write_text(&args.out, &text)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::Mathcheck(a) => mathcheck(a),
        Command::EstimateCmc(a) => estimate_cmc(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
