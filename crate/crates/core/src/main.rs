//! Command-line front end: training, evaluation, masking sweeps, text
//! robustness, synthetic data generation, and dataset validation. Exit
//! codes: 0 success, 1 usage, 2 data/schema error, 3 divergence.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use textpose::data::{
    generate_synthetic, load_dataset, Dataset, PerturbMode, SplitPart, SynonymTable,
    SyntheticSpec,
};
use textpose::decoder::DecoderKind;
use textpose::error::Result;
use textpose::harness::{
    displacement_csv, evaluate, load_checkpoint, mask_sweep, robustness, sweep_csv, train,
    RunConfig,
};
use textpose::model::Model;

#[derive(Parser)]
#[command(name = "textpose", version, about = "Text-graph prompted keypoint estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliSplit {
    Train,
    Val,
    Test,
}

impl From<CliSplit> for SplitPart {
    fn from(s: CliSplit) -> SplitPart {
        match s {
            CliSplit::Train => SplitPart::Train,
            CliSplit::Val => SplitPart::Val,
            CliSplit::Test => SplitPart::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliDecoderKind {
    Graph,
    Mlp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliMode {
    Identity,
    Synonym,
    Typo,
}

impl From<CliMode> for PerturbMode {
    fn from(m: CliMode) -> PerturbMode {
        match m {
            CliMode::Identity => PerturbMode::Identity,
            CliMode::Synonym => PerturbMode::Synonym,
            CliMode::Typo => PerturbMode::Typo,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Dataset root; overrides the config and TEXTPOSE_DATA.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint and metrics log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    decoder_kind: Option<CliDecoderKind>,
    /// Global gradient-norm clip; off when absent.
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CliSplit::Test)]
    split: CliSplit,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskSweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CliSplit::Test)]
    split: CliSplit,
    /// Comma-separated masking fractions in [0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.25,0.5")]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CliSplit::Val)]
    split: CliSplit,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "identity,synonym,typo")]
    modes: Vec<CliMode>,
    /// Synonym table file; required by synonym mode.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report file; stdout when absent. The per-keypoint displacement
    /// CSV lands next to it with a .csv suffix.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthGenArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    categories: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Args)]
struct ValidateDataArgs {
    /// Run configuration TOML naming the expected split.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint.tpck + metrics.ndjson.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-category PCK@0.2 plus a center baseline.
    Eval(EvalArgs),
    /// Evaluate on masked images across fractions; emit CSV.
    MaskSweep(MaskSweepArgs),
    /// Evaluate with perturbed descriptions; emit report + displacement CSV.
    Robustness(RobustnessArgs),
    /// Render a synthetic articulated-figure dataset.
    SynthGen(SynthGenArgs),
    /// Load and validate a dataset against a config's split.
    ValidateData(ValidateDataArgs),
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    let body = format!("{}\n", text.trim_end_matches('\n'));
    match out {
        Some(path) => {
            fs::write(path, &body)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn open_run(
    checkpoint: &PathBuf,
    data: Option<&PathBuf>,
) -> Result<(RunConfig, Model<f32>, Dataset)> {
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    let root = loaded.config.resolve_data_root(data.map(|p| p.as_path()))?;
    let ds = load_dataset(&root, loaded.config.data.split())?;
    Ok((loaded.config, loaded.model, ds))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.optim.epochs = epochs;
        // Milestones at or past the shortened run would fail validation.
        cfg.optim.milestones.retain(|&m| m < epochs);
    }
    if let Some(lr) = args.lr {
        cfg.optim.lr = lr;
    }
    if let Some(batch) = args.batch_size {
        cfg.optim.batch_size = batch;
    }
    if let Some(kind) = args.decoder_kind {
        cfg.model.decoder.decoder_kind = match kind {
            CliDecoderKind::Graph => DecoderKind::Graph,
            CliDecoderKind::Mlp => DecoderKind::Mlp,
        };
    }
    if let Some(clip) = args.clip_norm {
        cfg.optim.clip_norm = Some(clip);
    }
    cfg.validate()?;
    let root = cfg.resolve_data_root(args.data.as_deref())?;
    let ds = load_dataset(&root, cfg.data.split())?;
    let report = train::<f32>(&cfg, &ds, &args.out)?;
    let last = report.metrics.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final train loss {:.4}, val PCK {}",
        report.metrics.len(),
        last.train_loss,
        last.val_pck.map_or("n/a".to_string(), |p| format!("{p:.4}")),
    );
    println!("checkpoint: {}", report.checkpoint_path.display());
    println!("metrics:    {}", report.metrics_path.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (cfg, model, ds) = open_run(&args.checkpoint, args.data.as_ref())?;
    let report = evaluate(&model, &cfg.text, &ds, args.split.into())?;
    emit(args.out.as_ref(), &report.to_json())
}

fn run_mask_sweep(args: MaskSweepArgs) -> Result<()> {
    let (cfg, model, ds) = open_run(&args.checkpoint, args.data.as_ref())?;
    let rows = mask_sweep(&model, &cfg.text, &ds, args.split.into(), &args.fractions, args.seed)?;
    emit(args.out.as_ref(), &sweep_csv(&rows))
}

fn run_robustness(args: RobustnessArgs) -> Result<()> {
    let (cfg, model, ds) = open_run(&args.checkpoint, args.data.as_ref())?;
    let modes: Vec<PerturbMode> = args.modes.iter().map(|&m| m.into()).collect();
    let table = match &args.table {
        Some(path) => Some(SynonymTable::load(path)?),
        None => None,
    };
    let report = robustness(
        &model,
        &cfg.text,
        &ds,
        args.split.into(),
        &modes,
        args.seed,
        table.as_ref(),
    )?;
    emit(args.out.as_ref(), &report.to_json())?;
    let csv = displacement_csv(&report);
    match &args.out {
        Some(path) => {
            let csv_path = path.with_extension("csv");
            fs::write(&csv_path, &csv)?;
            eprintln!("wrote {}", csv_path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_synth_gen(args: SynthGenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        n_categories: args.categories,
        samples_per_category: args.samples,
        image_size: args.image_size,
    };
    let summary = generate_synthetic(&args.out, &spec)?;
    println!(
        "generated {} categories x {} samples at {}px under {}",
        summary.categories.len(),
        summary.samples_per_category,
        summary.image_size,
        args.out.display()
    );
    println!("categories: {}", summary.categories.join(", "));
    Ok(())
}

fn run_validate_data(args: ValidateDataArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let root = cfg.resolve_data_root(args.data.as_deref())?;
    let ds = load_dataset(&root, cfg.data.split())?;
    let split = &ds.split;
    println!(
        "ok: {} train / {} val / {} test categories, images {}x{}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        ds.image_size.0,
        ds.image_size.1
    );
    for name in split.all() {
        let graph = ds.posegraph(name)?;
        let n = ds.samples(name)?.len();
        println!("  {name}: {} keypoints, {n} samples", graph.len());
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::MaskSweep(a) => run_mask_sweep(a),
        Cmd::Robustness(a) => run_robustness(a),
        Cmd::SynthGen(a) => run_synth_gen(a),
        Cmd::ValidateData(a) => run_validate_data(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Clap's help/version output is a success, not a usage error.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
