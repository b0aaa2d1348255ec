//! Command-line front end: synthetic data generation, training, evaluation,
//! smoothing, and the randomized verification suites.
//!
//! Exit codes: 0 success, 1 verification failure (a `check` suite found a
//! property violation), 2 usage or IO error. Human-readable output goes to
//! stdout, diagnostics to stderr, machine-readable artifacts only to `--out`
//! files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ubru::check::{
    run_degenerate_suite, run_equivalence_suite, run_equivalence_suite_mutated, run_grad_suite,
    run_oracle_suite, SuiteReport,
};
use ubru::layer::{stack_features, BackwardMode};
use ubru::train::{
    evaluate, generate, load_checkpoint, save_checkpoint, train_model_with_progress, Dataset,
    SyntheticSpec, TrainConfig, DEFAULT_NOISE, DEFAULT_RHO0, DEFAULT_TAU01, DEFAULT_TAU11,
};

#[derive(Parser)]
#[command(
    name = "ubru",
    version,
    about = "Bayesian recurrent units: data, training, smoothing, verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from ground-truth two-state chains.
    GenData(GenDataArgs),
    /// Train a model on a dataset file using a JSON config.
    Train(TrainArgs),
    /// Report framewise accuracy, cross-entropy and confusion counts.
    Eval(EvalArgs),
    /// Write smoothed posterior sequences for every input sequence.
    Smooth(SmoothArgs),
    /// Run randomized verification suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset path (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences.
    #[arg(long = "num-seq")]
    num_seq: usize,
    /// Frames per sequence.
    #[arg(long)]
    len: usize,
    /// Observation dimension F (must be >= hidden).
    #[arg(long)]
    features: usize,
    /// Number of hidden chains H.
    #[arg(long)]
    hidden: usize,
    /// Master seed; fully determines the file contents.
    #[arg(long)]
    seed: u64,
    /// P(present | present) shared by all chains.
    #[arg(long, default_value_t = DEFAULT_TAU11)]
    tau11: f64,
    /// P(present | absent) shared by all chains.
    #[arg(long, default_value_t = DEFAULT_TAU01)]
    tau01: f64,
    /// Initial presence probability shared by all chains.
    #[arg(long, default_value_t = DEFAULT_RHO0)]
    rho0: f64,
    /// Emission noise standard deviation.
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSON lines with labels).
    #[arg(long)]
    data: PathBuf,
    /// JSON file holding the training configuration.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled dataset to score.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct SmoothArgs {
    /// Input dataset.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint providing the layer parameters.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output path: one {"gamma": [[..]; T]} object per sequence.
    #[arg(long)]
    out: PathBuf,
    /// Override the backward mode of every layer.
    #[arg(long)]
    mode: Option<BackwardModeArg>,
}

#[derive(Args)]
struct CheckArgs {
    /// Which suite to run.
    #[arg(long)]
    suite: SuiteArg,
    /// Trials per suite.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Master seed; per-trial seeds derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plant a sign error in the tau01 term of the beta recursion to verify
    /// that the equivalence suite catches a defective implementation.
    #[arg(long, hide = true)]
    mutate_tau01: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Grads,
    Equivalence,
    Oracle,
    Degenerate,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackwardModeArg {
    None,
    Kalman,
    Hmm,
}

impl From<BackwardModeArg> for BackwardMode {
    fn from(arg: BackwardModeArg) -> Self {
        match arg {
            BackwardModeArg::None => BackwardMode::None,
            BackwardModeArg::Kalman => BackwardMode::Kalman,
            BackwardModeArg::Hmm => BackwardMode::Hmm,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Smooth(args) => cmd_smooth(args),
        Command::Check(args) => cmd_check(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

type CmdResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn cmd_gen_data(args: GenDataArgs) -> CmdResult {
    let spec = SyntheticSpec::homogeneous(
        args.hidden,
        args.features,
        args.tau11,
        args.tau01,
        args.rho0,
        args.noise,
        args.len,
        args.num_seq,
        args.seed,
    )?;
    let data = generate(&spec)?;
    data.save_jsonl(&args.out)?;
    println!(
        "wrote {} sequences (T={}, F={}, H={}) seed {} -> {}",
        args.num_seq,
        args.len,
        args.features,
        args.hidden,
        args.seed,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let config_text = std::fs::read_to_string(&args.config)?;
    let cfg: TrainConfig =
        serde_json::from_str(&config_text).map_err(|e| format!("config: {e}"))?;
    let data = Dataset::load_jsonl(&args.data)?;
    let ckpt = train_model_with_progress(&cfg, &data, |epoch, loss| {
        println!("epoch {epoch} loss {loss}");
    })?;
    save_checkpoint(&ckpt, &args.out)?;
    println!("saved checkpoint -> {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let data = Dataset::load_jsonl(&args.data)?;
    let metrics = evaluate(&ckpt, &data)?;
    println!(
        "frames {} accuracy {:.6} cross_entropy {}",
        metrics.frames, metrics.accuracy, metrics.mean_cross_entropy
    );
    println!("confusion (rows = true class, cols = predicted):");
    for (c, row) in metrics.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|n| format!("{n:>8}")).collect();
        println!("  class {c}: {}", cells.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_smooth(args: SmoothArgs) -> CmdResult {
    use std::io::Write;

    let ckpt = load_checkpoint(&args.ckpt)?;
    let data = Dataset::load_jsonl(&args.data)?;
    let mut stack = ckpt.to_stack()?;
    if let Some(mode) = args.mode {
        for layer in &mut stack {
            layer.config.backward_mode = mode.into();
        }
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    for seq in &data.sequences {
        let gammas = stack_features(&stack, &seq.x)?;
        let rows: Vec<Vec<f64>> = (0..gammas.rows()).map(|t| gammas.row(t).to_vec()).collect();
        let record = serde_json::json!({ "gamma": rows });
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    out.flush()?;
    println!(
        "smoothed {} sequences -> {}",
        data.sequences.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn print_report(report: &SuiteReport) {
    for trial in &report.trials {
        println!(
            "trial {:>5} seed {:>20} max_err {:.3e} {}",
            trial.index,
            trial.seed,
            trial.max_error,
            if trial.passed { "PASS" } else { "FAIL" }
        );
    }
    let passed = report.trials.iter().filter(|t| t.passed).count();
    println!(
        "suite {}: {passed}/{} passed, max error {:.3e} (tolerance {:.1e})",
        report.name,
        report.trials.len(),
        report.max_error,
        report.tolerance
    );
    for failure in report.failures() {
        println!(
            "FAIL suite {} trial {} seed {} max_err {:.6e}",
            report.name, failure.index, failure.seed, failure.max_error
        );
    }
}

fn cmd_check(args: CheckArgs) -> CmdResult {
    let equivalence = |trials, seed| {
        if args.mutate_tau01 {
            run_equivalence_suite_mutated(trials, seed)
        } else {
            run_equivalence_suite(trials, seed)
        }
    };
    let mut reports = Vec::new();
    match args.suite {
        SuiteArg::Grads => reports.push(run_grad_suite(args.trials, args.seed)?),
        SuiteArg::Equivalence => reports.push(equivalence(args.trials, args.seed)?),
        SuiteArg::Oracle => reports.push(run_oracle_suite(args.trials, args.seed)?),
        SuiteArg::Degenerate => reports.push(run_degenerate_suite(args.trials, args.seed)?),
        SuiteArg::All => {
            reports.push(equivalence(args.trials, args.seed)?);
            reports.push(run_oracle_suite(args.trials, args.seed)?);
            reports.push(run_grad_suite(args.trials, args.seed)?);
            reports.push(run_degenerate_suite(args.trials, args.seed)?);
        }
    }
    let mut all_passed = true;
    for report in &reports {
        print_report(report);
        all_passed &= report.passed();
    }
    if all_passed {
        println!("all suites passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("verification FAILED");
        Ok(ExitCode::from(1))
    }
}
