//! Command-line surface for the collaborative annotation engine.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use freeal_core::annotator::{AnnotatorBackend, DemoSensitivity, MockBackend, MockNoiseModel, PromptTemplate, RemoteBackend};
use freeal_core::data::{validate_dataset, Dataset, LabelSpace, RunConfig, Split};
use freeal_core::eval::transductive_accuracy;
use freeal_core::io::{
    annotations_of, load_config, load_jsonl_dataset, load_model, load_text_truth, read_manifest,
};
use freeal_core::orchestrator::{round_kind, run_loop, LoopOptions, RoundKind};
use freeal_core::sim::{gaussian_fixture, mock_backend};
use freeal_core::{EngineError, Result};

/// Environment variables for the remote backend.
const ENV_REMOTE_URL: &str = "FREEAL_REMOTE_URL";
const ENV_API_KEY: &str = "FREEAL_API_KEY";

#[derive(Parser)]
#[command(
    name = "freeal",
    about = "Collaborative annotation loop: an annotator and a small distilled model refine each other's labels",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Remote,
}

#[derive(Args)]
struct RunArgs {
    /// key=value run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (JSONL: id, text, embedding, optional gold).
    #[arg(long)]
    dataset: PathBuf,
    /// Held-out dataset for inductive scoring.
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    /// Checkpoint / artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// Resume from this completed round in the checkpoint directory.
    #[arg(long, value_name = "ROUND")]
    resume: Option<u32>,
    /// Annotator noise level for the mock backend.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full annotate-distill-refine loop.
    Run(RunArgs),
    /// Run only the next annotation round (round 1, or a refinement round
    /// when resuming).
    Annotate(RunArgs),
    /// Run only the next distillation round from a checkpoint.
    Distill(RunArgs),
    /// Run only the next refinement round from a checkpoint.
    Refine(RunArgs),
    /// Score run artifacts against gold labels.
    Evaluate {
        /// Dataset with gold labels.
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out dataset with gold labels, scored with the final model.
        #[arg(long)]
        test_dataset: Option<PathBuf>,
        /// Artifact directory of a finished run.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the loop end to end on synthetic blob data with the mock backend.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value = "sim_out")]
        out: PathBuf,
        /// Number of training points.
        #[arg(long, default_value_t = 200)]
        train_size: usize,
        /// Number of held-out points.
        #[arg(long, default_value_t = 80)]
        test_size: usize,
    },
    /// Dump a run artifact (state, manifest, model, labels) human-readably.
    Inspect {
        /// Path to the artifact file.
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // All argument problems are usage errors (exit 1), including the
            // help/version short-circuits' sibling paths; help itself is 0.
            let code = if err.exit_code() == 0 { 0 } else { 1 };
            let _ = err.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// 1 = usage (bad flags or config), 2 = data, 3 = backend.
fn exit_code_for(err: &EngineError) -> u8 {
    match err {
        EngineError::Config(_) => 1,
        EngineError::Backend(_) => 3,
        _ => 2,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => run_phase(args, None),
        Command::Annotate(args) => run_phase(args, Some(RoundKind::LlmAnnotation)),
        Command::Distill(args) => run_phase(args, Some(RoundKind::SlmDistillation)),
        Command::Refine(args) => {
            if args.resume.is_none() {
                return Err(EngineError::Config(
                    "refine needs --resume ROUND: it re-annotates from a checkpoint".into(),
                ));
            }
            run_phase(args, Some(RoundKind::LlmAnnotation))
        }
        Command::Evaluate {
            dataset,
            test_dataset,
            out,
        } => evaluate(&dataset, test_dataset.as_deref(), &out),
        Command::Simulate {
            seed,
            noise,
            out,
            train_size,
            test_size,
        } => simulate(seed, noise, &out, train_size, test_size),
        Command::Inspect { path } => inspect(&path),
    }
}

/// Structural dataset checks; all violations are listed in one data error.
fn check_valid(dataset: &Dataset, path: &Path) -> Result<()> {
    let report = validate_dataset(dataset);
    if report.is_ok() {
        Ok(())
    } else {
        Err(EngineError::Data(format!(
            "{}:\n  {}",
            path.display(),
            report.violations.join("\n  ")
        )))
    }
}

fn load_run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn make_backend(
    args: &RunArgs,
    space: &LabelSpace,
    truth: Option<BTreeMap<String, usize>>,
    config: &RunConfig,
) -> Result<Box<dyn AnnotatorBackend>> {
    match args.backend {
        BackendKind::Mock => {
            let truth = truth.ok_or_else(|| {
                EngineError::Data("mock backend needs gold labels in the dataset".into())
            })?;
            let mut noise = MockNoiseModel::symmetric(space.num_classes(), args.noise, config.seed);
            noise.ambiguity_rate = 0.0;
            Ok(Box::new(MockBackend::new(
                space.clone(),
                truth,
                noise,
                Some(DemoSensitivity {
                    min_correct_fraction: 0.8,
                    boosted_noise_scale: 0.1,
                }),
                PromptTemplate::generation_default(space).instruction,
            )?))
        }
        BackendKind::Remote => {
            let url = std::env::var(ENV_REMOTE_URL).map_err(|_| {
                EngineError::Config(format!(
                    "remote backend needs the {ENV_REMOTE_URL} environment variable"
                ))
            })?;
            let api_key = std::env::var(ENV_API_KEY).ok();
            Ok(Box::new(RemoteBackend::new(url, api_key)))
        }
    }
}

/// Shared driver for run/annotate/distill/refine. `only` restricts the
/// invocation to a single round and checks its kind.
fn run_phase(args: RunArgs, only: Option<RoundKind>) -> Result<()> {
    let space = LabelSpace::binary_sentiment();
    let config = load_run_config(&args)?;
    let (train, gold) = load_jsonl_dataset(&args.dataset, &space, Split::Train)?;
    check_valid(&train, &args.dataset)?;
    let test = match &args.test_dataset {
        Some(path) => {
            let loaded = load_jsonl_dataset(path, &space, Split::Test)?;
            check_valid(&loaded.0, path)?;
            Some(loaded)
        }
        None => None,
    };
    let mut gold = gold;
    if let Some((_, test_gold)) = &test {
        gold.absorb(test_gold);
    }

    let truth = match args.backend {
        BackendKind::Mock => Some(load_text_truth(&args.dataset, &space)?),
        BackendKind::Remote => None,
    };
    let backend = make_backend(&args, &space, truth, &config)?;

    let resume = args.resume.is_some();
    if resume && args.out.is_none() {
        return Err(EngineError::Config("--resume needs --out DIR".into()));
    }
    let stop_after = match only {
        Some(kind) => {
            let next_round = args.resume.map(|r| r + 1).unwrap_or(1);
            if round_kind(next_round) != kind {
                return Err(EngineError::Config(format!(
                    "round {next_round} is a {:?} round; use a different subcommand or --resume",
                    round_kind(next_round)
                )));
            }
            Some(next_round)
        }
        None => None,
    };

    let outcome = run_loop(
        &train,
        &LoopOptions {
            backend: backend.as_ref(),
            config: &config,
            out_dir: args.out.as_deref(),
            resume,
            resume_round: args.resume,
            stop_after,
            gold: if gold.is_empty() { None } else { Some(&gold) },
            test: test.as_ref().map(|(d, _)| d),
        },
    )?;

    for record in &outcome.state.records {
        println!(
            "round {:02} {:?}: labeled {} clean {} noisy {}{}",
            record.round,
            record.kind,
            record.labeled,
            record.clean,
            record.noisy,
            record
                .transductive_accuracy
                .map(|a| format!(" train-acc {a:.4}"))
                .unwrap_or_default(),
        );
    }
    if outcome.state.converged {
        println!("converged after round {}", outcome.state.round);
    }
    Ok(())
}

fn evaluate(dataset: &Path, test_dataset: Option<&Path>, out: &Path) -> Result<()> {
    let space = LabelSpace::binary_sentiment();
    let (_, gold) = load_jsonl_dataset(dataset, &space, Split::Train)?;
    if gold.is_empty() {
        return Err(EngineError::Data(format!(
            "{}: no gold labels to evaluate against",
            dataset.display()
        )));
    }
    let labels_path = out.join("labels.jsonl");
    let (labeled, _) = load_jsonl_dataset(&labels_path, &space, Split::Train)?;
    let report = transductive_accuracy(&gold, &annotations_of(&labeled), space.num_classes())?;
    println!(
        "transductive accuracy {:.4} ({}/{} correct, {} ambiguous)",
        report.accuracy, report.correct, report.total, report.ambiguous
    );

    let model_path = out.join("model.bin");
    if let Some(test_path) = test_dataset {
        let model = load_model(&model_path)?;
        let (test, test_gold) = load_jsonl_dataset(test_path, &space, Split::Test)?;
        let report = freeal_core::eval::inductive_accuracy(&test_gold, &model, &test.samples)?;
        println!(
            "test accuracy {:.4} ({}/{} correct)",
            report.accuracy, report.correct, report.total
        );
    }
    Ok(())
}

fn simulate(seed: u64, noise: f64, out: &Path, train_size: usize, test_size: usize) -> Result<()> {
    let fixture = gaussian_fixture(train_size, test_size, seed);
    let backend = mock_backend(&fixture, noise, 0.02, seed)?;
    let mut config = RunConfig::default();
    config.seed = seed;
    config.hidden_dim = 32;
    config.batch_size = 8;
    config.total_epochs = 60;
    config.warmup_epochs = 5;
    config.alpha_ramp_epochs = 10;
    let outcome = run_loop(
        &fixture.train,
        &LoopOptions {
            backend: &backend,
            config: &config,
            out_dir: Some(out),
            resume: false,
            resume_round: None,
            stop_after: None,
            gold: Some(&fixture.gold),
            test: Some(&fixture.test),
        },
    )?;
    for record in &outcome.state.records {
        println!(
            "round {:02} {:?}: train-acc {} test-acc {}",
            record.round,
            record.kind,
            record
                .transductive_accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into()),
            record
                .test_accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into()),
        );
    }
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    if name.ends_with(".bin") {
        let model = load_model(path)?;
        println!(
            "model checkpoint: input {} hidden {} classes {}",
            model.d_in, model.d_h, model.num_classes
        );
        println!("parameters: {}", model.num_params());
        let norm = |m: &[f64]| -> f64 { m.iter().map(|x| x * x).sum::<f64>().sqrt() };
        println!("|w1| {:.6}  |w2| {:.6}", norm(&model.w1), norm(&model.w2));
        return Ok(());
    }
    if name == "manifest.json" {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let manifest = read_manifest(dir)?;
        println!(
            "version {} seed {} rounds_completed {} converged {}",
            manifest.version, manifest.seed, manifest.rounds_completed, manifest.converged
        );
        for (file, hash) in &manifest.files {
            println!("  {file}  sha256 {hash}");
        }
        return Ok(());
    }
    if name.ends_with(".jsonl") {
        let space = LabelSpace::binary_sentiment();
        let (dataset, gold) = load_jsonl_dataset(path, &space, Split::Train)?;
        let labeled = dataset
            .samples
            .iter()
            .filter(|s| s.pseudo_label.is_some() && !s.ambiguous)
            .count();
        let ambiguous = dataset.samples.iter().filter(|s| s.ambiguous).count();
        println!(
            "{} samples, {} labeled, {} ambiguous, {} with gold, embedding dim {}",
            dataset.len(),
            labeled,
            ambiguous,
            gold.len(),
            dataset.embedding_dim()
        );
        return Ok(());
    }
    // Round state files and the summary are plain JSON.
    let text = std::fs::read_to_string(path)
        .map_err(|e| EngineError::Data(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| EngineError::Data(format!("{}: {e}", path.display())))?;
    println!("{}", summarize_json(&value, 0));
    Ok(())
}

/// Shallow human-readable rendering: scalars verbatim, containers by size,
/// recursing two levels deep.
fn summarize_json(value: &serde_json::Value, depth: usize) -> String {
    let indent = "  ".repeat(depth);
    match value {
        serde_json::Value::Object(map) => map
            .iter()
            .map(|(k, v)| match v {
                serde_json::Value::Array(a) if depth >= 1 || a.len() > 8 => {
                    format!("{indent}{k}: [{} items]", a.len())
                }
                serde_json::Value::Object(_) | serde_json::Value::Array(_) if depth < 2 => {
                    format!("{indent}{k}:\n{}", summarize_json(v, depth + 1))
                }
                _ => format!("{indent}{k}: {v}"),
            })
            .collect::<Vec<_>>()
            .join("\n"),
        serde_json::Value::Array(a) => a
            .iter()
            .map(|v| summarize_json(v, depth))
            .collect::<Vec<_>>()
            .join("\n"),
        other => format!("{indent}{other}"),
    }
}
