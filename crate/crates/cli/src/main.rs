use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use noiseaware::corpus::{corpus_vocab, generate_corpus, CorpusSpec};
use noiseaware::dataset::SplitName;
use noiseaware::eval::{format_records, format_table, MetricsReport};
use noiseaware::train::{
    evaluate_split, load_run_checkpoint, parse_config, run_experiment, ExperimentConfig, Preset,
    TrainHyper,
};
use noiseaware::verify::{joint_gradcheck, GRADCHECK_TOLERANCE};

#[derive(Parser)]
#[command(name = "noiseaware", version, about = "Noise-aware CTC speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tone corpus (WAV files and manifests).
    SynthData(SynthArgs),
    /// Train one configuration from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train several presets on one corpus and print the comparison table.
    Compare(CompareArgs),
    /// Check analytic gradients of the joint loss against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Speech utterances in the training split.
    #[arg(long, default_value_t = 190)]
    train_utts: usize,
    /// Utterances per evaluation split, half speech and half noise.
    #[arg(long, default_value_t = 80)]
    eval_utts: usize,
    /// Noise share of the training split, in [0, 1).
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true, value_parser = fraction)]
    noise_frac: f64,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Run directory for checkpoint, log and report.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Overrides the config's seed [default: the config's `seed`, else 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train` or `compare`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config file [default: config.txt beside the checkpoint].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Split to score: train, validation or test.
    #[arg(long, default_value = "test", value_parser = split_name)]
    split: SplitName,
    /// Also write the report as JSON here [default: stdout only].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Corpus directory.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Comma-separated presets, run and tabulated in this order.
    #[arg(long, default_value = "baseline,A,B,C,D", value_delimiter = ',', value_parser = preset)]
    presets: Vec<Preset>,
    /// Output directory; each preset gets a subdirectory.
    #[arg(long, default_value = "runs/compare")]
    out: PathBuf,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs per preset [default: 300, or 30 with --paper-hparams].
    #[arg(long)]
    epochs: Option<usize>,
    /// Validation WER every this many epochs.
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Learning rate 1e-5 and 30 epochs instead of the toy defaults.
    #[arg(long, default_value_t = false)]
    paper_hparams: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturbs the analytic gradient; the check must then fail.
    #[arg(long, hide = true, default_value_t = false)]
    corrupt: bool,
}

fn fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&f) {
        Ok(f)
    } else {
        Err(format!("{f} is outside [0, 1)"))
    }
}

fn split_name(s: &str) -> Result<SplitName, String> {
    s.parse::<SplitName>().map_err(|e| e.to_string())
}

fn preset(s: &str) -> Result<Preset, String> {
    s.parse::<Preset>().map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn synth_data(a: SynthArgs) -> Result<(), Failure> {
    let spec = CorpusSpec {
        train_utts: a.train_utts,
        eval_utts: a.eval_utts,
        noise_fraction: a.noise_frac,
        seed: a.seed,
        ..CorpusSpec::default()
    };
    let s = generate_corpus(&a.out, &spec)
        .with_context(|| format!("generating corpus in {}", a.out.display()))?;
    for (name, c) in [("train", s.train), ("validation", s.validation), ("test", s.test)] {
        println!("{name}: {} entries ({} speech, {} noise)", c.speech + c.noise, c.speech, c.noise);
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.hyper.seed = seed;
    }
    let outcome = run_experiment(&cfg, &a.data, &a.out)
        .with_context(|| format!("training preset {}", cfg.name))?;
    print!("{}", format_table(std::slice::from_ref(&outcome.report)));
    println!(
        "best epoch {}; checkpoint {}; log {}",
        outcome.best_epoch,
        outcome.checkpoint.display(),
        outcome.log.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let config = a.config.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(noiseaware::train::experiment::CONFIG_FILE)
    });
    let cfg = read_config(&config)?;
    let vocab = corpus_vocab(&a.data).context("loading vocabulary")?;
    let (model, weight) = load_run_checkpoint(&cfg, &vocab, &a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let report = evaluate_split(&model, weight.as_ref(), &vocab, &a.data, a.split, cfg.name.as_str())
        .with_context(|| format!("evaluating on {}", a.split))?;
    print!("{}", format_table(std::slice::from_ref(&report)));
    let records = format_records(std::slice::from_ref(&report));
    print!("{records}");
    if let Some(out) = &a.out {
        fs::write(out, &records).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<(), Failure> {
    let mut seen = HashSet::new();
    for p in &a.presets {
        if !seen.insert(*p) {
            return Err(Failure::Usage(format!("preset {p} listed more than once")));
        }
    }
    if a.eval_every == 0 {
        return Err(Failure::Usage("--eval-every must be positive".into()));
    }
    let mut reports: Vec<MetricsReport> = Vec::new();
    for p in &a.presets {
        let mut cfg = ExperimentConfig::preset(*p).with_seed(a.seed);
        if a.paper_hparams {
            cfg.hyper = TrainHyper {
                seed: a.seed,
                ..TrainHyper::paper()
            };
        }
        if let Some(e) = a.epochs {
            cfg.hyper.epochs = e;
        }
        cfg.eval_every = a.eval_every;
        let out = a.out.join(p.as_str());
        let outcome = run_experiment(&cfg, &a.data, &out)
            .with_context(|| format!("training preset {p}"))?;
        reports.push(outcome.report);
    }
    let table = format_table(&reports);
    let records = format_records(&reports);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (file, body) in [("comparison.txt", &table), ("comparison.jsonl", &records)] {
        let path = a.out.join(file);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{table}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let r = joint_gradcheck(a.seed, a.corrupt).context("running gradient check")?;
    println!(
        "max relative error {:.3e} over {} entries (worst: {}[{}])",
        r.max_rel_error, r.entries_checked, r.worst_param, r.worst_index
    );
    if r.max_rel_error <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!(
            "gradient check failed: {} exceeds {GRADCHECK_TOLERANCE:e} in {}[{}]",
            r.max_rel_error,
            r.worst_param,
            r.worst_index
        )))
    }
}

/// The error chain joined by `: `, skipping causes already quoted by
/// their parent's message.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
