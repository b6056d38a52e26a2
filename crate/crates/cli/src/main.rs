//! `jitterlab`: generate data, inject noise, train, predict, evaluate and
//! run declarative experiment sweeps.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 training failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use jitterlab::dataset::{
    build_vocab, generate_splits, inject_noise, load_tsv, DatasetError, NoiseConfig, Split,
};
use jitterlab::evaluation::{
    agreement, disagreements_tsv, exact_match, ledger_table, mean_std, results_table, EvalError,
    PredictionSet,
};
use jitterlab::experiment::{
    rebuild_rows, regime_from_toml, run_experiment, write_report, write_tables, ExperimentError,
    Manifest,
};
use jitterlab::model::{beam_search, greedy_decode, Ensemble, ModelError, ParserModel, Prediction};
use jitterlab::training::{train_run, ModelCache, TrainingError};

#[derive(Parser)]
#[command(name = "jitterlab", version, about = "Retraining jitter experiments for semantic parsers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: train.tsv, eval.tsv and vocab.json.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Training examples.
        #[arg(long)]
        n: usize,
        /// Evaluation examples, drawn from the same stream after the train split.
        #[arg(long, default_value_t = 0)]
        eval_n: usize,
        /// Share of templates whose utterances are also produced by a partner template.
        #[arg(long, default_value_t = 0.3)]
        ambiguity: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample a fraction of intent and slot labels of a train TSV.
    InjectNoise {
        #[arg(long)]
        input: PathBuf,
        /// Fraction X of label occurrences to resample, per class.
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one regime on a train TSV.
    ///
    /// The regime file holds `method`, an optional `preset` (desk, published or
    /// new; default desk) and overrides of any regime field.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run seed; may be repeated. Defaults to `seeds` in the config.
        #[arg(long)]
        seed: Vec<u64>,
        /// Output directory; one `seed-<s>` subdirectory per seed.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse utterances with one checkpoint, or an ensemble of several.
    ///
    /// Input lines are either a bare utterance or TSV whose second-to-last
    /// field is the utterance. Output lines are `index<TAB>parse`.
    Predict {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Exact match of each prediction file and agreement across them.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        /// Write examples on which the runs disagree to this TSV.
        #[arg(long)]
        disagreements: Option<PathBuf>,
    },
    /// Run every (noise level, regime, seed) of a manifest and write the report tree.
    ///
    /// See the `experiment` module docs for the manifest schema.
    Experiment {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides `output` in the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Recompute and print the tables of a report tree.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Training(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Training(_) => 3,
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<TrainingError> for Failure {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::ConfigInvalid(_) | TrainingError::Parse(_) => Failure::Usage(e.into()),
            TrainingError::Dataset(_) | TrainingError::Io(_) => Failure::Data(e.into()),
            _ => Failure::Training(e.into()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Manifest(_) | ExperimentError::Parse(_) => Failure::Usage(e.into()),
            ExperimentError::Training { .. } => Failure::Training(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> Result<T, Failure> {
    r.with_context(|| format!("{}", path.display()))
        .map_err(Failure::Data)
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        io(std::fs::create_dir_all(dir), dir)?;
    }
    io(std::fs::write(path, contents), path)
}

fn gen_data(seed: u64, n: usize, eval_n: usize, ambiguity: f64, out: &Path) -> Result<(), Failure> {
    if n == 0 {
        return Err(Failure::Usage(anyhow!("--n must be at least 1")));
    }
    if !(0.0..=1.0).contains(&ambiguity) {
        return Err(Failure::Usage(anyhow!("--ambiguity must lie in [0, 1]")));
    }
    let (train, eval) = generate_splits(seed, n, eval_n, ambiguity);
    let train = build_vocab(train)?;
    write(&out.join("train.tsv"), &train.to_tsv())?;
    if eval_n > 0 {
        write(&out.join("eval.tsv"), &eval.to_tsv())?;
    }
    let vocab = serde_json::to_string_pretty(train.vocab()?).expect("vocab serializes");
    write(&out.join("vocab.json"), &(vocab + "\n"))?;
    println!("wrote {} train / {} eval examples to {}", n, eval_n, out.display());
    Ok(())
}

fn noise(input: &Path, fraction: f64, seed: u64, out: &Path) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Failure::Usage(anyhow!("--fraction must lie in [0, 1]")));
    }
    let corpus = load_tsv(input, Split::Train)?;
    let (noisy, summary) = inject_noise(
        &corpus,
        NoiseConfig {
            swap_fraction: fraction,
            seed,
        },
    )?;
    write(out, &noisy.to_tsv())?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn train(config: &Path, data: &Path, seeds: &[u64], out: &Path) -> Result<(), Failure> {
    let text = io(std::fs::read_to_string(config), config)?;
    let mut regime = regime_from_toml(&text)?;
    if !seeds.is_empty() {
        regime.seeds = seeds.to_vec();
    }
    if regime.seeds.is_empty() {
        return Err(Failure::Usage(anyhow!("no seeds: pass --seed or set `seeds` in the config")));
    }
    let corpus = build_vocab(load_tsv(data, Split::Train)?)?;
    let cache = ModelCache::default();
    for &s in &regime.seeds {
        let run = train_run(&regime, &corpus, s, &cache)?;
        let dir = out.join(format!("seed-{s}"));
        run.write_dir(&dir, true)?;
        let last = run.losses.last().map_or(f64::NAN, |l| l.loss);
        println!("seed {s}: {} models, final loss {last:.4} -> {}", run.models.len(), dir.display());
    }
    Ok(())
}

fn read_utterances(path: &Path) -> Result<Vec<Vec<String>>, Failure> {
    let text = io(std::fs::read_to_string(path), path)?;
    let utts: Vec<Vec<String>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let fields: Vec<&str> = l.split('\t').collect();
            let utt = if fields.len() == 1 { fields[0] } else { fields[fields.len() - 2] };
            utt.split_whitespace().map(String::from).collect()
        })
        .collect();
    if utts.iter().any(Vec::is_empty) {
        return Err(Failure::Data(anyhow!("{}: empty utterance", path.display())));
    }
    Ok(utts)
}

fn predict(checkpoints: &[PathBuf], input: &Path, out: Option<&Path>, beam: usize) -> Result<(), Failure> {
    if beam == 0 {
        return Err(Failure::Usage(anyhow!("--beam must be at least 1")));
    }
    let models = checkpoints
        .iter()
        .map(|p| ParserModel::load(p).with_context(|| format!("{}", p.display())))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Data)?;
    let utts = read_utterances(input)?;
    fn run<P: jitterlab::model::Parser>(p: &P, utts: &[Vec<String>], beam: usize) -> Result<Vec<Prediction>, ModelError> {
        if beam == 1 {
            Ok(greedy_decode(p, utts))
        } else {
            beam_search(p, utts, beam)
        }
    }
    let preds = if let [m] = models.as_slice() {
        run(m, &utts, beam)?
    } else {
        run(&Ensemble::new(models)?, &utts, beam)?
    };
    let text: String = preds
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{i}\t{}\n", p.serialized()))
        .collect();
    match out {
        Some(path) => write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval(gold: &Path, preds: &[PathBuf], disagreements: Option<&Path>) -> Result<(), Failure> {
    let gold = load_tsv(gold, Split::Eval)?;
    let sets = preds
        .iter()
        .map(|p| {
            let text = io(std::fs::read_to_string(p), p)?;
            Ok(PredictionSet::parse_tsv(p.display().to_string(), 0, &text)?)
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let mut ems = Vec::with_capacity(sets.len());
    for s in &sets {
        let em = exact_match(s, &gold)?;
        println!("{}\tEM {em:.2}", s.run_id);
        ems.push(em);
    }
    if sets.len() >= 2 {
        let (mean, std) = mean_std(&ems);
        println!("runs {}\tEM {mean:.2} ± {std:.2} (population std)\tAGR {:.2}", sets.len(), agreement(&sets)?);
        if let Some(path) = disagreements {
            write(path, &disagreements_tsv(&sets)?)?;
        }
    } else if disagreements.is_some() {
        return Err(Failure::Usage(anyhow!("--disagreements needs at least two --pred files")));
    }
    Ok(())
}

fn experiment(manifest_path: &Path, out: Option<&Path>, workers: Option<usize>, quiet: bool) -> Result<(), Failure> {
    if !manifest_path.exists() {
        return Err(Failure::Data(anyhow!("manifest not found: {}", manifest_path.display())));
    }
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let out = out.map_or_else(|| base.join(&manifest.output), Path::to_path_buf);
    let progress = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    let report = run_experiment(&manifest, base, workers, &progress)?;
    write_report(&report, &out)?;
    let rows = report.rows();
    println!("{}", results_table(&rows));
    println!("{}", ledger_table(&rows));
    println!("report written to {}", out.display());
    Ok(())
}

fn report(dir: &Path) -> Result<(), Failure> {
    let rows = rebuild_rows(dir)?;
    write_tables(&rows, dir)?;
    println!("{}", results_table(&rows));
    println!("{}", ledger_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            seed,
            n,
            eval_n,
            ambiguity,
            out,
        } => gen_data(seed, n, eval_n, ambiguity, &out),
        Command::InjectNoise {
            input,
            fraction,
            seed,
            out,
        } => noise(&input, fraction, seed, &out),
        Command::Train {
            config,
            data,
            seed,
            out,
        } => train(&config, &data, &seed, &out),
        Command::Predict {
            checkpoint,
            input,
            out,
            beam,
        } => predict(&checkpoint, &input, out.as_deref(), beam),
        Command::Eval {
            gold,
            preds,
            disagreements,
        } => eval(&gold, &preds, disagreements.as_deref()),
        Command::Experiment {
            manifest,
            out,
            workers,
            quiet,
        } => experiment(&manifest, out.as_deref(), workers, quiet),
        Command::Report { dir } => report(&dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Training(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
