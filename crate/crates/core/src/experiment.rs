//! Declarative sweeps: noise levels × regimes × seeds, evaluated and written
//! out as a report tree.
//!
//! A manifest looks like
//!
//! ```toml
//! noise = [0.0, 0.1]
//! runs = 5
//!
//! [corpus]
//! seed = 7
//! train_size = 2000
//! eval_size = 500
//! ambiguity = 0.3
//!
//! [training]
//! preset = "desk"
//! steps = 1500
//!
//! [[regime]]
//! method = "baseline"
//!
//! [[regime]]
//! method = "codistill"
//! temperature = 2.0
//! ```
//!
//! `[corpus]` is either synthetic parameters as above or `train`/`eval` TSV
//! paths. Keys under `[training]` apply to every regime; keys in a
//! `[[regime]]` table override them. `preset` picks the starting point
//! (`desk`, `published` or `new`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    build_vocab, generate_splits, inject_noise, load_tsv, Corpus, DatasetError, NoiseConfig,
    NoiseSummary, Split,
};
use crate::evaluation::{
    aggregate, disagreements_tsv, ledger_csv, ledger_table, resource_ledger, results_csv,
    results_table, EvalError, MetricsReport, PredictionSet, ReportRow,
};
use crate::training::{train_run, Method, ModelCache, RegimeConfig, TrainingError};

/// Spacing between derived run seeds; members and peers use `seed + k`.
pub const SEED_STRIDE: u64 = 1000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("manifest parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{context}: {source}")]
    Training {
        context: String,
        source: TrainingError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFiles {
    pub train: PathBuf,
    pub eval: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    #[serde(default)]
    pub ambiguity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusSpec {
    Files(CorpusFiles),
    Synthetic(SyntheticCorpus),
}

fn default_noise() -> Vec<f64> {
    vec![0.0]
}
fn default_seed_base() -> u64 {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("report")
}
fn default_beam() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_noise")]
    pub noise: Vec<f64>,
    #[serde(default)]
    pub noise_seed: u64,
    /// Runs per cell (N). Defaults to the number of `seeds`, or 5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
    /// Explicit run seeds; otherwise `seed_base + i * SEED_STRIDE`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_seed_base")]
    pub seed_base: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Decoding beam width for evaluation; 1 is greedy.
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default)]
    pub save_checkpoints: bool,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub training: toml::Table,
    #[serde(default)]
    pub regime: Vec<toml::Table>,
}

/// A regime as resolved from the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedRegime {
    pub name: String,
    pub config: RegimeConfig,
}

impl Manifest {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let m: Manifest = toml::from_str(text)?;
        m.regimes()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Manifest::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn seeds(&self) -> Result<Vec<u64>, ExperimentError> {
        let seeds: Vec<u64> = if self.seeds.is_empty() {
            let n = self.runs.unwrap_or(5) as u64;
            (0..n).map(|i| self.seed_base + i * SEED_STRIDE).collect()
        } else {
            self.seeds.clone()
        };
        if let Some(n) = self.runs {
            if n != seeds.len() {
                return Err(ExperimentError::Manifest(format!(
                    "runs = {n} but {} seeds listed",
                    seeds.len()
                )));
            }
        }
        if seeds.len() < 2 {
            return Err(ExperimentError::Manifest(
                "agreement needs at least two runs per cell".into(),
            ));
        }
        if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
            return Err(ExperimentError::Manifest("seeds must be distinct".into()));
        }
        Ok(seeds)
    }

    /// Regimes with `preset`, `[training]` and the regime table merged in
    /// that order, and the run seeds filled in.
    pub fn regimes(&self) -> Result<Vec<NamedRegime>, ExperimentError> {
        let bad = |m: String| ExperimentError::Manifest(m);
        if self.regime.is_empty() {
            return Err(bad("no [[regime]] tables".into()));
        }
        if self.noise.is_empty() {
            return Err(bad("noise list is empty".into()));
        }
        if let Some(x) = self.noise.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(bad(format!("noise level {x} outside [0, 1]")));
        }
        if self.beam_width == 0 {
            return Err(bad("beam_width must be at least 1".into()));
        }
        let seeds = self.seeds()?;
        let mut out: Vec<NamedRegime> = Vec::new();
        for (i, table) in self.regime.iter().enumerate() {
            let mut merged = self.training.clone();
            merged.extend(table.clone());
            let name = match merged.remove("name") {
                None => None,
                Some(toml::Value::String(s)) => Some(s),
                Some(v) => return Err(bad(format!("name must be a string, got {v}"))),
            };
            merged.insert(
                "seeds".into(),
                toml::Value::Array(seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect()),
            );
            let config = resolve_regime(merged).map_err(|e| bad(format!("regime {}: {e}", i + 1)))?;
            let name = name.unwrap_or_else(|| default_name(&config));
            if name.is_empty()
                || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(bad(format!("regime name {name:?} must be [A-Za-z0-9_-]+")));
            }
            if out.iter().any(|r| r.name == name) {
                return Err(bad(format!("duplicate regime name {name:?}; set `name` to tell them apart")));
            }
            out.push(NamedRegime { name, config });
        }
        Ok(out)
    }
}

/// A regime from a table holding `method`, an optional `preset` (default
/// `desk`) and any overrides of the preset's fields.
pub fn resolve_regime(mut table: toml::Table) -> Result<RegimeConfig, ExperimentError> {
    let bad = |m: String| ExperimentError::Manifest(m);
    let preset = match table.remove("preset") {
        None => "desk".to_string(),
        Some(toml::Value::String(s)) => s,
        Some(v) => return Err(bad(format!("preset must be a string, got {v}"))),
    };
    let method: Method = table
        .get("method")
        .cloned()
        .ok_or_else(|| bad("no method given".into()))?
        .try_into()?;
    let base = match preset.as_str() {
        "desk" => RegimeConfig::desk(method),
        "published" => RegimeConfig::published(method),
        "new" => RegimeConfig::new(method),
        other => return Err(bad(format!("unknown preset {other:?}"))),
    };
    let mut full = toml::Table::try_from(&base).expect("regime config serializes");
    for (k, v) in table {
        match (full.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => dst.extend(src),
            (_, v) => {
                full.insert(k, v);
            }
        }
    }
    RegimeConfig::from_toml_str(&toml::to_string(&full).expect("table serializes"))
        .map_err(|e| bad(e.to_string()))
}

/// [`resolve_regime`] on the text of a regime file.
pub fn regime_from_toml(text: &str) -> Result<RegimeConfig, ExperimentError> {
    resolve_regime(toml::from_str(text)?)
}

fn default_name(c: &RegimeConfig) -> String {
    match (c.method.is_distillation(), c.teacher_source) {
        (true, crate::training::TeacherSource::LargeModel) => format!("{}_large", c.method),
        _ => c.method.to_string(),
    }
}

/// Train (with vocabulary) and eval corpora named by a manifest. Relative
/// paths are taken from `base_dir`.
pub fn load_corpora(spec: &CorpusSpec, base_dir: &Path) -> Result<(Corpus, Corpus), ExperimentError> {
    let (train, eval) = match spec {
        CorpusSpec::Files(CorpusFiles { train, eval }) => (
            load_tsv(&base_dir.join(train), Split::Train)?,
            load_tsv(&base_dir.join(eval), Split::Eval)?,
        ),
        CorpusSpec::Synthetic(SyntheticCorpus {
            seed,
            train_size,
            eval_size,
            ambiguity,
        }) => {
            if *train_size == 0 || *eval_size == 0 {
                return Err(DatasetError::EmptyCorpus.into());
            }
            generate_splits(*seed, *train_size, *eval_size, *ambiguity)
        }
    };
    Ok((build_vocab(train)?, eval))
}

/// One trained and evaluated run of a cell.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub predictions: PredictionSet,
    pub run: crate::training::TrainedRun,
}

/// All runs of one (noise level, regime) cell and their aggregate.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub noise: f64,
    pub regime: NamedRegime,
    pub runs: Vec<RunOutcome>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct NoisyCorpus {
    pub level: f64,
    pub fingerprint: String,
    pub summary: NoiseSummary,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    pub eval: Corpus,
    pub train_fingerprint: String,
    pub eval_fingerprint: String,
    pub noisy: Vec<NoisyCorpus>,
    pub cells: Vec<RunReport>,
}

impl ExperimentReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.cells
            .iter()
            .map(|c| ReportRow {
                noise: c.noise,
                regime: c.regime.name.clone(),
                metrics: c.metrics.clone(),
            })
            .collect()
    }

    pub fn cell(&self, noise: f64, regime: &str) -> Option<&RunReport> {
        self.cells
            .iter()
            .find(|c| c.noise == noise && c.regime.name == regime)
    }
}

/// Trains and evaluates every (noise, regime, seed) combination. Runs are
/// spread over `workers` threads (all cores if `None`); results do not
/// depend on the thread count.
pub fn run_experiment(
    manifest: &Manifest,
    base_dir: &Path,
    workers: Option<usize>,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<ExperimentReport, ExperimentError> {
    let regimes = manifest.regimes()?;
    let seeds = manifest.seeds()?;
    let (train, eval) = load_corpora(&manifest.corpus, base_dir)?;
    let utterances: Vec<Vec<String>> = eval.examples.iter().map(|e| e.utterance.clone()).collect();

    let mut corpora = Vec::with_capacity(manifest.noise.len());
    let mut noisy = Vec::with_capacity(manifest.noise.len());
    for &x in &manifest.noise {
        let (c, summary) = inject_noise(
            &train,
            NoiseConfig {
                swap_fraction: x,
                seed: manifest.noise_seed,
            },
        )?;
        let c = build_vocab(c)?;
        noisy.push(NoisyCorpus {
            level: x,
            fingerprint: c.fingerprint(),
            summary,
        });
        corpora.push(c);
    }

    let jobs: Vec<(usize, usize, u64)> = (0..corpora.len())
        .flat_map(|n| {
            let seeds = &seeds;
            (0..regimes.len()).flat_map(move |r| seeds.iter().map(move |&s| (n, r, s)))
        })
        .collect();
    let cache = ModelCache::default();
    let work = || {
        jobs.par_iter()
            .map(|&(n, r, seed)| {
                let regime = &regimes[r];
                let x = manifest.noise[n];
                let context = format!("noise {x:.2}, {}, seed {seed}", regime.name);
                let fail = |source| ExperimentError::Training {
                    context: context.clone(),
                    source,
                };
                let run = train_run(&regime.config, &corpora[n], seed, &cache).map_err(fail)?;
                let preds = run.predict(&utterances, manifest.beam_width).map_err(fail)?;
                let set = PredictionSet::from_predictions(format!("seed-{seed}"), seed, &eval, &preds)?;
                progress(&format!("done: {context}"));
                Ok(RunOutcome {
                    seed,
                    predictions: set,
                    run,
                })
            })
            .collect::<Result<Vec<_>, ExperimentError>>()
    };
    let outcomes = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| ExperimentError::Manifest(format!("worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let mut outcomes = outcomes.into_iter();
    let mut cells = Vec::with_capacity(corpora.len() * regimes.len());
    for &x in &manifest.noise {
        for regime in &regimes {
            let runs: Vec<RunOutcome> = outcomes.by_ref().take(seeds.len()).collect();
            let first = &runs[0].run;
            let ledger = resource_ledger(
                &regime.config,
                first.student_parameters(),
                first.teacher_parameters.unwrap_or(0),
            );
            let sets: Vec<PredictionSet> = runs.iter().map(|r| r.predictions.clone()).collect();
            let metrics = aggregate(&sets, &eval, Some(ledger))?;
            cells.push(RunReport {
                noise: x,
                regime: regime.clone(),
                runs,
                metrics,
            });
        }
    }
    Ok(ExperimentReport {
        manifest: manifest.clone(),
        eval_fingerprint: eval.fingerprint(),
        eval,
        train_fingerprint: train.fingerprint(),
        noisy,
        cells,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Directory of one cell below the report root.
pub fn cell_dir(noise: f64, regime: &str) -> PathBuf {
    PathBuf::from("runs")
        .join(format!("noise-{noise:.2}"))
        .join(regime)
}

/// `results` and `ledger` tables, each as CSV and aligned text.
pub fn write_tables(rows: &[ReportRow], out: &Path) -> Result<(), ExperimentError> {
    write(&out.join("results.csv"), &results_csv(rows))?;
    write(&out.join("results.txt"), &results_table(rows))?;
    write(&out.join("ledger.csv"), &ledger_csv(rows))?;
    write(&out.join("ledger.txt"), &ledger_table(rows))
}

fn read(path: &Path) -> Result<String, ExperimentError> {
    std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Recomputes the table rows of a written report tree from its stored
/// manifest, eval split, predictions and run metadata.
pub fn rebuild_rows(dir: &Path) -> Result<Vec<ReportRow>, ExperimentError> {
    let manifest = Manifest::from_toml_str(&read(&dir.join("manifest.toml"))?)?;
    let eval = load_tsv(&dir.join("eval.tsv"), Split::Eval)?;
    let seeds = manifest.seeds()?;
    let mut rows = Vec::new();
    for &x in &manifest.noise {
        for regime in manifest.regimes()? {
            let cell = dir.join(cell_dir(x, &regime.name));
            let sets = seeds
                .iter()
                .map(|&s| {
                    let text = read(&cell.join(format!("seed-{s}")).join("predictions.tsv"))?;
                    Ok(PredictionSet::parse_tsv(format!("seed-{s}"), s, &text)?)
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            let meta_path = cell.join(format!("seed-{}", seeds[0])).join("run.json");
            let meta: serde_json::Value = serde_json::from_str(&read(&meta_path)?)
                .map_err(|e| ExperimentError::Manifest(format!("{}: {e}", meta_path.display())))?;
            let count = |key: &str| meta[key].as_u64().unwrap_or(0) as usize;
            let ledger = resource_ledger(&regime.config, count("parameters"), count("teacher_parameters"));
            rows.push(ReportRow {
                noise: x,
                regime: regime.name,
                metrics: aggregate(&sets, &eval, Some(ledger))?,
            });
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct CellSummary<'a> {
    noise: f64,
    regime: &'a str,
    seeds: Vec<u64>,
    em_mean: f64,
    em_std: f64,
    agr: f64,
    run_em: &'a [f64],
    training_cost: String,
    inference_cost: String,
}

/// Writes the report tree. Everything in it is a function of the manifest.
pub fn write_report(report: &ExperimentReport, out: &Path) -> Result<(), ExperimentError> {
    let rows = report.rows();
    write(&out.join("manifest.toml"), &report.manifest.to_toml_string())?;
    let corpus = serde_json::json!({
        "train_fingerprint": report.train_fingerprint,
        "eval_fingerprint": report.eval_fingerprint,
        "noisy_train": report.noisy,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write(&out.join("corpus.json"), &(serde_json::to_string_pretty(&corpus).expect("json") + "\n"))?;
    write(&out.join("eval.tsv"), &report.eval.to_tsv())?;
    write_tables(&rows, out)?;

    let mut summaries = Vec::with_capacity(report.cells.len());
    for cell in &report.cells {
        let dir = out.join(cell_dir(cell.noise, &cell.regime.name));
        write(&dir.join("regime.toml"), &cell.regime.config.to_toml_string())?;
        let sets: Vec<PredictionSet> = cell.runs.iter().map(|r| r.predictions.clone()).collect();
        write(&dir.join("disagreements.tsv"), &disagreements_tsv(&sets)?)?;
        for r in &cell.runs {
            let run_dir = dir.join(format!("seed-{}", r.seed));
            write(&run_dir.join("predictions.tsv"), &r.predictions.to_tsv())?;
            r.run
                .write_dir(&run_dir, report.manifest.save_checkpoints)
                .map_err(|source| ExperimentError::Training {
                    context: run_dir.display().to_string(),
                    source,
                })?;
        }
        let ledger = cell.metrics.ledger.expect("ledger attached");
        summaries.push(CellSummary {
            noise: cell.noise,
            regime: &cell.regime.name,
            seeds: cell.runs.iter().map(|r| r.seed).collect(),
            em_mean: cell.metrics.em_mean,
            em_std: cell.metrics.em_std,
            agr: cell.metrics.agr,
            run_em: &cell.metrics.run_em,
            training_cost: ledger.training.to_string(),
            inference_cost: ledger.inference.to_string(),
        });
    }
    write(
        &out.join("metrics.json"),
        &(serde_json::to_string_pretty(&summaries).expect("json") + "\n"),
    )?;
    Ok(())
}
