//! Exact match, agreement across retrained runs, and report tables.

mod ledger;
mod tables;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::Corpus;
use crate::model::Prediction;

pub use ledger::{resource_ledger, Multiplier, ResourceLedger};
pub use tables::{disagreements_tsv, ledger_csv, ledger_table, results_csv, results_table, ReportRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction ids do not match: {0}")]
    IdMismatch(String),
    #[error("agreement needs at least two runs, got {0}")]
    SingleRun(usize),
    #[error("malformed prediction line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
}

/// Serialized predictions of one run, keyed by example id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub run_id: String,
    pub seed: u64,
    pub predictions: BTreeMap<u64, String>,
}

impl PredictionSet {
    pub fn new(run_id: impl Into<String>, seed: u64, predictions: BTreeMap<u64, String>) -> Self {
        PredictionSet {
            run_id: run_id.into(),
            seed,
            predictions,
        }
    }

    /// Pairs decoder outputs with the ids of the corpus they were made on.
    pub fn from_predictions(
        run_id: impl Into<String>,
        seed: u64,
        corpus: &Corpus,
        preds: &[Prediction],
    ) -> Result<Self, EvalError> {
        if preds.len() != corpus.len() {
            return Err(EvalError::IdMismatch(format!(
                "{} predictions for {} examples",
                preds.len(),
                corpus.len()
            )));
        }
        let mut map = BTreeMap::new();
        for (ex, p) in corpus.examples.iter().zip(preds) {
            if map.insert(ex.id, p.serialized()).is_some() {
                return Err(EvalError::IdMismatch(format!("duplicate id {}", ex.id)));
            }
        }
        Ok(PredictionSet::new(run_id, seed, map))
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// `id<TAB>prediction` lines in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, p) in &self.predictions {
            out.push_str(&format!("{id}\t{p}\n"));
        }
        out
    }

    pub fn parse_tsv(run_id: impl Into<String>, seed: u64, text: &str) -> Result<Self, EvalError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| EvalError::MalformedLine {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (id, pred) = line.split_once('\t').ok_or_else(|| bad("expected id<TAB>prediction"))?;
            let id: u64 = id.trim().parse().map_err(|_| bad("id is not an integer"))?;
            if map.insert(id, pred.to_string()).is_some() {
                return Err(bad("duplicate id"));
            }
        }
        Ok(PredictionSet::new(run_id, seed, map))
    }
}

fn check_ids(a: &PredictionSet, b: &PredictionSet) -> Result<(), EvalError> {
    if a.predictions.len() == b.predictions.len()
        && a.predictions.keys().eq(b.predictions.keys())
    {
        return Ok(());
    }
    let missing = a.predictions.keys().find(|k| !b.predictions.contains_key(k));
    let extra = b.predictions.keys().find(|k| !a.predictions.contains_key(k));
    Err(EvalError::IdMismatch(match (missing, extra) {
        (Some(id), _) => format!("id {id} missing from {}", b.run_id),
        (_, Some(id)) => format!("unexpected id {id} in {}", b.run_id),
        _ => "id sets differ".to_string(),
    }))
}

/// Percentage of examples whose prediction string equals the gold
/// canonical serialization.
pub fn exact_match(preds: &PredictionSet, gold: &Corpus) -> Result<f64, EvalError> {
    if preds.len() != gold.len() {
        return Err(EvalError::IdMismatch(format!(
            "{} predictions for {} gold examples",
            preds.len(),
            gold.len()
        )));
    }
    let mut hits = 0usize;
    for ex in &gold.examples {
        let p = preds
            .predictions
            .get(&ex.id)
            .ok_or_else(|| EvalError::IdMismatch(format!("no prediction for id {}", ex.id)))?;
        if *p == ex.gold_string() {
            hits += 1;
        }
    }
    Ok(percent(hits, gold.len()))
}

/// Per example, whether every run produced the same string.
pub fn agreement_flags(runs: &[PredictionSet]) -> Result<BTreeMap<u64, bool>, EvalError> {
    if runs.len() < 2 {
        return Err(EvalError::SingleRun(runs.len()));
    }
    for r in &runs[1..] {
        check_ids(&runs[0], r)?;
    }
    Ok(runs[0]
        .predictions
        .iter()
        .map(|(id, first)| (*id, runs[1..].iter().all(|r| r.predictions[id] == *first)))
        .collect())
}

/// Percentage of examples on which all runs agree. Gold labels play no part.
pub fn agreement(runs: &[PredictionSet]) -> Result<f64, EvalError> {
    let flags = agreement_flags(runs)?;
    Ok(percent(flags.values().filter(|&&f| f).count(), flags.len()))
}

fn percent(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    100.0 * k as f64 / n as f64
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub em_mean: f64,
    /// Population standard deviation over the per-run EM values.
    pub em_std: f64,
    pub agr: f64,
    pub n_runs: usize,
    pub run_em: Vec<f64>,
    pub agreement: BTreeMap<u64, bool>,
    pub ledger: Option<ResourceLedger>,
}

pub fn aggregate(
    runs: &[PredictionSet],
    gold: &Corpus,
    ledger: Option<ResourceLedger>,
) -> Result<MetricsReport, EvalError> {
    let agreement = agreement_flags(runs)?;
    let run_em = runs
        .iter()
        .map(|r| exact_match(r, gold))
        .collect::<Result<Vec<_>, _>>()?;
    let (em_mean, em_std) = mean_std(&run_em);
    let agr = percent(agreement.values().filter(|&&f| f).count(), agreement.len());
    Ok(MetricsReport {
        em_mean,
        em_std,
        agr,
        n_runs: runs.len(),
        run_em,
        agreement,
        ledger,
    })
}
