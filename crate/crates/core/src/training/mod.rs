//! Training regimes: baseline, ensemble, soft and hard distillation, and
//! co-distillation, all on one lockstep training loop.

mod cache;
mod engine;
mod losses;

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{hex_digest, Corpus, DatasetError, EOS};
use crate::model::{
    beam_search, beam_search_ids, greedy_decode, teacher_ratio, Ensemble, ModelConfig, ModelError,
    Parser, ParserModel, Prediction,
};
use crate::numerics::checkpoint::FloatWidth;
use crate::numerics::NumericsError;

pub use cache::{CachedModel, ModelCache};
pub use engine::{train_models, RunSeeds, Schedule, Signal, Teacher, TrainData};
pub use losses::{
    ensemble_distribution, hard_labels, kd_loss, mixture_logits, nll_loss, student_loss,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid regime config: {0}")]
    ConfigInvalid(String),
    #[error("training corpus is empty")]
    CorpusEmpty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("distributions have different vocabulary sizes")]
    VocabMismatch,
    #[error("peers must share config and vocabulary")]
    PeerConfigMismatch,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Ensemble,
    DistillSoft,
    DistillHard,
    Codistill,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Ensemble => "ensemble",
            Method::DistillSoft => "distill_soft",
            Method::DistillHard => "distill_hard",
            Method::Codistill => "codistill",
        }
    }

    pub fn is_distillation(self) -> bool {
        matches!(self, Method::DistillSoft | Method::DistillHard)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    #[default]
    Ensemble,
    LargeModel,
}

fn one() -> f64 {
    1.0
}
fn default_steps() -> usize {
    10_000
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    4e-5
}
fn default_beam() -> usize {
    3
}

/// Full description of one training regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub method: Method,
    /// Ensemble members, ensemble-teacher members or co-distillation peers.
    /// Defaults to 3, or 2 for co-distillation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub teacher_source: TeacherSource,
    #[serde(default)]
    pub burn_in_steps: usize,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Beam width used to label the training set for hard distillation.
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default = "ModelConfig::student")]
    pub student: ModelConfig,
    #[serde(default = "ModelConfig::teacher")]
    pub teacher: ModelConfig,
}

impl RegimeConfig {
    pub fn new(method: Method) -> Self {
        RegimeConfig {
            method,
            k: None,
            lambda: 1.0,
            temperature: 1.0,
            teacher_source: TeacherSource::Ensemble,
            burn_in_steps: 0,
            seeds: Vec::new(),
            steps: default_steps(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weight_decay: 0.0,
            beam_width: default_beam(),
            student: ModelConfig::student(),
            teacher: ModelConfig::teacher(),
        }
    }

    /// Selected published hyper-parameters, with the co-distillation
    /// overrides (learning rate 1e-5, batch 128).
    pub fn published(method: Method) -> Self {
        let mut c = RegimeConfig::new(method);
        if method == Method::Codistill {
            c.learning_rate = 1e-5;
            c.batch_size = 128;
        }
        c
    }

    /// Small settings that train in seconds on one CPU core.
    pub fn desk(method: Method) -> Self {
        RegimeConfig {
            steps: 1_500,
            batch_size: 32,
            learning_rate: 2e-3,
            student: ModelConfig::desk_student(),
            teacher: ModelConfig::desk_teacher(),
            ..RegimeConfig::new(method)
        }
    }

    pub fn members(&self) -> usize {
        self.k.unwrap_or(match self.method {
            Method::Codistill => 2,
            _ => 3,
        })
    }

    fn uses_ensemble_teacher(&self) -> bool {
        self.method.is_distillation() && self.teacher_source == TeacherSource::Ensemble
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: String| Err(TrainingError::ConfigInvalid(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1".into());
        }
        let needs_k = matches!(self.method, Method::Ensemble | Method::Codistill)
            || self.uses_ensemble_teacher();
        if needs_k && self.members() < 2 {
            return bad(format!("{} needs k >= 2, got {}", self.method, self.members()));
        }
        self.student.validate()?;
        if self.method.is_distillation() && self.teacher_source == TeacherSource::LargeModel {
            self.teacher.validate()?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainingError> {
        let c: RegimeConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("regime config serializes")
    }

    /// Binds a run to its exact config, corpus and seed.
    pub fn config_hash(&self, corpus_fingerprint: &str, seed: u64) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        hex_digest(format!("{}\n{corpus_fingerprint}\n{seed}", c.to_toml_string()).as_bytes())
    }

    fn schedule(&self) -> Schedule {
        Schedule {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            temperature: self.temperature,
            burn_in_steps: self.burn_in_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub model: String,
    pub step: usize,
    pub loss: f64,
}

/// Outcome of one regime under one seed.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub method: Method,
    pub seed: u64,
    /// One model, or the K members of an ensemble / peers of co-distillation.
    pub models: Vec<ParserModel>,
    /// Predict with the uniform mixture of all models rather than the first.
    pub mixture: bool,
    pub teacher_parameters: Option<usize>,
    pub losses: Vec<LossRecord>,
    pub steps: usize,
    pub config_hash: String,
    pub corpus_fingerprint: String,
    pub config_toml: String,
}

impl TrainedRun {
    /// Greedy decoding for `beam_width == 1`, beam search otherwise.
    pub fn predict(
        &self,
        utterances: &[Vec<String>],
        beam_width: usize,
    ) -> Result<Vec<Prediction>, TrainingError> {
        Ok(if self.mixture {
            let e = Ensemble::new(self.models.clone())?;
            decode(&e, utterances, beam_width)?
        } else {
            decode(&self.models[0], utterances, beam_width)?
        })
    }

    pub fn student_parameters(&self) -> usize {
        self.models[0].parameter_count()
    }

    /// Writes config copy, run metadata, the loss curve and, if asked, one
    /// checkpoint per model.
    pub fn write_dir(&self, dir: &Path, checkpoints: bool) -> Result<(), TrainingError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), &self.config_toml)?;
        let meta = serde_json::json!({
            "method": self.method.name(),
            "seed": self.seed,
            "steps": self.steps,
            "config_hash": self.config_hash,
            "corpus_fingerprint": self.corpus_fingerprint,
            "models": self.models.len(),
            "parameters": self.student_parameters(),
            "teacher_parameters": self.teacher_parameters,
            "version": env!("CARGO_PKG_VERSION"),
        });
        std::fs::write(
            dir.join("run.json"),
            serde_json::to_string_pretty(&meta).map_err(ModelError::from)? + "\n",
        )?;
        for (k, m) in self.models.iter().enumerate().filter(|_| checkpoints) {
            m.save(&dir.join(format!("model{k}.ckpt")), FloatWidth::F64)?;
        }
        let mut w = csv::Writer::from_path(dir.join("loss.csv")).map_err(csv_io)?;
        w.write_record(["model", "step", "loss"]).map_err(csv_io)?;
        for r in &self.losses {
            w.write_record([r.model.clone(), r.step.to_string(), format!("{:.6}", r.loss)])
                .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> TrainingError {
    TrainingError::Io(std::io::Error::other(e))
}

fn decode<P: Parser>(
    p: &P,
    utterances: &[Vec<String>],
    width: usize,
) -> Result<Vec<Prediction>, ModelError> {
    if width == 1 {
        Ok(greedy_decode(p, utterances))
    } else {
        beam_search(p, utterances, width)
    }
}

fn curve_records(name: String, curve: &[f64]) -> impl Iterator<Item = LossRecord> + '_ {
    curve.iter().enumerate().map(move |(i, &loss)| LossRecord {
        model: name.clone(),
        step: i + 1,
        loss,
    })
}

/// Gold pairs of a corpus as model inputs.
pub fn encode_corpus(corpus: &Corpus) -> Result<TrainData, TrainingError> {
    if corpus.is_empty() {
        return Err(TrainingError::CorpusEmpty);
    }
    let vocab = corpus.vocab()?;
    let items = corpus
        .examples
        .iter()
        .map(|ex| Ok((vocab.encode_source(&ex.utterance), vocab.encode_target(ex)?)))
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(TrainData {
        items,
        weights: None,
    })
}

/// One training pair of the hard-distillation set.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedExample {
    pub id: u64,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub from_teacher: bool,
}

/// Labels every training utterance with the teacher's beam-search output
/// and returns gold and teacher pairs interleaved (2n items). Teacher
/// outputs that hit the length cap are cut so that `</s>` still fits.
pub fn precompute_hard_labels<P: Parser>(
    teacher: &P,
    corpus: &Corpus,
    beam_width: usize,
) -> Result<Vec<AugmentedExample>, TrainingError> {
    let gold = encode_corpus(corpus)?;
    let sources: Vec<Vec<usize>> = gold.items.iter().map(|(s, _)| s.clone()).collect();
    let max = teacher.max_output_len();
    let chunks: Vec<Vec<Vec<usize>>> = sources
        .par_chunks(64)
        .map(|chunk| {
            beam_search_ids(teacher, chunk, beam_width).map(|hs| {
                hs.into_iter()
                    .map(|h| {
                        let mut s = h.symbols;
                        if s.last() == Some(&EOS) {
                            s.pop();
                        }
                        s.truncate(max.saturating_sub(1));
                        s
                    })
                    .collect()
            })
        })
        .collect::<Result<_, _>>()?;
    let labels = chunks.into_iter().flatten();
    let mut out = Vec::with_capacity(2 * corpus.len());
    for ((ex, (src, tgt)), teacher_tgt) in corpus.examples.iter().zip(gold.items).zip(labels) {
        out.push(AugmentedExample {
            id: ex.id,
            source: src.clone(),
            target: tgt,
            from_teacher: false,
        });
        out.push(AugmentedExample {
            id: ex.id,
            source: src,
            target: teacher_tgt,
            from_teacher: true,
        });
    }
    Ok(out)
}

fn cache_key(
    corpus_fingerprint: &str,
    config: &ModelConfig,
    schedule: &Schedule,
    seeds: RunSeeds,
) -> String {
    hex_digest(
        format!(
            "{corpus_fingerprint}|{}|{}|{}|{}|{}|{:?}",
            serde_json::to_string(config).expect("config serializes"),
            schedule.steps,
            schedule.batch_size,
            schedule.learning_rate,
            schedule.weight_decay,
            seeds
        )
        .as_bytes(),
    )
}

/// Trains (or fetches from `cache`) one model with plain NLL.
pub fn train_single(
    corpus: &Corpus,
    data: &TrainData,
    config: &ModelConfig,
    schedule: &Schedule,
    seeds: RunSeeds,
    cache: &ModelCache,
) -> Result<CachedModel, TrainingError> {
    let key = cache_key(&corpus.fingerprint(), config, schedule, seeds);
    cache.get_or_train(&key, || {
        let mut models = [ParserModel::new(config.clone(), corpus.vocab()?.clone(), seeds.init)?];
        let curves = train_models(&mut models, data, schedule, &[seeds], Signal::None)?;
        let [model] = models;
        Ok(CachedModel {
            model,
            losses: curves.into_iter().next().unwrap_or_default(),
        })
    })
}

/// Runs one regime for one seed. Plain-NLL models (baselines, ensemble
/// members, teachers) go through `cache`, so regimes sharing them train
/// them once.
pub fn train_run(
    regime: &RegimeConfig,
    corpus: &Corpus,
    seed: u64,
    cache: &ModelCache,
) -> Result<TrainedRun, TrainingError> {
    regime.validate()?;
    let data = encode_corpus(corpus)?;
    let vocab = corpus.vocab()?.clone();
    let schedule = regime.schedule();
    let k = regime.members();
    let mut losses = Vec::new();
    let mut teacher_parameters = None;

    let (models, mixture) = match regime.method {
        Method::Baseline => {
            let c = train_single(corpus, &data, &regime.student, &schedule, RunSeeds::uniform(seed), cache)?;
            losses.extend(curve_records("model0".into(), &c.losses));
            (vec![c.model], false)
        }
        Method::Ensemble => {
            let mut models = Vec::with_capacity(k);
            for i in 0..k {
                let c = train_single(corpus, &data, &regime.student, &schedule, RunSeeds::member(seed, i), cache)?;
                losses.extend(curve_records(format!("model{i}"), &c.losses));
                models.push(c.model);
            }
            (models, true)
        }
        Method::Codistill => {
            let seeds: Vec<RunSeeds> = (0..k).map(|i| RunSeeds::member(seed, i)).collect();
            let mut peers = seeds
                .iter()
                .map(|s| ParserModel::new(regime.student.clone(), vocab.clone(), s.init))
                .collect::<Result<Vec<_>, _>>()?;
            let curves = train_models(&mut peers, &data, &schedule, &seeds, Signal::Peers)?;
            for (i, c) in curves.iter().enumerate() {
                losses.extend(curve_records(format!("model{i}"), c));
            }
            (peers, false)
        }
        Method::DistillSoft | Method::DistillHard => {
            let teachers: Vec<ParserModel> = match regime.teacher_source {
                TeacherSource::Ensemble => (0..k)
                    .map(|i| {
                        let c = train_single(corpus, &data, &regime.student, &schedule, RunSeeds::member(seed, i), cache)?;
                        losses.extend(curve_records(format!("teacher{i}"), &c.losses));
                        Ok(c.model)
                    })
                    .collect::<Result<_, TrainingError>>()?,
                TeacherSource::LargeModel => {
                    teacher_ratio(&regime.student, &regime.teacher, &vocab)?;
                    let c = train_single(corpus, &data, &regime.teacher, &schedule, RunSeeds::uniform(seed), cache)?;
                    losses.extend(curve_records("teacher0".into(), &c.losses));
                    vec![c.model]
                }
            };
            teacher_parameters = Some(teachers.iter().map(ParserModel::parameter_count).sum());
            let student_seeds = [RunSeeds::uniform(seed)];
            let mut student = [ParserModel::new(regime.student.clone(), vocab.clone(), seed)?];
            let curve = if regime.method == Method::DistillSoft {
                let teacher = Teacher { models: &teachers };
                train_models(&mut student, &data, &schedule, &student_seeds, Signal::Teacher(teacher))?
            } else {
                let aug = if let [single] = teachers.as_slice() {
                    precompute_hard_labels(single, corpus, regime.beam_width)?
                } else {
                    precompute_hard_labels(&Ensemble::new(teachers.clone())?, corpus, regime.beam_width)?
                };
                let weights = aug
                    .iter()
                    .map(|a| if a.from_teacher { 1.0 } else { regime.lambda })
                    .collect();
                let hard = TrainData {
                    items: aug.into_iter().map(|a| (a.source, a.target)).collect(),
                    weights: Some(weights),
                };
                train_models(&mut student, &hard, &schedule, &student_seeds, Signal::None)?
            };
            losses.extend(curve_records("student".into(), &curve[0]));
            let [s] = student;
            (vec![s], false)
        }
    };

    let fingerprint = corpus.fingerprint();
    Ok(TrainedRun {
        method: regime.method,
        seed,
        models,
        mixture,
        teacher_parameters,
        losses,
        steps: regime.steps,
        config_hash: regime.config_hash(&fingerprint, seed),
        corpus_fingerprint: fingerprint,
        config_toml: regime.to_toml_string(),
    })
}

/// Trains one run per seed in `regime.seeds`.
pub fn train(regime: &RegimeConfig, corpus: &Corpus) -> Result<Vec<TrainedRun>, TrainingError> {
    regime.validate()?;
    if regime.seeds.is_empty() {
        return Err(TrainingError::ConfigInvalid("no seeds given".into()));
    }
    let cache = ModelCache::default();
    regime
        .seeds
        .par_iter()
        .map(|&s| train_run(regime, corpus, s, &cache))
        .collect()
}
