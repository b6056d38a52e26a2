//! Encoder-decoder parser with copy symbols in a single output softmax.

mod decode;
mod network;
mod params;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Example, Vocabularies};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, FloatWidth};
use crate::numerics::Tensor;

pub use decode::{
    beam_search, beam_search_ids, greedy_decode, greedy_search, mix_log_probs, Ensemble,
    Hypothesis, Parser, Prediction, Scorer,
};
pub use network::{Batch, Dropout, Encoded};
pub use params::{count_parameters, ModelParams, FFN_MULT};
pub(crate) use params::Layout;

/// Minimum teacher/student parameter ratio for a teacher-sized config.
pub const TEACHER_MIN_RATIO: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("target of length {length} exceeds the maximum output length {max}")]
    TargetTooLong { length: usize, max: usize },
    #[error("target symbol {symbol} is not a valid output symbol for this input")]
    UnknownSymbol { symbol: usize },
    #[error("empty source utterance")]
    EmptySource,
    #[error("beam width must be at least 1")]
    ZeroWidth,
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("ensemble members use different vocabularies")]
    VocabMismatch,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint does not match its config: {0}")]
    ParamMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_dim: usize,
    pub output_embed_dim: usize,
    pub dropout: f64,
    pub max_output_len: usize,
    pub size_class: SizeClass,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::student()
    }
}

impl ModelConfig {
    pub fn student() -> Self {
        ModelConfig {
            encoder_layers: 2,
            encoder_heads: 2,
            encoder_dim: 128,
            decoder_layers: 4,
            decoder_heads: 2,
            decoder_dim: 256,
            output_embed_dim: 128,
            dropout: 0.0316,
            max_output_len: 51,
            size_class: SizeClass::Student,
        }
    }

    pub fn teacher() -> Self {
        ModelConfig {
            encoder_layers: 6,
            encoder_heads: 4,
            encoder_dim: 256,
            decoder_layers: 6,
            decoder_heads: 4,
            decoder_dim: 512,
            output_embed_dim: 128,
            size_class: SizeClass::Teacher,
            ..ModelConfig::student()
        }
    }

    /// Small student for single-CPU experiments.
    pub fn desk_student() -> Self {
        ModelConfig {
            encoder_layers: 1,
            encoder_heads: 2,
            encoder_dim: 32,
            decoder_layers: 1,
            decoder_heads: 2,
            decoder_dim: 32,
            output_embed_dim: 32,
            ..ModelConfig::student()
        }
    }

    pub fn desk_teacher() -> Self {
        ModelConfig {
            encoder_layers: 2,
            encoder_heads: 4,
            encoder_dim: 64,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_dim: 64,
            output_embed_dim: 64,
            size_class: SizeClass::Teacher,
            ..ModelConfig::student()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::ConfigInvalid(m));
        if self.max_output_len < 1 {
            return bad("max_output_len must be at least 1".into());
        }
        for (name, dim, heads) in [
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return bad(format!("{name} dim {dim} not divisible by {heads} heads"));
            }
        }
        if self.output_embed_dim == 0 {
            return bad("output_embed_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn parameter_count(&self, vocab: &Vocabularies) -> usize {
        Layout::new(self, vocab.source.len(), vocab.label_count()).parameter_count()
    }
}

/// Teacher/student parameter ratio `P`; errors if a teacher-class config is
/// less than [`TEACHER_MIN_RATIO`] times the student.
pub fn teacher_ratio(
    student: &ModelConfig,
    teacher: &ModelConfig,
    vocab: &Vocabularies,
) -> Result<f64, ModelError> {
    let p = teacher.parameter_count(vocab) as f64 / student.parameter_count(vocab) as f64;
    if teacher.size_class == SizeClass::Teacher && p < TEACHER_MIN_RATIO {
        return Err(ModelError::ConfigInvalid(format!(
            "teacher has only {p:.2}x the student's parameters (need {TEACHER_MIN_RATIO}x)"
        )));
    }
    Ok(p)
}

/// Logits of one decoder step under teacher forcing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub t: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    vocab: Vocabularies,
}

/// A parser instance: config, the vocabularies it was built for, and weights.
#[derive(Debug, Clone)]
pub struct ParserModel {
    pub config: ModelConfig,
    pub vocab: Vocabularies,
    pub params: ModelParams,
    layout: Layout,
}

impl PartialEq for ParserModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocab == other.vocab && self.params == other.params
    }
}

impl ParserModel {
    pub fn new(config: ModelConfig, vocab: Vocabularies, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.source.len(), vocab.label_count());
        let params = layout.initialize(seed);
        Ok(ParserModel {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn from_params(
        config: ModelConfig,
        vocab: Vocabularies,
        params: ModelParams,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.source.len(), vocab.label_count());
        if params.tensors.len() != layout.len() || params.names.len() != layout.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.tensors.len()
            )));
        }
        for (i, name) in layout.names().enumerate() {
            let [r, c] = layout.shape(i);
            if params.names[i] != name || params.tensors[i].shape() != [r, c] {
                return Err(ModelError::ParamMismatch(format!(
                    "tensor {i}: expected {name} {r}x{c}, found {} {:?}",
                    params.names[i],
                    params.tensors[i].shape()
                )));
            }
        }
        Ok(ParserModel {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.params)
    }

    /// Packs encoded examples into a teacher-forced batch.
    pub fn batch(&self, items: &[(&[usize], &[usize])]) -> Result<Batch, ModelError> {
        Batch::new(&self.vocab, self.config.max_output_len, items)
    }

    /// Encodes corpus examples (source ids, gold target symbols).
    pub fn encode_examples(
        &self,
        examples: &[Example],
    ) -> Result<Vec<(Vec<usize>, Vec<usize>)>, crate::dataset::DatasetError> {
        examples
            .iter()
            .map(|ex| Ok((self.vocab.encode_source(&ex.utterance), self.vocab.encode_target(ex)?)))
            .collect()
    }

    /// Per-step logits for one utterance conditioned on the gold prefix.
    /// `target` excludes `<s>` and `</s>`; one distribution is returned per
    /// position of `target` plus the final `</s>` step.
    pub fn forward_teacher_forced(
        &self,
        source: &[usize],
        target: &[usize],
    ) -> Result<Vec<StepDistribution>, ModelError> {
        let batch = self.batch(&[(source, target)])?;
        let z = self.teacher_forced_logits(&batch);
        Ok((0..z.rows())
            .map(|t| StepDistribution {
                t,
                logits: z.row(t).to_vec(),
            })
            .collect())
    }

    pub fn save(&self, path: &Path, width: FloatWidth) -> Result<(), ModelError> {
        let meta = serde_json::to_string(&Metadata {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        })?;
        let tensors: Vec<(String, Tensor)> = self
            .params
            .names
            .iter()
            .cloned()
            .zip(self.params.tensors.iter().cloned())
            .collect();
        let file = File::create(path).map_err(CheckpointError::Io)?;
        let mut w = BufWriter::new(file);
        write_checkpoint(&mut w, &meta, &tensors, width)?;
        w.flush().map_err(CheckpointError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = File::open(path).map_err(CheckpointError::Io)?;
        let ck = read_checkpoint(BufReader::new(file))?;
        let meta: Metadata = serde_json::from_str(&ck.metadata)?;
        let (names, tensors) = ck.tensors.into_iter().unzip();
        ParserModel::from_params(meta.config, meta.vocab, ModelParams { names, tensors })
    }
}

#[cfg(test)]
mod tests;
