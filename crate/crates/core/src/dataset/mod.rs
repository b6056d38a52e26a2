//! Corpora of utterance/parse pairs, vocabularies and label noise.

mod noise;
mod synthetic;
mod tsv;
mod vocab;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::top_format::{serialize_tree, ParseTree};

pub use noise::{inject_noise, NoiseConfig, NoiseSummary};
pub use synthetic::{generate_splits, generate_synthetic, Grammar};
pub use tsv::{load_tsv, parse_tsv};
pub use vocab::{
    build_vocab, decode_symbols, Vocab, Vocabularies, BOS, EOS, PAD, RESERVED, UNK,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed line {line}: {reason} ({bad_lines} bad line(s) in total)")]
    MalformedLine {
        line: usize,
        reason: String,
        bad_lines: usize,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("operation requires a train split, got {0}")]
    NotTrainSplit(Split),
    #[error("corpus has no vocabulary; build it on the train split first")]
    MissingVocabulary,
    #[error("example {id}: leaf token {token:?} cannot be copied from the utterance")]
    UncopyableToken { id: u64, token: String },
    #[error("example {id}: copy position {position} exceeds the {limit} copy symbols")]
    CopyOutOfRange {
        id: u64,
        position: usize,
        limit: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub utterance: Vec<String>,
    pub gold: ParseTree,
}

impl Example {
    pub fn new(id: u64, utterance: Vec<String>, root: crate::top_format::ParseNode) -> Self {
        let gold = ParseTree::with_source(root, utterance.clone());
        Example {
            id,
            utterance,
            gold,
        }
    }

    pub fn gold_string(&self) -> String {
        serialize_tree(&self.gold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub examples: Vec<Example>,
    pub vocab: Option<Vocabularies>,
}

impl Corpus {
    pub fn new(split: Split, examples: Vec<Example>) -> Self {
        Corpus {
            split,
            examples,
            vocab: None,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn vocab(&self) -> Result<&Vocabularies, DatasetError> {
        self.vocab.as_ref().ok_or(DatasetError::MissingVocabulary)
    }

    /// Attaches vocabularies built elsewhere (normally on the train split).
    pub fn with_vocab(mut self, vocab: Vocabularies) -> Self {
        self.vocab = Some(vocab);
        self
    }

    /// Two-column TSV: tokenized utterance, canonical bracketed parse.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&ex.utterance.join(" "));
            out.push('\t');
            out.push_str(&ex.gold_string());
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: &std::path::Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_tsv()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// SHA-256 over the TSV form; identifies corpus content in run metadata.
    pub fn fingerprint(&self) -> String {
        hex_digest(self.to_tsv().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
