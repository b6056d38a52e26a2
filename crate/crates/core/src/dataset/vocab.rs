use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Corpus, DatasetError, Example, Split};
use crate::top_format::{Child, ParseNode, CLOSE};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Symbol table with the four reserved entries at indices 0..4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Vocab { symbols, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}

impl Vocab {
    /// Reserved symbols followed by `entries` in the given order.
    pub fn with_entries<I: IntoIterator<Item = String>>(entries: I) -> Self {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(entries);
        Vocab::from(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn lookup(&self, symbol: &str) -> usize {
        self.get(symbol).unwrap_or(UNK)
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// Source and target vocabularies of one train split.
///
/// Target layout: reserved symbols, `]`, sorted `[in:`/`[sl:` labels, then
/// the copy symbols `COPY_0..COPY_{L-1}` as the final `copy_len` entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub source: Vocab,
    pub target: Vocab,
    pub copy_len: usize,
}

impl Vocabularies {
    /// Number of target symbols that are not copy symbols.
    pub fn label_count(&self) -> usize {
        self.target.len() - self.copy_len
    }

    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn copy_symbol(&self, position: usize) -> usize {
        assert!(position < self.copy_len);
        self.label_count() + position
    }

    /// Source position referenced by a target symbol, if it is a copy symbol.
    pub fn copy_position(&self, symbol: usize) -> Option<usize> {
        symbol.checked_sub(self.label_count())
    }

    pub fn encode_source(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.source.lookup(t)).collect()
    }

    /// Target symbols for an example's gold tree, without `<s>` or `</s>`.
    ///
    /// Leaves are aligned to source positions left to right; a leaf that does
    /// not occur after the previous one falls back to its first occurrence.
    pub fn encode_target(&self, ex: &Example) -> Result<Vec<usize>, DatasetError> {
        let mut out = Vec::new();
        let mut cursor = 0;
        self.encode_node(&ex.gold.root, ex, &mut cursor, &mut out)?;
        Ok(out)
    }

    fn encode_node(
        &self,
        node: &ParseNode,
        ex: &Example,
        cursor: &mut usize,
        out: &mut Vec<usize>,
    ) -> Result<(), DatasetError> {
        out.push(self.target.lookup(&node.open_symbol()));
        for child in &node.children {
            match child {
                Child::Node(n) => self.encode_node(n, ex, cursor, out)?,
                Child::Token(tok) => {
                    let pos = ex.utterance[*cursor..]
                        .iter()
                        .position(|t| t == tok)
                        .map(|p| p + *cursor)
                        .or_else(|| ex.utterance.iter().position(|t| t == tok))
                        .ok_or_else(|| DatasetError::UncopyableToken {
                            id: ex.id,
                            token: tok.clone(),
                        })?;
                    if pos >= self.copy_len {
                        return Err(DatasetError::CopyOutOfRange {
                            id: ex.id,
                            position: pos,
                            limit: self.copy_len,
                        });
                    }
                    *cursor = pos + 1;
                    out.push(self.copy_symbol(pos));
                }
            }
        }
        out.push(self.target.lookup(CLOSE));
        Ok(())
    }
}

/// Renders target symbols as a bracket string, replacing copy symbols with
/// the source tokens they point at. Stops at the first `</s>`.
pub fn decode_symbols(vocab: &Vocabularies, symbols: &[usize], source: &[String]) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(symbols.len());
    for &s in symbols {
        if s == EOS {
            break;
        }
        match vocab.copy_position(s) {
            Some(p) => parts.push(source.get(p).map_or(RESERVED[UNK], String::as_str)),
            None => parts.push(vocab.target.symbol(s)),
        }
    }
    parts.join(" ")
}

/// Builds source and target vocabularies from a train split.
pub fn build_vocab(mut corpus: Corpus) -> Result<Corpus, DatasetError> {
    if corpus.split != Split::Train {
        return Err(DatasetError::NotTrainSplit(corpus.split));
    }
    let mut tokens = BTreeSet::new();
    let mut labels = BTreeSet::new();
    let mut max_len = 0;
    for ex in &corpus.examples {
        tokens.extend(ex.utterance.iter().cloned());
        max_len = max_len.max(ex.utterance.len());
        ex.gold.root.visit(&mut |n| {
            labels.insert(n.open_symbol());
        });
    }
    let source = Vocab::with_entries(tokens);
    let target = Vocab::with_entries(
        std::iter::once(CLOSE.to_string())
            .chain(labels)
            .chain((0..max_len).map(|i| format!("COPY_{i}"))),
    );
    corpus.vocab = Some(Vocabularies {
        source,
        target,
        copy_len: max_len,
    });
    Ok(corpus)
}
