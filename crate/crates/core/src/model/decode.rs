use std::cmp::Ordering;

use rayon::prelude::*;

use super::{ModelError, ParserModel};
use crate::dataset::{decode_symbols, Vocabularies, EOS};
use crate::numerics::{argmax, log_softmax_rows};
use crate::top_format::{parse_tree, serialize_tree, ParseTree};

/// Examples decoded together in one batched pass.
const DECODE_CHUNK: usize = 64;

/// Anything that yields next-symbol log-probabilities for prefixes.
pub trait Scorer: Sync {
    type Memory;

    /// Upper bound on emitted symbols, `</s>` included.
    fn max_output_len(&self) -> usize;

    fn encode(&self, sources: &[Vec<usize>]) -> Self::Memory;

    /// One log-probability row per `(example index, prefix)` query. Prefixes
    /// exclude `<s>`.
    fn next_log_probs(&self, memory: &Self::Memory, queries: &[(usize, &[usize])]) -> Vec<Vec<f64>>;
}

/// A scorer that also knows its vocabularies, so outputs can be rendered.
pub trait Parser: Scorer {
    fn vocab(&self) -> &Vocabularies;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted symbols, including a final `</s>` unless truncated.
    pub symbols: Vec<usize>,
    pub score: f64,
    pub truncated: bool,
}

fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Argmax decoding, ties to the lowest symbol index.
pub fn greedy_search<S: Scorer>(scorer: &S, sources: &[Vec<usize>]) -> Vec<Hypothesis> {
    let max = scorer.max_output_len();
    let memory = scorer.encode(sources);
    let mut hyps: Vec<Hypothesis> = sources
        .iter()
        .map(|_| Hypothesis {
            symbols: Vec::new(),
            score: 0.0,
            truncated: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..sources.len()).collect();
    for _ in 0..max {
        if active.is_empty() {
            break;
        }
        let queries: Vec<(usize, &[usize])> =
            active.iter().map(|&i| (i, hyps[i].symbols.as_slice())).collect();
        let rows = scorer.next_log_probs(&memory, &queries);
        let mut still = Vec::with_capacity(active.len());
        for (&i, lp) in active.iter().zip(&rows) {
            let s = argmax(lp).unwrap_or(EOS);
            hyps[i].score += lp[s];
            hyps[i].symbols.push(s);
            if s != EOS {
                still.push(i);
            }
        }
        active = still;
    }
    for i in active {
        hyps[i].truncated = true;
    }
    hyps
}

/// Length-unnormalized beam search. Candidates are ranked by score, then by
/// the lexicographically smaller symbol sequence; width 1 is greedy search.
pub fn beam_search_ids<S: Scorer>(
    scorer: &S,
    sources: &[Vec<usize>],
    width: usize,
) -> Result<Vec<Hypothesis>, ModelError> {
    if width == 0 {
        return Err(ModelError::ZeroWidth);
    }
    let max = scorer.max_output_len();
    let memory = scorer.encode(sources);
    let n = sources.len();
    let mut live: Vec<Vec<(Vec<usize>, f64)>> = vec![vec![(Vec::new(), 0.0)]; n];
    let mut done: Vec<Vec<Hypothesis>> = vec![Vec::new(); n];
    for _ in 0..max {
        let queries: Vec<(usize, &[usize])> = live
            .iter()
            .enumerate()
            .flat_map(|(i, hs)| hs.iter().map(move |(s, _)| (i, s.as_slice())))
            .collect();
        if queries.is_empty() {
            break;
        }
        let rows = scorer.next_log_probs(&memory, &queries);
        let mut rows = rows.into_iter();
        for i in 0..n {
            let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
            for (prefix, score) in &live[i] {
                let lp = rows.next().expect("one row per query");
                for (s, &v) in lp.iter().enumerate() {
                    if v == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut seq = prefix.clone();
                    seq.push(s);
                    cands.push((seq, score + v));
                }
            }
            cands.sort_by(|a, b| better((a.1, &a.0), (b.1, &b.0)));
            cands.truncate(width);
            let mut next = Vec::new();
            for (seq, score) in cands {
                if seq.last() == Some(&EOS) {
                    done[i].push(Hypothesis {
                        symbols: seq,
                        score,
                        truncated: false,
                    });
                } else {
                    next.push((seq, score));
                }
            }
            let best_done = done[i].iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = next.iter().map(|h| h.1).fold(f64::NEG_INFINITY, f64::max);
            if !done[i].is_empty() && best_done > best_live {
                next.clear();
            }
            live[i] = next;
        }
    }
    let mut out = Vec::with_capacity(n);
    for (i, pool) in done.into_iter().enumerate() {
        let mut pool = pool;
        pool.extend(live[i].drain(..).map(|(symbols, score)| Hypothesis {
            symbols,
            score,
            truncated: true,
        }));
        pool.sort_by(|a, b| better((a.score, &a.symbols), (b.score, &b.symbols)));
        out.push(pool.into_iter().next().unwrap_or(Hypothesis {
            symbols: Vec::new(),
            score: f64::NEG_INFINITY,
            truncated: true,
        }));
    }
    Ok(out)
}

/// A decoded output. `tree` is `None` when the bracket string does not parse;
/// the raw string is still a valid prediction for string comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub symbols: Vec<usize>,
    pub text: String,
    pub tree: Option<ParseTree>,
    pub truncated: bool,
}

impl Prediction {
    pub fn render(vocab: &Vocabularies, hyp: Hypothesis, source: &[String]) -> Self {
        let text = decode_symbols(vocab, &hyp.symbols, source);
        let tree = parse_tree(&text).ok().map(|t| ParseTree::with_source(t.root, source.to_vec()));
        Prediction {
            symbols: hyp.symbols,
            text,
            tree,
            truncated: hyp.truncated,
        }
    }

    /// Canonical serialization when the output parses, else the raw string.
    pub fn serialized(&self) -> String {
        match &self.tree {
            Some(t) => serialize_tree(t),
            None => self.text.clone(),
        }
    }

    pub fn is_parseable(&self) -> bool {
        self.tree.is_some()
    }
}

fn decode_with<P: Parser>(
    parser: &P,
    utterances: &[Vec<String>],
    beam_width: Option<usize>,
) -> Vec<Prediction> {
    let vocab = parser.vocab();
    let chunks: Vec<Vec<Prediction>> = utterances
        .par_chunks(DECODE_CHUNK)
        .map(|chunk| {
            let sources: Vec<Vec<usize>> = chunk.iter().map(|u| vocab.encode_source(u)).collect();
            let hyps = match beam_width {
                None => greedy_search(parser, &sources),
                Some(w) => beam_search_ids(parser, &sources, w).expect("width checked"),
            };
            hyps.into_iter()
                .zip(chunk)
                .map(|(h, u)| Prediction::render(vocab, h, u))
                .collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

pub fn greedy_decode<P: Parser>(parser: &P, utterances: &[Vec<String>]) -> Vec<Prediction> {
    decode_with(parser, utterances, None)
}

pub fn beam_search<P: Parser>(
    parser: &P,
    utterances: &[Vec<String>],
    width: usize,
) -> Result<Vec<Prediction>, ModelError> {
    if width == 0 {
        return Err(ModelError::ZeroWidth);
    }
    Ok(decode_with(parser, utterances, Some(width)))
}

impl Scorer for ParserModel {
    type Memory = super::network::Encoded;

    fn max_output_len(&self) -> usize {
        self.config.max_output_len
    }

    fn encode(&self, sources: &[Vec<usize>]) -> Self::Memory {
        self.encode_sources(sources)
    }

    fn next_log_probs(&self, memory: &Self::Memory, queries: &[(usize, &[usize])]) -> Vec<Vec<f64>> {
        let lp = log_softmax_rows(&self.next_logits(memory, queries));
        (0..lp.rows()).map(|i| lp.row(i).to_vec()).collect()
    }
}

impl Parser for ParserModel {
    fn vocab(&self) -> &Vocabularies {
        &self.vocab
    }
}

/// Uniform mixture of member distributions at every step.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<ParserModel>,
}

impl Ensemble {
    pub fn new(members: Vec<ParserModel>) -> Result<Self, ModelError> {
        let first = members.first().ok_or(ModelError::EmptyEnsemble)?;
        if members.iter().any(|m| m.vocab != first.vocab) {
            return Err(ModelError::VocabMismatch);
        }
        Ok(Ensemble { members })
    }
}

/// `log((1/K) Σ_k exp(lp_k))` per entry; `-inf` only where every member is.
pub fn mix_log_probs(members: &[Vec<f64>]) -> Vec<f64> {
    let k = members.len() as f64;
    (0..members[0].len())
        .map(|j| {
            let m = members.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return m;
            }
            m + (members.iter().map(|r| (r[j] - m).exp()).sum::<f64>() / k).ln()
        })
        .collect()
}

impl Scorer for Ensemble {
    type Memory = Vec<super::network::Encoded>;

    fn max_output_len(&self) -> usize {
        self.members.iter().map(|m| m.config.max_output_len).min().unwrap_or(0)
    }

    fn encode(&self, sources: &[Vec<usize>]) -> Self::Memory {
        self.members.iter().map(|m| m.encode_sources(sources)).collect()
    }

    fn next_log_probs(&self, memory: &Self::Memory, queries: &[(usize, &[usize])]) -> Vec<Vec<f64>> {
        let per: Vec<Vec<Vec<f64>>> = self
            .members
            .iter()
            .zip(memory)
            .map(|(m, e)| m.next_log_probs(e, queries))
            .collect();
        (0..queries.len())
            .map(|q| {
                let rows: Vec<Vec<f64>> = per.iter().map(|p| p[q].clone()).collect();
                mix_log_probs(&rows)
            })
            .collect()
    }
}

impl Parser for Ensemble {
    fn vocab(&self) -> &Vocabularies {
        &self.members[0].vocab
    }
}
