use std::path::Path;

use super::{Corpus, DatasetError, Example, Split};
use crate::top_format::{parse_tree, ParseTree};

/// Loads a TOP-style TSV file. The last two tab-separated fields of each line
/// are the tokenized utterance and the bracketed parse; earlier fields (such
/// as the raw utterance in TOP releases) are ignored. Blank lines are skipped.
pub fn load_tsv(path: &Path, split: Split) -> Result<Corpus, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::FileNotFound(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    parse_tsv(&text, split)
}

pub fn parse_tsv(text: &str, split: Split) -> Result<Corpus, DatasetError> {
    let mut examples = Vec::new();
    let mut first_bad: Option<(usize, String)> = None;
    let mut bad_lines = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok((utterance, tree)) => {
                let id = examples.len() as u64;
                examples.push(Example {
                    id,
                    gold: ParseTree::with_source(tree.root, utterance.clone()),
                    utterance,
                });
            }
            Err(reason) => {
                bad_lines += 1;
                first_bad.get_or_insert((line_no, reason));
            }
        }
    }
    if let Some((line, reason)) = first_bad {
        return Err(DatasetError::MalformedLine {
            line,
            reason,
            bad_lines,
        });
    }
    if examples.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    Ok(Corpus::new(split, examples))
}

fn parse_line(line: &str) -> Result<(Vec<String>, ParseTree), String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 2 {
        return Err("expected at least two tab-separated fields".into());
    }
    let utterance: Vec<String> = fields[fields.len() - 2]
        .split_whitespace()
        .map(String::from)
        .collect();
    if utterance.is_empty() {
        return Err("empty utterance".into());
    }
    let tree = parse_tree(fields[fields.len() - 1]).map_err(|e| e.to_string())?;
    Ok((utterance, tree))
}
