//! Weighted label swapping.
//!
//! For each label class (intents, then slots) independently: the empirical
//! label distribution is computed once over all occurrences in the clean
//! corpus, exactly `round(X · M)` of the `M` occurrences are picked uniformly
//! without replacement, and each picked occurrence gets a label drawn from
//! that distribution. The draw may return the original label, so the share
//! of labels that actually change is somewhat below `X`.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, DatasetError, Split};
use crate::top_format::NodeKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Fraction of occurrences to resample, in `[0, 1]`.
    pub swap_fraction: f64,
    pub seed: u64,
}

/// What one class of labels went through.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ClassSummary {
    pub occurrences: usize,
    pub resampled: usize,
    pub changed: usize,
    /// `Σ_selected (1 − p(original label))`.
    pub expected_changed: f64,
    /// `Σ_selected p(original label) · (1 − p(original label))`.
    pub changed_variance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NoiseSummary {
    pub intents: ClassSummary,
    pub slots: ClassSummary,
}

pub fn inject_noise(
    corpus: &Corpus,
    cfg: NoiseConfig,
) -> Result<(Corpus, NoiseSummary), DatasetError> {
    if corpus.split != Split::Train {
        return Err(DatasetError::NotTrainSplit(corpus.split));
    }
    let x = cfg.swap_fraction.clamp(0.0, 1.0);
    let mut out = corpus.clone();
    // Labels change, so any vocabulary built on the clean corpus is stale.
    out.vocab = None;
    let intents = resample_class(&mut out, NodeKind::Intent, x, stream_rng(cfg.seed, 0));
    let slots = resample_class(&mut out, NodeKind::Slot, x, stream_rng(cfg.seed, 1));
    Ok((out, NoiseSummary { intents, slots }))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn resample_class(corpus: &mut Corpus, kind: NodeKind, x: f64, mut rng: ChaCha8Rng) -> ClassSummary {
    let mut labels: Vec<String> = Vec::new();
    for ex in &corpus.examples {
        ex.gold.root.visit(&mut |n| {
            if n.kind == kind {
                labels.push(n.label.clone());
            }
        });
    }
    let m = labels.len();
    let take = ((x * m as f64).round() as usize).min(m);
    if take == 0 {
        return ClassSummary {
            occurrences: m,
            ..ClassSummary::default()
        };
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in &labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    let support: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
    let prob: BTreeMap<String, f64> = counts
        .iter()
        .map(|(l, c)| (l.to_string(), *c as f64 / m as f64))
        .collect();
    let dist = WeightedIndex::new(counts.values().copied()).expect("non-empty label counts");

    let mut selected = index::sample(&mut rng, m, take).into_vec();
    selected.sort_unstable();

    let mut summary = ClassSummary {
        occurrences: m,
        resampled: take,
        ..ClassSummary::default()
    };
    let mut replacement: Vec<Option<String>> = vec![None; m];
    for &i in &selected {
        let new = &support[dist.sample(&mut rng)];
        let p = prob[&labels[i]];
        summary.expected_changed += 1.0 - p;
        summary.changed_variance += p * (1.0 - p);
        if *new != labels[i] {
            summary.changed += 1;
        }
        replacement[i] = Some(new.clone());
    }

    let mut k = 0;
    for ex in &mut corpus.examples {
        ex.gold.root.visit_mut(&mut |n| {
            if n.kind == kind {
                if let Some(new) = replacement[k].take() {
                    n.label = new;
                }
                k += 1;
            }
        });
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Example};
    use crate::top_format::{collect_labels, ParseNode};

    fn cfg(x: f64, seed: u64) -> NoiseConfig {
        NoiseConfig {
            swap_fraction: x,
            seed,
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let c = generate_synthetic(1, 300, 0.2);
        let (n, s) = inject_noise(&c, cfg(0.0, 9)).unwrap();
        assert_eq!(n, c);
        assert_eq!(s.intents.resampled, 0);
        assert_eq!(s.slots.resampled, 0);
    }

    #[test]
    fn point_mass_distribution_never_changes() {
        let examples = (0..50)
            .map(|i| Example::new(i, vec!["w".into()], ParseNode::intent("a").with_token("w")))
            .collect();
        let c = Corpus::new(Split::Train, examples);
        let (n, s) = inject_noise(&c, cfg(1.0, 3)).unwrap();
        assert_eq!(s.intents.resampled, 50);
        assert_eq!(s.intents.changed, 0);
        assert!(n.examples.iter().all(|e| e.gold.root.label == "a"));
    }

    #[test]
    fn exact_budget_and_structure_preserved() {
        let c = generate_synthetic(4, 1_000, 0.3);
        let (n, s) = inject_noise(&c, cfg(0.25, 77)).unwrap();
        let intents: usize = c.examples.iter().map(|e| collect_labels(&e.gold).0.len()).sum();
        let slots: usize = c.examples.iter().map(|e| collect_labels(&e.gold).1.len()).sum();
        assert_eq!(s.intents.occurrences, intents);
        assert_eq!(s.intents.resampled, (0.25 * intents as f64).round() as usize);
        assert_eq!(s.slots.resampled, (0.25 * slots as f64).round() as usize);
        assert_eq!(n.len(), c.len());
        for (a, b) in c.examples.iter().zip(&n.examples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.utterance, b.utterance);
            assert_eq!(a.gold.root.shape_signature(), b.gold.root.shape_signature());
        }
    }

    #[test]
    fn seeds_control_selection() {
        let c = generate_synthetic(4, 500, 0.0);
        let (a, _) = inject_noise(&c, cfg(0.5, 1)).unwrap();
        let (b, _) = inject_noise(&c, cfg(0.5, 1)).unwrap();
        let (d, _) = inject_noise(&c, cfg(0.5, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn eval_split_rejected() {
        let mut c = generate_synthetic(4, 5, 0.0);
        c.split = Split::Eval;
        assert!(matches!(
            inject_noise(&c, cfg(0.1, 1)),
            Err(DatasetError::NotTrainSplit(Split::Eval))
        ));
    }
}
