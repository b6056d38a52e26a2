use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{build_vocab, generate_synthetic, Corpus, EOS};
use crate::numerics::{log_softmax_rows, AdamConfig, Graph, OptimizerState, Targets};

fn tiny_corpus(n: usize) -> Corpus {
    build_vocab(generate_synthetic(11, n, 0.0)).unwrap()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder_dim: 16,
        decoder_dim: 16,
        output_embed_dim: 16,
        dropout: 0.0,
        ..ModelConfig::desk_student()
    }
}

/// Next-symbol distribution depends on (source, prefix) through a hash.
struct ToyMachine {
    vocab: usize,
    max_len: usize,
    salt: u64,
}

impl ToyMachine {
    fn row(&self, src: &[usize], prefix: &[usize]) -> Vec<f64> {
        let mut h = self.salt;
        for &s in src.iter().chain([&usize::MAX]).chain(prefix) {
            h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((s as u64).wrapping_add(1));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let z: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = Tensor::matrix(1, self.vocab, z);
        log_softmax_rows(&t).row(0).to_vec()
    }
}

impl Scorer for ToyMachine {
    type Memory = Vec<Vec<usize>>;

    fn max_output_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, sources: &[Vec<usize>]) -> Self::Memory {
        sources.to_vec()
    }

    fn next_log_probs(&self, memory: &Self::Memory, queries: &[(usize, &[usize])]) -> Vec<Vec<f64>> {
        queries.iter().map(|&(i, p)| self.row(&memory[i], p)).collect()
    }
}

/// Best (score, sequence) over all finished or length-capped sequences.
fn exhaustive(m: &ToyMachine, src: &[usize]) -> Hypothesis {
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![(Vec::<usize>::new(), 0.0f64)];
    while let Some((seq, score)) = stack.pop() {
        let lp = m.row(src, &seq);
        for (s, &v) in lp.iter().enumerate() {
            let mut next = seq.clone();
            next.push(s);
            let sc = score + v;
            let terminal = s == EOS || next.len() == m.max_len;
            if terminal {
                let h = Hypothesis {
                    truncated: s != EOS,
                    symbols: next,
                    score: sc,
                };
                let replace = match &best {
                    None => true,
                    Some(b) => h.score > b.score || (h.score == b.score && h.symbols < b.symbols),
                };
                if replace {
                    best = Some(h);
                }
            } else {
                stack.push((next, sc));
            }
        }
    }
    best.unwrap()
}

#[test]
fn beam_matches_exhaustive_search_on_toys() {
    for salt in 0..40u64 {
        let m = ToyMachine {
            vocab: 5,
            max_len: 1 + (salt as usize % 4),
            salt,
        };
        let sources: Vec<Vec<usize>> = (0..3).map(|i| vec![i, salt as usize]).collect();
        let width = 5usize.pow(m.max_len as u32);
        let beam = beam_search_ids(&m, &sources, width).unwrap();
        for (src, b) in sources.iter().zip(&beam) {
            assert_eq!(*b, exhaustive(&m, src), "salt {salt}");
        }
    }
}

/// Step 1 offers a tempting symbol whose continuations are all poor.
struct Trap;

impl Scorer for Trap {
    type Memory = ();
    fn max_output_len(&self) -> usize {
        3
    }
    fn encode(&self, _: &[Vec<usize>]) {}
    fn next_log_probs(&self, _: &(), queries: &[(usize, &[usize])]) -> Vec<Vec<f64>> {
        let ln = |p: &[f64]| p.iter().map(|x| x.ln()).collect::<Vec<f64>>();
        queries
            .iter()
            .map(|(_, p)| match p {
                [] => ln(&[1e-9, 1e-9, 1e-9, 1e-9, 0.6, 0.4 - 4e-9]),
                [4] => ln(&[1e-9, 1e-9, 1e-9, 0.25, 0.25, 0.5 - 3e-9]),
                [5] => ln(&[1e-9, 1e-9, 1e-9, 0.9, 0.1 - 4e-9, 1e-9]),
                _ => ln(&[1e-9, 1e-9, 1e-9, 1.0 - 5e-9, 1e-9, 1e-9]),
            })
            .collect()
    }
}

#[test]
fn beam_escapes_greedy_trap() {
    let src = vec![vec![0]];
    let g = greedy_search(&Trap, &src);
    let b = beam_search_ids(&Trap, &src, 3).unwrap();
    assert_eq!(g[0].symbols, vec![4, 5, EOS]);
    assert_eq!(b[0].symbols, vec![5, EOS]);
    assert!(b[0].score > g[0].score);
    assert!(((0.4f64 * 0.9).ln() - b[0].score).abs() < 1e-6);
}

#[test]
fn width_one_is_greedy_on_toys() {
    for salt in 0..100u64 {
        let m = ToyMachine {
            vocab: 7,
            max_len: 8,
            salt,
        };
        let sources = vec![vec![salt as usize]];
        assert_eq!(greedy_search(&m, &sources), beam_search_ids(&m, &sources, 1).unwrap());
    }
    assert!(matches!(
        beam_search_ids(&Trap, &[vec![0]], 0),
        Err(ModelError::ZeroWidth)
    ));
}

#[test]
fn width_one_is_greedy_on_untrained_parsers() {
    let corpus = tiny_corpus(60);
    let vocab = corpus.vocab().unwrap().clone();
    let utts: Vec<Vec<String>> = corpus.examples.iter().map(|e| e.utterance.clone()).collect();
    let mut cases = 0;
    for seed in 0..5 {
        let cfg = ModelConfig {
            max_output_len: 12,
            ..tiny_config()
        };
        let m = ParserModel::new(cfg, vocab.clone(), seed).unwrap();
        let chunk = &utts[..20];
        let g = greedy_decode(&m, chunk);
        let b = beam_search(&m, chunk, 1).unwrap();
        assert_eq!(g, b);
        cases += chunk.len();
    }
    assert_eq!(cases, 100);
}

#[test]
fn decoding_is_deterministic_and_copies_are_in_range() {
    let corpus = tiny_corpus(30);
    let vocab = corpus.vocab().unwrap().clone();
    let m = ParserModel::new(tiny_config(), vocab.clone(), 5).unwrap();
    let utts: Vec<Vec<String>> = corpus.examples.iter().map(|e| e.utterance.clone()).collect();
    let a = greedy_decode(&m, &utts);
    assert_eq!(a, greedy_decode(&m, &utts));
    let b = beam_search(&m, &utts, 3).unwrap();
    for (pred, u) in a.iter().chain(&b).zip(utts.iter().cycle()) {
        for &s in &pred.symbols {
            if let Some(p) = vocab.copy_position(s) {
                assert!(p < u.len());
            }
        }
    }
}

#[test]
fn greedy_output_capped_and_flagged() {
    let corpus = tiny_corpus(10);
    let vocab = corpus.vocab().unwrap().clone();
    let mut m = ParserModel::new(tiny_config(), vocab, 1).unwrap();
    let i = m.params.names.iter().position(|n| n == "decoder.out.b").unwrap();
    m.params.tensors[i].data_mut()[EOS] = -1e4;
    let utts = vec![corpus.examples[0].utterance.clone()];
    let p = &greedy_decode(&m, &utts)[0];
    assert!(p.truncated);
    assert_eq!(p.symbols.len(), 51);
    assert!(!p.symbols.contains(&EOS));
    let b = &beam_search(&m, &utts, 2).unwrap()[0];
    assert!(b.truncated && b.symbols.len() == 51);
}

#[test]
fn teacher_forced_masks_and_errors() {
    let corpus = tiny_corpus(20);
    let vocab = corpus.vocab().unwrap().clone();
    let m = ParserModel::new(tiny_config(), vocab.clone(), 2).unwrap();
    let ex = corpus
        .examples
        .iter()
        .min_by_key(|e| e.utterance.len())
        .unwrap();
    let src = vocab.encode_source(&ex.utterance);
    assert!(src.len() < vocab.copy_len);
    let tgt = vocab.encode_target(ex).unwrap();
    let steps = m.forward_teacher_forced(&src, &tgt).unwrap();
    assert_eq!(steps.len(), tgt.len() + 1);
    assert_eq!(steps, m.forward_teacher_forced(&src, &tgt).unwrap());
    for st in &steps {
        assert_eq!(st.logits.len(), vocab.target_len());
        let lp = log_softmax_rows(&Tensor::row_vector(st.logits.clone()));
        let p: Vec<f64> = lp.data().iter().map(|v| v.exp()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for pos in src.len()..vocab.copy_len {
            assert_eq!(p[vocab.copy_symbol(pos)], 0.0);
        }
        for r in [crate::dataset::PAD, crate::dataset::UNK, crate::dataset::BOS] {
            assert_eq!(p[r], 0.0);
        }
    }

    let long = vec![tgt[0]; 51];
    assert!(matches!(
        m.forward_teacher_forced(&src, &long),
        Err(ModelError::TargetTooLong { length: 52, max: 51 })
    ));
    let beyond = vocab.copy_symbol(src.len());
    assert!(matches!(
        m.forward_teacher_forced(&src, &[beyond]),
        Err(ModelError::UnknownSymbol { .. })
    ));
    assert!(m.forward_teacher_forced(&src, &[vocab.target_len()]).is_err());
    assert!(m.forward_teacher_forced(&src, &[EOS]).is_err());
}

#[test]
fn parameter_counts_are_additive() {
    let corpus = tiny_corpus(20);
    let vocab = corpus.vocab().unwrap().clone();
    let base = tiny_config();
    let more = ModelConfig {
        decoder_layers: base.decoder_layers + 1,
        ..base.clone()
    };
    let d = base.decoder_dim;
    let de = base.encoder_dim;
    let layer = 3 * 2 * d + 4 * d * d + (2 * d * de + 2 * d * d) + (2 * d * d * FFN_MULT + d * FFN_MULT + d);
    assert_eq!(more.parameter_count(&vocab) - base.parameter_count(&vocab), layer);
    let m = ParserModel::new(base.clone(), vocab.clone(), 0).unwrap();
    assert_eq!(m.parameter_count(), base.parameter_count(&vocab));
    assert_eq!(m.params.total_parameter_count(), m.params.tensors.iter().map(|t| t.numel()).sum::<usize>());

    let p = teacher_ratio(&ModelConfig::student(), &ModelConfig::teacher(), &vocab).unwrap();
    assert!(p >= TEACHER_MIN_RATIO);
    let p = teacher_ratio(&ModelConfig::desk_student(), &ModelConfig::desk_teacher(), &vocab).unwrap();
    assert!(p >= TEACHER_MIN_RATIO);
    let weak = ModelConfig {
        size_class: SizeClass::Teacher,
        ..ModelConfig::desk_student()
    };
    assert!(teacher_ratio(&ModelConfig::desk_student(), &weak, &vocab).is_err());
}

#[test]
fn config_validation() {
    assert!(ModelConfig::student().validate().is_ok());
    assert!(ModelConfig::teacher().validate().is_ok());
    let c = ModelConfig {
        encoder_heads: 3,
        ..ModelConfig::student()
    };
    assert!(matches!(c.validate(), Err(ModelError::ConfigInvalid(_))));
    let c = ModelConfig {
        max_output_len: 0,
        ..ModelConfig::student()
    };
    assert!(c.validate().is_err());
    let s = ModelConfig::student();
    assert_eq!(s.max_output_len, 51);
    assert_eq!(s.output_embed_dim, 128);
    assert_eq!(s.decoder_layers, 4);
    assert_eq!(s.decoder_heads, 2);
}

#[test]
fn checkpoint_round_trip() {
    let corpus = tiny_corpus(20);
    let vocab = corpus.vocab().unwrap().clone();
    let m = ParserModel::new(tiny_config(), vocab, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path, FloatWidth::F64).unwrap();
    let back = ParserModel::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.params.digest(), m.params.digest());

    m.save(&path, FloatWidth::F32).unwrap();
    let narrow = ParserModel::load(&path).unwrap();
    assert_eq!(narrow.config, m.config);
    for (a, b) in narrow.params.tensors.iter().zip(&m.params.tensors) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        ParserModel::load(&path),
        Err(ModelError::Checkpoint(CheckpointError::BadMagic))
    ));
}

#[test]
fn ensemble_of_identical_members_matches_member() {
    let corpus = tiny_corpus(20);
    let vocab = corpus.vocab().unwrap().clone();
    let m = ParserModel::new(tiny_config(), vocab.clone(), 4).unwrap();
    let e = Ensemble::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
    let srcs: Vec<Vec<usize>> = corpus.examples[..3]
        .iter()
        .map(|x| vocab.encode_source(&x.utterance))
        .collect();
    let q: Vec<(usize, &[usize])> = vec![(0, &[]), (2, &[])];
    let a = m.next_log_probs(&m.encode(&srcs), &q);
    let b = e.next_log_probs(&e.encode(&srcs), &q);
    for (x, y) in a.iter().zip(&b) {
        for (u, v) in x.iter().zip(y) {
            assert!(u == v || (u - v).abs() < 1e-12);
        }
        let s: f64 = y.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let other = ParserModel::new(tiny_config(), tiny_corpus(5).vocab().unwrap().clone(), 0).unwrap();
    assert!(matches!(Ensemble::new(vec![m, other]), Err(ModelError::VocabMismatch)));
}

#[test]
fn overfits_ten_examples() {
    let corpus = tiny_corpus(10);
    let vocab = corpus.vocab().unwrap().clone();
    let cfg = ModelConfig {
        encoder_dim: 32,
        decoder_dim: 32,
        output_embed_dim: 32,
        dropout: 0.0,
        ..ModelConfig::desk_student()
    };
    let mut m = ParserModel::new(cfg, vocab, 7).unwrap();
    let data = m.encode_examples(&corpus.examples).unwrap();
    let items: Vec<(&[usize], &[usize])> =
        data.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let batch = m.batch(&items).unwrap();
    let mut opt = OptimizerState::new(
        AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        },
        &m.params.tensors,
    );
    let utts: Vec<Vec<String>> = corpus.examples.iter().map(|e| e.utterance.clone()).collect();
    let golds: Vec<String> = corpus.examples.iter().map(|e| e.gold_string()).collect();
    let mut solved = false;
    for step in 0..600 {
        let grads = {
            let mut g = Graph::new(&m.params.tensors);
            let z = m.batch_logits(&mut g, &batch, None);
            let loss = g.softmax_xent(z, Targets::Hard(batch.targets.clone()), 1.0, None);
            g.backward(loss).unwrap()
        };
        opt.step(&mut m.params.tensors, &grads).unwrap();
        if step % 50 == 49 {
            let preds: Vec<String> = greedy_decode(&m, &utts).iter().map(|p| p.serialized()).collect();
            if preds == golds {
                solved = true;
                break;
            }
        }
    }
    assert!(solved, "did not fit 10 examples");
}
