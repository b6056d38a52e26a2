//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use jitterlab::dataset::{Corpus, EOS};
use jitterlab::evaluation::PredictionSet;
use jitterlab::model::{Hypothesis, Scorer};
use jitterlab::numerics::{log_softmax_rows, AttnGroup, AttnLayout, Graph, NodeId, Targets, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Next-symbol distribution depends on (source, prefix) through a hash.
pub struct ToyMachine {
    pub vocab: usize,
    pub max_len: usize,
    pub salt: u64,
}

impl ToyMachine {
    pub fn row(&self, src: &[usize], prefix: &[usize]) -> Vec<f64> {
        let mut h = self.salt;
        for &s in src.iter().chain([&usize::MAX]).chain(prefix) {
            h = h
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((s as u64).wrapping_add(1));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let z: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        log_softmax_rows(&Tensor::matrix(1, self.vocab, z)).row(0).to_vec()
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

/// Best sequence by enumerating every path: highest score, ties to the
/// lexicographically smallest sequence.
pub fn exhaustive(m: &ToyMachine, src: &[usize]) -> Hypothesis {
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![(Vec::<usize>::new(), 0.0f64)];
    while let Some((seq, score)) = stack.pop() {
        for (s, v) in m.row(src, &seq).into_iter().enumerate() {
            let mut next = seq.clone();
            next.push(s);
            let sc = score + v;
            if s == EOS || next.len() == m.max_len {
                let h = Hypothesis {
                    truncated: s != EOS,
                    symbols: next,
                    score: sc,
                };
                let replace = best.as_ref().is_none_or(|b| {
                    h.score > b.score || (h.score == b.score && h.symbols < b.symbols)
                });
                if replace {
                    best = Some(h);
                }
            } else {
                stack.push((next, sc));
            }
        }
    }
    best.expect("at least one path")
}

/// `n` examples, predictions drawn from a tiny alphabet so ties are common.
pub fn random_runs(rng: &mut impl Rng, n_runs: usize, n: usize) -> Vec<PredictionSet> {
    let alphabet = ["[in:a ]", "[in:b ]", "[in:a x ]", "x ]"];
    (0..n_runs)
        .map(|r| {
            let preds: BTreeMap<u64, String> = (0..n as u64)
                .map(|i| (i, alphabet[rng.random_range(0..alphabet.len())].to_string()))
                .collect();
            PredictionSet::new(format!("r{r}"), r as u64, preds)
        })
        .collect()
}

/// Agreement by comparing every pair of runs on every example.
pub fn brute_agreement(runs: &[PredictionSet]) -> f64 {
    let ids: Vec<u64> = runs[0].predictions.keys().copied().collect();
    let mut unanimous = 0;
    for id in &ids {
        let mut all = true;
        for a in runs {
            for b in runs {
                all &= a.predictions[id] == b.predictions[id];
            }
        }
        unanimous += all as usize;
    }
    100.0 * unanimous as f64 / ids.len() as f64
}

pub fn brute_exact_match(run: &PredictionSet, gold: &Corpus) -> f64 {
    let hits = gold
        .examples
        .iter()
        .filter(|e| run.predictions.get(&e.id) == Some(&jitterlab::top_format::serialize_tree(&e.gold)))
        .count();
    100.0 * hits as f64 / gold.len() as f64
}

struct GradSpec {
    rows: usize,
    heads: usize,
    idx: Vec<usize>,
    mask: Vec<f64>,
    offset: Tensor,
    mix: Tensor,
    self_attn: Arc<AttnLayout>,
    ptr: Arc<AttnLayout>,
    ptr_width: usize,
    targets: Targets,
    temperature: f64,
    weights: Option<Vec<f64>>,
}

fn build(g: &mut Graph, s: &GradSpec) -> NodeId {
    let p: Vec<NodeId> = (0..11).map(|i| g.param(i)).collect();
    let e = g.gather(p[0], s.idx.clone());
    let x = g.add(e, p[1]);
    let h = g.layer_norm(x, p[2], p[3]);
    let q = g.matmul(h, p[4]);
    let k = g.matmul(h, p[5]);
    let v = g.matmul(h, p[6]);
    let a = g.attention(q, k, v, s.self_attn.clone(), s.heads);
    let h2 = g.add(h, a);
    let pre = g.matmul(h2, p[7]);
    let pre = g.add_row(pre, p[8]);
    let r = g.relu(pre);
    let r = g.mul(r, h2);
    let r = g.scale(r, 0.7);
    let r = g.mul_const(r, s.mask.clone());
    let r = g.add_const(r, &s.offset);
    let labels = g.matmul_t(r, p[0]);
    let copies = g.pointer(r, p[9], s.ptr.clone(), s.ptr_width);
    let z = g.concat_cols(labels, copies);
    let l1 = g.softmax_xent(z, s.targets.clone(), s.temperature, s.weights.clone());
    let o = g.matmul(r, p[10]);
    let sm = g.softmax_rows(o);
    let mix = g.constant(s.mix.clone());
    let weighted = g.mul(sm, mix);
    let l2 = g.sum(weighted);
    g.add(l1, l2)
}

fn randn(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0) * scale).collect())
}

/// Builds a random graph touching every differentiable primitive and
/// returns the largest relative error of its analytic gradient against
/// central differences (h = 1e-5). Relative error is
/// `|a − n| / max(|a|, |n|, 1e-5)`; the floor sits just above the
/// rounding noise of a difference quotient on an O(10) loss.
pub fn gradcheck_random_graph(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=2usize);
    let d = 2 * heads * rng.random_range(1..=2usize);
    let vocab = rng.random_range(3..=6usize);
    let split = rng.random_range(1..=3usize);
    let rows = split + rng.random_range(1..=3usize);
    let mem_a = rng.random_range(1..=3usize);
    let mem_b = rng.random_range(1..=3usize);
    let ptr_width = mem_a.max(mem_b);
    let causal = rng.random_bool(0.5);

    let params = vec![
        randn(&mut rng, vocab, d, 1.0),
        randn(&mut rng, rows, d, 1.0),
        randn(&mut rng, 1, d, 1.0),
        randn(&mut rng, 1, d, 0.5),
        randn(&mut rng, d, d, 0.8),
        randn(&mut rng, d, d, 0.8),
        randn(&mut rng, d, d, 0.8),
        randn(&mut rng, d, d, 0.8),
        randn(&mut rng, 1, d, 0.5),
        randn(&mut rng, mem_a + mem_b, d, 1.0),
        randn(&mut rng, d, 3, 1.0),
    ];
    let ptr_len = |i: usize| if i < split { mem_a } else { mem_b };
    let width = vocab + ptr_width;
    let soft = rng.random_bool(0.5);
    let targets = if soft {
        let mut t = Vec::with_capacity(rows * width);
        for i in 0..rows {
            let live = vocab + ptr_len(i);
            let w: Vec<f64> = (0..width)
                .map(|j| if j < live { rng.random_range(0.05..1.0) } else { 0.0 })
                .collect();
            let total: f64 = w.iter().sum();
            t.extend(w.into_iter().map(|x| x / total));
        }
        Targets::Soft(Tensor::matrix(rows, width, t))
    } else {
        Targets::Hard((0..rows).map(|i| rng.random_range(0..vocab + ptr_len(i))).collect())
    };
    let spec = GradSpec {
        rows,
        heads,
        idx: (0..rows).map(|_| rng.random_range(0..vocab)).collect(),
        mask: (0..rows * d).map(|_| rng.random_range(0.5..1.5)).collect(),
        offset: randn(&mut rng, rows, d, 0.3),
        mix: randn(&mut rng, rows, 3, 1.0),
        self_attn: Arc::new(AttnLayout {
            groups: vec![
                AttnGroup { q_start: 0, q_len: split, k_start: 0, k_len: split },
                AttnGroup { q_start: split, q_len: rows - split, k_start: split, k_len: rows - split },
            ],
            causal,
        }),
        ptr: Arc::new(AttnLayout {
            groups: vec![
                AttnGroup { q_start: 0, q_len: split, k_start: 0, k_len: mem_a },
                AttnGroup { q_start: split, q_len: rows - split, k_start: mem_a, k_len: mem_b },
            ],
            causal: false,
        }),
        ptr_width,
        targets,
        temperature: if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.5..3.0) },
        weights: rng
            .random_bool(0.5)
            .then(|| (0..rows).map(|_| rng.random_range(0.2..2.0)).collect()),
    };
    assert_eq!(spec.rows, rows);

    let analytic = {
        let mut g = Graph::new(&params);
        let loss = build(&mut g, &spec);
        g.backward(loss).expect("scalar loss")
    };
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new(ps);
        let loss = build(&mut g, &spec);
        g.value(loss).item()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut ps = params.clone();
    for t in 0..params.len() {
        for j in 0..params[t].numel() {
            let orig = params[t].data()[j];
            ps[t].data_mut()[j] = orig + h;
            let up = eval(&ps);
            ps[t].data_mut()[j] = orig - h;
            let down = eval(&ps);
            ps[t].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
        }
    }
    worst
}

fn labels_of(corpus: &Corpus, kind: jitterlab::top_format::NodeKind) -> Vec<String> {
    let mut out = Vec::new();
    for ex in &corpus.examples {
        ex.gold.root.visit(&mut |n| {
            if n.kind == kind {
                out.push(n.label.clone());
            }
        });
    }
    out
}

/// Checks one noise injection against counts taken directly from the trees.
/// Each resampled occurrence changes with probability `1 − Σ p²`, so the
/// changed count must sit within 3σ of `R (1 − Σ p²)`.
pub fn check_noise_contract(corpus: &Corpus, x: f64, seed: u64) -> Result<String, String> {
    use jitterlab::dataset::{inject_noise, NoiseConfig};
    use jitterlab::top_format::NodeKind;

    let (noisy, summary) = inject_noise(corpus, NoiseConfig { swap_fraction: x, seed })
        .map_err(|e| e.to_string())?;
    if noisy.len() != corpus.len() {
        return Err("example count changed".into());
    }
    for (a, b) in corpus.examples.iter().zip(&noisy.examples) {
        if a.id != b.id || a.utterance != b.utterance || a.gold.root.shape_signature() != b.gold.root.shape_signature() {
            return Err(format!("example {} changed shape", a.id));
        }
    }
    let mut report = Vec::new();
    for (kind, class) in [(NodeKind::Intent, &summary.intents), (NodeKind::Slot, &summary.slots)] {
        let before = labels_of(corpus, kind);
        let after = labels_of(&noisy, kind);
        let m = before.len();
        let budget = (x * m as f64).round() as usize;
        if class.occurrences != m || class.resampled != budget {
            return Err(format!("{kind:?}: resampled {} of {}, want {budget} of {m}", class.resampled, class.occurrences));
        }
        let known: std::collections::BTreeSet<&String> = before.iter().collect();
        if let Some(novel) = after.iter().find(|l| !known.contains(l)) {
            return Err(format!("{kind:?}: novel label {novel}"));
        }
        let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        if changed != class.changed || changed > budget {
            return Err(format!("{kind:?}: counted {changed} changes, summary {}", class.changed));
        }
        let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
        for l in &before {
            *counts.entry(l).or_default() += 1;
        }
        let collide: f64 = counts.values().map(|&c| (c as f64 / m as f64).powi(2)).sum();
        let mu = 1.0 - collide;
        let mean = budget as f64 * mu;
        let sigma = (budget as f64 * mu * (1.0 - mu)).sqrt();
        let z = (changed as f64 - mean) / sigma.max(f64::MIN_POSITIVE);
        if x > 0.0 && z.abs() > 3.0 {
            return Err(format!("{kind:?}: {changed} changed, expected {mean:.1} ± {sigma:.1}"));
        }
        if x == 0.0 && changed != 0 {
            return Err(format!("{kind:?}: X=0 changed {changed} labels"));
        }
        report.push(format!("{kind:?} M={m} R={budget} changed={changed} expected={mean:.1}±{sigma:.1}"));
    }
    if x == 0.0 && noisy.examples != corpus.examples {
        return Err("X=0 is not the identity".into());
    }
    Ok(report.join("; "))
}

/// Beam width 1 against greedy decoding: toy machines plus randomly
/// initialised parsers and ensembles on synthetic utterances. Returns the
/// number of cases compared.
pub fn check_beam_one_is_greedy() -> Result<usize, String> {
    use jitterlab::dataset::build_vocab;
    use jitterlab::model::{beam_search, beam_search_ids, greedy_decode, greedy_search, Ensemble, ModelConfig, ParserModel};

    let mut cases = 0;
    for salt in 0..20u64 {
        let m = ToyMachine { vocab: 6, max_len: 6, salt };
        let sources: Vec<Vec<usize>> = (0..3).map(|i| vec![i, salt as usize % 5]).collect();
        let g = greedy_search(&m, &sources);
        let b = beam_search_ids(&m, &sources, 1).map_err(|e| e.to_string())?;
        if g != b {
            return Err(format!("toy salt {salt}: {g:?} vs {b:?}"));
        }
        cases += sources.len();
    }

    let corpus = build_vocab(jitterlab::dataset::generate_synthetic(11, 40, 0.3)).map_err(|e| e.to_string())?;
    let vocab = corpus.vocab().map_err(|e| e.to_string())?.clone();
    let cfg = ModelConfig {
        encoder_dim: 16,
        decoder_dim: 16,
        output_embed_dim: 16,
        max_output_len: 24,
        ..ModelConfig::desk_student()
    };
    let utterances: Vec<Vec<String>> = corpus.examples.iter().map(|e| e.utterance.clone()).collect();
    let models: Vec<ParserModel> = (0..2)
        .map(|s| ParserModel::new(cfg.clone(), vocab.clone(), 100 + s))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for (i, m) in models.iter().enumerate() {
        let g = greedy_decode(m, &utterances);
        let b = beam_search(m, &utterances, 1).map_err(|e| e.to_string())?;
        if g != b {
            return Err(format!("parser {i} differs"));
        }
        cases += utterances.len();
    }
    let ens = Ensemble::new(models).map_err(|e| e.to_string())?;
    if greedy_decode(&ens, &utterances) != beam_search(&ens, &utterances, 1).map_err(|e| e.to_string())? {
        return Err("ensemble differs".into());
    }
    cases += utterances.len();
    Ok(cases)
}

/// Full-width beam against enumeration on machines of at most four steps.
pub fn check_beam_is_exhaustive() -> Result<usize, String> {
    let mut cases = 0;
    for salt in 0..60u64 {
        let m = ToyMachine { vocab: 4 + salt as usize % 3, max_len: 1 + salt as usize % 4, salt };
        let sources: Vec<Vec<usize>> = (0..3).map(|i| vec![i, salt as usize]).collect();
        let width = m.vocab.pow(m.max_len as u32);
        let beams = jitterlab::model::beam_search_ids(&m, &sources, width).map_err(|e| e.to_string())?;
        for (src, b) in sources.iter().zip(beams) {
            let want = exhaustive(&m, src);
            if b != want {
                return Err(format!("salt {salt}: beam {b:?} vs exhaustive {want:?}"));
            }
            cases += 1;
        }
    }
    Ok(cases)
}
