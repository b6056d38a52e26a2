//! Forward computation of the encoder-decoder on packed batches.
//!
//! All tokens of a batch live in one matrix; attention layouts record which
//! rows belong to which example. Decoder inputs for copy symbols are the
//! projected encoder states at the copied position, so a copied word is fed
//! back as what it is rather than as an anonymous position index.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Attn, Ffn, Norm};
use super::{ModelError, ParserModel};
use crate::dataset::{Vocabularies, BOS, EOS, PAD, RESERVED, UNK};
use crate::numerics::{AttnGroup, AttnLayout, Graph, NodeId, Tensor};

/// Inverted dropout with its own random stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Stream 0 initialises weights and stream 1 orders data.
        rng.set_stream(2);
        Dropout { rate, rng }
    }

    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let n = g.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random_bool(keep) {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        g.mul_const(x, mask)
    }
}

fn maybe_drop(g: &mut Graph, x: NodeId, dropout: &mut Option<&mut Dropout>) -> NodeId {
    match dropout {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

/// Teacher-forced training batch: `<s>` + symbols as decoder input, symbols
/// + `</s>` as targets, one row per target position.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub(crate) src: Vec<usize>,
    pub(crate) src_spans: Vec<(usize, usize)>,
    pub(crate) dec_in: Vec<usize>,
    pub(crate) tgt_spans: Vec<(usize, usize)>,
    pub targets: Vec<usize>,
}

impl Batch {
    /// `items` are (source ids, target symbols without `</s>`).
    pub fn new(
        vocab: &Vocabularies,
        max_output_len: usize,
        items: &[(&[usize], &[usize])],
    ) -> Result<Self, ModelError> {
        let mut b = Batch {
            src: Vec::new(),
            src_spans: Vec::new(),
            dec_in: Vec::new(),
            tgt_spans: Vec::new(),
            targets: Vec::new(),
        };
        for (src, tgt) in items {
            if src.is_empty() {
                return Err(ModelError::EmptySource);
            }
            if tgt.len() + 1 > max_output_len {
                return Err(ModelError::TargetTooLong {
                    length: tgt.len() + 1,
                    max: max_output_len,
                });
            }
            for &s in tgt.iter() {
                let bad = s < RESERVED.len()
                    || s >= vocab.target_len()
                    || vocab.copy_position(s).is_some_and(|p| p >= src.len());
                if bad {
                    return Err(ModelError::UnknownSymbol { symbol: s });
                }
            }
            b.src_spans.push((b.src.len(), src.len()));
            b.src.extend_from_slice(src);
            b.tgt_spans.push((b.dec_in.len(), tgt.len() + 1));
            b.dec_in.push(BOS);
            b.dec_in.extend_from_slice(tgt);
            b.targets.extend_from_slice(tgt);
            b.targets.push(EOS);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.src_spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_spans.is_empty()
    }

    /// Number of target positions (rows of the logits matrix).
    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    /// Row range of each example in the logits matrix.
    pub fn row_spans(&self) -> &[(usize, usize)] {
        &self.tgt_spans
    }
}

/// `sin`/`cos` position table with `n` rows.
pub(crate) fn sinusoid(n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let k = (i / 2) as f64 * 2.0 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(k);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn positions(spans: &[(usize, usize)], d: usize) -> Tensor {
    let longest = spans.iter().map(|s| s.1).max().unwrap_or(0);
    let table = sinusoid(longest, d);
    let mut out = Vec::with_capacity(spans.iter().map(|s| s.1).sum::<usize>() * d);
    for &(_, len) in spans {
        out.extend_from_slice(&table[..len * d]);
    }
    Tensor::matrix(out.len() / d, d, out)
}

fn layout(q: &[(usize, usize)], k: &[(usize, usize)], causal: bool) -> Arc<AttnLayout> {
    Arc::new(AttnLayout {
        groups: q
            .iter()
            .zip(k)
            .map(|(&(qs, ql), &(ks, kl))| AttnGroup {
                q_start: qs,
                q_len: ql,
                k_start: ks,
                k_len: kl,
            })
            .collect(),
        causal,
    })
}

/// Encoder outputs as plain tensors, reusable across decoding steps.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub(crate) hidden: Tensor,
    pub(crate) memory: Tensor,
    pub(crate) spans: Vec<(usize, usize)>,
}

impl ParserModel {
    fn norm(&self, g: &mut Graph, x: NodeId, n: Norm) -> NodeId {
        let (gamma, beta) = (g.param(n.gamma), g.param(n.beta));
        g.layer_norm(x, gamma, beta)
    }

    fn attend(
        &self,
        g: &mut Graph,
        x: NodeId,
        kv: NodeId,
        a: Attn,
        layout: Arc<AttnLayout>,
        heads: usize,
    ) -> NodeId {
        let (wq, wk, wv, wo) = (g.param(a.wq), g.param(a.wk), g.param(a.wv), g.param(a.wo));
        let q = g.matmul(x, wq);
        let k = g.matmul(kv, wk);
        let v = g.matmul(kv, wv);
        let h = g.attention(q, k, v, layout, heads);
        g.matmul(h, wo)
    }

    fn feed_forward(&self, g: &mut Graph, x: NodeId, f: Ffn) -> NodeId {
        let (w1, b1, w2, b2) = (g.param(f.w1), g.param(f.b1), g.param(f.w2), g.param(f.b2));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }

    /// Returns (contextual states, projected memory).
    pub(crate) fn encode_graph(
        &self,
        g: &mut Graph,
        src: &[usize],
        spans: &[(usize, usize)],
        dropout: &mut Option<&mut Dropout>,
    ) -> (NodeId, NodeId) {
        let cfg = &self.config;
        let l = &self.layout;
        let table = g.param(l.src_embed);
        let x = g.gather(table, src.to_vec());
        let x = g.add_const(x, &positions(spans, cfg.encoder_dim));
        let mut x = maybe_drop(g, x, dropout);
        let lay = layout(spans, spans, false);
        for layer in &l.enc_layers {
            let h = self.norm(g, x, layer.norm1);
            let h = self.attend(g, h, h, layer.attn, lay.clone(), cfg.encoder_heads);
            x = g.add(x, h);
            let h = self.norm(g, x, layer.norm2);
            let h = self.feed_forward(g, h, layer.ffn);
            x = g.add(x, h);
        }
        let hidden = self.norm(g, x, l.enc_norm);
        let hidden = maybe_drop(g, hidden, dropout);
        let (w, b) = (g.param(l.mem_w), g.param(l.mem_b));
        let mem = g.matmul(hidden, w);
        let mem = g.add_row(mem, b);
        (hidden, mem)
    }

    /// Final decoder states, one row per decoder input symbol.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn decoder_graph(
        &self,
        g: &mut Graph,
        hidden: NodeId,
        memory: NodeId,
        src_spans: &[(usize, usize)],
        dec_in: &[usize],
        tgt_spans: &[(usize, usize)],
        dropout: &mut Option<&mut Dropout>,
    ) -> NodeId {
        let cfg = &self.config;
        let l = &self.layout;
        let dout = cfg.output_embed_dim;
        let labels = self.vocab.label_count();
        let label_scale = (dout as f64).sqrt();
        let mut label_idx = Vec::with_capacity(dec_in.len());
        let mut copy_idx = Vec::with_capacity(dec_in.len());
        let mut label_mask = Vec::with_capacity(dec_in.len() * dout);
        let mut copy_mask = Vec::with_capacity(dec_in.len() * dout);
        for (&(ts, tl), &(ss, _)) in tgt_spans.iter().zip(src_spans) {
            for &s in &dec_in[ts..ts + tl] {
                if s >= labels {
                    label_idx.push(PAD);
                    copy_idx.push(ss + (s - labels));
                    label_mask.extend(std::iter::repeat_n(0.0, dout));
                    copy_mask.extend(std::iter::repeat_n(1.0, dout));
                } else {
                    label_idx.push(s);
                    copy_idx.push(ss);
                    label_mask.extend(std::iter::repeat_n(label_scale, dout));
                    copy_mask.extend(std::iter::repeat_n(0.0, dout));
                }
            }
        }
        let table = g.param(l.tgt_embed);
        let a = g.gather(table, label_idx);
        let a = g.mul_const(a, label_mask);
        let b = g.gather(memory, copy_idx);
        let b = g.mul_const(b, copy_mask);
        let x = g.add(a, b);
        let w_in = g.param(l.dec_in_w);
        let x = g.matmul(x, w_in);
        let x = g.add_const(x, &positions(tgt_spans, cfg.decoder_dim));
        let mut x = maybe_drop(g, x, dropout);
        let self_lay = layout(tgt_spans, tgt_spans, true);
        let cross_lay = layout(tgt_spans, src_spans, false);
        for layer in &l.dec_layers {
            let h = self.norm(g, x, layer.norm1);
            let h = self.attend(g, h, h, layer.self_attn, self_lay.clone(), cfg.decoder_heads);
            x = g.add(x, h);
            let h = self.norm(g, x, layer.norm2);
            let h = self.attend(g, h, hidden, layer.cross, cross_lay.clone(), cfg.decoder_heads);
            x = g.add(x, h);
            let h = self.norm(g, x, layer.norm3);
            let h = self.feed_forward(g, h, layer.ffn);
            x = g.add(x, h);
        }
        self.norm(g, x, l.dec_norm)
    }

    /// Logits over the full target vocabulary for each row of `states`.
    /// `row_groups[i]` gives the rows of one example and its source span.
    pub(crate) fn output_graph(
        &self,
        g: &mut Graph,
        states: NodeId,
        memory: NodeId,
        row_groups: &[(usize, usize)],
        src_spans: &[(usize, usize)],
        dropout: &mut Option<&mut Dropout>,
    ) -> NodeId {
        let l = &self.layout;
        let w = g.param(l.out_w);
        let o = g.matmul(states, w);
        let o = maybe_drop(g, o, dropout);
        let table = g.param(l.tgt_embed);
        let labels = g.matmul_t(o, table);
        let bias = g.param(l.out_b);
        let labels = g.add_row(labels, bias);
        let copies = g.pointer(o, memory, layout(row_groups, src_spans, false), self.vocab.copy_len);
        let logits = g.concat_cols(labels, copies);
        let (rows, cols) = g.value(logits).dims2();
        let mut mask = vec![0.0; rows * cols];
        for r in 0..rows {
            for s in [PAD, UNK, BOS] {
                mask[r * cols + s] = f64::NEG_INFINITY;
            }
        }
        g.add_const(logits, &Tensor::matrix(rows, cols, mask))
    }

    /// Teacher-forced logits node (rows × target vocabulary) for a batch.
    pub fn batch_logits(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mut dropout: Option<&mut Dropout>,
    ) -> NodeId {
        let (hidden, memory) = self.encode_graph(g, &batch.src, &batch.src_spans, &mut dropout);
        let states = self.decoder_graph(
            g,
            hidden,
            memory,
            &batch.src_spans,
            &batch.dec_in,
            &batch.tgt_spans,
            &mut dropout,
        );
        self.output_graph(g, states, memory, &batch.tgt_spans, &batch.src_spans, &mut dropout)
    }

    /// Teacher-forced logits without dropout.
    pub fn teacher_forced_logits(&self, batch: &Batch) -> Tensor {
        let mut g = Graph::new(&self.params.tensors);
        let z = self.batch_logits(&mut g, batch, None);
        g.value(z).clone()
    }

    pub(crate) fn encode_sources(&self, sources: &[Vec<usize>]) -> Encoded {
        let mut spans = Vec::with_capacity(sources.len());
        let mut src = Vec::new();
        for s in sources {
            spans.push((src.len(), s.len()));
            src.extend_from_slice(s);
        }
        let mut g = Graph::new(&self.params.tensors);
        let (h, m) = self.encode_graph(&mut g, &src, &spans, &mut None);
        Encoded {
            hidden: g.value(h).clone(),
            memory: g.value(m).clone(),
            spans,
        }
    }

    /// Next-symbol logits after each `(example, prefix)` query.
    pub(crate) fn next_logits(&self, enc: &Encoded, queries: &[(usize, &[usize])]) -> Tensor {
        let mut g = Graph::new(&self.params.tensors);
        let hidden = g.constant(enc.hidden.clone());
        let memory = g.constant(enc.memory.clone());
        let mut dec_in = Vec::new();
        let mut tgt_spans = Vec::with_capacity(queries.len());
        let mut src_spans = Vec::with_capacity(queries.len());
        let mut last = Vec::with_capacity(queries.len());
        for &(ex, prefix) in queries {
            tgt_spans.push((dec_in.len(), prefix.len() + 1));
            dec_in.push(BOS);
            dec_in.extend_from_slice(prefix);
            last.push(dec_in.len() - 1);
            src_spans.push(enc.spans[ex]);
        }
        let states =
            self.decoder_graph(&mut g, hidden, memory, &src_spans, &dec_in, &tgt_spans, &mut None);
        let states = g.gather(states, last);
        let groups: Vec<(usize, usize)> = (0..queries.len()).map(|i| (i, 1)).collect();
        let z = self.output_graph(&mut g, states, memory, &groups, &src_spans, &mut None);
        g.value(z).clone()
    }
}
