use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::numerics::Tensor;

/// Feed-forward hidden width as a multiple of the layer width.
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attn {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ffn {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayer {
    pub norm1: Norm,
    pub attn: Attn,
    pub norm2: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayer {
    pub norm1: Norm,
    pub self_attn: Attn,
    pub norm2: Norm,
    pub cross: Attn,
    pub norm3: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Parameter indices of one network, plus the ordered (name, shape, init)
/// table they index into.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub src_embed: usize,
    pub enc_layers: Vec<EncLayer>,
    pub enc_norm: Norm,
    pub mem_w: usize,
    pub mem_b: usize,
    pub tgt_embed: usize,
    pub dec_in_w: usize,
    pub dec_layers: Vec<DecLayer>,
    pub dec_norm: Norm,
    pub out_w: usize,
    pub out_b: usize,
    specs: Vec<(String, [usize; 2], Init)>,
}

struct Builder {
    specs: Vec<(String, [usize; 2], Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: [usize; 2], init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.add(name, [rows, cols], Init::Normal(1.0 / (rows as f64).sqrt()))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), [1, d], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), [1, d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, dq: usize, dkv: usize) -> Attn {
        Attn {
            wq: self.weight(format!("{prefix}.wq"), dq, dq),
            wk: self.weight(format!("{prefix}.wk"), dkv, dq),
            wv: self.weight(format!("{prefix}.wv"), dkv, dq),
            wo: self.weight(format!("{prefix}.wo"), dq, dq),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize) -> Ffn {
        let h = d * FFN_MULT;
        Ffn {
            w1: self.weight(format!("{prefix}.w1"), d, h),
            b1: self.add(format!("{prefix}.b1"), [1, h], Init::Zeros),
            w2: self.weight(format!("{prefix}.w2"), h, d),
            b2: self.add(format!("{prefix}.b2"), [1, d], Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig, source_vocab: usize, label_count: usize) -> Self {
        let (de, dd, dout) = (cfg.encoder_dim, cfg.decoder_dim, cfg.output_embed_dim);
        let mut b = Builder { specs: Vec::new() };
        let src_embed = b.add("encoder.embed".into(), [source_vocab, de], Init::Normal(1.0));
        let enc_layers = (0..cfg.encoder_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                EncLayer {
                    norm1: b.norm(&format!("{p}.norm1"), de),
                    attn: b.attn(&format!("{p}.attn"), de, de),
                    norm2: b.norm(&format!("{p}.norm2"), de),
                    ffn: b.ffn(&format!("{p}.ffn"), de),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.norm", de);
        let mem_w = b.weight("encoder.proj.w".into(), de, dout);
        let mem_b = b.add("encoder.proj.b".into(), [1, dout], Init::Zeros);
        let tgt_embed = b.add(
            "target.embed".into(),
            [label_count, dout],
            Init::Normal(1.0 / (dout as f64).sqrt()),
        );
        let dec_in_w = b.weight("decoder.in.w".into(), dout, dd);
        let dec_layers = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                DecLayer {
                    norm1: b.norm(&format!("{p}.norm1"), dd),
                    self_attn: b.attn(&format!("{p}.self"), dd, dd),
                    norm2: b.norm(&format!("{p}.norm2"), dd),
                    cross: b.attn(&format!("{p}.cross"), dd, de),
                    norm3: b.norm(&format!("{p}.norm3"), dd),
                    ffn: b.ffn(&format!("{p}.ffn"), dd),
                }
            })
            .collect();
        let dec_norm = b.norm("decoder.norm", dd);
        let out_w = b.weight("decoder.out.w".into(), dd, dout);
        let out_b = b.add("decoder.out.b".into(), [1, label_count], Init::Zeros);
        Layout {
            src_embed,
            enc_layers,
            enc_norm,
            mem_w,
            mem_b,
            tgt_embed,
            dec_in_w,
            dec_layers,
            dec_norm,
            out_w,
            out_b,
            specs: b.specs,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn shape(&self, i: usize) -> [usize; 2] {
        self.specs[i].1
    }

    pub fn parameter_count(&self) -> usize {
        self.specs.iter().map(|(_, [r, c], _)| r * c).sum()
    }

    pub fn initialize(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .specs
            .iter()
            .map(|(_, [r, c], init)| {
                let data = match *init {
                    Init::Zeros => vec![0.0; r * c],
                    Init::Ones => vec![1.0; r * c],
                    Init::Normal(std) => {
                        let n = Normal::new(0.0, std).expect("positive std");
                        (0..r * c).map(|_| n.sample(&mut rng)).collect()
                    }
                };
                Tensor::matrix(*r, *c, data)
            })
            .collect();
        ModelParams {
            names: self.names().map(String::from).collect(),
            tensors,
        }
    }
}

/// All trainable weights of one parser, keyed by layer path.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn total_parameter_count(&self) -> usize {
        count_parameters(self)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

pub fn count_parameters(params: &ModelParams) -> usize {
    params.tensors.iter().map(Tensor::numel).sum()
}
