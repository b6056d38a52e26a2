//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] borrows the parameter tensors it differentiates against, so
//! building a graph never copies weights. Nodes are appended in evaluation
//! order; [`Graph::backward`] walks them in reverse and returns one gradient
//! tensor per parameter (zeros for parameters the loss does not touch).

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Rows `q_start..q_start+q_len` attend to rows `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGroup {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub groups: Vec<AttnGroup>,
    /// Query `i` of a group sees keys `0..=i + (k_len - q_len)`.
    pub causal: bool,
}

impl AttnLayout {
    fn visible(&self, g: &AttnGroup, i: usize) -> usize {
        if self.causal {
            (i + 1 + g.k_len.saturating_sub(g.q_len)).min(g.k_len)
        } else {
            g.k_len
        }
    }
}

#[derive(Debug, Clone)]
pub enum Targets {
    /// One gold index per row.
    Hard(Vec<usize>),
    /// A probability distribution per row.
    Soft(Tensor),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    AddRow { a: NodeId, bias: NodeId },
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    MulConst { a: NodeId, factor: Vec<f64> },
    AddConst(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather { table: NodeId, idx: Vec<usize> },
    ConcatCols(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Arc<AttnLayout>,
        heads: usize,
        probs: Vec<f64>,
    },
    Pointer {
        h: NodeId,
        mem: NodeId,
        layout: Arc<AttnLayout>,
        scale: f64,
    },
    SoftmaxXent {
        logits: NodeId,
        targets: Targets,
        inv_temp: f64,
        weights: Option<Vec<f64>>,
        factor: f64,
        probs: Vec<f64>,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(i) => &self.params[i],
            _ => node.value.as_ref().expect("non-param nodes own a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        assert!(index < self.params.len(), "parameter {index} out of range");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        let (m, k) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let n = if trans_b {
            assert_eq!(bc, k, "matmul_t inner dims");
            br
        } else {
            assert_eq!(br, k, "matmul inner dims");
            bc
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Add(a, b))
    }

    /// Adds a 1×c row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.value(a).dims2();
        let b = self.value(bias);
        assert_eq!(b.numel(), c, "bias width");
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.push(Tensor::matrix(r, c, out), Op::AddRow { a, bias })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu(a))
    }

    /// Elementwise product with a constant (used for dropout masks).
    pub fn mul_const(&mut self, a: NodeId, factor: Vec<f64>) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.numel(), factor.len(), "mul_const length");
        let data = va.data().iter().zip(&factor).map(|(x, f)| x * f).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::MulConst { a, factor })
    }

    /// Adds a constant tensor; gradients pass through unchanged.
    pub fn add_const(&mut self, a: NodeId, c: &Tensor) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "add_const shapes");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::AddConst(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (r, c) = self.value(x).dims2();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row lookup: output row `i` is `table[idx[i]]`.
    pub fn gather(&mut self, table: NodeId, idx: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let rows = t.rows();
        assert!(idx.iter().all(|&i| i < rows), "gather index out of range");
        let out = t.select_rows(&idx);
        self.push(out, Op::Gather { table, idx })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        assert_eq!(ra, rb, "concat_cols rows");
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        self.push(Tensor::matrix(ra, ca + cb, out), Op::ConcatCols(a, b))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (r, c) = va.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(softmax_slice(va.row(i), 1.0));
        }
        self.push(Tensor::matrix(r, c, out), Op::SoftmaxRows(a))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is nq×d, `k` and `v` are nk×d; heads split the d columns evenly.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Arc<AttnLayout>,
        heads: usize,
    ) -> NodeId {
        let (nq, d) = self.value(q).dims2();
        assert_eq!(self.value(k).cols(), d);
        assert_eq!(self.value(v).cols(), d);
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for g in &layout.groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..g.q_len {
                    let qi = &qv[(g.q_start + i) * d + off..][..dh];
                    let vis = layout.visible(g, i);
                    scores.clear();
                    for j in 0..vis {
                        let kj = &kv[(g.k_start + j) * d + off..][..dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                    let p = softmax_slice(&scores, 1.0);
                    let oi = &mut out[(g.q_start + i) * d + off..][..dh];
                    for (j, pj) in p.iter().enumerate() {
                        let vj = &vv[(g.k_start + j) * d + off..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                    probs.extend_from_slice(&p);
                    probs.resize(probs.len() + (g.k_len - vis), 0.0);
                }
            }
        }
        self.push(
            Tensor::matrix(nq, d, out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
        )
    }

    /// Pointer scores `scale · h_r · mem_j` for each query row against the
    /// memory rows of its group; output width is `width`, with positions at or
    /// beyond a group's memory length set to `-inf`.
    pub fn pointer(
        &mut self,
        h: NodeId,
        mem: NodeId,
        layout: Arc<AttnLayout>,
        width: usize,
    ) -> NodeId {
        let (nq, d) = self.value(h).dims2();
        assert_eq!(self.value(mem).cols(), d);
        let scale = 1.0 / (d as f64).sqrt();
        let (hv, mv) = (self.value(h).data(), self.value(mem).data());
        let mut out = vec![f64::NEG_INFINITY; nq * width];
        for g in &layout.groups {
            let span = g.k_len.min(width);
            for i in 0..g.q_len {
                let r = g.q_start + i;
                let hr = &hv[r * d..(r + 1) * d];
                for j in 0..span {
                    let mj = &mv[(g.k_start + j) * d..][..d];
                    out[r * width + j] = dot(hr, mj) * scale;
                }
            }
        }
        self.push(
            Tensor::matrix(nq, width, out),
            Op::Pointer {
                h,
                mem,
                layout,
                scale,
            },
        )
    }

    /// Token-level cross-entropy between targets and `softmax(logits / T)`,
    /// scaled by `T²` and averaged over rows. Optional per-row weights
    /// multiply each row's term before averaging.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: Targets,
        temperature: f64,
        weights: Option<Vec<f64>>,
    ) -> NodeId {
        assert!(temperature > 0.0, "temperature must be positive");
        let z = self.value(logits);
        let (r, c) = z.dims2();
        match &targets {
            Targets::Hard(t) => {
                assert_eq!(t.len(), r, "hard target count");
                assert!(t.iter().all(|&i| i < c), "target index out of range");
            }
            Targets::Soft(q) => assert_eq!(q.dims2(), (r, c), "soft target shape"),
        }
        if let Some(w) = &weights {
            assert_eq!(w.len(), r, "row weight count");
        }
        let inv_temp = 1.0 / temperature;
        let factor = temperature * temperature / r.max(1) as f64;
        let mut probs = Vec::with_capacity(r * c);
        let mut total = 0.0;
        for i in 0..r {
            let row = z.row(i);
            let lse = log_sum_exp(row, inv_temp);
            let row_loss = match &targets {
                Targets::Hard(t) => -(row[t[i]] * inv_temp - lse),
                Targets::Soft(q) => q
                    .row(i)
                    .iter()
                    .zip(row)
                    .filter(|(qi, _)| **qi != 0.0)
                    .map(|(qi, zi)| -qi * (zi * inv_temp - lse))
                    .sum(),
            };
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            total += w * row_loss;
            probs.extend(row.iter().map(|zi| (zi * inv_temp - lse).exp()));
        }
        self.push(
            Tensor::scalar(total * factor),
            Op::SoftmaxXent {
                logits,
                targets,
                inv_temp,
                weights,
                factor,
                probs,
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Gradients of a scalar node with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Tensor>, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut param_grads: Vec<Tensor> =
            self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = node.value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::Param(i) => param_grads[*i].add_assign(&g),
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2();
                    let n = g.cols();
                    let mut da = vec![0.0; m * k];
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g.data(), false, bv.data(), !trans_b, &mut da, 0.0);
                    let db = if *trans_b {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), true, av.data(), false, &mut db, 0.0);
                        Tensor::matrix(n, k, db)
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                        Tensor::matrix(k, n, db)
                    };
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, da));
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow { a, bias } => {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *bias, Tensor::new(bshape, db).unwrap());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, bv, |x, y| x * y);
                    let db = zip_map(&g, av, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, map(&g, |x| x * s));
                }
                Op::Relu(a) => {
                    let y = out.unwrap();
                    let da = zip_map(&g, y, |gx, yx| if yx > 0.0 { gx } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::MulConst { a, factor } => {
                    let da = g.data().iter().zip(factor).map(|(x, f)| x * f).collect();
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = g.dims2();
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; r * c];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let gr = g.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::matrix(r, c, dx));
                    accumulate(&mut grads, *gamma, Tensor::new(gshape, dgamma).unwrap());
                    accumulate(&mut grads, *beta, Tensor::new(bshape, dbeta).unwrap());
                }
                Op::Gather { table, idx } => {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, x) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    debug_assert_eq!(dt.cols(), c);
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let r = g.rows();
                    let mut da = Vec::with_capacity(r * ca);
                    let mut db = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        let row = g.row(i);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(r, ca, da));
                    accumulate(&mut grads, *b, Tensor::matrix(r, cb, db));
                }
                Op::SoftmaxRows(a) => {
                    let y = out.unwrap();
                    let (r, c) = y.dims2();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let s = dot(yr, gr);
                        for j in 0..c {
                            da[i * c + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(r, c, da));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, *heads, probs, &g);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Pointer {
                    h,
                    mem,
                    layout,
                    scale,
                } => {
                    let (hv, mv) = (self.value(*h), self.value(*mem));
                    let d = hv.cols();
                    let width = g.cols();
                    let mut dh = Tensor::zeros(hv.shape());
                    let mut dm = Tensor::zeros(mv.shape());
                    for grp in &layout.groups {
                        let span = grp.k_len.min(width);
                        for i in 0..grp.q_len {
                            let r = grp.q_start + i;
                            for j in 0..span {
                                let gij = g.data()[r * width + j] * scale;
                                if gij == 0.0 {
                                    continue;
                                }
                                let mrow = grp.k_start + j;
                                for t in 0..d {
                                    dh.data_mut()[r * d + t] += gij * mv.data()[mrow * d + t];
                                    dm.data_mut()[mrow * d + t] += gij * hv.data()[r * d + t];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *h, dh);
                    accumulate(&mut grads, *mem, dm);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    inv_temp,
                    weights,
                    factor,
                    probs,
                } => {
                    let (r, c) = self.value(*logits).dims2();
                    let up = g.item() * factor * inv_temp;
                    let mut dz = vec![0.0; r * c];
                    for i in 0..r {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]) * up;
                        let p = &probs[i * c..(i + 1) * c];
                        let dzr = &mut dz[i * c..(i + 1) * c];
                        match targets {
                            Targets::Hard(t) => {
                                for j in 0..c {
                                    dzr[j] = w * p[j];
                                }
                                dzr[t[i]] -= w;
                            }
                            Targets::Soft(qt) => {
                                let qr = qt.row(i);
                                let mass: f64 = qr.iter().sum();
                                for j in 0..c {
                                    dzr[j] = w * (p[j] * mass - qr[j]);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::matrix(r, c, dz));
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&shape, g.item()));
                }
            }
        }
        Ok(param_grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &AttnLayout,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let gd = g.data();
        let mut offset = 0;
        let mut dp = Vec::new();
        for grp in &layout.groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..grp.q_len {
                    let qi_row = grp.q_start + i;
                    let p = &probs[offset..offset + grp.k_len];
                    offset += grp.k_len;
                    let vis = layout.visible(grp, i);
                    let go = &gd[qi_row * d + off..][..dh];
                    dp.clear();
                    for j in 0..vis {
                        let vrow = (grp.k_start + j) * d + off;
                        dp.push(dot(go, &vv.data()[vrow..vrow + dh]));
                        let dvj = &mut dv.data_mut()[vrow..vrow + dh];
                        for (x, y) in dvj.iter_mut().zip(go) {
                            *x += p[j] * y;
                        }
                    }
                    let s: f64 = (0..vis).map(|j| p[j] * dp[j]).sum();
                    for j in 0..vis {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (grp.k_start + j) * d + off;
                        let qrow = qi_row * d + off;
                        for t in 0..dh {
                            dq.data_mut()[qrow + t] += ds * kv.data()[krow + t];
                            dk.data_mut()[krow + t] += ds * qv.data()[qrow + t];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log Σ exp(z_i · inv_temp)` with max-subtraction; `-inf` entries contribute 0.
pub(crate) fn log_sum_exp(z: &[f64], inv_temp: f64) -> f64 {
    let m = z
        .iter()
        .map(|v| v * inv_temp)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v * inv_temp - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_slice(z: &[f64], inv_temp: f64) -> Vec<f64> {
    let m = z
        .iter()
        .map(|v| v * inv_temp)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = z.iter().map(|v| (v * inv_temp - m).exp()).collect();
    let s: f64 = e.iter().sum();
    for x in &mut e {
        *x /= s;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let params = [Tensor::scalar(3.0)];
        let mut g = Graph::new(&params);
        let x = g.param(0);
        let y = g.mul(x, x);
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn disconnected_param_has_zero_grad() {
        let params = [Tensor::scalar(2.0), Tensor::matrix(2, 2, vec![1.0; 4])];
        let mut g = Graph::new(&params);
        let x = g.param(0);
        let _unused = g.param(1);
        let y = g.scale(x, 5.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[0].item(), 5.0);
        assert_eq!(grads[1], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let params = [Tensor::matrix(1, 2, vec![1.0, 2.0])];
        let mut g = Graph::new(&params);
        let x = g.param(0);
        assert!(matches!(
            g.backward(x),
            Err(NumericsError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn hard_and_one_hot_soft_targets_agree() {
        let params = [Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1])];
        let mut g = Graph::new(&params);
        let z = g.param(0);
        let hard = g.softmax_xent(z, Targets::Hard(vec![2, 0]), 1.0, None);
        let onehot = Tensor::matrix(2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let soft = g.softmax_xent(z, Targets::Soft(onehot), 1.0, None);
        assert!((g.value(hard).item() - g.value(soft).item()).abs() < 1e-12);
        let gh = g.backward(hard).unwrap();
        let gs = g.backward(soft).unwrap();
        for (a, b) in gh[0].data().iter().zip(gs[0].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_pointer_positions_are_neg_inf() {
        let params = [
            Tensor::matrix(1, 2, vec![1.0, 0.0]),
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]),
        ];
        let mut g = Graph::new(&params);
        let h = g.param(0);
        let m = g.param(1);
        let layout = Arc::new(AttnLayout {
            groups: vec![AttnGroup {
                q_start: 0,
                q_len: 1,
                k_start: 0,
                k_len: 2,
            }],
            causal: false,
        });
        let p = g.pointer(h, m, layout, 4);
        let row = g.value(p).row(0).to_vec();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(row[0], s);
        assert_eq!(row[1], 3.0 * s);
        assert_eq!(row[2], f64::NEG_INFINITY);
        assert_eq!(row[3], f64::NEG_INFINITY);
        let sm = softmax_slice(&row, 1.0);
        assert_eq!(sm[2], 0.0);
        assert_eq!(sm[3], 0.0);
    }
}
