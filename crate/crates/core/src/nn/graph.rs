//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into the nodes that
//! require them; parameter gradients are then read back per store slot.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse linear recombination of rows: output row `r` is
/// `sum(weight * input[index])` over `entries[r]`.
#[derive(Debug, Clone, Default)]
pub struct RowMix {
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(indices: &[usize]) -> Self {
        RowMix {
            entries: indices.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Averages consecutive runs of `size` rows.
    pub fn segment_mean(total: usize, size: usize) -> Self {
        let w = 1.0 / size as f64;
        RowMix {
            entries: (0..total / size)
                .map(|g| (0..size).map(|k| (g * size + k, w)).collect())
                .collect(),
        }
    }

    pub fn mean_of(groups: &[Vec<usize>]) -> Self {
        RowMix {
            entries: groups
                .iter()
                .map(|g| {
                    let w = 1.0 / g.len().max(1) as f64;
                    g.iter().map(|&i| (i, w)).collect()
                })
                .collect(),
        }
    }
}

/// What a softmax group is supervised towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupTarget {
    /// Position within the group's `cols`.
    Column(usize),
    /// The extra no-detection logit of the group.
    Absent,
}

/// One softmax-normalised group of logits taken from a row of the score matrix.
#[derive(Debug, Clone)]
pub struct NllGroup {
    pub row: usize,
    pub cols: Vec<usize>,
    pub include_absent: bool,
    pub target: GroupTarget,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    SpatialMean(Var),
    Reshape(Var),
    RowMix(Var, Rc<RowMix>),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SumSqRows(Var),
    SegmentMin {
        x: Var,
        argmin: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    GroupNll {
        scores: Var,
        absent: Option<Var>,
        groups: Rc<Vec<NllGroup>>,
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of which ReLU inputs are positive; equal signatures mean the
    /// same linear piece of a piecewise-linear network.
    pub fn relu_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in &self.value(x).data {
                    (v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf whose gradient can be read with [`Graph::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(k, tb.rows(), "matmul inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        assert_eq!(k, tb.cols(), "matmul_t inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add shapes");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "sub shapes");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.len();
        assert_eq!(tx.len() % n, 0, "bias length");
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(&tb.data) {
                *v += bb;
            }
        }
        let t = Tensor { shape: tx.shape.clone(), data };
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddBias(x, b), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v.max(0.0)).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v * s).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v + s).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// Square-kernel convolution over channel-last `[B, H, W, C]` input with
    /// weights `[O, K, K, C]` and bias `[O]`; output is `[B, H', W', O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.shape.len(), 4, "conv input must be [B,H,W,C]");
        assert_eq!(tw.shape.len(), 4, "conv weight must be [O,K,K,C]");
        let (batch, in_h, in_w, in_c) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (out_c, kernel) = (tw.shape[0], tw.shape[1]);
        assert_eq!(tw.shape[3], in_c, "conv channel mismatch");
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            kernel,
            stride,
            pad,
        };
        let cols = im2col(&tx.data, &geom);
        let rows = batch * out_h * out_w;
        let patch = kernel * kernel * in_c;
        let mut out = vec![0.0; rows * out_c];
        gemm(rows, patch, out_c, &cols, false, &tw.data, true, &mut out, false);
        let tb = self.value(b);
        for r in out.chunks_mut(out_c) {
            for (v, bb) in r.iter_mut().zip(&tb.data) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor {
                shape: vec![batch, out_h, out_w, out_c],
                data: out,
            },
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        )
    }

    /// Global average over the spatial axes of `[B, H, W, C]`, giving `[B, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (b, h, w, c) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for px in tx.data[bi * h * w * c..(bi + 1) * h * w * c].chunks(c) {
                for (acc, v) in o.iter_mut().zip(px) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        self.push(Tensor { shape: vec![b, c], data: out }, Op::SpatialMean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let tx = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), tx.len(), "reshape size");
        let t = Tensor {
            shape: shape.to_vec(),
            data: tx.data.clone(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn row_mix(&mut self, x: Var, mix: Rc<RowMix>) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = vec![0.0; mix.entries.len() * c];
        for (r, entries) in mix.entries.iter().enumerate() {
            let o = &mut out[r * c..(r + 1) * c];
            for &(i, wt) in entries {
                for (acc, v) in o.iter_mut().zip(tx.row(i)) {
                    *acc += wt * v;
                }
            }
        }
        let t = Tensor {
            shape: vec![mix.entries.len(), c],
            data: out,
        };
        let rg = self.rg(x);
        self.push(t, Op::RowMix(x, mix), rg)
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        self.row_mix(x, Rc::new(RowMix::gather(indices)))
    }

    /// Scaled dot-product attention run independently in each of `groups`
    /// blocks: queries `[G*bq, d]`, keys `[G*bk, d]`, values `[G*bk, dv]`.
    /// With `heads > 1` the feature axes are split into equal column slices
    /// that attend separately.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dv = tv.cols();
        assert_eq!(d, tk.cols(), "query/key dimension");
        assert_eq!(tk.rows(), tv.rows(), "key/value count");
        assert!(groups > 0 && tq.rows() % groups == 0 && tk.rows() % groups == 0);
        assert!(heads > 0 && d % heads == 0 && dv % heads == 0, "head split");
        let bq = tq.rows() / groups;
        let bk = tk.rows() / groups;
        assert!(bk > 0, "attention over an empty key set");
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; groups * bq * heads * bk];
        let mut out = vec![0.0; groups * bq * dv];
        for g in 0..groups {
            for i in 0..bq {
                let qi = g * bq + i;
                for h in 0..heads {
                    let qh = &tq.row(qi)[h * dh..(h + 1) * dh];
                    let p = &mut probs[(qi * heads + h) * bk..(qi * heads + h + 1) * bk];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = dot(qh, &tk.row(g * bk + j)[h * dh..(h + 1) * dh]) * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vr = &tv.row(g * bk + j)[h * dvh..(h + 1) * dvh];
                        for (acc, x) in o.iter_mut().zip(vr) {
                            *acc += pj * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor {
                shape: vec![groups * bq, dv],
                data: out,
            },
            Op::BlockAttention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let tx = self.value(x);
        let (tg, tb) = (self.value(gain), self.value(bias));
        let c = tx.cols();
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * tg.data[j] + tb.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor {
                shape: tx.shape.clone(),
                data: out,
            },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Scales each row to unit Euclidean length (with a tiny floor).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-12;
        let tx = self.value(x);
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = tx.data.clone();
        for row in out.chunks_mut(c) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data: out,
        };
        let rg = self.rg(x);
        self.push(t, Op::NormalizeRows { x, norms }, rg)
    }

    /// Squared Euclidean length of each row, as `[rows, 1]`.
    pub fn sum_sq_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let data: Vec<f64> = tx.data.chunks(c).map(|r| r.iter().map(|v| v * v).sum()).collect();
        let t = Tensor {
            shape: vec![data.len(), 1],
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::SumSqRows(x), rg)
    }

    /// Minimum over consecutive runs of `size` entries; ties pick the first.
    pub fn segment_min(&mut self, x: Var, size: usize) -> Var {
        let tx = self.value(x);
        assert!(size > 0 && tx.len() % size == 0, "segment size");
        let mut argmin = Vec::with_capacity(tx.len() / size);
        let mut data = Vec::with_capacity(tx.len() / size);
        for (g, seg) in tx.data.chunks(size).enumerate() {
            let mut best = 0;
            for (i, v) in seg.iter().enumerate() {
                if *v < seg[best] {
                    best = i;
                }
            }
            argmin.push(g * size + best);
            data.push(seg[best]);
        }
        let t = Tensor {
            shape: vec![data.len(), 1],
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::SegmentMin { x, argmin }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over groups of `-log softmax(logits)[target]`. Each group draws its
    /// logits from one row of `scores` and, when `include_absent`, from the
    /// matching row of the `[rows, 1]` column `absent`.
    pub fn group_nll(&mut self, scores: Var, absent: Option<Var>, groups: Rc<Vec<NllGroup>>) -> Var {
        let ts = self.value(scores);
        let ta = absent.map(|a| self.value(a));
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(groups.len());
        for g in groups.iter() {
            let row = ts.row(g.row);
            let mut logits: Vec<f64> = g.cols.iter().map(|&c| row[c]).collect();
            if g.include_absent {
                let a = ta.expect("absent logits required by group");
                logits.push(a.data[g.row]);
            }
            softmax_in_place(&mut logits);
            let t = match g.target {
                GroupTarget::Column(c) => c,
                GroupTarget::Absent => {
                    assert!(g.include_absent, "absent target without absent logit");
                    logits.len() - 1
                }
            };
            total -= logits[t].max(f64::MIN_POSITIVE).ln();
            probs.push(logits);
        }
        let rg = self.rg(scores) || absent.is_some_and(|a| self.rg(a));
        self.push(
            Tensor::scalar(total),
            Op::GroupNll {
                scores,
                absent,
                groups,
                probs,
            },
            rg,
        )
    }

    /// Back-propagates from the scalar `output`.
    pub fn backward(&mut self, output: Var) {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar");
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients summed per store slot (zero when unused).
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = self.grads.get(i).and_then(Option::as_ref) {
                    out[id.index()].add_assign(g);
                }
            }
        }
        out
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, idx: usize, g: &Tensor) {
        // The op is moved out for the duration so node values stay borrowable
        // while gradients are pushed.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let ga = self.rg(*a).then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, false, &tb.data, true, &mut d, false);
                    Tensor { shape: ta.shape.clone(), data: d }
                });
                let gb = self.rg(*b).then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, true, &g.data, false, &mut d, false);
                    Tensor { shape: tb.shape.clone(), data: d }
                });
                if let Some(t) = ga {
                    self.accumulate(*a, t);
                }
                if let Some(t) = gb {
                    self.accumulate(*b, t);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let ga = self.rg(*a).then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, false, &tb.data, false, &mut d, false);
                    Tensor { shape: ta.shape.clone(), data: d }
                });
                let gb = self.rg(*b).then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, &g.data, true, &ta.data, false, &mut d, false);
                    Tensor { shape: tb.shape.clone(), data: d }
                });
                if let Some(t) = ga {
                    self.accumulate(*a, t);
                }
                if let Some(t) = gb {
                    self.accumulate(*b, t);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                let neg = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| -v).collect(),
                };
                self.accumulate(*b, neg);
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                let mut gb = vec![0.0; n];
                for row in g.data.chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let shape = self.value(*b).shape.clone();
                self.accumulate(*x, g.clone());
                self.accumulate(*b, Tensor { shape, data: gb });
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let data = tx
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                let t = Tensor { shape: tx.shape.clone(), data };
                self.accumulate(*x, t);
            }
            Op::Scale(x, s) => {
                let t = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| v * s).collect(),
                };
                self.accumulate(*x, t);
            }
            Op::AddScalar(x) => self.accumulate(*x, g.clone()),
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.batch * geom.out_h * geom.out_w;
                let patch = geom.kernel * geom.kernel * geom.in_c;
                let oc = geom.out_c;
                if self.rg(*w) {
                    let mut gw = vec![0.0; oc * patch];
                    gemm(oc, rows, patch, &g.data, true, cols, false, &mut gw, false);
                    let shape = self.value(*w).shape.clone();
                    self.accumulate(*w, Tensor { shape, data: gw });
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; oc];
                    for r in g.data.chunks(oc) {
                        for (acc, v) in gb.iter_mut().zip(r) {
                            *acc += v;
                        }
                    }
                    self.accumulate(*b, Tensor { shape: vec![oc], data: gb });
                }
                if self.rg(*x) {
                    let mut gcols = vec![0.0; rows * patch];
                    let tw = self.value(*w);
                    gemm(rows, oc, patch, &g.data, false, &tw.data, false, &mut gcols, false);
                    let gx = col2im(&gcols, geom);
                    let shape = self.value(*x).shape.clone();
                    self.accumulate(*x, Tensor { shape, data: gx });
                }
            }
            Op::SpatialMean(x) => {
                let shape = self.value(*x).shape.clone();
                let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                let inv = 1.0 / (h * w) as f64;
                let mut d = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    let gr = &g.data[bi * c..(bi + 1) * c];
                    for px in d[bi * h * w * c..(bi + 1) * h * w * c].chunks_mut(c) {
                        for (o, v) in px.iter_mut().zip(gr) {
                            *o = v * inv;
                        }
                    }
                }
                self.accumulate(*x, Tensor { shape, data: d });
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape.clone();
                self.accumulate(
                    *x,
                    Tensor {
                        shape,
                        data: g.data.clone(),
                    },
                );
            }
            Op::RowMix(x, mix) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for (r, entries) in mix.entries.iter().enumerate() {
                    let gr = &g.data[r * c..(r + 1) * c];
                    for &(i, wt) in entries {
                        for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(gr) {
                            *o += wt * v;
                        }
                    }
                }
                let shape = tx.shape.clone();
                self.accumulate(*x, Tensor { shape, data: d });
            }
            Op::BlockAttention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let dv = tv.cols();
                let bq = tq.rows() / groups;
                let bk = tk.rows() / groups;
                let (dh, dvh) = (d / heads, dv / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; tq.len()];
                let mut gk = vec![0.0; tk.len()];
                let mut gv = vec![0.0; tv.len()];
                let mut dp = vec![0.0; bk];
                for gi in 0..*groups {
                    for i in 0..bq {
                        let qi = gi * bq + i;
                        for h in 0..*heads {
                            let p = &probs[(qi * heads + h) * bk..(qi * heads + h + 1) * bk];
                            let go = &g.data[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                            for j in 0..bk {
                                let kj = gi * bk + j;
                                dp[j] = dot(go, &tv.row(kj)[h * dvh..(h + 1) * dvh]);
                                let gvr = &mut gv[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                                for (o, x) in gvr.iter_mut().zip(go) {
                                    *o += p[j] * x;
                                }
                            }
                            let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..bk {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = gi * bk + j;
                                let krow = &tk.row(kj)[h * dh..(h + 1) * dh];
                                let gqr = &mut gq[qi * d + h * dh..qi * d + (h + 1) * dh];
                                for (o, x) in gqr.iter_mut().zip(krow) {
                                    *o += ds * x;
                                }
                                let qrow = &tq.row(qi)[h * dh..(h + 1) * dh];
                                let gkr = &mut gk[kj * d + h * dh..kj * d + (h + 1) * dh];
                                for (o, x) in gkr.iter_mut().zip(qrow) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                let (sq, sk, sv) = (tq.shape.clone(), tk.shape.clone(), tv.shape.clone());
                self.accumulate(*q, Tensor { shape: sq, data: gq });
                self.accumulate(*k, Tensor { shape: sk, data: gk });
                self.accumulate(*v, Tensor { shape: sv, data: gv });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let c = tg.len();
                let rows = xhat.len() / c;
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g.data[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let dxh = gr[j] * tg.data[j];
                        mean_d += dxh;
                        mean_dx += dxh * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let dxh = gr[j] * tg.data[j];
                        gx[r * c + j] = inv_std[r] * (dxh - mean_d - xr[j] * mean_dx);
                    }
                }
                let sx = self.value(*x).shape.clone();
                let sg = tg.shape.clone();
                let sb = self.value(*bias).shape.clone();
                self.accumulate(*x, Tensor { shape: sx, data: gx });
                self.accumulate(*gain, Tensor { shape: sg, data: gg });
                self.accumulate(*bias, Tensor { shape: sb, data: gb });
            }
            Op::NormalizeRows { x, norms } => {
                let y = &self.nodes[idx].value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &g.data[r * c..(r + 1) * c];
                    let proj = dot(yr, gr);
                    for j in 0..c {
                        d[r * c + j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                let shape = self.value(*x).shape.clone();
                self.accumulate(*x, Tensor { shape, data: d });
            }
            Op::SumSqRows(x) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let data = tx
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, v)| 2.0 * v * g.data[i / c])
                    .collect();
                let shape = tx.shape.clone();
                self.accumulate(*x, Tensor { shape, data });
            }
            Op::SegmentMin { x, argmin } => {
                let tx = self.value(*x);
                let mut d = vec![0.0; tx.len()];
                for (gi, &a) in argmin.iter().enumerate() {
                    d[a] = g.data[gi];
                }
                let shape = tx.shape.clone();
                self.accumulate(*x, Tensor { shape, data: d });
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape.clone();
                let n: usize = shape.iter().product();
                self.accumulate(
                    *x,
                    Tensor {
                        shape,
                        data: vec![g.item(); n],
                    },
                );
            }
            Op::Mean(x) => {
                let shape = self.value(*x).shape.clone();
                let n: usize = shape.iter().product();
                self.accumulate(
                    *x,
                    Tensor {
                        shape,
                        data: vec![g.item() / n.max(1) as f64; n],
                    },
                );
            }
            Op::GroupNll {
                scores,
                absent,
                groups,
                probs,
            } => {
                let upstream = g.item();
                let ts = self.value(*scores);
                let cols = ts.cols();
                let mut gs = vec![0.0; ts.len()];
                let mut ga = absent.map(|a| vec![0.0; self.value(a).len()]);
                for (grp, p) in groups.iter().zip(probs) {
                    let t = match grp.target {
                        GroupTarget::Column(c) => c,
                        GroupTarget::Absent => p.len() - 1,
                    };
                    for (slot, &c) in grp.cols.iter().enumerate() {
                        let hit = if slot == t { 1.0 } else { 0.0 };
                        gs[grp.row * cols + c] += upstream * (p[slot] - hit);
                    }
                    if grp.include_absent {
                        let last = p.len() - 1;
                        let hit = if last == t { 1.0 } else { 0.0 };
                        if let Some(ga) = ga.as_mut() {
                            ga[grp.row] += upstream * (p[last] - hit);
                        }
                    }
                }
                let shape = ts.shape.clone();
                self.accumulate(*scores, Tensor { shape, data: gs });
                if let (Some(a), Some(data)) = (absent, ga) {
                    let shape = self.value(*a).shape.clone();
                    self.accumulate(*a, Tensor { shape, data });
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.kernel * g.kernel * g.in_c;
    let mut cols = vec![0.0; g.batch * g.out_h * g.out_w * patch];
    let mut r = 0;
    for b in 0..g.batch {
        let img = &x[b * g.in_h * g.in_w * g.in_c..(b + 1) * g.in_h * g.in_w * g.in_c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let dst = (ky * g.kernel + kx) * g.in_c;
                        row[dst..dst + g.in_c].copy_from_slice(&img[src..src + g.in_c]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.kernel * g.kernel * g.in_c;
    let mut x = vec![0.0; g.batch * g.in_h * g.in_w * g.in_c];
    let mut r = 0;
    for b in 0..g.batch {
        let base = b * g.in_h * g.in_w * g.in_c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let src = (ky * g.kernel + kx) * g.in_c;
                        for c in 0..g.in_c {
                            x[dst + c] += row[src + c];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    x
}
