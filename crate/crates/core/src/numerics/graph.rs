//! Reverse-mode gradient tape.
//!
//! Every op records its inputs plus whatever it needs for the local derivative.
//! Node ids are assigned in execution order, so iterating the tape backwards is a
//! valid reverse topological order.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::{log_sum_exp, softmax_in_place, Tensor};
use crate::error::{GemError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    GatherRows { src: Var, idx: Rc<Vec<usize>> },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Concat { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Consumed by [`Graph::backward`].
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(GemError::Shape(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x[..., d] + row[d]` broadcast over leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xt, rt) = (self.value(x), self.value(row));
        let d = xt.last_dim();
        if rt.len() != d {
            return Err(GemError::Shape(format!("add_row {:?} + {:?}", xt.shape(), rt.shape())));
        }
        let mut out = xt.clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, r) in chunk.iter_mut().zip(rt.data()) {
                *o += r;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(GemError::Shape(format!("mul {:?} * {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|p| p * s).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `[.., k] · [k, n]` (or `[n, k]` stored when `trans_b`), leading axes flattened.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (x, w) = (self.value(a), self.value(b));
        if w.shape().len() != 2 {
            return Err(GemError::Shape(format!("matmul rhs must be 2-D, got {:?}", w.shape())));
        }
        let k = x.last_dim();
        let (wk, n) = if trans_b {
            (w.shape()[1], w.shape()[0])
        } else {
            (w.shape()[0], w.shape()[1])
        };
        if wk != k {
            return Err(GemError::Shape(format!(
                "matmul {:?} x {:?} (trans_b={trans_b})",
                x.shape(),
                w.shape()
            )));
        }
        let m = x.len() / k.max(1);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, w.data(), trans_b, &mut data, false);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar lhs") = n;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Batched `[g, m, k] · [g, k, p]` (or `[g, p, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 3 || y.shape().len() != 3 || x.shape()[0] != y.shape()[0] {
            return Err(GemError::Shape(format!("bmm {:?} x {:?}", x.shape(), y.shape())));
        }
        let (g, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (yk, p) = if trans_b {
            (y.shape()[2], y.shape()[1])
        } else {
            (y.shape()[1], y.shape()[2])
        };
        if yk != k {
            return Err(GemError::Shape(format!(
                "bmm inner dims {:?} x {:?} (trans_b={trans_b})",
                x.shape(),
                y.shape()
            )));
        }
        let mut data = vec![0.0; g * m * p];
        for i in 0..g {
            gemm(
                m,
                k,
                p,
                &x.data()[i * m * k..(i + 1) * m * k],
                false,
                &y.data()[i * k * p..(i + 1) * k * p],
                trans_b,
                &mut data[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let out = Tensor::new(vec![g, m, p], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Rows of `src` (viewed as `[rows, d]`) picked by `idx`; output `[idx.len(), d]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(src);
        let d = s.last_dim();
        let rows = s.len() / d.max(1);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(GemError::Shape(format!("row index {i} out of range {rows}")));
            }
            data.extend_from_slice(s.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.rg(src);
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                idx: Rc::new(idx.to_vec()),
            },
            rg,
        ))
    }

    /// `[batch*seq, heads*dh]` → `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        let dm = t.last_dim();
        if t.len() != batch * seq * dm || !dm.is_multiple_of(heads) {
            return Err(GemError::Shape(format!(
                "split_heads {:?} into b={batch} t={seq} h={heads}",
                t.shape()
            )));
        }
        let dh = dm / heads;
        let mut data = vec![0.0; t.len()];
        let src = t.data();
        for b in 0..batch {
            for s in 0..seq {
                let row = &src[(b * seq + s) * dm..(b * seq + s + 1) * dm];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + s) * dh;
                    data[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let out = Tensor::new(vec![batch * heads, seq, dh], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SplitHeads { x, batch, seq, heads }, rg))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 3 || t.shape()[0] != batch * heads || t.shape()[1] != seq {
            return Err(GemError::Shape(format!(
                "merge_heads {:?} from b={batch} t={seq} h={heads}",
                t.shape()
            )));
        }
        let dh = t.shape()[2];
        let dm = dh * heads;
        let mut data = vec![0.0; t.len()];
        merge_into(t.data(), &mut data, batch, seq, heads, dh);
        let out = Tensor::new(vec![batch * seq, dm], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MergeHeads { x, batch, seq, heads }, rg))
    }

    /// Softmax over the last axis of `[batch*groups, q, k]` where keys with
    /// `key_mask[b*k + j] == false` receive exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool], groups: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 3 {
            return Err(GemError::Shape(format!("masked_softmax needs 3-D, got {:?}", t.shape())));
        }
        let (g, q, k) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if k == 0 {
            return Err(GemError::Shape("masked_softmax over an empty key axis".into()));
        }
        if groups == 0 || g % groups != 0 || key_mask.len() != (g / groups) * k {
            return Err(GemError::Shape(format!(
                "key mask of length {} does not fit {:?} with {groups} groups",
                key_mask.len(),
                t.shape()
            )));
        }
        let mut out = t.clone();
        for gi in 0..g {
            let mask = &key_mask[(gi / groups) * k..(gi / groups + 1) * k];
            for qi in 0..q {
                let row = &mut out.data_mut()[(gi * q + qi) * k..(gi * q + qi + 1) * k];
                masked_softmax_row(row, mask);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax { x }, rg))
    }

    /// Normalises over the last axis, then applies `gain` and `bias` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d == 0 || t.is_empty() {
            return Err(GemError::Shape("layer_norm over an empty axis".into()));
        }
        let (gt, bt) = (self.value(gain), self.value(bias));
        if gt.len() != d || bt.len() != d {
            return Err(GemError::Shape(format!(
                "layer_norm gain/bias {:?}/{:?} for d={d}",
                gt.shape(),
                bt.shape()
            )));
        }
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gt.data()[j] + bt.data()[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - p;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Concatenates two `[rows, _]` tensors along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (da, db) = (x.last_dim(), y.last_dim());
        let rows = x.len() / da.max(1);
        if y.len() / db.max(1) != rows {
            return Err(GemError::Shape(format!("concat {:?} with {:?}", x.shape(), y.shape())));
        }
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let out = Tensor::new(vec![rows, da + db], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`, computed in log space.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.last_dim();
        let b = t.len() / c.max(1);
        if t.shape().len() != 2 || b != targets.len() || b == 0 {
            return Err(GemError::Shape(format!(
                "cross_entropy logits {:?} with {} targets",
                t.shape(),
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&y| y >= c) {
            return Err(GemError::Invalid(format!("target {bad} outside [0, {c})")));
        }
        let mut loss = 0.0;
        let mut probs = vec![0.0; t.len()];
        for (r, &y) in targets.iter().enumerate() {
            let row = t.row(r);
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Propagates d`loss`/d(param) into `store` grads (accumulating) and drops the tape.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 || lt.shape().iter().any(|&d| d != 1) {
            return Err(GemError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let Graph { nodes, .. } = self;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (acc, v) in p.grad.data_mut().iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &nodes, *a, || g.clone());
                    accumulate(&mut grads, &nodes, *b, || g.clone());
                }
                Op::AddRow(x, row) => {
                    let d = nodes[row.0].value.len();
                    accumulate(&mut grads, &nodes, *row, || {
                        let mut acc = vec![0.0; d];
                        for chunk in g.chunks(d) {
                            for (a, v) in acc.iter_mut().zip(chunk) {
                                *a += v;
                            }
                        }
                        acc
                    });
                    accumulate(&mut grads, &nodes, *x, || g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    accumulate(&mut grads, &nodes, *a, || {
                        g.iter().zip(bv).map(|(u, w)| u * w).collect()
                    });
                    accumulate(&mut grads, &nodes, *b, || {
                        g.iter().zip(av).map(|(u, w)| u * w).collect()
                    });
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, &nodes, *a, || g.iter().map(|u| u * s).collect());
                }
                Op::MatMul { a, b, trans_b } => {
                    let (x, w) = (&nodes[a.0].value, &nodes[b.0].value);
                    let k = x.last_dim();
                    let m = x.len() / k.max(1);
                    let n = node.value.last_dim();
                    accumulate(&mut grads, &nodes, *a, || {
                        let mut dx = vec![0.0; m * k];
                        // dX = dC · Bᵀ   (B stored k×n)   or   dC · B   (B stored n×k)
                        gemm(m, n, k, &g, false, w.data(), !trans_b, &mut dx, false);
                        dx
                    });
                    accumulate(&mut grads, &nodes, *b, || {
                        let mut dw = vec![0.0; k * n];
                        if *trans_b {
                            gemm(n, m, k, &g, true, x.data(), false, &mut dw, false);
                        } else {
                            gemm(k, m, n, x.data(), true, &g, false, &mut dw, false);
                        }
                        dw
                    });
                }
                Op::Bmm { a, b, trans_b } => {
                    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (bg, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let p = node.value.shape()[2];
                    accumulate(&mut grads, &nodes, *a, || {
                        let mut dx = vec![0.0; bg * m * k];
                        for i in 0..bg {
                            gemm(
                                m,
                                p,
                                k,
                                &g[i * m * p..(i + 1) * m * p],
                                false,
                                &y.data()[i * k * p..(i + 1) * k * p],
                                !trans_b,
                                &mut dx[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                        dx
                    });
                    accumulate(&mut grads, &nodes, *b, || {
                        let mut dy = vec![0.0; bg * k * p];
                        for i in 0..bg {
                            let gi = &g[i * m * p..(i + 1) * m * p];
                            let xi = &x.data()[i * m * k..(i + 1) * m * k];
                            let out = &mut dy[i * k * p..(i + 1) * k * p];
                            if *trans_b {
                                gemm(p, m, k, gi, true, xi, false, out, false);
                            } else {
                                gemm(k, m, p, xi, true, gi, false, out, false);
                            }
                        }
                        dy
                    });
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, &nodes, *a, || g.clone());
                }
                Op::GatherRows { src, idx } => {
                    let n = nodes[src.0].value.len();
                    let d = node.value.last_dim();
                    accumulate(&mut grads, &nodes, *src, || {
                        let mut ds = vec![0.0; n];
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..d {
                                ds[i * d + j] += g[r * d + j];
                            }
                        }
                        ds
                    });
                }
                Op::SplitHeads { x, batch, seq, heads } => {
                    let dh = node.value.shape()[2];
                    accumulate(&mut grads, &nodes, *x, || {
                        let mut dx = vec![0.0; g.len()];
                        merge_into(&g, &mut dx, *batch, *seq, *heads, dh);
                        dx
                    });
                }
                Op::MergeHeads { x, batch, seq, heads } => {
                    let dh = nodes[x.0].value.shape()[2];
                    accumulate(&mut grads, &nodes, *x, || {
                        let dm = dh * heads;
                        let mut dx = vec![0.0; g.len()];
                        for b in 0..*batch {
                            for s in 0..*seq {
                                for h in 0..*heads {
                                    let dst = ((b * heads + h) * seq + s) * dh;
                                    let src = (b * seq + s) * dm + h * dh;
                                    dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                                }
                            }
                        }
                        dx
                    });
                }
                Op::MaskedSoftmax { x } => {
                    let y = node.value.data();
                    let k = node.value.last_dim();
                    accumulate(&mut grads, &nodes, *x, || {
                        let mut dx = vec![0.0; g.len()];
                        for ((dr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..k {
                                dr[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        dx
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = node.value.last_dim();
                    let gv = nodes[gain.0].value.data();
                    accumulate(&mut grads, &nodes, *bias, || {
                        let mut db = vec![0.0; d];
                        for chunk in g.chunks(d) {
                            for (a, v) in db.iter_mut().zip(chunk) {
                                *a += v;
                            }
                        }
                        db
                    });
                    accumulate(&mut grads, &nodes, *gain, || {
                        let mut dg = vec![0.0; d];
                        for (chunk, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += chunk[j] * xh[j];
                            }
                        }
                        dg
                    });
                    accumulate(&mut grads, &nodes, *x, || {
                        let mut dx = vec![0.0; g.len()];
                        let df = d as f64;
                        for (r, ((dr, gr), xh)) in dx
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .enumerate()
                        {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let dxh = gr[j] * gv[j];
                                s1 += dxh;
                                s2 += dxh * xh[j];
                            }
                            for j in 0..d {
                                let dxh = gr[j] * gv[j];
                                dr[j] = rstd[r] / df * (df * dxh - s1 - xh[j] * s2);
                            }
                        }
                        dx
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    accumulate(&mut grads, &nodes, *x, || {
                        g.iter()
                            .zip(xv)
                            .map(|(u, &v)| {
                                let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                                let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                                u * (0.5 * (1.0 + t) + 0.5 * v * dt)
                            })
                            .collect()
                    });
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads, &nodes, *x, || {
                        g.iter().zip(mask).map(|(u, m)| u * m).collect()
                    });
                }
                Op::Concat { a, b } => {
                    let da = nodes[a.0].value.last_dim();
                    let db = nodes[b.0].value.last_dim();
                    accumulate(&mut grads, &nodes, *a, || {
                        g.chunks(da + db).flat_map(|r| r[..da].to_vec()).collect()
                    });
                    accumulate(&mut grads, &nodes, *b, || {
                        g.chunks(da + db).flat_map(|r| r[da..].to_vec()).collect()
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = nodes[logits.0].value.last_dim();
                    let scale = g[0] / targets.len() as f64;
                    accumulate(&mut grads, &nodes, *logits, || {
                        let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                        for (r, &y) in targets.iter().enumerate() {
                            dl[r * c + y] -= scale;
                        }
                        dl
                    });
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    accumulate(&mut grads, &nodes, *x, || vec![g[0]; n]);
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<F: FnOnce() -> Vec<f64>>(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: F) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let contrib = f();
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(&contrib) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn merge_into(src: &[f64], dst: &mut [f64], batch: usize, seq: usize, heads: usize, dh: usize) {
    let dm = dh * heads;
    for b in 0..batch {
        for h in 0..heads {
            for s in 0..seq {
                let from = ((b * heads + h) * seq + s) * dh;
                let to = (b * seq + s) * dm + h * dh;
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}

fn masked_softmax_row(row: &mut [f64], mask: &[bool]) {
    if mask.iter().all(|&m| m) {
        softmax_in_place(row);
        return;
    }
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (v, &m) in row.iter_mut().zip(mask) {
        *v = if m { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
