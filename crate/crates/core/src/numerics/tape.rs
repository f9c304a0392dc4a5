//! Reverse-mode differentiation over a linear tape of coarse matrix ops.
//!
//! Every op appends one node holding its output value plus whatever it needs
//! to replay its adjoint. `backward` walks nodes in exact reverse order of
//! creation. Node ids are dense, so a [`Var`] created on one tape must never
//! be used with another.

use super::array::{
    gelu_grad_from_tanh, gelu_tanh, gemm, log_sum_exp, moments, softmax_in_place, Array,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddTiled {
        x: Var,
        p: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by node; `None` means the node received no gradient.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Adjoint of `v`, zeros when `v` was not on the path to the loss.
    pub fn wrt(&self, v: Var) -> Array {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }
}

fn dim_err(op: &str, a: &Array, b: &Array) -> Error {
    Error::Dimension(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.matrix_dims("matmul")?;
        let (br, bc) = bv.matrix_dims("matmul")?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err("matmul", av, bv));
        }
        let mut out = Array::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            trans_b,
            0.0,
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul { a, b, trans_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", av, bv));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Adds `p` (r×d) to every consecutive block of r rows of `x` (n·r × d).
    /// With r = 1 this is a broadcast bias add.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        let d = xv.cols();
        let p_rows = if pv.shape().len() == 1 { 1 } else { pv.rows() };
        if pv.len() != p_rows * d || p_rows == 0 || xv.rows() % p_rows != 0 {
            return Err(dim_err("add_tiled", xv, pv));
        }
        let mut out = xv.clone();
        let block = p_rows * d;
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, b) in chunk.iter_mut().zip(pv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddTiled { x, p }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("mul", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Array::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Rows `idx` of a matrix, in order (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (n, d) = sv.matrix_dims("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Index(format!("row {i} of {n}")));
            }
            data.extend_from_slice(sv.row(i));
        }
        let out = Array::new(vec![idx.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_rows(self.value(b))?;
        Ok(self.push(out, Op::ConcatRows { a, b }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(dim_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = xv.clone();
        for r in 0..rows {
            let (mean, is) = moments(xv.row(r), eps);
            inv_std.push(is);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                let h = (*o - mean) * is;
                xhat.push(h);
                *o = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<f64> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let data = xv
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| 0.5 * v * (1.0 + t))
            .collect();
        let out = Array::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu { x, tanh })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = super::array::softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    /// Single-head scaled dot-product attention, applied independently to
    /// each consecutive block of `seq` rows (one block per sequence). Every
    /// position attends to every position of its own block.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(dim_err("attention", qv, kv));
        }
        let (n, d) = qv.matrix_dims("attention")?;
        if seq == 0 || n % seq != 0 {
            return Err(Error::Dimension(format!(
                "attention: {n} rows not a multiple of {seq}"
            )));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let blocks = n / seq;
        let mut probs = vec![0.0; blocks * seq * seq];
        let mut out = Array::zeros(&[n, d]);
        for b in 0..blocks {
            let base = b * seq;
            for i in 0..seq {
                let p = &mut probs[(b * seq + i) * seq..(b * seq + i + 1) * seq];
                let qi = qv.row(base + i);
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qi, kv.row(base + j)) * scale;
                }
                softmax_in_place(p);
                let o = out.row_mut(base + i);
                for (j, &pj) in p.iter().enumerate() {
                    axpy(pj, vv.row(base + j), o);
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                probs,
            },
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node, one
    /// `seq × seq` row-stochastic matrix per block, flattened.
    pub fn attention_probs(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.matrix_dims("cross_entropy")?;
        if rows != targets.len() || rows == 0 {
            return Err(Error::Dimension(format!(
                "cross_entropy: {rows} rows, {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Index(format!("target {t} of {cols} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            total += log_sum_exp(row) - row[t];
            softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        let out = Array::scalar(total / rows as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Array>], v: Var) -> &'g mut Array {
        grads[v.0].get_or_insert_with(|| Array::zeros(self.nodes[v.0].value.shape()))
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = g.cols();
                let ga = self.slot(grads, *a);
                // dA = G·Bᵀ (B stored k×n) or G·B (B stored n×k)
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    false,
                    bv.data(),
                    !trans_b,
                    1.0,
                    ga.data_mut(),
                );
                let gb = self.slot(grads, *b);
                if *trans_b {
                    gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        true,
                        av.data(),
                        false,
                        1.0,
                        gb.data_mut(),
                    );
                } else {
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        true,
                        g.data(),
                        false,
                        1.0,
                        gb.data_mut(),
                    );
                }
            }
            Op::Add { a, b } => {
                self.slot(grads, *a).add_assign(g);
                self.slot(grads, *b).add_assign(g);
            }
            Op::AddTiled { x, p } => {
                self.slot(grads, *x).add_assign(g);
                let gp = self.slot(grads, *p);
                let block = gp.len();
                for chunk in g.data().chunks(block) {
                    for (o, v) in gp.data_mut().iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = self.slot(grads, *a);
                for ((o, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += gi * bi;
                }
                let gb = self.slot(grads, *b);
                for ((o, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gi * ai;
                }
            }
            Op::Scale { x, c } => {
                let gx = self.slot(grads, *x);
                for (o, gi) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += c * gi;
                }
            }
            Op::Gather { src, idx } => {
                let gs = self.slot(grads, *src);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let split = self.value(*a).len();
                let ga = self.slot(grads, *a);
                for (o, v) in ga.data_mut().iter_mut().zip(&g.data()[..split]) {
                    *o += v;
                }
                let gb = self.slot(grads, *b);
                for (o, v) in gb.data_mut().iter_mut().zip(&g.data()[split..]) {
                    *o += v;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let d = gv.len();
                {
                    let gg = self.slot(grads, *gamma);
                    for (r, row) in g.data().chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            gg.data_mut()[j] += row[j] * xh[j];
                        }
                    }
                }
                {
                    let gb = self.slot(grads, *beta);
                    for row in g.data().chunks(d) {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                let gx = self.slot(grads, *x);
                let mut dxhat = vec![0.0; d];
                for (r, row) in g.data().chunks(d).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dxhat[j] = row[j] * gv.data()[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xh[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    let out = gx.row_mut(r);
                    for j in 0..d {
                        out[j] += scale * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x);
                let gx = self.slot(grads, *x);
                let it = gx
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(xv.data().iter().zip(tanh));
                for ((o, gi), (&xi, &ti)) in it {
                    *o += gi * gelu_grad_from_tanh(xi, ti);
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let gx = self.slot(grads, *x);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for (o, (yi, gi)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o += yi * (gi - s);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *seq, probs, g, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len() as f64;
                let gl = self.slot(grads, *logits);
                let cols = gl.cols();
                for (r, &t) in targets.iter().enumerate() {
                    let out = gl.row_mut(r);
                    let p = &probs[r * cols..(r + 1) * cols];
                    for (o, pi) in out.iter_mut().zip(p) {
                        *o += scale * pi;
                    }
                    out[t] -= scale;
                }
            }
            Op::Sum { x } => {
                let gi = g.item();
                for o in self.slot(grads, *x).data_mut() {
                    *o += gi;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        probs: &[f64],
        g: &Array,
        grads: &mut [Option<Array>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let blocks = qv.rows() / seq;
        let mut dq = Array::zeros(qv.shape());
        let mut dk = Array::zeros(kv.shape());
        let mut dv = Array::zeros(vv.shape());
        let mut ds = vec![0.0; seq];
        for b in 0..blocks {
            let base = b * seq;
            for i in 0..seq {
                let p = &probs[(b * seq + i) * seq..(b * seq + i + 1) * seq];
                let gi = g.row(base + i);
                // dP_ij = <dO_i, V_j>; dS = P ⊙ (dP − <dP, P>)
                let mut dot_pp = 0.0;
                for j in 0..seq {
                    ds[j] = dot(gi, vv.row(base + j));
                    dot_pp += ds[j] * p[j];
                }
                for j in 0..seq {
                    ds[j] = p[j] * (ds[j] - dot_pp) * scale;
                    axpy(p[j], gi, dv.row_mut(base + j));
                }
                for j in 0..seq {
                    axpy(ds[j], kv.row(base + j), dq.row_mut(base + i));
                    axpy(ds[j], qv.row(base + i), dk.row_mut(base + j));
                }
            }
        }
        self.slot(grads, q).add_assign(&dq);
        self.slot(grads, k).add_assign(&dk);
        self.slot(grads, v).add_assign(&dv);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
