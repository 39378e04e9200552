//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse. Parameters are
//! borrowed from a [`ParamSet`] rather than copied onto the tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::LN_2;

use super::params::{ParamId, ParamSet};
use super::sparse::SparseRows;
use super::tensor::{axpy, dot, softmax_in_place, Tensor};
use crate::{Error, Result};

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    SparseLinear { x: usize, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    Concat(Var, Var),
    Attention { q: Var, k: Var, v: Var, seq: usize, valid: Vec<bool>, probs: Vec<f64> },
    MeanPool { x: Var, seq: usize, valid: Vec<bool> },
    CrossEntropy { logits: Var, labels: Vec<u8>, probs: Vec<f64>, clamped: Vec<bool> },
    Mse { pred: Var, target: Vec<f64> },
    WeightedSum { x: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, per parameter and per graph input.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    inputs: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(params: usize) -> Self {
        Self { params: vec![None; params], inputs: Vec::new() }
    }

    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. an input created with [`Graph::input_with_grad`].
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(v.0).and_then(Option::as_ref)
    }

    pub fn set_param(&mut self, index: usize, g: Tensor) {
        self.params[index] = Some(g);
    }
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    sparse: Vec<SparseRows>,
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => axpy(acc.data_mut(), 1.0, g.data()),
        None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), sparse: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        Ok(self.push(value, op, needs_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).value(),
            _ => &self.nodes[v.0].value,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Tensor::scalar(0.0), Op::Param(id), true)
    }

    fn bias_check(&self, b: Option<Var>, out: usize) -> Result<()> {
        if let Some(b) = b {
            if self.value(b).len() != out {
                return Err(Error::Shape(format!("bias of {} for {out} outputs", self.value(b).len())));
            }
        }
        Ok(())
    }

    /// `x W + b` with `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(Error::Shape(format!("linear: x {:?} against W {:?}", xv.shape(), wv.shape())));
        }
        let (batch, inp, out) = (xv.rows(), wv.rows(), wv.cols());
        self.bias_check(b, out)?;
        let mut y = vec![0.0; batch * out];
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..batch {
            let yr = &mut y[r * out..(r + 1) * out];
            if let Some(b) = b {
                yr.copy_from_slice(self.value(b).data());
            }
            for i in 0..inp {
                let a = xd[r * inp + i];
                if a != 0.0 {
                    axpy(yr, a, &wd[i * out..(i + 1) * out]);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push_checked(Tensor::matrix(batch, out, y)?, Op::Linear { x, w, b }, needs, "linear")
    }

    /// Linear layer over a constant sparse input.
    pub fn sparse_linear(&mut self, x: SparseRows, w: Var, b: Option<Var>) -> Result<Var> {
        let wv = self.value(w);
        if wv.shape().len() != 2 || x.cols() != wv.rows() {
            return Err(Error::Shape(format!("sparse linear: {} columns against W {:?}", x.cols(), wv.shape())));
        }
        let (batch, out) = (x.rows(), wv.cols());
        if batch == 0 {
            return Err(Error::Shape("sparse linear on an empty batch".into()));
        }
        self.bias_check(b, out)?;
        let mut y = vec![0.0; batch * out];
        let wd = wv.data();
        for r in 0..batch {
            let yr = &mut y[r * out..(r + 1) * out];
            if let Some(b) = b {
                yr.copy_from_slice(self.value(b).data());
            }
            for (i, a) in x.row(r) {
                axpy(yr, a, &wd[i * out..(i + 1) * out]);
            }
        }
        self.sparse.push(x);
        let op = Op::SparseLinear { x: self.sparse.len() - 1, w, b };
        let needs = self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push_checked(Tensor::matrix(batch, out, y)?, op, needs, "sparse linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut y = av.clone();
        axpy(y.data_mut(), 1.0, bv.data());
        let needs = self.needs(a) || self.needs(b);
        self.push_checked(y, Op::Add(a, b), needs, "add")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= factor);
        let needs = self.needs(a);
        self.push_checked(y, Op::Scale(a, factor), needs, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(a);
        self.push(y, Op::Relu(a), needs)
    }

    /// Softmax over the last axis (each row).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        let c = y.cols();
        y.data_mut().chunks_mut(c).for_each(softmax_in_place);
        let needs = self.needs(a);
        self.push_checked(y, Op::Softmax(a), needs, "softmax")
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Shape(format!("concat: {} vs {} rows", av.rows(), bv.rows())));
        }
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut y = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            y.extend_from_slice(av.row(i));
            y.extend_from_slice(bv.row(i));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(r, ca + cb, y)?, Op::Concat(a, b), needs))
    }

    /// Scaled dot-product attention over independent sequences of length `seq`.
    ///
    /// `q`, `k`, `v` are `[groups * seq, d]`. `valid[j]` marks key position
    /// `j` as attendable; masked keys get zero weight. A query whose sequence
    /// has no valid key produces a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, valid: &[bool]) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (rows, d) = (qv.rows(), qv.cols());
        if seq == 0 || rows % seq != 0 || valid.len() != rows {
            return Err(Error::Shape(format!("attention: {rows} rows, sequence {seq}, mask {}", valid.len())));
        }
        let inv = 1.0 / libm::sqrt(d as f64);
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; rows * seq];
        let mut scores = vec![0.0; seq];
        for g in 0..rows / seq {
            let base = g * seq;
            if !valid[base..base + seq].iter().any(|&m| m) {
                continue;
            }
            for i in 0..seq {
                let qi = qv.row(base + i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..seq {
                    if valid[base + j] {
                        scores[j] = dot(qi, kv.row(base + j)) * inv;
                        max = max.max(scores[j]);
                    }
                }
                let mut sum = 0.0;
                for j in 0..seq {
                    scores[j] = if valid[base + j] { libm::exp(scores[j] - max) } else { 0.0 };
                    sum += scores[j];
                }
                let p = &mut probs[(base + i) * seq..(base + i + 1) * seq];
                let oi = &mut out[(base + i) * d..(base + i + 1) * d];
                for j in 0..seq {
                    p[j] = scores[j] / sum;
                    if p[j] != 0.0 {
                        axpy(oi, p[j], vv.row(base + j));
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let op = Op::Attention { q, k, v, seq, valid: valid.to_vec(), probs };
        self.push_checked(Tensor::matrix(rows, d, out)?, op, needs, "attention")
    }

    /// Mean of the valid rows of each length-`seq` group; `[groups, d]`.
    pub fn mean_pool(&mut self, x: Var, seq: usize, valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if seq == 0 || rows % seq != 0 || valid.len() != rows {
            return Err(Error::Shape(format!("mean pool: {rows} rows, sequence {seq}, mask {}", valid.len())));
        }
        let groups = rows / seq;
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let count = valid[g * seq..(g + 1) * seq].iter().filter(|&&m| m).count();
            if count == 0 {
                continue;
            }
            let o = &mut out[g * d..(g + 1) * d];
            for j in 0..seq {
                if valid[g * seq + j] {
                    axpy(o, 1.0, xv.row(g * seq + j));
                }
            }
            let inv = 1.0 / count as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let needs = self.needs(x);
        let op = Op::MeanPool { x, seq, valid: valid.to_vec() };
        Ok(self.push(Tensor::matrix(groups, d, out)?, op, needs))
    }

    /// Summed code length in bits, `-sum_i log2 p_i(label_i)`, from
    /// `[batch, 255]` logits and symbols in `1..=255`.
    pub fn cross_entropy_255(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.cols() != 255 || lv.rows() != labels.len() {
            return Err(Error::Shape(format!("cross entropy: logits {:?}, {} labels", lv.shape(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0) {
            return Err(Error::InvalidSymbol(bad as u32));
        }
        let mut probs = lv.data().to_vec();
        let mut clamped = vec![false; labels.len()];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &mut probs[r * 255..(r + 1) * 255];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&z| libm::exp(z - max)).sum::<f64>());
            let log_p = row[label as usize - 1] - lse;
            for z in row.iter_mut() {
                *z = libm::exp(*z - lse);
            }
            if libm::exp(log_p) < PROB_FLOOR {
                clamped[r] = true;
                total -= libm::log2(PROB_FLOOR);
            } else {
                total -= log_p / LN_2;
            }
        }
        let needs = self.needs(logits);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs, clamped };
        self.push_checked(Tensor::scalar(total), op, needs, "cross entropy")
    }

    /// `(1/m) * sum (pred - target)^2`; `pred` is `[m]` or `[m, 1]`.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || target.is_empty() {
            return Err(Error::Shape(format!("mse: {} predictions, {} targets", pv.len(), target.len())));
        }
        let m = target.len() as f64;
        let loss = pv.data().iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / m;
        let needs = self.needs(pred);
        self.push_checked(Tensor::scalar(loss), Op::Mse { pred, target: target.to_vec() }, needs, "mse")
    }

    /// `sum x * weights`; a convenient scalar head for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::Shape(format!("weighted sum: {} values, {} weights", xv.len(), weights.len())));
        }
        let s = dot(xv.data(), weights.data());
        let needs = self.needs(x);
        self.push_checked(Tensor::scalar(s), Op::WeightedSum { x, weights }, needs, "weighted sum")
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut result = Gradients { params: vec![None; self.params.len()], inputs: vec![None; n] };
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..n).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => result.inputs[idx] = Some(gy),
                Op::Param(id) => add_into(&mut result.params[id.0], gy),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, inp, out) = (xv.rows(), wv.rows(), wv.cols());
                    let (xd, wd, g) = (xv.data(), wv.data(), gy.data());
                    if self.needs(*x) {
                        let mut gx = vec![0.0; batch * inp];
                        for r in 0..batch {
                            let gr = &g[r * out..(r + 1) * out];
                            for i in 0..inp {
                                gx[r * inp + i] = dot(gr, &wd[i * out..(i + 1) * out]);
                            }
                        }
                        add_into(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), gx)?);
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0; inp * out];
                        for r in 0..batch {
                            let gr = &g[r * out..(r + 1) * out];
                            for i in 0..inp {
                                let a = xd[r * inp + i];
                                if a != 0.0 {
                                    axpy(&mut gw[i * out..(i + 1) * out], a, gr);
                                }
                            }
                        }
                        add_into(&mut grads[w.0], Tensor::new(wv.shape().to_vec(), gw)?);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        add_into(&mut grads[b.0], self.bias_grad(&gy, b)?);
                    }
                }
                Op::SparseLinear { x, w, b } => {
                    let xs = &self.sparse[*x];
                    let wv = self.value(*w);
                    let out = wv.cols();
                    let g = gy.data();
                    if self.needs(*w) {
                        let mut gw = vec![0.0; wv.len()];
                        for r in 0..xs.rows() {
                            let gr = &g[r * out..(r + 1) * out];
                            for (i, a) in xs.row(r) {
                                axpy(&mut gw[i * out..(i + 1) * out], a, gr);
                            }
                        }
                        add_into(&mut grads[w.0], Tensor::new(wv.shape().to_vec(), gw)?);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        add_into(&mut grads[b.0], self.bias_grad(&gy, b)?);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.needs(*v) {
                            add_into(&mut grads[v.0], gy.clone());
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let mut g = gy;
                    g.data_mut().iter_mut().for_each(|v| *v *= f);
                    add_into(&mut grads[a.0], g);
                }
                Op::Relu(a) => {
                    let mut g = gy;
                    for (gi, &x) in g.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    add_into(&mut grads[a.0], g);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut g = gy;
                    for (gr, yr) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let s = dot(gr, yr);
                        for (gi, &yi) in gr.iter_mut().zip(yr) {
                            *gi = yi * (*gi - s);
                        }
                    }
                    add_into(&mut grads[a.0], g);
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let r = gy.rows();
                    let mut ga = Vec::with_capacity(r * ca);
                    let mut gb = Vec::with_capacity(r * cb);
                    for row in gy.data().chunks(ca + cb) {
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    if self.needs(*a) {
                        add_into(&mut grads[a.0], Tensor::new(self.value(*a).shape().to_vec(), ga)?);
                    }
                    if self.needs(*b) {
                        add_into(&mut grads[b.0], Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                    }
                }
                Op::Attention { q, k, v, seq, valid, probs } => {
                    let (gq, gk, gv) = self.attention_backward(&gy, *q, *k, *v, *seq, valid, probs);
                    for (var, g) in [(q, gq), (k, gk), (v, gv)] {
                        if self.needs(*var) {
                            add_into(&mut grads[var.0], g);
                        }
                    }
                }
                Op::MeanPool { x, seq, valid } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    for g in 0..gy.rows() {
                        let count = valid[g * seq..(g + 1) * seq].iter().filter(|&&m| m).count();
                        if count == 0 {
                            continue;
                        }
                        let inv = 1.0 / count as f64;
                        for j in 0..*seq {
                            if valid[g * seq + j] {
                                let r = g * seq + j;
                                axpy(&mut gx[r * d..(r + 1) * d], inv, gy.row(g));
                            }
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), gx)?);
                }
                Op::CrossEntropy { logits, labels, probs, clamped } => {
                    let up = gy.data()[0] / LN_2;
                    let mut g = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &mut g[r * 255..(r + 1) * 255];
                        if clamped[r] {
                            row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        row[label as usize - 1] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= up);
                    }
                    add_into(&mut grads[logits.0], Tensor::new(self.value(*logits).shape().to_vec(), g)?);
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let scale = 2.0 * gy.data()[0] / target.len() as f64;
                    let g = pv.data().iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                    add_into(&mut grads[pred.0], Tensor::new(pv.shape().to_vec(), g)?);
                }
                Op::WeightedSum { x, weights } => {
                    let up = gy.data()[0];
                    let g = weights.data().iter().map(|w| w * up).collect();
                    add_into(&mut grads[x.0], Tensor::new(self.value(*x).shape().to_vec(), g)?);
                }
            }
        }
        Ok(result)
    }

    fn bias_grad(&self, gy: &Tensor, b: Var) -> Result<Tensor> {
        let out = gy.cols();
        let mut gb = vec![0.0; out];
        for r in 0..gy.rows() {
            axpy(&mut gb, 1.0, gy.row(r));
        }
        Tensor::new(self.value(b).shape().to_vec(), gb)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gy: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        valid: &[bool],
        probs: &[f64],
    ) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (qv.rows(), qv.cols());
        let inv = 1.0 / libm::sqrt(d as f64);
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut ds = vec![0.0; seq];
        for g in 0..rows / seq {
            let base = g * seq;
            for i in 0..seq {
                let go = gy.row(base + i);
                let p = &probs[(base + i) * seq..(base + i + 1) * seq];
                let mut weighted = 0.0;
                for j in 0..seq {
                    if p[j] != 0.0 {
                        ds[j] = dot(go, vv.row(base + j));
                        weighted += p[j] * ds[j];
                        axpy(&mut gv[(base + j) * d..(base + j + 1) * d], p[j], go);
                    } else {
                        ds[j] = 0.0;
                    }
                }
                for j in 0..seq {
                    if !valid[base + j] || p[j] == 0.0 {
                        continue;
                    }
                    let s = p[j] * (ds[j] - weighted) * inv;
                    axpy(&mut gq[(base + i) * d..(base + i + 1) * d], s, kv.row(base + j));
                    axpy(&mut gk[(base + j) * d..(base + j + 1) * d], s, qv.row(base + i));
                }
            }
        }
        let shape = || alloc::vec![rows, d];
        (
            Tensor::new(shape(), gq).expect("shape"),
            Tensor::new(shape(), gk).expect("shape"),
            Tensor::new(shape(), gv).expect("shape"),
        )
    }
}
