//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep. Parameters enter
//! the tape as leaves tied to a [`ParamId`]; one leaf per parameter per tape,
//! so repeated use (recurrent weights) accumulates into one gradient.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{self, gemm_acc, gemm_tn_acc, Tensor, LOG_FLOOR};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: usize,
}

/// Sparse linear row map: output row `i` is `Σ w · input[j]` over the
/// `(j, w)` entries of row `i`. Covers gathers, embedding lookups, time
/// shifts and pooling.
#[derive(Debug, Clone)]
pub struct RowMap {
    in_rows: usize,
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl RowMap {
    pub fn new(in_rows: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(j, w) in row {
                if j >= in_rows {
                    return Err(Error::dim(
                        "row_map",
                        format!("source row {} out of {}", j, in_rows),
                    ));
                }
                entries.push((j, w));
            }
            offsets.push(entries.len());
        }
        Ok(RowMap {
            in_rows,
            offsets,
            entries,
        })
    }

    /// One source row per output row, `None` producing a zero row.
    pub fn gather(in_rows: usize, sources: &[Option<usize>]) -> Result<Self> {
        let rows: Vec<Vec<(usize, f64)>> = sources
            .iter()
            .map(|s| s.map(|j| vec![(j, 1.0)]).unwrap_or_default())
            .collect();
        Self::new(in_rows, &rows)
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.in_rows {
            return Err(Error::dim(
                "row_map",
                format!("map expects {} rows, input has {}", self.in_rows, x.rows()),
            ));
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(&[self.out_rows(), cols]);
        for i in 0..self.out_rows() {
            let dst = out.row_mut(i);
            for &(j, w) in self.row(i) {
                for (d, &s) in dst.iter_mut().zip(x.row(j)) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Tensor),
    RowScale(usize, Rc<Vec<f64>>),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    Rows(usize, Rc<RowMap>),
    SoftmaxRows(usize),
    Sum(usize),
    MaskedMse {
        pred: usize,
        target: Rc<Tensor>,
        weights: Rc<Vec<f64>>,
        denom: f64,
    },
    MaskedCrossEntropy {
        probs: usize,
        labels: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
        denom: f64,
    },
    MaskedUniformDistance {
        probs: usize,
        weights: Rc<Vec<f64>>,
        denom: f64,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::RowScale(..) => "row_scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::Rows(..) => "rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Sum(_) => "sum",
            Op::MaskedMse { .. } => "masked_mse",
            Op::MaskedCrossEntropy { .. } => "masked_cross_entropy",
            Op::MaskedUniformDistance { .. } => "masked_uniform_distance",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn weight_sum(weights: &[f64]) -> Result<f64> {
    let s: f64 = weights.iter().sum();
    if s <= 0.0 {
        return Err(Error::Input("loss mask selects no rows".into()));
    }
    Ok(s)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation tags in recording order.
    pub fn op_tags(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.tag()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::State("variable was not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.index].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if !store.owns(id) {
            return Err(Error::State("parameter does not belong to the store".into()));
        }
        if let Some(&i) = self.params.get(&id) {
            return Ok(Var {
                tape: self.id,
                index: i,
            });
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v.index);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let out = tensor::add_row_vector(&self.nodes[ix].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::AddBias(ix, ib)))
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.dims(), self.nodes[b].value.dims());
        if sa != sb {
            return Err(Error::dim(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn zip(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let out = self.zip(ia, ib, |p, q| p + q);
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", ia, ib)?;
        let out = self.zip(ia, ib, |p, q| p - q);
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let out = self.zip(ia, ib, |p, q| p * q);
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v * c);
        Ok(self.push(out, Op::Scale(ia, c)))
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, m: Tensor) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.dims() != m.dims() {
            return Err(Error::dim("mul_const", format!("{:?} vs {:?}", x.dims(), m.dims())));
        }
        let data = x.data().iter().zip(m.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(ia, m)))
    }

    /// Multiplies row `r` by `w[r]`.
    pub fn row_scale(&mut self, a: Var, w: Rc<Vec<f64>>) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.rows() != w.len() {
            return Err(Error::dim("row_scale", format!("{} rows vs {} weights", x.rows(), w.len())));
        }
        let mut out = x.clone();
        for (r, &s) in w.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::RowScale(ia, w)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::tanh);
        Ok(self.push(out, Op::Tanh(ia)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(out, Op::Relu(ia)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(self.push(out, Op::Sigmoid(ia)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = Tensor::hstack(&refs)?;
        Ok(self.push(out, Op::ConcatCols(idx)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = Tensor::vstack(&refs)?;
        Ok(self.push(out, Op::ConcatRows(idx)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if start + count > x.rows() {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {}..{} of {}", start, start + count, x.rows()),
            ));
        }
        let out = x.slice_rows(start, count);
        Ok(self.push(out, Op::SliceRows(ia, start)))
    }

    pub fn rows(&mut self, a: Var, map: Rc<RowMap>) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = map.apply(&self.nodes[ia].value)?;
        Ok(self.push(out, Op::Rows(ia, map)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.cols() == 0 {
            return Err(Error::Domain("softmax of an empty vector".into()));
        }
        let out = tensor::softmax_rows(x);
        Ok(self.push(out, Op::SoftmaxRows(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia)))
    }

    /// Mean squared error over the rows with nonzero weight:
    /// `Σ_r w_r Σ_c (pred − target)² / (Σ_r w_r · cols)`.
    pub fn masked_mse(&mut self, pred: Var, target: Rc<Tensor>, weights: Rc<Vec<f64>>) -> Result<Var> {
        let ip = self.idx(pred)?;
        let p = &self.nodes[ip].value;
        if p.dims() != target.dims() || weights.len() != p.rows() {
            return Err(Error::Input(format!(
                "mse shapes: pred {:?}, target {:?}, {} weights",
                p.dims(),
                target.dims(),
                weights.len()
            )));
        }
        let denom = weight_sum(&weights)? * p.cols() as f64;
        let mut total = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for (a, b) in p.row(r).iter().zip(target.row(r)) {
                row += (a - b) * (a - b);
            }
            total += w * row;
        }
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::MaskedMse {
                pred: ip,
                target,
                weights,
                denom,
            },
        ))
    }

    /// Weighted mean over rows of `−log max(p[r, label_r], 1e-12)`.
    pub fn masked_cross_entropy(
        &mut self,
        probs: Var,
        labels: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
    ) -> Result<Var> {
        let ip = self.idx(probs)?;
        let p = &self.nodes[ip].value;
        if labels.len() != p.rows() || weights.len() != p.rows() {
            return Err(Error::Input("cross-entropy label/weight count mismatch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= p.cols()) {
            return Err(Error::Input(format!("label {} out of range 0..{}", bad, p.cols())));
        }
        let denom = weight_sum(&weights)?;
        let mut total = 0.0;
        for (r, (&l, &w)) in labels.iter().zip(weights.iter()).enumerate() {
            if w != 0.0 {
                total += w * -p.get(r, l).max(LOG_FLOOR).ln();
            }
        }
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::MaskedCrossEntropy {
                probs: ip,
                labels,
                weights,
                denom,
            },
        ))
    }

    /// Weighted mean over rows of `‖p_r − e‖²` with `e` uniform.
    pub fn masked_uniform_distance(&mut self, probs: Var, weights: Rc<Vec<f64>>) -> Result<Var> {
        let ip = self.idx(probs)?;
        let p = &self.nodes[ip].value;
        if weights.len() != p.rows() {
            return Err(Error::Input("uniform-distance weight count mismatch".into()));
        }
        let denom = weight_sum(&weights)?;
        let e = 1.0 / p.cols() as f64;
        let mut total = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                let d: f64 = p.row(r).iter().map(|&v| (v - e) * (v - e)).sum();
                total += w * d;
            }
        }
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::MaskedUniformDistance {
                probs: ip,
                weights,
                denom,
            },
        ))
    }

    /// Reverse sweep from a scalar node; returns the gradient of every
    /// parameter leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called without a recorded tape".into()));
        }
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let val = |k: usize| &self.nodes[k].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.push(*id, g),
            Op::MatMul(a, b) => {
                let (x, w) = (val(*a), val(*b));
                let (r, inner) = x.dims();
                let c = w.cols();
                let wt = w.transpose();
                let mut ga = vec![0.0; r * inner];
                gemm_acc(g.data(), wt.data(), &mut ga, r, c, inner);
                let mut gb = vec![0.0; inner * c];
                gemm_tn_acc(x.data(), g.data(), &mut gb, r, inner, c);
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga).unwrap());
                accumulate(grads, *b, Tensor::new(w.shape().to_vec(), gb).unwrap());
            }
            Op::AddBias(x, b) => {
                let bv = val(*b);
                let mut gb = vec![0.0; bv.len()];
                for r in 0..g.rows() {
                    for (s, &v) in gb.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                accumulate(grads, *b, g.clone());
                accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *b, g.map(|v| -v));
                accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = zip_with(&g, val(*b), |p, q| p * q);
                let gb = zip_with(&g, val(*a), |p, q| p * q);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::MulConst(a, m) => accumulate(grads, *a, zip_with(&g, m, |p, q| p * q)),
            Op::RowScale(a, w) => {
                let mut ga = g;
                for (r, &s) in w.iter().enumerate() {
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_with(&g, &node.value, |p, y| p * (1.0 - y * y));
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_with(&g, val(*a), |p, x| if x > 0.0 { p } else { 0.0 });
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_with(&g, &node.value, |p, y| p * y * (1.0 - y));
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    let mut gp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.row(r)[offset..offset + pc]);
                    }
                    offset += pc;
                    accumulate(grads, p, Tensor::new(val(p).shape().to_vec(), gp).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pr = val(p).rows();
                    let gp = g.slice_rows(start, pr).reshape(val(p).shape().to_vec()).unwrap();
                    start += pr;
                    accumulate(grads, p, gp);
                }
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let c = x.cols();
                match grads[*a].as_mut() {
                    Some(acc) => {
                        let dst = &mut acc.data_mut()[start * c..start * c + g.len()];
                        for (d, &v) in dst.iter_mut().zip(g.data()) {
                            *d += v;
                        }
                    }
                    None => {
                        let mut ga = Tensor::zeros(x.shape());
                        ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                        grads[*a] = Some(ga);
                    }
                }
            }
            Op::Rows(a, map) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.shape());
                let c = x.cols();
                for r in 0..map.out_rows() {
                    let gr = g.row(r);
                    for &(j, w) in map.row(r) {
                        let dst = &mut ga.data_mut()[j * c..(j + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(gr) {
                            *d += w * v;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let s = g.item();
                accumulate(grads, *a, Tensor::filled(val(*a).shape(), s));
            }
            Op::MaskedMse {
                pred,
                target,
                weights,
                denom,
            } => {
                let p = val(*pred);
                let s = g.item();
                let mut gp = Tensor::zeros(p.shape());
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let f = s * 2.0 * w / denom;
                    for ((d, &a), &b) in gp.row_mut(r).iter_mut().zip(p.row(r)).zip(target.row(r)) {
                        *d = f * (a - b);
                    }
                }
                accumulate(grads, *pred, gp);
            }
            Op::MaskedCrossEntropy {
                probs,
                labels,
                weights,
                denom,
            } => {
                let p = val(*probs);
                let s = g.item();
                let mut gp = Tensor::zeros(p.shape());
                for (r, (&l, &w)) in labels.iter().zip(weights.iter()).enumerate() {
                    let pv = p.get(r, l);
                    if w != 0.0 && pv > LOG_FLOOR {
                        gp.set(r, l, -s * w / (pv * denom));
                    }
                }
                accumulate(grads, *probs, gp);
            }
            Op::MaskedUniformDistance {
                probs,
                weights,
                denom,
            } => {
                let p = val(*probs);
                let e = 1.0 / p.cols() as f64;
                let s = g.item();
                let mut gp = Tensor::zeros(p.shape());
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let f = s * 2.0 * w / denom;
                    for (d, &v) in gp.row_mut(r).iter_mut().zip(p.row(r)) {
                        *d = f * (v - e);
                    }
                }
                accumulate(grads, *probs, gp);
            }
        }
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(b.shape().to_vec(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match grads[i].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => grads[i] = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&store, x).unwrap();
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert_eq!(tape.value(loss).item(), 9.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn linear_sum_gradient_is_broadcast_input() {
        // loss = Σ (x · W) ⇒ dW[i, c] = Σ_r x[r, i]
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 3, vec![0.1; 6]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 5.0]).unwrap());
        let wv = tape.param(&store, w).unwrap();
        let y = tape.matmul(x, wv).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0, 4.0, 4.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn unreachable_parameter_gets_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0)).unwrap();
        let b = store.add("b", Tensor::scalar(5.0)).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(&store, a).unwrap();
        let _bv = tape.param(&store, b).unwrap();
        let loss = tape.sum(av).unwrap();
        let g = tape.backward(loss).unwrap();
        store.accumulate(&g);
        assert_eq!(store.grad(a).item(), 1.0);
        assert_eq!(store.grad(b).item(), 0.0);
    }

    #[test]
    fn backward_requires_recorded_tape() {
        let empty = Tape::new();
        let mut other = Tape::new();
        let v = other.constant(Tensor::scalar(1.0));
        assert!(matches!(empty.backward(v), Err(Error::State(_))));
        let mut third = Tape::new();
        third.constant(Tensor::scalar(0.0));
        assert!(matches!(third.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn param_leaf_is_shared_within_a_tape() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.5)).unwrap();
        let mut tape = Tape::new();
        let v1 = tape.param(&store, a).unwrap();
        let v2 = tape.param(&store, a).unwrap();
        assert_eq!(v1, v2);
        let s = tape.add(v1, v2).unwrap();
        let loss = tape.sum(s).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(a).unwrap().item(), 2.0);
    }

    #[test]
    fn row_map_gather_with_zero_rows() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let map = RowMap::gather(2, &[Some(1), None, Some(0)]).unwrap();
        assert_eq!(map.apply(&x).unwrap().data(), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert!(RowMap::gather(2, &[Some(2)]).is_err());
    }
}
