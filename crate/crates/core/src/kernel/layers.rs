//! Sequence layers composed from tape primitives.
//!
//! A batch of variable-length sequences is laid out time-major: row
//! `t * batch + b` holds frame `t` of sequence `b`. Rows past a sequence's
//! length are padding; they never feed valid rows and carry zero loss weight.

use std::rc::Rc;

use super::tape::{RowMap, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    t_max: usize,
    lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Self {
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        SeqLayout { t_max, lengths }
    }

    pub fn single(len: usize) -> Self {
        Self::new(vec![len])
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn rows(&self) -> usize {
        self.t_max * self.batch()
    }

    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.batch() + b
    }

    pub fn valid(&self, t: usize, b: usize) -> bool {
        t < self.lengths[b]
    }

    /// 1 for real frames, 0 for padding, per row.
    pub fn row_weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.rows());
        for t in 0..self.t_max {
            for b in 0..self.batch() {
                w.push(if self.valid(t, b) { 1.0 } else { 0.0 });
            }
        }
        w
    }

    pub fn step_mask(&self, t: usize) -> Vec<f64> {
        (0..self.batch())
            .map(|b| if self.valid(t, b) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Row map taking frame `t + offset` of the same sequence into row `t`,
    /// zero when that frame lies outside the sequence or row `t` is padding.
    pub fn shift_map(&self, offset: isize) -> Rc<RowMap> {
        let mut src = Vec::with_capacity(self.rows());
        for t in 0..self.t_max {
            for b in 0..self.batch() {
                let s = t as isize + offset;
                let ok = self.valid(t, b) && s >= 0 && (s as usize) < self.lengths[b];
                src.push(ok.then(|| self.row(s as usize, b)));
            }
        }
        Rc::new(RowMap::gather(self.rows(), &src).expect("in range"))
    }

    /// Row map broadcasting one table row per sequence to all of its rows
    /// (padding rows included).
    pub fn broadcast_map(&self, table_rows: usize, ids: &[usize]) -> Result<Rc<RowMap>> {
        let mut src = Vec::with_capacity(self.rows());
        for _ in 0..self.t_max {
            for &id in ids {
                src.push(Some(id));
            }
        }
        Ok(Rc::new(RowMap::gather(table_rows, &src)?))
    }

    /// Row map averaging each sequence's valid rows into one output row.
    pub fn mean_pool_map(&self) -> Rc<RowMap> {
        let rows: Vec<Vec<(usize, f64)>> = (0..self.batch())
            .map(|b| {
                let n = self.lengths[b] as f64;
                (0..self.lengths[b]).map(|t| (self.row(t, b), 1.0 / n)).collect()
            })
            .collect();
        Rc::new(RowMap::new(self.rows(), &rows).expect("in range"))
    }
}

/// 1-D convolution as a linear map over concatenated shifted copies of `x`.
/// `shifts` holds one row map per kernel tap, in weight-block order.
pub fn conv1d(tape: &mut Tape, x: Var, w: Var, b: Var, shifts: &[Rc<RowMap>]) -> Result<Var> {
    let mut taps = Vec::with_capacity(shifts.len());
    for m in shifts {
        taps.push(tape.rows(x, m.clone())?);
    }
    let stacked = tape.concat_cols(&taps)?;
    tape.linear(stacked, w, b)
}

/// Elman recurrence `h_t = tanh(proj_t + h_{t∓1} · U)` over a time-major
/// input projection. Padding rows are reset to zero at every step, so the
/// reverse direction starts each sequence from its own last frame.
pub fn recurrent(tape: &mut Tape, proj: Var, u: Var, layout: &SeqLayout, reverse: bool) -> Result<Var> {
    let b = layout.batch();
    let steps: Vec<usize> = if reverse {
        (0..layout.t_max()).rev().collect()
    } else {
        (0..layout.t_max()).collect()
    };
    let mut outputs: Vec<Option<Var>> = vec![None; layout.t_max()];
    let mut prev: Option<Var> = None;
    for t in steps {
        let x = tape.slice_rows(proj, t * b, b)?;
        let pre = match prev {
            Some(h) => {
                let r = tape.matmul(h, u)?;
                tape.add(x, r)?
            }
            None => x,
        };
        let mut h = tape.tanh(pre)?;
        let mask = layout.step_mask(t);
        if mask.iter().any(|&m| m == 0.0) {
            h = tape.row_scale(h, Rc::new(mask))?;
        }
        outputs[t] = Some(h);
        prev = Some(h);
    }
    let ordered: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step")).collect();
    tape.concat_rows(&ordered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::tensor::Tensor;

    #[test]
    fn shift_respects_lengths() {
        let layout = SeqLayout::new(vec![3, 1]);
        // rows: (t0,b0)=0 (t0,b1)=1 (t1,b0)=2 (t1,b1)=3 (t2,b0)=4 (t2,b1)=5
        let x = Tensor::matrix(6, 1, vec![10.0, 20.0, 11.0, 99.0, 12.0, 99.0]).unwrap();
        let next = layout.shift_map(1).apply(&x).unwrap();
        assert_eq!(next.data(), &[11.0, 0.0, 12.0, 0.0, 0.0, 0.0]);
        let prev = layout.shift_map(-1).apply(&x).unwrap();
        assert_eq!(prev.data(), &[0.0, 0.0, 10.0, 0.0, 11.0, 0.0]);
    }

    #[test]
    fn mean_pool_ignores_padding() {
        let layout = SeqLayout::new(vec![2, 1]);
        let x = Tensor::matrix(4, 1, vec![1.0, 5.0, 3.0, 100.0]).unwrap();
        let pooled = layout.mean_pool_map().apply(&x).unwrap();
        assert_eq!(pooled.data(), &[2.0, 5.0]);
    }

    #[test]
    fn reverse_recurrence_starts_at_sequence_end() {
        // padded batch must match running the short sequence alone
        let u = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let long = SeqLayout::new(vec![3, 2]);
        let proj = Tensor::matrix(6, 1, vec![0.1, 0.4, 0.2, 0.5, 0.3, 7.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(proj);
        let uv = tape.constant(u.clone());
        let h = recurrent(&mut tape, p, uv, &long, true).unwrap();
        let batched = tape.value(h).clone();

        let short = SeqLayout::single(2);
        let mut tape2 = Tape::new();
        let p2 = tape2.constant(Tensor::matrix(2, 1, vec![0.4, 0.5]).unwrap());
        let uv2 = tape2.constant(u);
        let h2 = recurrent(&mut tape2, p2, uv2, &short, true).unwrap();
        let alone = tape2.value(h2);
        assert_eq!(batched.get(1, 0), alone.get(0, 0));
        assert_eq!(batched.get(3, 0), alone.get(1, 0));
        assert_eq!(batched.get(5, 0), 0.0);
    }
}
