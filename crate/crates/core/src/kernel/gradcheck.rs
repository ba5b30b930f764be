//! Analytic-versus-finite-difference gradient checks for every primitive.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{conv1d, recurrent, SeqLayout};
use super::param::ParamStore;
use super::tape::{RowMap, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Tanh,
    Relu,
    Sigmoid,
    Softmax,
    CrossEntropy,
    Mse,
    UniformDistance,
    Concat,
    Slice,
    RowMap,
    Dropout,
    Elementwise,
    Conv1d,
    Recurrent,
    Embedding,
}

impl LayerKind {
    pub const ALL: [LayerKind; 16] = [
        LayerKind::Linear,
        LayerKind::Tanh,
        LayerKind::Relu,
        LayerKind::Sigmoid,
        LayerKind::Softmax,
        LayerKind::CrossEntropy,
        LayerKind::Mse,
        LayerKind::UniformDistance,
        LayerKind::Concat,
        LayerKind::Slice,
        LayerKind::RowMap,
        LayerKind::Dropout,
        LayerKind::Elementwise,
        LayerKind::Conv1d,
        LayerKind::Recurrent,
        LayerKind::Embedding,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Tanh => "tanh",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax => "softmax",
            LayerKind::CrossEntropy => "cross-entropy",
            LayerKind::Mse => "mse",
            LayerKind::UniformDistance => "uniform-distance",
            LayerKind::Concat => "concat",
            LayerKind::Slice => "slice",
            LayerKind::RowMap => "row-map",
            LayerKind::Dropout => "dropout",
            LayerKind::Elementwise => "elementwise",
            LayerKind::Conv1d => "conv1d",
            LayerKind::Recurrent => "recurrent",
            LayerKind::Embedding => "embedding",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .iter()
            .copied()
            .find(|k| k.tag() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = LayerKind::ALL.iter().map(|k| k.tag()).collect();
                Error::Config(format!("unknown layer tag {s:?}; known: {}", known.join(", ")))
            })
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub layer: LayerKind,
    pub tol: f64,
    /// Max relative error per trial.
    pub trial_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.trial_errors.iter().cloned().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.trial_errors.iter().all(|&e| e < self.tol)
    }
}

pub type LossFn = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

/// Compares tape gradients against central differences for every element
/// of every parameter in `store`. The analytic gradient is multiplied by
/// `analytic_scale` first (1.0 for a real check).
///
/// Returns the max over parameters of `‖g − ĝ‖∞ / max(‖g‖∞, ‖ĝ‖∞)`.
pub fn finite_difference_error(
    store: &mut ParamStore,
    loss: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
    analytic_scale: f64,
) -> Result<f64> {
    let per = finite_difference_errors(store, loss, analytic_scale)?;
    Ok(per.into_iter().fold(0.0, |m, (_, e)| m.max(e)))
}

/// Per-parameter relative errors, in store order.
pub fn finite_difference_errors(
    store: &mut ParamStore,
    loss: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
    analytic_scale: f64,
) -> Result<Vec<(String, f64)>> {
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => g.data().iter().map(|v| v * analytic_scale).collect(),
            None => vec![0.0; n],
        };
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let mut t1 = Tape::new();
            let v1 = loss(&mut t1, store)?;
            let plus = t1.value(v1).item();
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let mut t2 = Tape::new();
            let v2 = loss(&mut t2, store)?;
            let minus = t2.value(v2).item();
            store.value_mut(id).data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let err = if scale > 1e-10 { diff / scale } else { diff };
        out.push((store.name(id).to_string(), err));
    }
    Ok(out)
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed random weights, so
/// every output element carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let m = tape.mul_const(out, weights.clone())?;
    tape.sum(m)
}

/// Builds a random instance of `kind`: a parameter store holding every
/// differentiable input and a closure computing a scalar from it.
pub fn random_instance(kind: LayerKind, rng: &mut ChaCha8Rng) -> Result<(ParamStore, LossFn)> {
    let mut store = ParamStore::new();
    let rows = rng.random_range(1..=4);
    let cols = rng.random_range(1..=5);
    let f: LossFn = match kind {
        LayerKind::Linear => {
            let outs = rng.random_range(1..=4);
            let x = store.add("x", rand_tensor(rng, rows, cols))?;
            let w = store.add("w", rand_tensor(rng, cols, outs))?;
            let b = store.add("b", rand_tensor(rng, 1, outs).reshape(vec![outs])?)?;
            let r = rand_tensor(rng, rows, outs);
            Box::new(move |t, s| {
                let (xv, wv, bv) = (t.param(s, x)?, t.param(s, w)?, t.param(s, b)?);
                let y = t.linear(xv, wv, bv)?;
                weighted_sum(t, y, &r)
            })
        }
        LayerKind::Tanh | LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Softmax => {
            let init = if kind == LayerKind::Relu {
                away_from_zero(rng, rows, cols)
            } else {
                rand_tensor(rng, rows, cols).map(|v| 2.0 * v)
            };
            let x = store.add("x", init)?;
            let r = rand_tensor(rng, rows, cols);
            Box::new(move |t, s| {
                let xv = t.param(s, x)?;
                let y = match kind {
                    LayerKind::Tanh => t.tanh(xv)?,
                    LayerKind::Relu => t.relu(xv)?,
                    LayerKind::Sigmoid => t.sigmoid(xv)?,
                    _ => t.softmax_rows(xv)?,
                };
                weighted_sum(t, y, &r)
            })
        }
        LayerKind::CrossEntropy | LayerKind::UniformDistance => {
            let cols = cols.max(2);
            let x = store.add("logits", rand_tensor(rng, rows, cols).map(|v| 2.0 * v))?;
            let labels: Rc<Vec<usize>> = Rc::new((0..rows).map(|_| rng.random_range(0..cols)).collect());
            let mut w: Vec<f64> = (0..rows).map(|_| rng.random_range(0.2..1.0)).collect();
            if rows > 1 {
                w[0] = 0.0;
            }
            let w = Rc::new(w);
            Box::new(move |t, s| {
                let xv = t.param(s, x)?;
                let p = t.softmax_rows(xv)?;
                if kind == LayerKind::CrossEntropy {
                    t.masked_cross_entropy(p, labels.clone(), w.clone())
                } else {
                    t.masked_uniform_distance(p, w.clone())
                }
            })
        }
        LayerKind::Mse => {
            let x = store.add("pred", rand_tensor(rng, rows, cols))?;
            let target = Rc::new(rand_tensor(rng, rows, cols));
            let mut w: Vec<f64> = vec![1.0; rows];
            if rows > 1 {
                w[rows - 1] = 0.0;
            }
            let w = Rc::new(w);
            Box::new(move |t, s| {
                let xv = t.param(s, x)?;
                t.masked_mse(xv, target.clone(), w.clone())
            })
        }
        LayerKind::Concat => {
            let c2 = rng.random_range(1..=3);
            let a = store.add("a", rand_tensor(rng, rows, cols))?;
            let b = store.add("b", rand_tensor(rng, rows, c2))?;
            let c = store.add("c", rand_tensor(rng, 2, cols + c2))?;
            let r = rand_tensor(rng, rows + 2, cols + c2);
            Box::new(move |t, s| {
                let (av, bv, cv) = (t.param(s, a)?, t.param(s, b)?, t.param(s, c)?);
                let ab = t.concat_cols(&[av, bv])?;
                let all = t.concat_rows(&[ab, cv])?;
                weighted_sum(t, all, &r)
            })
        }
        LayerKind::Slice => {
            let total = rows + 2;
            let start = rng.random_range(0..=2);
            let x = store.add("x", rand_tensor(rng, total, cols))?;
            let r = rand_tensor(rng, rows, cols);
            Box::new(move |t, s| {
                let xv = t.param(s, x)?;
                let y = t.slice_rows(xv, start, rows)?;
                weighted_sum(t, y, &r)
            })
        }
        LayerKind::RowMap => {
            let out_rows = rng.random_range(1..=5);
            let map_rows: Vec<Vec<(usize, f64)>> = (0..out_rows)
                .map(|_| {
                    let k = rng.random_range(0..=3);
                    (0..k)
                        .map(|_| (rng.random_range(0..rows), rng.random_range(-1.0..1.0)))
                        .collect()
                })
                .collect();
            let map = Rc::new(RowMap::new(rows, &map_rows)?);
            let x = store.add("x", rand_tensor(rng, rows, cols))?;
            let r = rand_tensor(rng, out_rows, cols);
            Box::new(move |t, s| {
                let xv = t.param(s, x)?;
                let y = t.rows(xv, map.clone())?;
                weighted_sum(t, y, &r)
            })
        }
        LayerKind::Dropout => {
            let mask_data = (0..rows * cols)
                .map(|_| if rng.random_bool(0.5) { 2.0 } else { 0.0 })
                .collect();
            let mask = Tensor::matrix(rows, cols, mask_data)?;
            let x = store.add("x", rand_tensor(rng, rows, cols))?;
            let r = rand_tensor(rng, rows, cols);
            Box::new(move |t, s| {
                let xv = t.param(s, x)?;
                let y = t.mul_const(xv, mask.clone())?;
                let z = t.tanh(y)?;
                weighted_sum(t, z, &r)
            })
        }
        LayerKind::Elementwise => {
            let a = store.add("a", rand_tensor(rng, rows, cols))?;
            let b = store.add("b", rand_tensor(rng, rows, cols))?;
            let scale: f64 = rng.random_range(-2.0..2.0);
            let rw = Rc::new((0..rows).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            let r = rand_tensor(rng, rows, cols);
            Box::new(move |t, s| {
                let (av, bv) = (t.param(s, a)?, t.param(s, b)?);
                let p = t.mul(av, bv)?;
                let d = t.sub(p, av)?;
                let e = t.add(d, bv)?;
                let f = t.scale(e, scale)?;
                let g = t.row_scale(f, rw.clone())?;
                weighted_sum(t, g, &r)
            })
        }
        LayerKind::Conv1d => {
            let batch = rng.random_range(1..=3);
            let lengths: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=5)).collect();
            let layout = SeqLayout::new(lengths);
            let outs = rng.random_range(1..=4);
            let x = store.add("x", rand_tensor(rng, layout.rows(), cols))?;
            let w = store.add("w", rand_tensor(rng, 3 * cols, outs))?;
            let b = store.add("b", rand_tensor(rng, 1, outs).reshape(vec![outs])?)?;
            let shifts = vec![layout.shift_map(-1), layout.shift_map(0), layout.shift_map(1)];
            let r = rand_tensor(rng, layout.rows(), outs);
            Box::new(move |t, s| {
                let (xv, wv, bv) = (t.param(s, x)?, t.param(s, w)?, t.param(s, b)?);
                let y = conv1d(t, xv, wv, bv, &shifts)?;
                let z = t.relu(y)?;
                weighted_sum(t, z, &r)
            })
        }
        LayerKind::Recurrent => {
            let hidden = rng.random_range(1..=4);
            let short = rng.random_range(1..=5);
            let layout = SeqLayout::new(vec![5, short]);
            let proj = store.add("proj", rand_tensor(rng, layout.rows(), hidden))?;
            let uf = store.add("u_fwd", rand_tensor(rng, hidden, hidden))?;
            let ub = store.add("u_bwd", rand_tensor(rng, hidden, hidden))?;
            let r = rand_tensor(rng, layout.rows(), 2 * hidden);
            Box::new(move |t, s| {
                let p = t.param(s, proj)?;
                let (fv, bv) = (t.param(s, uf)?, t.param(s, ub)?);
                let hf = recurrent(t, p, fv, &layout, false)?;
                let hb = recurrent(t, p, bv, &layout, true)?;
                let h = t.concat_cols(&[hf, hb])?;
                weighted_sum(t, h, &r)
            })
        }
        LayerKind::Embedding => {
            let n_ids = rng.random_range(2..=4);
            let batch = rng.random_range(1..=3);
            let ids: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_ids)).collect();
            let layout = SeqLayout::new((0..batch).map(|_| rng.random_range(1..=4)).collect());
            let map = layout.broadcast_map(n_ids, &ids)?;
            let table = store.add("table", rand_tensor(rng, n_ids, cols))?;
            let r = rand_tensor(rng, layout.rows(), cols);
            Box::new(move |t, s| {
                let tv = t.param(s, table)?;
                let y = t.rows(tv, map.clone())?;
                weighted_sum(t, y, &r)
            })
        }
    };
    Ok((store, f))
}

pub fn grad_check(layer: LayerKind, trials: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    grad_check_scaled(layer, trials, tol, seed, 1.0)
}

/// Like [`grad_check`] but with the analytic gradient multiplied by
/// `analytic_scale`, to confirm the checker catches a wrong gradient.
pub fn grad_check_scaled(
    layer: LayerKind,
    trials: usize,
    tol: f64,
    seed: u64,
    analytic_scale: f64,
) -> Result<GradCheckReport> {
    let mut trial_errors = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64 + 1);
        let (mut store, f) = random_instance(layer, &mut rng)?;
        trial_errors.push(finite_difference_error(&mut store, f.as_ref(), analytic_scale)?);
    }
    Ok(GradCheckReport {
        layer,
        tol,
        trial_errors,
    })
}
