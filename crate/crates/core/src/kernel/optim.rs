use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter in `store`, then
/// zeroes the gradients. The step counter is incremented before the update.
pub fn adam_step(store: &mut ParamStore, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let (values, grads, ms, vs, step) = store.adam_parts();
    *step += 1;
    let t = *step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in values.iter_mut().zip(grads.iter_mut()).zip(ms.iter_mut()).zip(vs.iter_mut()) {
        let pd = p.data_mut();
        let gd = g.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = gd[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            gd[i] = 0.0;
        }
    }
    Ok(())
}

/// Plain gradient descent `p ← p − lr·g`, then zeroes the gradients. The
/// step counter advances; moments are untouched.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let (values, grads, _, _, step) = store.adam_parts();
    *step += 1;
    for (p, g) in values.iter_mut().zip(grads.iter_mut()) {
        for (pi, gi) in p.data_mut().iter_mut().zip(g.data_mut().iter_mut()) {
            *pi -= lr * *gi;
            *gi = 0.0;
        }
    }
    Ok(())
}

/// Step decay: `base · rate^⌊epoch / interval⌋`.
pub fn lr_schedule(epoch: usize, base: f64, rate: f64, interval: usize) -> f64 {
    let k = epoch / interval.max(1);
    base * rate.powi(k as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::tensor::Tensor;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 0.001, 0.7, 15), 0.001);
        assert!((lr_schedule(15, 0.001, 0.7, 15) - 7e-4).abs() < 1e-18);
        assert!((lr_schedule(89, 0.001, 0.7, 15) - 1.6807e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(14, 0.001, 0.7, 15), 0.001);
    }

    #[test]
    fn zero_gradient_is_a_no_op_on_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![0.5, -1.0])).unwrap();
        adam_step(&mut store, 0.01, &AdamConfig::default()).unwrap();
        assert_eq!(store.value(id).data(), &[0.5, -1.0]);
        assert_eq!(store.moments(id).0.data(), &[0.0, 0.0]);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut g = crate::kernel::param::Gradients::default();
        g.push(id, Tensor::scalar(-3.7));
        store.accumulate(&g);
        adam_step(&mut store, 0.001, &AdamConfig::default()).unwrap();
        let delta = store.value(id).item() - 1.0;
        assert!(delta > 0.0);
        assert!((delta - 0.001).abs() < 0.01 * 0.001);
        assert_eq!(store.grad(id).item(), 0.0);
    }

    #[test]
    fn sgd_moves_against_the_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::row_vector(vec![1.0, -2.0])).unwrap();
        let mut tape = crate::kernel::Tape::new();
        let x = tape.param(&s, id).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        s.accumulate(&tape.backward(l).unwrap());
        sgd_step(&mut s, 0.25).unwrap();
        assert_eq!(s.value(id).data(), &[0.5, -1.0]);
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
        assert!(sgd_step(&mut s, 0.0).is_err());
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut store = ParamStore::new();
        assert!(matches!(adam_step(&mut store, 0.0, &AdamConfig::default()), Err(Error::Config(_))));
        assert!(matches!(adam_step(&mut store, -1.0, &AdamConfig::default()), Err(Error::Config(_))));
    }
}
