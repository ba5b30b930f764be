//! Losses, the G/D alternation schedule and the system trainer.

use std::fmt;
use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Accent, Utterance};
use crate::error::{Error, Result};
use crate::kernel::{adam_step, lr_schedule, AdamConfig, Gradients, Tape, Tensor};
use crate::recognizer::{extract_bn, select_extractor, Registry};
use crate::rngs;
use crate::system::SystemId;
use crate::vc::{ForwardOpts, SeqBatch, SeqItem, VcModel};

/// Which generator parameters receive the adversarial gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvScope {
    /// Encoder weights only; the accent embedding table is left out.
    EncoderOnly,
    /// Every generator parameter upstream of `h`.
    FullGenerator,
}

impl fmt::Display for AdvScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdvScope::EncoderOnly => "encoder-only",
            AdvScope::FullGenerator => "full-generator",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_interval: usize,
    pub beta: f64,
    /// Epochs per G or D block.
    pub alternation: usize,
    pub accent_gate_epoch: usize,
    pub adv_scope: AdvScope,
    /// Run every epoch as a G epoch (ablation switch).
    pub skip_d_phases: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 90,
            batch_size: 32,
            lr: 0.001,
            decay_rate: 0.7,
            decay_interval: 15,
            beta: 0.3,
            alternation: 5,
            accent_gate_epoch: 10,
            adv_scope: AdvScope::EncoderOnly,
            skip_d_phases: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.batch_size == 0 || self.alternation == 0 || self.decay_interval == 0 {
            return Err(Error::Config("batch_size, alternation and decay_interval must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr, self.decay_rate, self.decay_interval)
    }

    /// β in effect for a system: zero unless adversarial.
    pub fn beta_for(&self, system: SystemId) -> f64 {
        if system.adversarial() {
            self.beta
        } else {
            0.0
        }
    }

    pub fn accent_gate(&self, epoch: usize) -> bool {
        epoch >= self.accent_gate_epoch
    }

    /// G for the first `alternation` epochs, then D, and so on. A final
    /// partial block keeps its phase and is simply shorter.
    pub fn phase(&self, epoch: usize, system: SystemId) -> Phase {
        if !system.adversarial() || self.skip_d_phases {
            return Phase::G;
        }
        if (epoch / self.alternation) % 2 == 0 {
            Phase::G
        } else {
            Phase::D
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    G,
    D,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::G => "G",
            Phase::D => "D",
        })
    }
}

/// Which parameter groups may change in a phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub generator_trainable: bool,
    pub classifier_trainable: bool,
}

pub fn freeze_mask(phase: Phase) -> FreezeMask {
    match phase {
        Phase::G => FreezeMask { generator_trainable: true, classifier_trainable: false },
        Phase::D => FreezeMask { generator_trainable: false, classifier_trainable: true },
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.len() as f64
}

/// `mse(pre, target) + mse(post, target)`.
pub fn loss_recons(pre: &Tensor, post: &Tensor, target: &Tensor) -> Result<f64> {
    if pre.dims() != target.dims() || post.dims() != target.dims() {
        return Err(Error::Input(format!(
            "reconstruction shapes differ: pre {:?}, post {:?}, target {:?}",
            pre.dims(),
            post.dims(),
            target.dims()
        )));
    }
    if target.is_empty() {
        return Err(Error::Input("empty reconstruction target".into()));
    }
    Ok(mse(pre, target) + mse(post, target))
}

fn check_prob_rows(p: &Tensor) -> Result<()> {
    if p.rows() == 0 || p.cols() == 0 {
        return Err(Error::Input("empty probability matrix".into()));
    }
    for r in 0..p.rows() {
        let s: f64 = p.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Mean over rows of `‖p_t − e‖²`, `e` the uniform distribution.
pub fn loss_adv(p: &Tensor) -> Result<f64> {
    check_prob_rows(p)?;
    let e = 1.0 / p.cols() as f64;
    let total: f64 = (0..p.rows())
        .map(|r| p.row(r).iter().map(|v| (v - e) * (v - e)).sum::<f64>())
        .sum();
    Ok(total / p.rows() as f64)
}

/// Mean over rows of the cross-entropy against one speaker label.
pub fn loss_d(p: &Tensor, label: usize) -> Result<f64> {
    if label >= p.cols() {
        return Err(Error::Input(format!("speaker label {label} outside 0..{}", p.cols())));
    }
    check_prob_rows(p)?;
    let total: f64 = (0..p.rows())
        .map(|r| -p.get(r, label).max(crate::kernel::tensor::LOG_FLOOR).ln())
        .sum();
    Ok(total / p.rows() as f64)
}

/// `recons + β · adv`, with β forced to zero for non-adversarial systems.
pub fn loss_g(recons: f64, adv: f64, beta: f64, system: SystemId) -> f64 {
    if system.adversarial() && beta != 0.0 {
        recons + beta * adv
    } else {
        recons
    }
}

/// One training record: bottleneck input, target frames and labels.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub bn: Tensor,
    pub frames: Tensor,
    pub accent: Accent,
    /// Index among the target speakers.
    pub speaker: usize,
}

/// Extracts bottleneck features for target-speaker utterances with the
/// extractor the system prescribes for each accent.
pub fn prepare_items(utts: &[Utterance], targets: &[usize], registry: &Registry, system: SystemId) -> Result<Vec<TrainItem>> {
    utts.iter()
        .map(|u| {
            let speaker = targets
                .iter()
                .position(|&s| s == u.speaker)
                .ok_or_else(|| Error::Input(format!("{} is not from a target speaker", u.id)))?;
            let model = select_extractor(u.accent, registry, system)?;
            Ok(TrainItem {
                id: u.id.clone(),
                bn: extract_bn(model, u)?.bn,
                frames: u.frames.clone(),
                accent: u.accent,
                speaker,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub accent_gate: bool,
    /// Absent in D epochs, where the decoder does not run.
    pub recons: Option<f64>,
    pub adv: f64,
    pub ce: f64,
}

pub const LOG_HEADER: &str = "epoch\tphase\tlr\taccent_gate\trecons\tadv\tce";

impl EpochLog {
    pub fn tsv(&self) -> String {
        let recons = self.recons.map(|v| format!("{v:.9}")).unwrap_or_else(|| "-".into());
        format!(
            "{}\t{}\t{:e}\t{}\t{}\t{:.9}\t{:.9}",
            self.epoch,
            self.phase,
            self.lr,
            if self.accent_gate { 1 } else { 0 },
            recons,
            self.adv,
            self.ce
        )
    }

    pub fn parse(line: &str) -> Result<EpochLog> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Format(format!("bad training log line {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        Ok(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            phase: match f[1] {
                "G" => Phase::G,
                "D" => Phase::D,
                _ => return Err(bad()),
            },
            lr: f[2].parse().map_err(|_| bad())?,
            accent_gate: f[3] == "1",
            recons: if f[4] == "-" { None } else { Some(f[4].parse().map_err(|_| bad())?) },
            adv: f[5].parse().map_err(|_| bad())?,
            ce: f[6].parse().map_err(|_| bad())?,
        })
    }
}

/// Length-bucketed batches: a seeded shuffle, a stable sort by length, cut
/// into chunks, chunk order shuffled again.
fn epoch_batches(lengths: &[usize], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = rngs::stream(seed, rngs::VC_SHUFFLE, epoch as u64);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch).map(|c| c.to_vec()).collect();
    chunks.shuffle(&mut rng);
    chunks
}

fn batch_of(items: &[TrainItem], idx: &[usize]) -> Result<SeqBatch> {
    let seq: Vec<SeqItem> = idx
        .iter()
        .map(|&i| SeqItem {
            bn: &items[i].bn,
            frames: Some(&items[i].frames),
            accent: items[i].accent,
            speaker: items[i].speaker,
        })
        .collect();
    SeqBatch::new(&seq)
}

fn encoder_only(model: &VcModel, grads: &mut Gradients) {
    let keep: Vec<bool> = model.generator.names().iter().map(|n| VcModel::is_encoder_param(n)).collect();
    let store = &model.generator;
    grads.retain(|id| !store.owns(id) || keep[id.index()]);
}

/// Trains `model` from its current epoch up to `cfg.epochs`, calling
/// `on_epoch` after every epoch. A model already at `cfg.epochs` is
/// returned unchanged.
pub fn train_system(
    model: &mut VcModel,
    items: &[TrainItem],
    system: SystemId,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog, &VcModel) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Input("no training items".into()));
    }
    let beta = cfg.beta_for(system);
    let lengths: Vec<usize> = items.iter().map(|i| i.frames.rows()).collect();
    let mut logs = Vec::new();
    for epoch in model.epoch..cfg.epochs {
        let phase = cfg.phase(epoch, system);
        let gate = cfg.accent_gate(epoch);
        let lr = cfg.lr_at(epoch);
        let (mut recons_sum, mut adv_sum, mut ce_sum, mut frames) = (0.0, 0.0, 0.0, 0.0);
        for (bi, idx) in epoch_batches(&lengths, cfg.batch_size, seed, epoch).iter().enumerate() {
            let batch = batch_of(items, idx)?;
            let n: f64 = batch.weights.iter().sum();
            let labels = if model.cfg.pooled_classifier { Rc::new(batch.speakers.clone()) } else { batch.row_speakers() };
            let cls_weights = if model.cfg.pooled_classifier { Rc::new(vec![1.0; batch.layout.batch()]) } else { batch.weights.clone() };
            match phase {
                Phase::G => {
                    let mut drng = rngs::stream(seed, rngs::VC_DROPOUT, ((epoch as u64) << 24) | bi as u64);
                    let mask = model.dropout_mask(batch.layout.rows(), &mut drng);
                    let mut tape = Tape::new();
                    let opts = ForwardOpts { accent_gate: gate, decode: true, dropout: mask };
                    let f = model.net().forward(&mut tape, &batch, opts)?;
                    let target = batch.frames.clone().expect("teacher frames");
                    let a = tape.masked_mse(f.pre.unwrap(), target.clone(), batch.weights.clone())?;
                    let b = tape.masked_mse(f.post.unwrap(), target, batch.weights.clone())?;
                    let recons = tape.add(a, b)?;
                    let adv = tape.masked_uniform_distance(f.probs, cls_weights.clone())?;
                    let ce = tape.masked_cross_entropy(f.probs, labels, cls_weights)?;
                    recons_sum += n * tape.value(recons).item();
                    adv_sum += n * tape.value(adv).item();
                    ce_sum += n * tape.value(ce).item();
                    if beta > 0.0 {
                        let scaled = tape.scale(adv, beta)?;
                        match cfg.adv_scope {
                            AdvScope::FullGenerator => {
                                let total = tape.add(recons, scaled)?;
                                model.generator.accumulate(&tape.backward(total)?);
                            }
                            AdvScope::EncoderOnly => {
                                model.generator.accumulate(&tape.backward(recons)?);
                                let mut g = tape.backward(scaled)?;
                                encoder_only(model, &mut g);
                                model.generator.accumulate(&g);
                            }
                        }
                    } else {
                        model.generator.accumulate(&tape.backward(recons)?);
                    }
                    adam_step(&mut model.generator, lr, &cfg.adam)?;
                }
                Phase::D => {
                    let mut tape = Tape::new();
                    let h = model.net().encode_tape(&mut tape, &batch, gate)?;
                    let h = tape.value(h).clone();
                    let mut tape = Tape::new();
                    let hv = tape.constant(h);
                    let probs = model.net().classify_tape(&mut tape, hv, &batch.layout)?;
                    let adv = tape.masked_uniform_distance(probs, cls_weights.clone())?;
                    let ce = tape.masked_cross_entropy(probs, labels, cls_weights)?;
                    adv_sum += n * tape.value(adv).item();
                    ce_sum += n * tape.value(ce).item();
                    model.classifier.accumulate(&tape.backward(ce)?);
                    adam_step(&mut model.classifier, lr, &cfg.adam)?;
                }
            }
            frames += n;
        }
        model.epoch = epoch + 1;
        let log = EpochLog {
            epoch,
            phase,
            lr,
            accent_gate: gate,
            recons: (phase == Phase::G).then_some(recons_sum / frames),
            adv: adv_sum / frames,
            ce: ce_sum / frames,
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    model.trained = true;
    Ok(logs)
}

/// Teacher-forced reconstruction loss without dropout, frame-weighted over
/// the items, with the accent gate on.
pub fn heldout_recons(model: &VcModel, items: &[TrainItem]) -> Result<f64> {
    let (mut total, mut frames) = (0.0, 0.0);
    for chunk in (0..items.len()).collect::<Vec<_>>().chunks(32) {
        let batch = batch_of(items, chunk)?;
        let mut tape = Tape::new();
        let f = model.net().forward(&mut tape, &batch, ForwardOpts { accent_gate: true, decode: true, dropout: None })?;
        let target = batch.frames.clone().expect("teacher frames");
        let a = tape.masked_mse(f.pre.unwrap(), target.clone(), batch.weights.clone())?;
        let b = tape.masked_mse(f.post.unwrap(), target, batch.weights.clone())?;
        let n: f64 = batch.weights.iter().sum();
        total += n * (tape.value(a).item() + tape.value(b).item());
        frames += n;
    }
    Ok(total / frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::tensor::softmax;
    use crate::kernel::ParamStore;
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn recons_examples() {
        let x = t(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(loss_recons(&x, &x, &x).unwrap(), 0.0);
        let plus = x.map(|v| v + 1.0);
        assert_eq!(loss_recons(&x, &plus, &x).unwrap(), 1.0);
        assert!(matches!(loss_recons(&x, &t(1, 2, vec![0.0, 0.0]), &x), Err(Error::Input(_))));
    }

    #[test]
    fn recons_matches_scalar_loop() {
        let pre = t(3, 2, vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1]);
        let post = t(3, 2, vec![0.1, -1.0, 1.5, 0.9, -0.2, 1.4]);
        let tgt = t(3, 2, vec![0.0, -1.1, 1.8, 1.0, 0.0, 1.0]);
        let mut a = 0.0;
        let mut b = 0.0;
        for i in 0..6 {
            a += (pre.data()[i] - tgt.data()[i]).powi(2);
            b += (post.data()[i] - tgt.data()[i]).powi(2);
        }
        let oracle = a / 6.0 + b / 6.0;
        assert!((loss_recons(&pre, &post, &tgt).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn adv_examples() {
        assert_eq!(loss_adv(&t(2, 3, vec![1.0 / 3.0; 6])).unwrap(), 0.0);
        assert!((loss_adv(&t(1, 3, vec![1.0, 0.0, 0.0])).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((loss_adv(&t(1, 2, vec![0.75, 0.25])).unwrap() - 0.125).abs() < 1e-12);
        assert!(matches!(loss_adv(&t(1, 2, vec![0.5, 0.6])), Err(Error::Input(_))));
    }

    #[test]
    fn adv_bound_is_attained_at_one_hot_rows() {
        for n in [2usize, 3, 5] {
            let mut p = vec![0.0; n];
            p[0] = 1.0;
            let bound = ((n as f64 - 1.0) / n as f64).powi(2) + (n as f64 - 1.0) / (n * n) as f64;
            let v = loss_adv(&t(1, n, p)).unwrap();
            assert!((v - bound).abs() < 1e-12, "n={n}: {v} vs {bound}");
        }
    }

    proptest! {
        #[test]
        fn adv_stays_within_bounds(z in proptest::collection::vec(-8.0f64..8.0, 2..6)) {
            let n = z.len();
            let p = softmax(&z).unwrap();
            let v = loss_adv(&t(1, n, p)).unwrap();
            let bound = ((n as f64 - 1.0) / n as f64).powi(2) + (n as f64 - 1.0) / (n * n) as f64;
            prop_assert!(v >= 0.0 && v <= bound + 1e-12);
        }

        #[test]
        fn recons_is_symmetric_and_nonnegative(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            b in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let (x, y) = (t(3, 2, a), t(3, 2, b));
            let l = loss_recons(&x, &x, &y).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - loss_recons(&y, &y, &x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn d_loss_examples() {
        assert!(loss_d(&t(2, 3, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]), 1).unwrap() <= 1e-11);
        assert!((loss_d(&t(1, 3, vec![1.0 / 3.0; 3]), 2).unwrap() - 3f64.ln()).abs() < 1e-12);
        let p = t(2, 3, vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]);
        let oracle = (-(0.5f64).ln() - (0.1f64).ln()) / 2.0;
        assert!((loss_d(&p, 1).unwrap() - oracle).abs() < 1e-12);
        assert!(matches!(loss_d(&p, 3), Err(Error::Input(_))));
    }

    #[test]
    fn g_loss_examples() {
        assert_eq!(loss_g(1.0, 2.0 / 3.0, 0.0, SystemId::P2), 1.0);
        assert!((loss_g(1.0, 2.0 / 3.0, 0.3, SystemId::P2) - 1.2).abs() < 1e-12);
        assert_eq!(loss_g(1.0, 0.0, 0.3, SystemId::P2), 1.0);
        assert_eq!(loss_g(1.0, 2.0 / 3.0, 0.3, SystemId::P1), 1.0);
        assert_eq!(TrainConfig::default().beta, 0.3);
    }

    #[test]
    fn schedule_blocks() {
        let cfg = TrainConfig::default();
        let phases: Vec<Phase> = (0..90).map(|e| cfg.phase(e, SystemId::P2)).collect();
        let mut blocks = Vec::new();
        for (e, p) in phases.iter().enumerate() {
            if e == 0 || phases[e - 1] != *p {
                blocks.push((*p, 1));
            } else {
                blocks.last_mut().unwrap().1 += 1;
            }
        }
        assert_eq!(blocks.len(), 18);
        for (i, (p, len)) in blocks.iter().enumerate() {
            assert_eq!(*len, 5);
            assert_eq!(*p, if i % 2 == 0 { Phase::G } else { Phase::D });
        }
        assert!((0..90).all(|e| cfg.phase(e, SystemId::P1) == Phase::G && cfg.phase(e, SystemId::BL) == Phase::G));
        assert!(!cfg.accent_gate(9) && cfg.accent_gate(10));
    }

    #[test]
    fn freeze_mask_is_pure() {
        assert_eq!(freeze_mask(Phase::G), FreezeMask { generator_trainable: true, classifier_trainable: false });
        assert_eq!(freeze_mask(Phase::D), FreezeMask { generator_trainable: false, classifier_trainable: true });
        assert_eq!(freeze_mask(Phase::G), freeze_mask(freeze_mask(Phase::G).generator_trainable.then_some(Phase::G).unwrap()));
    }

    #[test]
    fn minimizing_adv_alone_drives_rows_uniform() {
        for n in [2usize, 3, 5] {
            let mut store = ParamStore::new();
            let init: Vec<f64> = (0..n).map(|i| 3.0 - 1.5 * i as f64).collect();
            let z = store.add("z", Tensor::matrix(1, n, init).unwrap()).unwrap();
            for _ in 0..200 {
                let mut tape = Tape::new();
                let zv = tape.param(&store, z).unwrap();
                let p = tape.softmax_rows(zv).unwrap();
                let l = tape.masked_uniform_distance(p, Rc::new(vec![1.0])).unwrap();
                let g = tape.backward(l).unwrap();
                let step = g.get(z).unwrap().clone();
                let v = store.value_mut(z);
                for (x, d) in v.data_mut().iter_mut().zip(step.data()) {
                    *x -= 2.0 * d;
                }
            }
            let p = softmax(store.value(z).data()).unwrap();
            let worst = p.iter().map(|v| (v - 1.0 / n as f64).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-3, "n={n}: {worst}");
        }
    }

    #[test]
    fn log_lines_roundtrip() {
        let log = EpochLog { epoch: 3, phase: Phase::D, lr: 7e-4, accent_gate: false, recons: None, adv: 0.25, ce: 1.0 };
        assert_eq!(EpochLog::parse(&log.tsv()).unwrap(), log);
        let g = EpochLog { recons: Some(0.5), phase: Phase::G, ..log };
        assert_eq!(EpochLog::parse(&g.tsv()).unwrap(), g);
    }
}
