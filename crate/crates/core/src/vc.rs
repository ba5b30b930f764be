//! Conversion model: an encoder over bottleneck frames conditioned on an
//! accent embedding, an auxiliary speaker classifier on the encoder output,
//! and an autoregressive decoder conditioned on a speaker embedding.
//!
//! Encoder: `[bn ; accent]` → conv (kernel 3, ReLU) → bidirectional Elman
//! layer, giving `h`. Decoder: prenet (ReLU, dropout) over the previous
//! frame, an Elman cell over `[prenet ; h_t ; speaker]`, a linear output
//! layer (pre-postnet frame) and a two-layer causal convolutional postnet
//! added as a residual.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Accent;
use crate::error::{Error, Result};
use crate::kernel::init::{glorot, normal_table, zero_bias};
use crate::kernel::tensor::{argmax, linear_forward, matmul, softmax_rows};
use crate::kernel::{layers, Checkpoint, ParamStore, RowMap, SeqLayout, Tape, Tensor, Var};
use crate::rngs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VcConfig {
    pub accent_dim: usize,
    pub speaker_dim: usize,
    pub conv_channels: usize,
    pub encoder_hidden: usize,
    pub classifier_hidden: usize,
    pub prenet: usize,
    pub decoder_hidden: usize,
    pub postnet_channels: usize,
    pub dropout: f64,
    pub speakers: usize,
    /// Classify speakers from time-averaged `h` instead of per frame.
    pub pooled_classifier: bool,
}

impl Default for VcConfig {
    fn default() -> Self {
        VcConfig {
            accent_dim: 4,
            speaker_dim: 4,
            conv_channels: 32,
            encoder_hidden: 32,
            classifier_hidden: 32,
            prenet: 32,
            decoder_hidden: 64,
            postnet_channels: 32,
            dropout: 0.5,
            speakers: 3,
            pooled_classifier: false,
        }
    }
}

impl VcConfig {
    pub fn h_dim(&self) -> usize {
        2 * self.encoder_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.accent_dim,
            self.speaker_dim,
            self.conv_channels,
            self.encoder_hidden,
            self.classifier_hidden,
            self.prenet,
            self.decoder_hidden,
            self.postnet_channels,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.speakers < 2 {
            return Err(Error::Config("need at least two target speakers".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub const GENERATOR: &str = "generator";
pub const CLASSIFIER: &str = "classifier";
const ENCODER_CONV: [isize; 3] = [-1, 0, 1];
const POSTNET_CONV: [isize; 3] = [-2, -1, 0];

#[derive(Clone, Debug)]
pub struct VcModel {
    pub cfg: VcConfig,
    pub bn_dim: usize,
    pub frame_dim: usize,
    /// Encoder, embeddings, decoder and postnet.
    pub generator: ParamStore,
    pub classifier: ParamStore,
    /// Completed training epochs.
    pub epoch: usize,
    pub trained: bool,
}

/// One utterance entering a batch.
#[derive(Clone, Copy)]
pub struct SeqItem<'a> {
    pub bn: &'a Tensor,
    pub frames: Option<&'a Tensor>,
    pub accent: Accent,
    pub speaker: usize,
}

/// Time-major padded batch.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub layout: SeqLayout,
    pub bn: Tensor,
    pub frames: Option<Rc<Tensor>>,
    pub accents: Vec<usize>,
    pub speakers: Vec<usize>,
    pub weights: Rc<Vec<f64>>,
}

fn time_major(layout: &SeqLayout, parts: &[&Tensor], cols: usize) -> Tensor {
    let mut out = Tensor::zeros(&[layout.rows(), cols]);
    for (b, p) in parts.iter().enumerate() {
        for t in 0..p.rows() {
            out.row_mut(layout.row(t, b)).copy_from_slice(p.row(t));
        }
    }
    out
}

impl SeqBatch {
    pub fn new(items: &[SeqItem]) -> Result<SeqBatch> {
        if items.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let bn_dim = items[0].bn.cols();
        for it in items {
            if it.bn.rows() == 0 {
                return Err(Error::Input("empty bottleneck sequence".into()));
            }
            if it.bn.cols() != bn_dim {
                return Err(Error::Input("bottleneck widths differ within a batch".into()));
            }
            if let Some(f) = it.frames {
                if f.rows() != it.bn.rows() {
                    return Err(Error::Input(format!(
                        "teacher has {} frames but the bottleneck sequence has {}",
                        f.rows(),
                        it.bn.rows()
                    )));
                }
            }
        }
        let layout = SeqLayout::new(items.iter().map(|i| i.bn.rows()).collect());
        let bn = time_major(&layout, &items.iter().map(|i| i.bn).collect::<Vec<_>>(), bn_dim);
        let frames = if items.iter().all(|i| i.frames.is_some()) {
            let parts: Vec<&Tensor> = items.iter().map(|i| i.frames.unwrap()).collect();
            let d = parts[0].cols();
            if parts.iter().any(|p| p.cols() != d) {
                return Err(Error::Input("frame widths differ within a batch".into()));
            }
            Some(Rc::new(time_major(&layout, &parts, d)))
        } else {
            None
        };
        let weights = Rc::new(layout.row_weights());
        Ok(SeqBatch {
            bn,
            frames,
            accents: items.iter().map(|i| i.accent.index()).collect(),
            speakers: items.iter().map(|i| i.speaker).collect(),
            weights,
            layout,
        })
    }

    /// Frame-level speaker labels, one per row.
    pub fn row_speakers(&self) -> Rc<Vec<usize>> {
        let mut v = Vec::with_capacity(self.layout.rows());
        for _ in 0..self.layout.t_max() {
            v.extend_from_slice(&self.speakers);
        }
        Rc::new(v)
    }
}

/// Tape handles from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub h: Var,
    pub probs: Var,
    pub pre: Option<Var>,
    pub post: Option<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOpts {
    pub accent_gate: bool,
    pub decode: bool,
    /// Prenet dropout multipliers (rows × prenet), training only.
    pub dropout: Option<Tensor>,
}

/// Borrowed view of the parameters used by the tape forward passes.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub cfg: &'a VcConfig,
    pub bn_dim: usize,
    pub frame_dim: usize,
    pub generator: &'a ParamStore,
    pub classifier: &'a ParamStore,
}

impl Net<'_> {
    fn gp(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let id = self.generator.id(name)?;
        tape.param(self.generator, id)
    }

    fn cp(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let id = self.classifier.id(name)?;
        tape.param(self.classifier, id)
    }

    fn check_batch(&self, batch: &SeqBatch) -> Result<()> {
        if batch.bn.cols() != self.bn_dim {
            return Err(Error::Input(format!(
                "bottleneck width {} does not match the model's {}",
                batch.bn.cols(),
                self.bn_dim
            )));
        }
        if let Some(&s) = batch.speakers.iter().find(|&&s| s >= self.cfg.speakers) {
            return Err(Error::Input(format!(
                "speaker {s} outside 0..{}",
                self.cfg.speakers
            )));
        }
        Ok(())
    }

    pub fn encode_tape(&self, tape: &mut Tape, batch: &SeqBatch, accent_gate: bool) -> Result<Var> {
        self.check_batch(batch)?;
        let layout = &batch.layout;
        let bn = tape.constant(batch.bn.clone());
        let acc = if accent_gate {
            let table = self.gp(tape, "acc_emb")?;
            let map = layout.broadcast_map(2, &batch.accents)?;
            tape.rows(table, map)?
        } else {
            tape.constant(Tensor::zeros(&[layout.rows(), self.cfg.accent_dim]))
        };
        let x = tape.concat_cols(&[bn, acc])?;
        let shifts: Vec<Rc<RowMap>> = ENCODER_CONV.iter().map(|&o| layout.shift_map(o)).collect();
        let (w, b) = (self.gp(tape, "enc.conv.w")?, self.gp(tape, "enc.conv.b")?);
        let c = layers::conv1d(tape, x, w, b, &shifts)?;
        let mut c = tape.relu(c)?;
        if layout.rows() != layout.lengths().iter().sum::<usize>() {
            c = tape.row_scale(c, batch.weights.clone())?;
        }
        let mut dirs = Vec::with_capacity(2);
        for (dir, reverse) in [("fw", false), ("bw", true)] {
            let w = self.gp(tape, &format!("enc.{dir}.w"))?;
            let b = self.gp(tape, &format!("enc.{dir}.b"))?;
            let u = self.gp(tape, &format!("enc.{dir}.u"))?;
            let proj = tape.linear(c, w, b)?;
            dirs.push(layers::recurrent(tape, proj, u, layout, reverse)?);
        }
        tape.concat_cols(&dirs)
    }

    /// Speaker posteriors from `h`: per row, or per sequence when the
    /// classifier is pooled.
    pub fn classify_tape(&self, tape: &mut Tape, h: Var, layout: &SeqLayout) -> Result<Var> {
        let input = if self.cfg.pooled_classifier {
            tape.rows(h, layout.mean_pool_map())?
        } else {
            h
        };
        let (w1, b1) = (self.cp(tape, "cls.hid.w")?, self.cp(tape, "cls.hid.b")?);
        let (w2, b2) = (self.cp(tape, "cls.out.w")?, self.cp(tape, "cls.out.b")?);
        let z = tape.linear(input, w1, b1)?;
        let z = tape.tanh(z)?;
        let logits = tape.linear(z, w2, b2)?;
        tape.softmax_rows(logits)
    }

    /// Teacher-forced decoding: step `t` sees teacher frame `t − 1`.
    pub fn decode_tape(&self, tape: &mut Tape, h: Var, batch: &SeqBatch, dropout: Option<Tensor>) -> Result<(Var, Var)> {
        let layout = &batch.layout;
        let frames = batch
            .frames
            .as_ref()
            .ok_or_else(|| Error::Input("decoding needs teacher frames".into()))?;
        if frames.cols() != self.frame_dim {
            return Err(Error::Input(format!(
                "teacher frames have {} columns, model expects {}",
                frames.cols(),
                self.frame_dim
            )));
        }
        let prev = tape.constant(layout.shift_map(-1).apply(frames)?);
        let (pw, pb) = (self.gp(tape, "dec.pre.w")?, self.gp(tape, "dec.pre.b")?);
        let p = tape.linear(prev, pw, pb)?;
        let mut p = tape.relu(p)?;
        if let Some(mask) = dropout {
            p = tape.mul_const(p, mask)?;
        }
        let table = self.gp(tape, "spk_emb")?;
        let spk = tape.rows(table, layout.broadcast_map(self.cfg.speakers, &batch.speakers)?)?;
        let x = tape.concat_cols(&[p, h, spk])?;
        let (rw, rb, ru) = (self.gp(tape, "dec.rnn.w")?, self.gp(tape, "dec.rnn.b")?, self.gp(tape, "dec.rnn.u")?);
        let proj = tape.linear(x, rw, rb)?;
        let s = layers::recurrent(tape, proj, ru, layout, false)?;
        let (ow, ob) = (self.gp(tape, "dec.out.w")?, self.gp(tape, "dec.out.b")?);
        let pre = tape.linear(s, ow, ob)?;
        let post = self.postnet_tape(tape, pre, layout)?;
        Ok((pre, post))
    }

    fn postnet_tape(&self, tape: &mut Tape, pre: Var, layout: &SeqLayout) -> Result<Var> {
        let shifts: Vec<Rc<RowMap>> = POSTNET_CONV.iter().map(|&o| layout.shift_map(o)).collect();
        let (w1, b1) = (self.gp(tape, "post.c1.w")?, self.gp(tape, "post.c1.b")?);
        let c1 = layers::conv1d(tape, pre, w1, b1, &shifts)?;
        let c1 = tape.tanh(c1)?;
        let (w2, b2) = (self.gp(tape, "post.c2.w")?, self.gp(tape, "post.c2.b")?);
        let r = layers::conv1d(tape, c1, w2, b2, &shifts)?;
        tape.add(pre, r)
    }

    /// Full forward pass on one tape.
    pub fn forward(&self, tape: &mut Tape, batch: &SeqBatch, opts: ForwardOpts) -> Result<Forward> {
        let h = self.encode_tape(tape, batch, opts.accent_gate)?;
        let probs = self.classify_tape(tape, h, &batch.layout)?;
        let (pre, post) = if opts.decode {
            let (a, b) = self.decode_tape(tape, h, batch, opts.dropout)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        Ok(Forward { h, probs, pre, post })
    }

}

impl VcModel {
    pub fn new(cfg: VcConfig, bn_dim: usize, frame_dim: usize, seed: u64) -> Result<VcModel> {
        cfg.validate()?;
        let mut rng = rngs::stream(seed, rngs::VC_INIT, 0);
        let mut g = ParamStore::new();
        let enc_in = bn_dim + cfg.accent_dim;
        let eh = cfg.encoder_hidden;
        g.add("acc_emb", normal_table(&mut rng, 2, cfg.accent_dim, 0.3))?;
        g.add("spk_emb", normal_table(&mut rng, cfg.speakers, cfg.speaker_dim, 0.3))?;
        g.add("enc.conv.w", glorot(&mut rng, 3 * enc_in, cfg.conv_channels))?;
        g.add("enc.conv.b", zero_bias(cfg.conv_channels))?;
        for dir in ["fw", "bw"] {
            g.add(&format!("enc.{dir}.w"), glorot(&mut rng, cfg.conv_channels, eh))?;
            g.add(&format!("enc.{dir}.u"), glorot(&mut rng, eh, eh))?;
            g.add(&format!("enc.{dir}.b"), zero_bias(eh))?;
        }
        let dec_in = cfg.prenet + cfg.h_dim() + cfg.speaker_dim;
        g.add("dec.pre.w", glorot(&mut rng, frame_dim, cfg.prenet))?;
        g.add("dec.pre.b", zero_bias(cfg.prenet))?;
        g.add("dec.rnn.w", glorot(&mut rng, dec_in, cfg.decoder_hidden))?;
        g.add("dec.rnn.u", glorot(&mut rng, cfg.decoder_hidden, cfg.decoder_hidden))?;
        g.add("dec.rnn.b", zero_bias(cfg.decoder_hidden))?;
        g.add("dec.out.w", glorot(&mut rng, cfg.decoder_hidden, frame_dim))?;
        g.add("dec.out.b", zero_bias(frame_dim))?;
        g.add("post.c1.w", glorot(&mut rng, 3 * frame_dim, cfg.postnet_channels))?;
        g.add("post.c1.b", zero_bias(cfg.postnet_channels))?;
        g.add("post.c2.w", glorot(&mut rng, 3 * cfg.postnet_channels, frame_dim).map(|v| 0.1 * v))?;
        g.add("post.c2.b", zero_bias(frame_dim))?;

        let mut c = ParamStore::new();
        c.add("cls.hid.w", glorot(&mut rng, cfg.h_dim(), cfg.classifier_hidden))?;
        c.add("cls.hid.b", zero_bias(cfg.classifier_hidden))?;
        c.add("cls.out.w", glorot(&mut rng, cfg.classifier_hidden, cfg.speakers))?;
        c.add("cls.out.b", zero_bias(cfg.speakers))?;
        Ok(VcModel {
            cfg,
            bn_dim,
            frame_dim,
            generator: g,
            classifier: c,
            epoch: 0,
            trained: false,
        })
    }

    pub fn net(&self) -> Net<'_> {
        Net {
            cfg: &self.cfg,
            bn_dim: self.bn_dim,
            frame_dim: self.frame_dim,
            generator: &self.generator,
            classifier: &self.classifier,
        }
    }

    /// Whether a generator parameter belongs to the encoder proper (the
    /// accent embedding table excluded).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.")
    }

    /// Inverted-dropout multipliers for the prenet: each entry is 0 with the
    /// dropout probability and `1 / (1 − p)` otherwise.
    pub fn dropout_mask<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Option<Tensor> {
        let p = self.cfg.dropout;
        if p == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        let data = (0..rows * self.cfg.prenet)
            .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
            .collect();
        Some(Tensor::matrix(rows, self.cfg.prenet, data).expect("shape"))
    }

    fn single(bn: &Tensor, frames: Option<&Tensor>, accent: Accent, speaker: usize) -> Result<SeqBatch> {
        SeqBatch::new(&[SeqItem { bn, frames, accent, speaker }])
    }

    /// Encoder output `T × 64` for one sequence.
    pub fn encode(&self, bn: &Tensor, accent: Accent, accent_gate: bool) -> Result<Tensor> {
        let batch = Self::single(bn, None, accent, 0)?;
        let mut tape = Tape::new();
        let h = self.net().encode_tape(&mut tape, &batch, accent_gate)?;
        Ok(tape.value(h).clone())
    }

    /// Per-frame speaker posteriors (per-utterance single row when pooled).
    pub fn classify_speaker(&self, h: &Tensor) -> Result<Tensor> {
        if h.rows() == 0 {
            return Err(Error::Input("empty encoder output".into()));
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let probs = self.net().classify_tape(&mut tape, hv, &SeqLayout::single(h.rows()))?;
        Ok(tape.value(probs).clone())
    }

    /// Utterance-level speaker prediction: argmax of frame-averaged
    /// posteriors.
    pub fn predict_speaker(&self, h: &Tensor) -> Result<usize> {
        let p = self.classify_speaker(h)?;
        let mut mean = vec![0.0; p.cols()];
        for r in 0..p.rows() {
            for (m, v) in mean.iter_mut().zip(p.row(r)) {
                *m += v;
            }
        }
        Ok(argmax(&mean))
    }

    /// Teacher-forced decoding of one sequence. Dropout applies only when an
    /// RNG is supplied.
    pub fn decode(&self, h: &Tensor, speaker: usize, teacher: &Tensor, dropout_rng: Option<&mut dyn rand::RngCore>) -> Result<(Tensor, Tensor)> {
        if teacher.rows() != h.rows() {
            return Err(Error::Input(format!(
                "teacher has {} frames but h has {}",
                teacher.rows(),
                h.rows()
            )));
        }
        if h.cols() != self.cfg.h_dim() {
            return Err(Error::Input(format!("h has {} columns, expected {}", h.cols(), self.cfg.h_dim())));
        }
        let dummy = Tensor::zeros(&[h.rows(), self.bn_dim]);
        let batch = Self::single(&dummy, Some(teacher), Accent::M, speaker)?;
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let mask = match dropout_rng {
            Some(rng) => self.dropout_mask(h.rows(), rng),
            None => None,
        };
        let net = self.net();
        net.check_batch(&batch)?;
        let (pre, post) = net.decode_tape(&mut tape, hv, &batch, mask)?;
        Ok((tape.value(pre).clone(), tape.value(post).clone()))
    }

    /// Free-running conversion: the accent embedding is active, dropout is
    /// off, and each step consumes the previous post-postnet frame.
    pub fn convert(&self, bn: &Tensor, speaker: usize, accent: Accent) -> Result<Tensor> {
        if !self.trained {
            return Err(Error::State("conversion needs a trained model".into()));
        }
        if speaker >= self.cfg.speakers {
            return Err(Error::Input(format!(
                "unknown target speaker {speaker}; valid ids 0..{}",
                self.cfg.speakers
            )));
        }
        let h = self.encode(bn, accent, true)?;
        self.run_free(&h, speaker)
    }

    fn g(&self, name: &str) -> &Tensor {
        self.generator.get(name).expect("layout")
    }

    fn run_free(&self, h: &Tensor, speaker: usize) -> Result<Tensor> {
        let steps = h.rows();
        let d = self.frame_dim;
        let spk = self.g("spk_emb").row(speaker).to_vec();
        let mut state = Tensor::zeros(&[1, self.cfg.decoder_hidden]);
        let mut prev = Tensor::zeros(&[1, d]);
        let mut pre_hist: Vec<Vec<f64>> = Vec::with_capacity(steps);
        let mut c1_hist: Vec<Vec<f64>> = Vec::with_capacity(steps);
        let mut out = Tensor::zeros(&[steps, d]);
        let pc = self.cfg.postnet_channels;
        for t in 0..steps {
            let p = linear_forward(&prev, self.g("dec.pre.w"), self.g("dec.pre.b"))?.map(|v| v.max(0.0));
            let mut x = Vec::with_capacity(self.g("dec.rnn.w").rows());
            x.extend_from_slice(p.data());
            x.extend_from_slice(h.row(t));
            x.extend_from_slice(&spk);
            let x = Tensor::row_vector(x);
            let mut z = linear_forward(&x, self.g("dec.rnn.w"), self.g("dec.rnn.b"))?;
            if t > 0 {
                z.add_assign(&matmul(&state, self.g("dec.rnn.u"))?);
            }
            state = z.map(f64::tanh);
            let pre = linear_forward(&state, self.g("dec.out.w"), self.g("dec.out.b"))?;
            pre_hist.push(pre.data().to_vec());
            let c1_in = causal_window(&pre_hist, t, d);
            let c1 = linear_forward(&c1_in, self.g("post.c1.w"), self.g("post.c1.b"))?.map(f64::tanh);
            c1_hist.push(c1.data().to_vec());
            let c2_in = causal_window(&c1_hist, t, pc);
            let r = linear_forward(&c2_in, self.g("post.c2.w"), self.g("post.c2.b"))?;
            let mut post = pre;
            post.add_assign(&r);
            out.row_mut(t).copy_from_slice(post.data());
            prev = post;
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, mut metadata: BTreeMap<String, String>) -> Checkpoint {
        metadata.insert("kind".into(), "vc".into());
        metadata.insert("epoch".into(), self.epoch.to_string());
        metadata.insert("trained".into(), self.trained.to_string());
        metadata.insert("bn_dim".into(), self.bn_dim.to_string());
        metadata.insert("frame_dim".into(), self.frame_dim.to_string());
        metadata.insert("vc_config".into(), serde_json::to_string(&self.cfg).expect("serializable"));
        metadata.insert("accents".into(), "M,T".into());
        Checkpoint {
            metadata,
            groups: vec![
                (GENERATOR.into(), self.generator.clone()),
                (CLASSIFIER.into(), self.classifier.clone()),
            ],
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<VcModel> {
        if ck.meta("kind")? != "vc" {
            return Err(Error::Format("checkpoint is not a conversion model".into()));
        }
        let num = |ck: &Checkpoint, k: &str| -> Result<usize> {
            ck.meta(k)?.parse().map_err(|_| Error::Format(format!("bad {k} field")))
        };
        let epoch = num(&ck, "epoch")?;
        let bn_dim = num(&ck, "bn_dim")?;
        let frame_dim = num(&ck, "frame_dim")?;
        let trained = ck.meta("trained")? == "true";
        let cfg: VcConfig = serde_json::from_str(ck.meta("vc_config")?)
            .map_err(|e| Error::Format(format!("bad vc_config: {e}")))?;
        let generator = ck.take_group(GENERATOR)?;
        let classifier = ck.take_group(CLASSIFIER)?;
        let fresh = VcModel::new(cfg.clone(), bn_dim, frame_dim, 0)?;
        if generator.names() != fresh.generator.names() || classifier.names() != fresh.classifier.names() {
            return Err(Error::Format("conversion model parameter layout mismatch".into()));
        }
        for (a, b) in generator.values().iter().zip(fresh.generator.values()) {
            if a.shape() != b.shape() {
                return Err(Error::Format("conversion model parameter shape mismatch".into()));
            }
        }
        Ok(VcModel {
            cfg,
            bn_dim,
            frame_dim,
            generator,
            classifier,
            epoch,
            trained,
        })
    }
}

/// `[x_{t−2} ; x_{t−1} ; x_t]` with zeros before the sequence start.
fn causal_window(hist: &[Vec<f64>], t: usize, width: usize) -> Tensor {
    let mut v = Vec::with_capacity(3 * width);
    for off in POSTNET_CONV {
        let s = t as isize + off;
        if s >= 0 {
            v.extend_from_slice(&hist[s as usize]);
        } else {
            v.extend(std::iter::repeat_n(0.0, width));
        }
    }
    Tensor::row_vector(v)
}

/// Frame-averaged posteriors of each sequence in a batch.
pub fn pooled_probs(probs: &Tensor, layout: &SeqLayout, pooled: bool) -> Tensor {
    if pooled {
        return probs.clone();
    }
    let mut out = Tensor::zeros(&[layout.batch(), probs.cols()]);
    for b in 0..layout.batch() {
        let n = layout.lengths()[b] as f64;
        for t in 0..layout.lengths()[b] {
            let r = probs.row(layout.row(t, b)).to_vec();
            for (o, v) in out.row_mut(b).iter_mut().zip(r) {
                *o += v / n;
            }
        }
    }
    out
}

/// Row-softmax helper for callers holding raw logits.
pub fn probabilities(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}
