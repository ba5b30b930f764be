//! Frame-level token recognizers whose bottleneck layer supplies the
//! conversion model's input features.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{records_hash, Accent, Provenance, Utterance};
use crate::error::{Error, Result};
use crate::kernel::init::{glorot, zero_bias};
use crate::kernel::tensor::{argmax, linear_forward, softmax_rows};
use crate::kernel::{adam_step, sgd_step, AdamConfig, Checkpoint, ParamStore, Tape, Tensor};
use crate::rngs;
use crate::system::SystemId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerConfig {
    pub hidden: usize,
    pub bn_dim: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Minimum held-out accent-M frame accuracy expected of the SI model.
    pub accuracy_floor: f64,
    /// Parameters updated by fine-tuning; the rest stay at their
    /// speaker-independent values.
    pub finetune_params: Vec<String>,
    pub finetune_optimizer: Optimizer,
    pub finetune_lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig {
            hidden: 64,
            bn_dim: 16,
            epochs: 30,
            finetune_epochs: 20,
            batch_size: 256,
            lr: 0.001,
            accuracy_floor: 0.9,
            finetune_params: PARAM_NAMES.iter().map(|n| n.to_string()).collect(),
            finetune_optimizer: Optimizer::Adam,
            finetune_lr: 0.001,
        }
    }
}

const PARAM_NAMES: [&str; 6] = ["hid.w", "hid.b", "bn.w", "bn.b", "out.w", "out.b"];

/// `D → hidden (tanh) → bottleneck (linear) → K (softmax)`.
#[derive(Clone, Debug)]
pub struct Recognizer {
    pub params: ParamStore,
    /// Accent the model was last trained on: M for the speaker-independent
    /// model, T after fine-tuning.
    pub accent: Accent,
    pub trained: bool,
    pub epochs: usize,
    pub corpus_hash: String,
}

/// Bottleneck activations of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct BnSequence {
    pub utt_id: String,
    pub extractor: String,
    pub bn: Tensor,
}

impl Recognizer {
    pub fn new(frame_dim: usize, tokens: usize, cfg: &RecognizerConfig, seed: u64) -> Result<Recognizer> {
        if cfg.hidden == 0 || cfg.bn_dim == 0 {
            return Err(Error::Config("recognizer widths must be positive".into()));
        }
        let mut rng = rngs::stream(seed, rngs::RECOGNIZER_INIT, 0);
        let mut params = ParamStore::new();
        params.add("hid.w", glorot(&mut rng, frame_dim, cfg.hidden))?;
        params.add("hid.b", zero_bias(cfg.hidden))?;
        params.add("bn.w", glorot(&mut rng, cfg.hidden, cfg.bn_dim))?;
        params.add("bn.b", zero_bias(cfg.bn_dim))?;
        params.add("out.w", glorot(&mut rng, cfg.bn_dim, tokens))?;
        params.add("out.b", zero_bias(tokens))?;
        Ok(Recognizer {
            params,
            accent: Accent::M,
            trained: false,
            epochs: 0,
            corpus_hash: String::new(),
        })
    }

    /// Extractor tag written into bottleneck provenance.
    pub fn tag(&self) -> &'static str {
        match self.accent {
            Accent::M => "si",
            Accent::T => "ft",
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.params.value(self.params.id("hid.w").expect("layout")).rows()
    }

    pub fn bn_dim(&self) -> usize {
        self.params.value(self.params.id("bn.w").expect("layout")).cols()
    }

    pub fn num_tokens(&self) -> usize {
        self.params.value(self.params.id("out.w").expect("layout")).cols()
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("layout")
    }

    fn bottleneck(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.cols() != self.frame_dim() {
            return Err(Error::Input(format!(
                "frames have {} columns, recognizer expects {}",
                frames.cols(),
                self.frame_dim()
            )));
        }
        let h = linear_forward(frames, self.p("hid.w"), self.p("hid.b"))?.map(f64::tanh);
        linear_forward(&h, self.p("bn.w"), self.p("bn.b"))
    }

    /// Per-frame token posteriors.
    pub fn posteriors(&self, frames: &Tensor) -> Result<Tensor> {
        let bn = self.bottleneck(frames)?;
        Ok(softmax_rows(&linear_forward(&bn, self.p("out.w"), self.p("out.b"))?))
    }

    /// Frame-level token accuracy against canonical labels.
    pub fn accuracy(&self, utts: &[Utterance]) -> Result<f64> {
        let (mut hit, mut n) = (0usize, 0usize);
        for u in utts {
            let p = self.posteriors(&u.frames)?;
            for (t, &k) in u.frame_labels().iter().enumerate() {
                hit += (argmax(p.row(t)) == k) as usize;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Input("accuracy over an empty set".into()));
        }
        Ok(hit as f64 / n as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut metadata = BTreeMap::new();
        metadata.insert("kind".into(), "recognizer".into());
        metadata.insert("accent".into(), self.accent.to_string());
        metadata.insert("trained".into(), self.trained.to_string());
        metadata.insert("epochs".into(), self.epochs.to_string());
        metadata.insert("corpus_hash".into(), self.corpus_hash.clone());
        Checkpoint {
            metadata,
            groups: vec![("recognizer".into(), self.params.clone())],
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Recognizer> {
        if ck.meta("kind")? != "recognizer" {
            return Err(Error::Format("checkpoint is not a recognizer".into()));
        }
        let accent: Accent = ck.meta("accent")?.parse()?;
        let trained = ck.meta("trained")? == "true";
        let epochs = ck
            .meta("epochs")?
            .parse()
            .map_err(|_| Error::Format("bad epochs field".into()))?;
        let corpus_hash = ck.meta("corpus_hash")?.to_string();
        let params = ck.take_group("recognizer")?;
        if params.names() != PARAM_NAMES {
            return Err(Error::Format("recognizer parameter layout mismatch".into()));
        }
        Ok(Recognizer {
            params,
            accent,
            trained,
            epochs,
            corpus_hash,
        })
    }
}

fn stack_frames(utts: &[Utterance]) -> Result<(Tensor, Vec<usize>)> {
    let parts: Vec<&Tensor> = utts.iter().map(|u| &u.frames).collect();
    let x = Tensor::vstack(&parts)?;
    let labels = utts.iter().flat_map(|u| u.frame_labels()).collect();
    Ok((x, labels))
}

/// Minibatch Adam on per-frame cross-entropy. Parameters named in `frozen`
/// keep their values.
fn fit(
    model: &mut Recognizer,
    x: &Tensor,
    labels: &[usize],
    epochs: usize,
    cfg: &RecognizerConfig,
    seed: u64,
    purpose: u64,
    step: (Optimizer, f64),
    frozen: &[String],
) -> Result<()> {
    let adam = AdamConfig::default();
    let n = x.rows();
    let bs = cfg.batch_size.max(1);
    let ids: Vec<_> = PARAM_NAMES.iter().map(|n| model.params.id(n)).collect::<Result<_>>()?;
    let frozen_ids: Vec<_> = frozen.iter().map(|n| model.params.id(n)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        let mut rng = rngs::stream(seed, purpose, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut data = Vec::with_capacity(chunk.len() * x.cols());
            for &i in chunk {
                data.extend_from_slice(x.row(i));
            }
            let xb = Tensor::matrix(chunk.len(), x.cols(), data)?;
            let yb: Rc<Vec<usize>> = Rc::new(chunk.iter().map(|&i| labels[i]).collect());
            let mut tape = Tape::new();
            let xv = tape.constant(xb);
            let pv: Vec<_> = ids.iter().map(|&id| tape.param(&model.params, id)).collect::<Result<_>>()?;
            let h = tape.linear(xv, pv[0], pv[1])?;
            let h = tape.tanh(h)?;
            let bn = tape.linear(h, pv[2], pv[3])?;
            let logits = tape.linear(bn, pv[4], pv[5])?;
            let probs = tape.softmax_rows(logits)?;
            let loss = tape.masked_cross_entropy(probs, yb, Rc::new(vec![1.0; chunk.len()]))?;
            let mut grads = tape.backward(loss)?;
            grads.retain(|id| !frozen_ids.contains(&id));
            model.params.accumulate(&grads);
            match step.0 {
                Optimizer::Adam => adam_step(&mut model.params, step.1, &adam)?,
                Optimizer::Sgd => sgd_step(&mut model.params, step.1)?,
            }
        }
    }
    Ok(())
}

/// Trains the speaker-independent recognizer on accent-M data from several
/// speakers.
pub fn train_si(utts: &[Utterance], tokens: usize, cfg: &RecognizerConfig, seed: u64) -> Result<Recognizer> {
    if let Some(u) = utts.iter().find(|u| u.accent != Accent::M) {
        return Err(Error::Input(format!(
            "speaker-independent recognizer takes accent-M data only; {} is accent {}",
            u.id, u.accent
        )));
    }
    let speakers: std::collections::BTreeSet<usize> = utts.iter().map(|u| u.speaker).collect();
    if speakers.len() < 2 {
        return Err(Error::Input("speaker-independent training needs at least 2 speakers".into()));
    }
    let frame_dim = utts[0].frames.cols();
    let mut model = Recognizer::new(frame_dim, tokens, cfg, seed)?;
    let (x, labels) = stack_frames(utts)?;
    fit(&mut model, &x, &labels, cfg.epochs, cfg, seed, rngs::RECOGNIZER_SHUFFLE, (Optimizer::Adam, cfg.lr), &[])?;
    model.trained = true;
    model.epochs = cfg.epochs;
    model.corpus_hash = records_hash(utts);
    Ok(model)
}

/// Continues training a base model on accent-T data with fresh optimizer
/// state, updating only `cfg.finetune_params`; the result is tagged
/// accent T.
pub fn finetune(base: &Recognizer, utts: &[Utterance], epochs: usize, cfg: &RecognizerConfig, seed: u64) -> Result<Recognizer> {
    if !base.trained {
        return Err(Error::State("cannot fine-tune an untrained recognizer".into()));
    }
    if let Some(u) = utts.iter().find(|u| u.accent != Accent::T) {
        return Err(Error::Input(format!("fine-tuning data must be accent T; {} is accent {}", u.id, u.accent)));
    }
    let mut params = ParamStore::new();
    for id in base.params.ids() {
        params.add(base.params.name(id), base.params.value(id).clone())?;
    }
    let mut model = Recognizer {
        params,
        accent: Accent::T,
        trained: true,
        epochs: base.epochs + epochs,
        corpus_hash: records_hash(utts),
    };
    if epochs > 0 {
        if utts.is_empty() {
            return Err(Error::Input("fine-tuning set is empty".into()));
        }
        if let Some(bad) = cfg.finetune_params.iter().find(|n| !PARAM_NAMES.contains(&n.as_str())) {
            return Err(Error::Config(format!("unknown recognizer parameter {bad:?} in finetune_params")));
        }
        let frozen: Vec<String> = PARAM_NAMES
            .iter()
            .filter(|n| !cfg.finetune_params.iter().any(|f| f == *n))
            .map(|n| n.to_string())
            .collect();
        let (x, labels) = stack_frames(utts)?;
        fit(&mut model, &x, &labels, epochs, cfg, seed, rngs::FINETUNE_SHUFFLE, (cfg.finetune_optimizer, cfg.finetune_lr), &frozen)?;
    }
    Ok(model)
}

pub fn extract_bn(model: &Recognizer, utt: &Utterance) -> Result<BnSequence> {
    if !model.trained {
        return Err(Error::State("bottleneck extraction needs a trained recognizer".into()));
    }
    Ok(BnSequence {
        utt_id: utt.id.clone(),
        extractor: model.tag().into(),
        bn: model.bottleneck(&utt.frames)?,
    })
}

/// Bottleneck sequence packaged as a corpus record, for the split container.
pub fn bn_record(model: &Recognizer, utt: &Utterance) -> Result<Utterance> {
    let bn = extract_bn(model, utt)?;
    Ok(Utterance {
        provenance: Provenance::Bottleneck { extractor: bn.extractor },
        frames: bn.bn,
        ..utt.clone()
    })
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    pub si: Option<Recognizer>,
    pub accented: Option<Recognizer>,
}

/// Extractor for an utterance of `accent` under `system`: the baseline always
/// uses the speaker-independent model, the other systems switch to the
/// fine-tuned model for accent T.
pub fn select_extractor(accent: Accent, registry: &Registry, system: SystemId) -> Result<&Recognizer> {
    let si = registry
        .si
        .as_ref()
        .ok_or_else(|| Error::Config("speaker-independent recognizer missing".into()))?;
    if !system.accent_dependent() {
        return Ok(si);
    }
    let accented = registry
        .accented
        .as_ref()
        .ok_or_else(|| Error::Config(format!("system {system} needs the fine-tuned accent-T recognizer")))?;
    Ok(match accent {
        Accent::M => si,
        Accent::T => accented,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_world, sample_utterance, WorldSpec};

    fn data(accent: Accent, speakers: &[usize], n: usize, seed: u64) -> Vec<Utterance> {
        let w = build_world(1, &WorldSpec::default()).unwrap();
        let mut rng = rngs::stream(seed, 99, 0);
        let mut out = Vec::new();
        for &s in speakers {
            for i in 0..n {
                out.push(sample_utterance(&w, format!("{s}-{i}"), s, accent, &mut rng).unwrap());
            }
        }
        out
    }

    fn quick() -> RecognizerConfig {
        RecognizerConfig { epochs: 2, ..RecognizerConfig::default() }
    }

    #[test]
    fn si_rejects_accent_t() {
        let mut utts = data(Accent::M, &[0, 1], 3, 1);
        utts.extend(data(Accent::T, &[2], 1, 2));
        assert!(matches!(train_si(&utts, 20, &quick(), 0), Err(Error::Input(_))));
        assert!(matches!(train_si(&data(Accent::M, &[0], 3, 1), 20, &quick(), 0), Err(Error::Input(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let utts = data(Accent::M, &[0, 1, 3], 6, 1);
        let a = train_si(&utts, 20, &quick(), 5).unwrap();
        let b = train_si(&utts, 20, &quick(), 5).unwrap();
        assert_eq!(a.params.values(), b.params.values());
    }

    #[test]
    fn finetune_zero_epochs_is_identity_and_tagged_t() {
        let utts = data(Accent::M, &[0, 1], 4, 1);
        let base = train_si(&utts, 20, &quick(), 5).unwrap();
        let ft = finetune(&base, &data(Accent::T, &[2], 2, 3), 0, &quick(), 5).unwrap();
        assert_eq!(ft.params.values(), base.params.values());
        assert_eq!(ft.accent, Accent::T);
        let untrained = Recognizer::new(16, 20, &quick(), 0).unwrap();
        assert!(matches!(finetune(&untrained, &[], 1, &quick(), 0), Err(Error::State(_))));
    }

    #[test]
    fn bn_shape_and_purity() {
        let utts = data(Accent::M, &[0, 1], 3, 1);
        let m = train_si(&utts, 20, &quick(), 5).unwrap();
        let a = extract_bn(&m, &utts[0]).unwrap();
        let b = extract_bn(&m, &utts[0]).unwrap();
        assert_eq!(a.bn.dims(), (utts[0].num_frames(), 16));
        assert_eq!(a, b);
        let mut bad = utts[0].clone();
        bad.frames = Tensor::zeros(&[3, 5]);
        assert!(matches!(extract_bn(&m, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn extractor_selection() {
        let utts = data(Accent::M, &[0, 1], 2, 1);
        let si = train_si(&utts, 20, &quick(), 5).unwrap();
        let ft = finetune(&si, &[], 0, &quick(), 5).unwrap();
        let reg = Registry { si: Some(si), accented: Some(ft) };
        assert_eq!(select_extractor(Accent::T, &reg, SystemId::BL).unwrap().accent, Accent::M);
        assert_eq!(select_extractor(Accent::T, &reg, SystemId::P1).unwrap().accent, Accent::T);
        assert_eq!(select_extractor(Accent::M, &reg, SystemId::P2).unwrap().accent, Accent::M);
        let partial = Registry { si: reg.si.clone(), accented: None };
        assert!(matches!(select_extractor(Accent::M, &partial, SystemId::P2), Err(Error::Config(_))));
        assert!(select_extractor(Accent::T, &partial, SystemId::BL).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let utts = data(Accent::M, &[0, 1], 2, 1);
        let si = train_si(&utts, 20, &quick(), 5).unwrap();
        let ck = si.to_checkpoint();
        let bytes = ck.encode();
        let back = Recognizer::from_checkpoint(Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.params.values(), si.params.values());
        assert_eq!(back.corpus_hash, si.corpus_hash);
        assert_eq!(back.to_checkpoint().encode(), bytes);
    }
}
