//! Probe classifiers, encoder invariance and the per-system evaluation
//! report.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::{ideal_frames, Accent, Corpus, Provenance, Utterance, World};
use crate::error::{Error, Result};
use crate::kernel::tensor::argmax;
use crate::kernel::{adam_step, AdamConfig, ParamStore, Tape, Tensor};
use crate::recognizer::{extract_bn, select_extractor, Registry};
use crate::system::SystemId;
use crate::train::{heldout_recons, TrainItem};
use crate::vc::VcModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.05,
            l2: 1e-4,
            max_epochs: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    /// Utterances converted per source speaker (the last ones of its split).
    pub convert_per_source: usize,
    /// Fraction of each group used to train a probe; the rest is tested.
    pub train_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe: ProbeConfig::default(),
            convert_per_source: 10,
            train_fraction: 2.0 / 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    Speaker,
    Accent,
    Content,
}

/// Linear softmax classifier on standardized features.
#[derive(Clone, Debug)]
pub struct Probe {
    pub factor: Factor,
    /// Which representation the probe reads (`frames`, `bn`, `h-mean`).
    pub representation: String,
    pub classes: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub params: ParamStore,
    pub epochs: usize,
    pub grad_norm: f64,
}

/// Refuses converted records as probe training data.
pub fn guard_provenance(utts: &[Utterance]) -> Result<()> {
    match utts.iter().find(|u| matches!(u.provenance, Provenance::Converted { .. })) {
        Some(u) => Err(Error::Leakage(format!(
            "probe training data contains converted record {} ({})",
            u.id,
            u.provenance.tag()
        ))),
        None => Ok(()),
    }
}

/// Every frame of `utts` with a per-utterance label.
pub fn frame_dataset(utts: &[Utterance], label: impl Fn(&Utterance) -> Result<usize>) -> Result<(Tensor, Vec<usize>)> {
    guard_provenance(utts)?;
    let parts: Vec<&Tensor> = utts.iter().map(|u| &u.frames).collect();
    let x = Tensor::vstack(&parts)?;
    let mut y = Vec::with_capacity(x.rows());
    for u in utts {
        let l = label(u)?;
        y.extend(std::iter::repeat_n(l, u.num_frames()));
    }
    Ok((x, y))
}

/// Every frame of `utts` labelled with its content token.
pub fn token_dataset(utts: &[Utterance]) -> Result<(Tensor, Vec<usize>)> {
    guard_provenance(utts)?;
    let parts: Vec<&Tensor> = utts.iter().map(|u| &u.frames).collect();
    let x = Tensor::vstack(&parts)?;
    let y = utts.iter().flat_map(|u| u.frame_labels()).collect();
    Ok((x, y))
}

pub fn train_probe(
    factor: Factor,
    representation: &str,
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<Probe> {
    if x.rows() != labels.len() || x.rows() == 0 {
        return Err(Error::Input(format!(
            "probe needs one label per row, got {} rows and {} labels",
            x.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range 0..{classes}")));
    }
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Input("probe needs at least two classes in its training data".into()));
    }
    let d = x.cols();
    let n = x.rows() as f64;
    let mut mean = vec![0.0; d];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in 0..x.rows() {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(1e-8)).collect();

    let mut params = ParamStore::new();
    let w = params.add("w", Tensor::zeros(&[d, classes]))?;
    let b = params.add("b", Tensor::zeros(&[classes]))?;
    let mut probe = Probe {
        factor,
        representation: representation.into(),
        classes,
        mean,
        scale,
        params: ParamStore::new(),
        epochs: 0,
        grad_norm: f64::INFINITY,
    };
    let xs = probe.standardize(x)?;
    let labels = Rc::new(labels.to_vec());
    let weights = Rc::new(vec![1.0; x.rows()]);
    let adam = AdamConfig::default();
    for epoch in 0..cfg.max_epochs {
        let mut tape = Tape::new();
        let xv = tape.constant(xs.clone());
        let wv = tape.param(&params, w)?;
        let bv = tape.param(&params, b)?;
        let z = tape.linear(xv, wv, bv)?;
        let p = tape.softmax_rows(z)?;
        let ce = tape.masked_cross_entropy(p, labels.clone(), weights.clone())?;
        let sq = tape.mul(wv, wv)?;
        let sq = tape.sum(sq)?;
        let reg = tape.scale(sq, 0.5 * cfg.l2)?;
        let loss = tape.add(ce, reg)?;
        let grads = tape.backward(loss)?;
        let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
        probe.grad_norm = norm;
        probe.epochs = epoch;
        if norm < cfg.tol {
            break;
        }
        params.accumulate(&grads);
        adam_step(&mut params, cfg.lr, &adam)?;
        probe.epochs = epoch + 1;
    }
    probe.params = params;
    Ok(probe)
}

impl Probe {
    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::dim("probe", format!("features have {} columns, probe expects {}", x.cols(), self.mean.len())));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let xs = self.standardize(x)?;
        let z = crate::kernel::linear_forward(&xs, self.params.get("w")?, self.params.get("b")?)?;
        Ok(crate::kernel::tensor::softmax_rows(&z))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.probabilities(x)?;
        Ok((0..p.rows()).map(|r| argmax(p.row(r))).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<Rate> {
        let pred = self.predict(x)?;
        if pred.len() != labels.len() {
            return Err(Error::Input("label count does not match rows".into()));
        }
        Ok(Rate {
            hits: pred.iter().zip(labels).filter(|(p, l)| p == l).count(),
            n: labels.len(),
        })
    }

    /// Most frequent frame prediction; ties go to the lower class.
    pub fn majority(&self, x: &Tensor) -> Result<usize> {
        let mut counts = vec![0usize; self.classes];
        for p in self.predict(x)? {
            counts[p] += 1;
        }
        let best = counts.iter().copied().max().unwrap_or(0);
        Ok(counts.iter().position(|&c| c == best).unwrap_or(0))
    }

    pub fn chance(&self) -> f64 {
        1.0 / self.classes as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: usize,
    pub n: usize,
}

impl Rate {
    pub fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.hits as f64 / self.n as f64
        }
    }

    pub fn add(&mut self, hit: bool) {
        self.hits += hit as usize;
        self.n += 1;
    }
}

/// True when `value` lies within two binomial standard errors of `chance`.
pub fn near_chance(value: f64, chance: f64, n: usize) -> bool {
    if n == 0 {
        return true;
    }
    let se = (chance * (1.0 - chance) / n as f64).sqrt();
    (value - chance).abs() < 2.0 * se
}

/// Column means of `h`.
pub fn time_average(h: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; h.cols()];
    for r in 0..h.rows() {
        for (a, v) in m.iter_mut().zip(h.row(r)) {
            *a += v;
        }
    }
    let n = h.rows().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct Invariance {
    pub ratio: f64,
    pub projection: Vec<[f64; 2]>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance between vectors sharing a content group over the mean
/// distance between vectors from different groups, plus a 2-D PCA dump.
pub fn encoder_invariance(vectors: &[Vec<f64>], groups: &[usize]) -> Result<Invariance> {
    if vectors.len() != groups.len() {
        return Err(Error::Input("one group id per vector required".into()));
    }
    let distinct: BTreeSet<usize> = groups.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Input(format!("need at least 2 content groups, got {}", distinct.len())));
    }
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d = dist(&vectors[i], &vectors[j]);
            if groups[i] == groups[j] {
                within += d;
                nw += 1;
            } else {
                across += d;
                na += 1;
            }
        }
    }
    if nw == 0 {
        return Err(Error::Input("no content group has two members".into()));
    }
    let within = within / nw as f64;
    let across = across / na as f64;
    let ratio = if across > 0.0 { within / across } else { 0.0 };
    Ok(Invariance {
        ratio,
        projection: pca2(vectors)?,
    })
}

/// Projection on the top two principal components. Each component's sign
/// is fixed so its first nonzero loading is positive.
pub fn pca2(vectors: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Input("vectors differ in length".into()));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |r, c| vectors[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::new();
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        comps.push(v);
    }
    while comps.len() < 2 {
        comps.push(vec![0.0; d]);
    }
    Ok((0..n)
        .map(|r| {
            let row = centered.row(r);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&comps[0]), p(&comps[1])]
        })
        .collect())
}

/// Time-averaged encoder output of each utterance, with the bottleneck
/// extractor the system assigns to the utterance's accent.
pub fn encoder_means(model: &VcModel, registry: &Registry, system: SystemId, utts: &[Utterance]) -> Result<Vec<Vec<f64>>> {
    utts.iter()
        .map(|u| {
            let bn = extract_bn(select_extractor(u.accent, registry, system)?, u)?.bn;
            Ok(time_average(&model.encode(&bn, u.accent, true)?))
        })
        .collect()
}

/// Splits indices of each group (in order) into train and test parts.
fn split_groups(keys: &[(usize, usize)], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut by: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        by.entry(*k).or_default().push(i);
    }
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for idx in by.values() {
        let k = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
        tr.extend_from_slice(&idx[..k]);
        te.extend_from_slice(&idx[k..]);
    }
    tr.sort();
    te.sort();
    (tr, te)
}

fn rows_of(vectors: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
    let d = vectors.first().map_or(0, |v| v.len());
    Tensor::matrix(idx.len(), d, idx.iter().flat_map(|&i| vectors[i].iter().copied()).collect())
}

/// Speaker probe on time-averaged encoder output, trained on the first part
/// of each speaker's utterances and tested on the rest.
pub fn encoder_speaker_probe(
    model: &VcModel,
    registry: &Registry,
    system: SystemId,
    utts: &[Utterance],
    cfg: &EvalConfig,
) -> Result<(Rate, f64)> {
    guard_provenance(utts)?;
    let speakers: Vec<usize> = utts.iter().map(|u| u.speaker).collect::<BTreeSet<_>>().into_iter().collect();
    let labels: Vec<usize> = utts
        .iter()
        .map(|u| speakers.iter().position(|&s| s == u.speaker).expect("listed"))
        .collect();
    let means = encoder_means(model, registry, system, utts)?;
    let keys: Vec<(usize, usize)> = labels.iter().map(|&l| (l, 0)).collect();
    let (tr, te) = split_groups(&keys, cfg.train_fraction);
    let probe = train_probe(
        Factor::Speaker,
        "h-mean",
        &rows_of(&means, &tr)?,
        &tr.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        speakers.len(),
        &cfg.probe,
    )?;
    let rate = probe.accuracy(&rows_of(&means, &te)?, &te.iter().map(|&i| labels[i]).collect::<Vec<_>>())?;
    Ok((rate, probe.chance()))
}

/// Accent probe on bottleneck frames of the probe corpus, each utterance
/// passed through the extractor the system assigns to its accent.
pub fn bn_accent_probe(registry: &Registry, system: SystemId, utts: &[Utterance], cfg: &EvalConfig) -> Result<Rate> {
    guard_provenance(utts)?;
    let keys: Vec<(usize, usize)> = utts.iter().map(|u| (u.speaker, u.accent.index())).collect();
    let (tr, te) = split_groups(&keys, cfg.train_fraction);
    let bn: Vec<Utterance> = utts
        .iter()
        .map(|u| {
            let model = select_extractor(u.accent, registry, system)?;
            Ok(Utterance {
                frames: extract_bn(model, u)?.bn,
                ..u.clone()
            })
        })
        .collect::<Result<_>>()?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| bn[i].clone()).collect::<Vec<_>>();
    let (x, y) = frame_dataset(&pick(&tr), |u| Ok(u.accent.index()))?;
    let probe = train_probe(Factor::Accent, "bn", &x, &y, 2, &cfg.probe)?;
    let (x, y) = frame_dataset(&pick(&te), |u| Ok(u.accent.index()))?;
    probe.accuracy(&x, &y)
}

/// Output-frame probes trained once per corpus on real frames.
#[derive(Clone, Debug)]
pub struct OutputProbes {
    pub speaker: Probe,
    pub accent: Probe,
    pub content: Probe,
    pub targets: Vec<usize>,
}

pub fn train_output_probes(corpus: &Corpus, num_tokens: usize, cfg: &EvalConfig) -> Result<OutputProbes> {
    let targets = corpus.targets.clone();
    let target_utts: Vec<Utterance> = corpus.probe.iter().filter(|u| targets.contains(&u.speaker)).cloned().collect();
    let (x, y) = frame_dataset(&target_utts, |u| corpus.target_index(u.speaker))?;
    let speaker = train_probe(Factor::Speaker, "frames", &x, &y, targets.len(), &cfg.probe)?;
    let (x, y) = frame_dataset(&corpus.probe, |u| Ok(u.accent.index()))?;
    let accent = train_probe(Factor::Accent, "frames", &x, &y, 2, &cfg.probe)?;
    let (x, y) = token_dataset(&corpus.probe)?;
    let content = train_probe(Factor::Content, "frames", &x, &y, num_tokens, &cfg.probe)?;
    Ok(OutputProbes {
        speaker,
        accent,
        content,
        targets,
    })
}

/// Converts each source utterance to every target speaker in both accents.
/// Records carry the intended speaker (world id) and accent.
pub fn convert_set(
    model: &VcModel,
    registry: &Registry,
    system: SystemId,
    sources: &[Utterance],
    targets: &[usize],
) -> Result<Vec<Utterance>> {
    let mut out = Vec::with_capacity(sources.len() * targets.len() * 2);
    for src in sources {
        let bn = extract_bn(select_extractor(src.accent, registry, system)?, src)?.bn;
        for (ti, &spk) in targets.iter().enumerate() {
            for accent in Accent::ALL {
                let frames = model.convert(&bn, ti, accent)?;
                out.push(Utterance {
                    id: format!("conv-{}-{}-s{:02}-{}", system, src.id, spk, accent),
                    provenance: Provenance::Converted { system: system.to_string() },
                    speaker: spk,
                    accent,
                    frames,
                    ..src.clone()
                });
            }
        }
    }
    Ok(out)
}

/// Frame-majority speaker assignment per (target speaker, accent) cell.
/// Each record is only compared with its own intended speaker.
pub fn speaker_similarity_eval(converted: &[Utterance], probe: &Probe, targets: &[usize]) -> Result<BTreeMap<(usize, Accent), Rate>> {
    let mut cells = BTreeMap::new();
    for u in converted {
        let label = targets
            .iter()
            .position(|&s| s == u.speaker)
            .ok_or_else(|| Error::Input(format!("{} targets unknown speaker {}", u.id, u.speaker)))?;
        let rate: &mut Rate = cells.entry((u.speaker, u.accent)).or_default();
        rate.add(probe.majority(&u.frames)? == label);
    }
    Ok(cells)
}

/// Frame-majority accent recognition per intended accent.
pub fn accentedness_eval(converted: &[Utterance], probe: &Probe) -> Result<BTreeMap<Accent, Rate>> {
    let mut cells = BTreeMap::new();
    for u in converted {
        let rate: &mut Rate = cells.entry(u.accent).or_default();
        rate.add(probe.majority(&u.frames)? == u.accent.index());
    }
    Ok(cells)
}

/// Span-level token accuracy: frame predictions are majority-voted inside
/// each source token span.
pub fn content_preservation(converted: &[Utterance], probe: &Probe) -> Result<Rate> {
    let mut rate = Rate::default();
    for u in converted {
        let pred = probe.predict(&u.frames)?;
        for (span, &tok) in u.spans().into_iter().zip(&u.tokens) {
            let mut counts = vec![0usize; probe.classes];
            for t in span {
                counts[pred[t]] += 1;
            }
            rate.add(argmax_count(&counts) == tok);
        }
    }
    Ok(rate)
}

fn argmax_count(counts: &[usize]) -> usize {
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Mean squared error of converted frames against the noise-free rendering
/// of the source content by the intended speaker and accent.
pub fn conversion_mse(world: &World, converted: &[Utterance]) -> Result<BTreeMap<Accent, f64>> {
    let mut sums: BTreeMap<Accent, (f64, usize)> = BTreeMap::new();
    for u in converted {
        let ideal = ideal_frames(world, &u.tokens, &u.durations, u.speaker, u.accent)?;
        let e: f64 = ideal.data().iter().zip(u.frames.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let s = sums.entry(u.accent).or_default();
        s.0 += e;
        s.1 += u.frames.len();
    }
    Ok(sums.into_iter().map(|(a, (e, n))| (a, e / n.max(1) as f64)).collect())
}

/// One measured value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub metric: String,
    pub cell: String,
    pub value: f64,
    pub n: usize,
    pub chance: Option<f64>,
}

impl Metric {
    fn rate(metric: &str, cell: impl Into<String>, r: Rate, chance: f64) -> Metric {
        Metric {
            metric: metric.into(),
            cell: cell.into(),
            value: r.value(),
            n: r.n,
            chance: Some(chance),
        }
    }

    fn plain(metric: &str, cell: impl Into<String>, value: f64, n: usize) -> Metric {
        Metric {
            metric: metric.into(),
            cell: cell.into(),
            value,
            n,
            chance: None,
        }
    }
}

pub const ENCODER_SPEAKER: &str = "encoder_speaker_acc";
pub const INVARIANCE: &str = "invariance_ratio";
pub const BN_ACCENT: &str = "bn_accent_acc";
pub const OUTPUT_SPEAKER: &str = "output_speaker_acc";
pub const OUTPUT_ACCENT: &str = "output_accent_acc";
pub const CONTENT: &str = "content_acc";
pub const CONVERSION_MSE: &str = "quality_conversion_mse";
pub const HELDOUT_RECONS: &str = "quality_heldout_recons";

/// Everything one (system, seed) evaluation needs besides the model.
pub struct EvalContext<'a> {
    pub world: &'a World,
    pub corpus: &'a Corpus,
    pub registry: &'a Registry,
    pub probes: &'a OutputProbes,
    pub cfg: &'a EvalConfig,
}

/// Last `per_source` utterances of every source speaker.
pub fn conversion_sources(corpus: &Corpus, per_source: usize) -> Vec<Utterance> {
    let mut by: BTreeMap<usize, Vec<&Utterance>> = BTreeMap::new();
    for u in &corpus.source {
        by.entry(u.speaker).or_default().push(u);
    }
    by.values()
        .flat_map(|v| v[v.len().saturating_sub(per_source)..].iter().map(|u| (*u).clone()))
        .collect()
}

/// Label used for a target speaker in report cells: `s1`, `s2`, ...
pub fn target_label(targets: &[usize], speaker: usize) -> String {
    match targets.iter().position(|&s| s == speaker) {
        Some(i) => format!("s{}", i + 1),
        None => format!("spk{speaker}"),
    }
}

/// Per-system results plus the encoder projection.
pub struct SystemEval {
    pub metrics: Vec<Metric>,
    pub invariance: Invariance,
    pub parallel_ids: Vec<String>,
}

/// Converts the standard source set (last `convert_per_source` utterances of
/// every source speaker) to all targets in both accents.
pub fn standard_conversions(ctx: &EvalContext, model: &VcModel, system: SystemId) -> Result<Vec<Utterance>> {
    let sources = conversion_sources(ctx.corpus, ctx.cfg.convert_per_source);
    convert_set(model, ctx.registry, system, &sources, &ctx.probes.targets)
}

/// Scores one system. `converted` must come from [`convert_set`] with this
/// system's model.
pub fn evaluate_system(
    ctx: &EvalContext,
    model: &VcModel,
    system: SystemId,
    heldout: &[TrainItem],
    converted: &[Utterance],
) -> Result<SystemEval> {
    let want = Provenance::Converted { system: system.to_string() };
    if let Some(u) = converted.iter().find(|u| u.provenance != want) {
        return Err(Error::Input(format!("{} is not a {system} conversion", u.id)));
    }
    let mut metrics = Vec::new();
    let (rate, chance) = encoder_speaker_probe(model, ctx.registry, system, &ctx.corpus.heldout, ctx.cfg)?;
    metrics.push(Metric::rate(ENCODER_SPEAKER, "targets", rate, chance));
    let (rate, chance) = encoder_speaker_probe(model, ctx.registry, system, &ctx.corpus.source, ctx.cfg)?;
    metrics.push(Metric::rate(ENCODER_SPEAKER, "sources", rate, chance));

    let par = &ctx.corpus.parallel;
    let means = encoder_means(model, ctx.registry, system, par)?;
    let groups: Vec<usize> = par.iter().map(|u| parallel_group(&u.id)).collect::<Result<_>>()?;
    let invariance = encoder_invariance(&means, &groups)?;
    metrics.push(Metric::plain(INVARIANCE, "all", invariance.ratio, par.len()));

    let bn = bn_accent_probe(ctx.registry, system, &ctx.corpus.probe, ctx.cfg)?;
    metrics.push(Metric::rate(BN_ACCENT, "all", bn, 0.5));

    let targets = &ctx.probes.targets;
    for ((spk, acc), r) in speaker_similarity_eval(converted, &ctx.probes.speaker, targets)? {
        let cell = format!("{}-{}", target_label(targets, spk), acc);
        metrics.push(Metric::rate(OUTPUT_SPEAKER, cell, r, ctx.probes.speaker.chance()));
    }
    for (acc, r) in accentedness_eval(converted, &ctx.probes.accent)? {
        metrics.push(Metric::rate(OUTPUT_ACCENT, acc.to_string(), r, 0.5));
    }
    let content = content_preservation(converted, &ctx.probes.content)?;
    metrics.push(Metric::rate(CONTENT, "all", content, ctx.probes.content.chance()));
    for (acc, mse) in conversion_mse(ctx.world, converted)? {
        let n = converted.iter().filter(|u| u.accent == acc).count();
        metrics.push(Metric::plain(CONVERSION_MSE, acc.to_string(), mse, n));
    }
    if !heldout.is_empty() {
        metrics.push(Metric::plain(HELDOUT_RECONS, "native", heldout_recons(model, heldout)?, heldout.len()));
    }
    Ok(SystemEval {
        metrics,
        invariance,
        parallel_ids: par.iter().map(|u| u.id.clone()).collect(),
    })
}

/// Content index of a `parallel-cXX-sYY` id.
pub fn parallel_group(id: &str) -> Result<usize> {
    id.strip_prefix("parallel-c")
        .and_then(|r| r.split('-').next())
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Input(format!("{id} is not a parallel-set id")))
}

/// Reported value of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Value {
    Measured(f64),
    /// The system failed the accent gate, so the number is withheld.
    Dash,
    Absent,
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Measured(v) => Some(*v),
            _ => None,
        }
    }

    fn text(&self) -> String {
        match self {
            Value::Measured(v) => format!("{v:.6}"),
            Value::Dash => "-".into(),
            Value::Absent => "absent".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    /// Seed number, or `mean` for the across-seed average.
    pub seed: String,
    pub metric: String,
    pub cell: String,
    pub value: Value,
    pub chance: Option<f64>,
    pub n: usize,
    pub near_chance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub manifest_hash: String,
    pub systems: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "system\tseed\tmetric\tcell\tvalue\tchance\tn\tnear_chance";

/// Threshold below which the baseline's accent-T conversion counts as failed.
pub const ACCENT_GATE: f64 = 0.5;

/// Lays out every (system, seed, metric, cell) combination seen in any run.
/// Missing combinations become `absent`; the BL accent-T conversion quality
/// becomes `-` when BL's accent-T accuracy falls below [`ACCENT_GATE`].
pub fn build_report(manifest_hash: &str, runs: &[(SystemId, u64, Vec<Metric>)], seeds: &[u64]) -> EvalReport {
    let mut keys: BTreeSet<(String, String)> = BTreeSet::new();
    let mut chance: BTreeMap<(String, String), f64> = BTreeMap::new();
    for (_, _, ms) in runs {
        for m in ms {
            keys.insert((m.metric.clone(), m.cell.clone()));
            if let Some(c) = m.chance {
                chance.insert((m.metric.clone(), m.cell.clone()), c);
            }
        }
    }
    let find = |s: SystemId, seed: u64, metric: &str, cell: &str| {
        runs.iter()
            .filter(|(rs, rseed, _)| *rs == s && *rseed == seed)
            .flat_map(|(_, _, ms)| ms.iter())
            .find(|m| m.metric == metric && m.cell == cell)
    };
    let mut rows = Vec::new();
    for s in SystemId::ALL {
        for (metric, cell) in &keys {
            let mut present = Vec::new();
            let mut n_total = 0;
            for &seed in seeds {
                let found = find(s, seed, metric, cell);
                let dashed = s == SystemId::BL
                    && metric == CONVERSION_MSE
                    && cell == "T"
                    && find(s, seed, OUTPUT_ACCENT, "T").is_some_and(|m| m.value < ACCENT_GATE);
                let (value, n) = match found {
                    Some(_) if dashed => (Value::Dash, found.map_or(0, |m| m.n)),
                    Some(m) => {
                        present.push(m.value);
                        n_total += m.n;
                        (Value::Measured(m.value), m.n)
                    }
                    None => (Value::Absent, 0),
                };
                let c = chance.get(&(metric.clone(), cell.clone())).copied();
                rows.push(ReportRow {
                    system: s.to_string(),
                    seed: seed.to_string(),
                    metric: metric.clone(),
                    cell: cell.clone(),
                    near_chance: match (&value, c) {
                        (Value::Measured(v), Some(c)) => near_chance(*v, c, n),
                        _ => false,
                    },
                    value,
                    chance: c,
                    n,
                });
            }
            let c = chance.get(&(metric.clone(), cell.clone())).copied();
            let mean = if present.is_empty() {
                let any_dash = rows.iter().rev().take(seeds.len()).any(|r| r.value == Value::Dash);
                if any_dash {
                    Value::Dash
                } else {
                    Value::Absent
                }
            } else {
                Value::Measured(present.iter().sum::<f64>() / present.len() as f64)
            };
            rows.push(ReportRow {
                system: s.to_string(),
                seed: "mean".into(),
                metric: metric.clone(),
                cell: cell.clone(),
                near_chance: match (&mean, c) {
                    (Value::Measured(v), Some(c)) => near_chance(*v, c, n_total),
                    _ => false,
                },
                value: mean,
                chance: c,
                n: n_total,
            });
        }
    }
    EvalReport {
        manifest_hash: manifest_hash.into(),
        systems: SystemId::ALL.iter().map(|s| s.to_string()).collect(),
        seeds: seeds.to_vec(),
        rows,
    }
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# manifest {}\n{}\n", self.manifest_hash, REPORT_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.system,
                r.seed,
                r.metric,
                r.cell,
                r.value.text(),
                r.chance.map_or("-".into(), |c| format!("{c:.6}")),
                r.n,
                if r.near_chance { "near-chance" } else { "ok" }
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// Rows for one system and metric cell, per seed, in seed order.
    pub fn per_seed(&self, system: SystemId, metric: &str, cell: &str) -> Vec<Option<f64>> {
        let name = system.to_string();
        self.seeds
            .iter()
            .map(|seed| {
                let seed = seed.to_string();
                self.rows
                    .iter()
                    .find(|r| r.system == name && r.seed == seed && r.metric == metric && r.cell == cell)
                    .and_then(|r| r.value.as_f64())
            })
            .collect()
    }
}

/// Two-column projection table with id columns.
pub fn projection_tsv(manifest_hash: &str, utts: &[Utterance], projection: &[[f64; 2]]) -> Result<String> {
    if utts.len() != projection.len() {
        return Err(Error::Input("one projection row per utterance required".into()));
    }
    let mut out = format!("# manifest {manifest_hash}\nid\tcontent\tspeaker\tpc1\tpc2\n");
    for (u, p) in utts.iter().zip(projection) {
        let group = parallel_group(&u.id).map_or("-".to_string(), |g| g.to_string());
        out.push_str(&format!("{}\t{}\t{}\t{:.9}\t{:.9}\n", u.id, group, u.speaker, p[0], p[1]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand::seq::SliceRandom;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let off = if c == 0 { -sep } else { sep };
            data.push(off + 0.3 * rng.sample::<f64, _>(StandardNormal));
            data.push(rng.sample::<f64, _>(StandardNormal));
            y.push(c);
        }
        (Tensor::matrix(n, 2, data).unwrap(), y)
    }

    #[test]
    fn separable_toy_is_learned_exactly() {
        let (x, y) = blobs(200, 2.0, 1);
        let p = train_probe(Factor::Accent, "toy", &x, &y, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(&x, &y).unwrap().value(), 1.0);
    }

    #[test]
    fn shuffled_labels_give_chance_on_heldout() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let n = 600;
        let data: Vec<f64> = (0..n * 4).map(|_| rng.sample(StandardNormal)).collect();
        let x = Tensor::matrix(n, 4, data).unwrap();
        let mut y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        y.shuffle(&mut rng);
        let tr = x.slice_rows(0, 400);
        let te = x.slice_rows(400, 200);
        let p = train_probe(Factor::Speaker, "noise", &tr, &y[..400], 3, &ProbeConfig::default()).unwrap();
        let acc = p.accuracy(&te, &y[400..]).unwrap().value();
        assert!((acc - 1.0 / 3.0).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn probe_training_is_deterministic() {
        let (x, y) = blobs(100, 0.5, 4);
        let a = train_probe(Factor::Accent, "toy", &x, &y, 2, &ProbeConfig::default()).unwrap();
        let b = train_probe(Factor::Accent, "toy", &x, &y, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(a.params.values(), b.params.values());
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Tensor::zeros(&[3, 2]);
        let err = train_probe(Factor::Accent, "toy", &x, &[1, 1, 1], 2, &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn converted_records_trip_the_leakage_guard() {
        let u = Utterance {
            id: "c".into(),
            provenance: Provenance::Converted { system: "P2".into() },
            speaker: 0,
            accent: Accent::M,
            tokens: vec![0],
            tones: vec![1],
            durations: vec![1],
            frames: Tensor::zeros(&[1, 2]),
        };
        assert!(matches!(frame_dataset(&[u], |_| Ok(0)), Err(Error::Leakage(_))));
    }

    #[test]
    fn identical_groups_have_zero_ratio() {
        let v = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![-3.0, 0.5], vec![-3.0, 0.5]];
        let inv = encoder_invariance(&v, &[0, 0, 1, 1]).unwrap();
        assert_eq!(inv.ratio, 0.0);
    }

    #[test]
    fn isotropic_vectors_have_unit_ratio() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let v: Vec<Vec<f64>> = (0..1000).map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let g: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let r = encoder_invariance(&v, &g).unwrap().ratio;
        assert!((r - 1.0).abs() < 0.1, "{r}");
    }

    #[test]
    fn one_group_is_rejected() {
        let v = vec![vec![0.0], vec![1.0]];
        assert!(matches!(encoder_invariance(&v, &[3, 3]), Err(Error::Input(_))));
    }

    #[test]
    fn pca_recovers_dominant_axis_with_positive_sign() {
        // full factorial grid: the axes are exactly uncorrelated, so the top
        // component is e0 and the second is e2
        let mut v = Vec::new();
        for a in -2..=2 {
            for b in -1..=1 {
                v.push(vec![-5.0 * a as f64 + 1.0, 0.0, b as f64]);
            }
        }
        let p = pca2(&v).unwrap();
        for (x, q) in v.iter().zip(&p) {
            assert!((q[0] - (x[0] - 1.0)).abs() < 1e-9);
            assert!((q[1] - x[2]).abs() < 1e-9);
        }
        assert_eq!(p, pca2(&v).unwrap());
    }

    #[test]
    fn near_chance_uses_two_standard_errors() {
        assert!(near_chance(0.52, 0.5, 100));
        assert!(!near_chance(0.75, 0.5, 100));
    }

    #[test]
    fn noise_frames_score_near_chance_content() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let k = 5;
        let n = 500;
        let x = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let probe = train_probe(Factor::Content, "noise", &x, &y, k, &ProbeConfig::default()).unwrap();
        let tokens: Vec<usize> = (0..200).map(|_| rng.random_range(0..k)).collect();
        let u = Utterance {
            id: "n".into(),
            provenance: Provenance::Converted { system: "BL".into() },
            speaker: 0,
            accent: Accent::M,
            durations: vec![3; tokens.len()],
            tones: vec![1; tokens.len()],
            frames: Tensor::matrix(600, 3, (0..1800).map(|_| rng.sample(StandardNormal)).collect()).unwrap(),
            tokens,
        };
        let acc = content_preservation(&[u], &probe).unwrap().value();
        assert!((acc - 1.0 / k as f64).abs() < 0.12, "{acc}");
    }

    fn metric(name: &str, cell: &str, v: f64) -> Metric {
        Metric { metric: name.into(), cell: cell.into(), value: v, n: 10, chance: Some(0.5) }
    }

    #[test]
    fn report_has_one_row_per_system_seed_and_marks_gaps() {
        let seeds = [1, 2, 3, 4, 5];
        let mut runs = Vec::new();
        for s in SystemId::ALL {
            for &seed in &seeds {
                if s == SystemId::P1 && seed == 3 {
                    continue;
                }
                let t = if s == SystemId::BL { 0.2 } else { 0.8 };
                runs.push((s, seed, vec![metric(OUTPUT_ACCENT, "T", t), metric(CONVERSION_MSE, "T", 0.1)]));
            }
        }
        let r = build_report("abc", &runs, &seeds);
        let per_seed = r.rows.iter().filter(|x| x.metric == OUTPUT_ACCENT && x.seed != "mean").count();
        assert_eq!(per_seed, 15);
        let gap = r.rows.iter().find(|x| x.system == "P1" && x.seed == "3" && x.metric == OUTPUT_ACCENT).unwrap();
        assert_eq!(gap.value, Value::Absent);
        let bl = r.rows.iter().find(|x| x.system == "BL" && x.seed == "1" && x.metric == CONVERSION_MSE).unwrap();
        assert_eq!(bl.value, Value::Dash);
        assert!(r.to_tsv().contains("BL\tmean\tquality_conversion_mse\tT\t-\t"));
        assert_eq!(r.to_tsv(), build_report("abc", &runs, &seeds).to_tsv());
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn parallel_ids_parse() {
        assert_eq!(parallel_group("parallel-c07-s03").unwrap(), 7);
        assert!(parallel_group("train-s01-M-0001").is_err());
    }
}
