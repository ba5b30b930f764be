//! Run directories, the configuration file, the run manifest and the
//! commands the CLI exposes.
//!
//! Layout of one seed's run directory:
//!
//! ```text
//! manifest.json
//! world.bin
//! corpus/{train,heldout,source,asr,probe,parallel}.avc
//! recognizer/si.ckpt
//! recognizer/accent-T.ckpt
//! vc/{BL,P1,P2}.ckpt
//! vc/{BL,P1,P2}.log.tsv
//! convert/{BL,P1,P2}.avc
//! eval/report.tsv  eval/report.json
//! project/{BL,P1,P2}.tsv
//! ```
//!
//! The ablation command puts one such directory per seed under
//! `seed-N/` and writes `ablation.tsv`, `ablation.json` and
//! `ablation-manifest.json` next to them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::codec::sha256_hex;
use crate::corpus::{build_world, generate_corpus, Accent, Corpus, CorpusPlan, Split, SplitFile, Utterance, World, WorldSpec};
use crate::error::{Error, Result};
use crate::eval::{
    build_report, conversion_sources, convert_set, encoder_means, evaluate_system, pca2, projection_tsv, target_label,
    train_output_probes, EvalConfig, EvalContext, EvalReport, Metric,
};
use crate::kernel::gradcheck::{grad_check, GradCheckReport, LayerKind};
use crate::kernel::Checkpoint;
use crate::recognizer::{finetune, train_si, Recognizer, RecognizerConfig, Registry};
use crate::system::SystemId;
use crate::train::{prepare_items, train_system, EpochLog, TrainConfig, LOG_HEADER};
use crate::vc::{VcConfig, VcModel};

pub const TOOL_VERSION: &str = concat!("accentvc ", env!("CARGO_PKG_VERSION"));

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ACCENTVC_OUT";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WORLD_FILE: &str = "world.bin";
pub const SI_CKPT: &str = "recognizer/si.ckpt";
pub const ACCENTED_CKPT: &str = "recognizer/accent-T.ckpt";
pub const REPORT_TSV: &str = "eval/report.tsv";
pub const REPORT_JSON: &str = "eval/report.json";

pub fn split_path(split: Split) -> String {
    format!("corpus/{}.avc", split.name())
}

pub fn vc_ckpt(system: SystemId) -> String {
    format!("vc/{system}.ckpt")
}

pub fn vc_log(system: SystemId) -> String {
    format!("vc/{system}.log.tsv")
}

pub fn converted_path(system: SystemId) -> String {
    format!("convert/{system}.avc")
}

pub fn projection_path(system: SystemId) -> String {
    format!("project/{system}.tsv")
}

/// Everything a run depends on, as read from the TOML config file. Every
/// section and key is optional; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub world: WorldSpec,
    pub corpus: CorpusPlan,
    pub recognizer: RecognizerConfig,
    pub vc: VcConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.vc.validate()?;
        self.train.validate()?;
        self.corpus.validate(&build_world(self.world.seed, &self.world)?)?;
        let targets = self.corpus.targets().len();
        if self.vc.speakers != targets {
            return Err(Error::Config(format!(
                "vc.speakers is {} but the corpus plan has {targets} target speakers",
                self.vc.speakers
            )));
        }
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(Error::Config(format!("eval.train_fraction {} outside (0, 1)", self.eval.train_fraction)));
        }
        Ok(())
    }
}

/// Provenance record of a run directory. The identity hash covers the tool
/// version, seeds and config only; artifact hashes, notes and timestamps are
/// bookkeeping filled in as commands run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub hash: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub config: Config,
    pub world_hash: String,
    /// Relative path → sha256 of the bytes written.
    pub artifacts: BTreeMap<String, String>,
    /// Calibration values measured along the way.
    pub notes: BTreeMap<String, String>,
    pub created_unix: u64,
    pub updated_unix: u64,
}

#[derive(Serialize)]
struct Identity<'a> {
    tool_version: &'a str,
    seeds: &'a [u64],
    config: &'a Config,
}

pub fn manifest_hash(config: &Config, seeds: &[u64]) -> String {
    let id = Identity {
        tool_version: TOOL_VERSION,
        seeds,
        config,
    };
    sha256_hex(serde_json::to_string(&id).expect("identity serializes").as_bytes())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(config: Config, seeds: Vec<u64>, world_hash: String) -> RunManifest {
        let t = now();
        RunManifest {
            hash: manifest_hash(&config, &seeds),
            tool_version: TOOL_VERSION.into(),
            seeds,
            config,
            world_hash,
            artifacts: BTreeMap::new(),
            notes: BTreeMap::new(),
            created_unix: t,
            updated_unix: t,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.hash != manifest_hash(&m.config, &m.seeds) {
            return Err(Error::Format(format!("{}: hash does not match its contents", path.display())));
        }
        Ok(m)
    }
}

/// Common command options.
#[derive(Clone, Debug)]
pub struct Options {
    /// Output root; a seed's run lives in `out/seed-N`.
    pub out: PathBuf,
    pub seed: u64,
    pub force: bool,
    /// Config given on the command line. Commands after `gen-corpus` take the
    /// config from the run manifest and only check this one against it.
    pub config: Option<Config>,
    pub progress: fn(&str),
}

fn quiet(_: &str) {}

impl Options {
    pub fn new(out: impl Into<PathBuf>, seed: u64) -> Options {
        Options {
            out: out.into(),
            seed,
            force: false,
            config: None,
            progress: quiet,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(format!("seed-{}", self.seed))
    }
}

/// An opened run directory.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    force: bool,
}

impl Run {
    /// Opens the run `gen-corpus` created for `opts.seed`.
    pub fn open(opts: &Options) -> Result<Run> {
        let dir = opts.run_dir();
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("{} (run gen-corpus first)", path.display())));
        }
        let manifest = RunManifest::load(&path)?;
        if let Some(cfg) = &opts.config {
            let want = manifest_hash(cfg, &manifest.seeds);
            if want != manifest.hash {
                return Err(Error::Config(format!(
                    "config differs from the one {} was generated with",
                    path.display()
                )));
            }
        }
        Ok(Run {
            dir,
            manifest,
            force: opts.force,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn config(&self) -> &Config {
        &self.manifest.config
    }

    pub fn seed(&self) -> u64 {
        self.manifest.seeds[0]
    }

    /// Refuses to touch an existing output unless forced.
    pub fn check_new(&self, rel: &str) -> Result<()> {
        let p = self.path(rel);
        if p.exists() && !self.force {
            return Err(Error::Exists(p));
        }
        Ok(())
    }

    fn save_manifest(&mut self) -> Result<()> {
        self.manifest.updated_unix = now();
        let p = self.path(MANIFEST_FILE);
        fs::write(&p, self.manifest.to_json()).map_err(|e| Error::io(&p, e))
    }

    /// Writes an artifact and records its hash in the manifest.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        write_file(&p, bytes)?;
        self.manifest.artifacts.insert(rel.into(), sha256_hex(bytes));
        self.save_manifest()?;
        Ok(p)
    }

    pub fn note(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.manifest.notes.insert(key.into(), value.to_string());
        self.save_manifest()
    }

    fn require(&self, rel: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingArtifact(format!("{} ({hint})", p.display())));
        }
        Ok(p)
    }

    pub fn world(&self) -> Result<World> {
        let spec = &self.config().world;
        let world = build_world(spec.seed, spec)?;
        if world.hash() != self.manifest.world_hash {
            return Err(Error::State("world rebuilt from the manifest does not match its recorded hash".into()));
        }
        Ok(world)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let p = self.require(&split_path(split), "run gen-corpus first")?;
            let f = SplitFile::load(&p)?;
            if f.world_hash != self.manifest.world_hash || f.seed != self.seed() || f.split != split.name() {
                return Err(Error::State(format!("{} does not belong to this run", p.display())));
            }
            splits.insert(split, f.records);
        }
        let mut take = |s: Split| splits.remove(&s).unwrap_or_default();
        Ok(Corpus {
            seed: self.seed(),
            train: take(Split::Train),
            heldout: take(Split::Heldout),
            source: take(Split::Source),
            asr: take(Split::Asr),
            probe: take(Split::Probe),
            parallel: take(Split::Parallel),
            targets: self.config().corpus.targets().iter().map(|t| t.0).collect(),
        })
    }

    fn load_checkpoint(&self, rel: &str, hint: &str) -> Result<Checkpoint> {
        let p = self.require(rel, hint)?;
        let ck = Checkpoint::load(&p)?;
        if ck.meta("manifest")? != self.manifest.hash {
            return Err(Error::State(format!("{} was produced under a different manifest", p.display())));
        }
        Ok(ck)
    }

    pub fn si(&self) -> Result<Recognizer> {
        Recognizer::from_checkpoint(self.load_checkpoint(SI_CKPT, "run train-recognizer first")?)
    }

    pub fn accented(&self) -> Result<Recognizer> {
        Recognizer::from_checkpoint(self.load_checkpoint(ACCENTED_CKPT, "run finetune-recognizer first")?)
    }

    /// The recognizers `system` needs.
    pub fn registry(&self, system: SystemId) -> Result<Registry> {
        Ok(Registry {
            si: Some(self.si()?),
            accented: if system.accent_dependent() { Some(self.accented()?) } else { None },
        })
    }

    pub fn vc(&self, system: SystemId) -> Result<VcModel> {
        let ck = self.load_checkpoint(&vc_ckpt(system), &format!("run train-vc --system {system} first"))?;
        if ck.meta("system")? != system.to_string() {
            return Err(Error::State(format!("{} holds another system", vc_ckpt(system))));
        }
        VcModel::from_checkpoint(ck)
    }

    /// A conversion model that has finished its configured epochs.
    pub fn trained_vc(&self, system: SystemId) -> Result<VcModel> {
        let model = self.vc(system)?;
        if model.epoch < self.config().train.epochs {
            return Err(Error::State(format!(
                "{} stopped at epoch {} of {}; rerun train-vc to resume",
                vc_ckpt(system),
                model.epoch,
                self.config().train.epochs
            )));
        }
        Ok(model)
    }

    pub fn converted(&self, system: SystemId) -> Result<Vec<Utterance>> {
        let p = self.require(&converted_path(system), &format!("run convert --system {system} first"))?;
        let f = SplitFile::load(&p)?;
        if f.world_hash != self.manifest.world_hash || f.seed != self.seed() {
            return Err(Error::State(format!("{} does not belong to this run", p.display())));
        }
        Ok(f.records)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn stamp(ck: &mut Checkpoint, run: &Run) {
    ck.metadata.insert("manifest".into(), run.manifest.hash.clone());
    ck.metadata.insert("seed".into(), run.seed().to_string());
}

/// Builds the world and every corpus split for `opts.seed`.
pub fn gen_corpus(opts: &Options) -> Result<Run> {
    let config = opts.config.clone().unwrap_or_default();
    config.validate()?;
    let dir = opts.run_dir();
    if dir.exists() && fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some() {
        if !opts.force {
            return Err(Error::Exists(dir));
        }
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::State(format!("{} is not a run directory; not clearing it", dir.display())));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let world = build_world(config.world.seed, &config.world)?;
    let corpus = generate_corpus(&world, &config.corpus, opts.seed)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut run = Run {
        dir,
        manifest: RunManifest::new(config, vec![opts.seed], world.hash()),
        force: opts.force,
    };
    run.save_manifest()?;
    run.write(WORLD_FILE, &world.encode())?;
    for split in Split::ALL {
        let file = SplitFile {
            split: split.name().into(),
            world_hash: world.hash(),
            seed: opts.seed,
            records: corpus.split(split).to_vec(),
        };
        run.write(&split_path(split), &file.encode())?;
    }
    Ok(run)
}

/// Trains the speaker-independent recognizer and checks it against the
/// configured accuracy floor on held-out accent-M utterances.
pub fn train_recognizer(opts: &Options) -> Result<PathBuf> {
    let mut run = Run::open(opts)?;
    run.check_new(SI_CKPT)?;
    let world = run.world()?;
    let corpus = run.corpus()?;
    let cfg = run.config().recognizer.clone();
    let model = train_si(&corpus.asr, world.num_tokens(), &cfg, run.seed())?;
    let heldout_m: Vec<Utterance> = corpus.heldout.iter().filter(|u| u.accent == Accent::M).cloned().collect();
    let acc = model.accuracy(&heldout_m)?;
    run.note("si_heldout_m_accuracy", format!("{acc:.6}"))?;
    if acc < cfg.accuracy_floor {
        return Err(Error::State(format!(
            "speaker-independent recognizer reached {acc:.4} held-out accuracy, below the floor {}",
            cfg.accuracy_floor
        )));
    }
    let mut ck = model.to_checkpoint();
    stamp(&mut ck, &run);
    run.write(SI_CKPT, &ck.encode())
}

/// Fine-tunes the SI recognizer on the accent-T target speaker's training
/// utterances.
pub fn finetune_recognizer(opts: &Options) -> Result<PathBuf> {
    let mut run = Run::open(opts)?;
    run.check_new(ACCENTED_CKPT)?;
    let si = run.si()?;
    let corpus = run.corpus()?;
    let cfg = run.config().recognizer.clone();
    let t_train: Vec<Utterance> = corpus.train.iter().filter(|u| u.accent == Accent::T).cloned().collect();
    let model = finetune(&si, &t_train, cfg.finetune_epochs, &cfg, run.seed())?;
    let t_held: Vec<Utterance> = corpus.heldout.iter().filter(|u| u.accent == Accent::T).cloned().collect();
    if !t_held.is_empty() {
        run.note("si_heldout_t_accuracy", format!("{:.6}", si.accuracy(&t_held)?))?;
        run.note("finetuned_heldout_t_accuracy", format!("{:.6}", model.accuracy(&t_held)?))?;
    }
    let mut ck = model.to_checkpoint();
    stamp(&mut ck, &run);
    run.write(ACCENTED_CKPT, &ck.encode())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Epochs run by this invocation; zero when the checkpoint was already
    /// complete.
    pub epochs_run: usize,
}

fn read_log(path: &Path, keep: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format(format!("{} lacks the log header", path.display())));
    }
    let rows: Vec<String> = lines.map(str::to_string).collect();
    if rows.len() < keep {
        return Err(Error::State(format!(
            "{} has {} rows but the checkpoint is at epoch {keep}",
            path.display(),
            rows.len()
        )));
    }
    for (i, r) in rows.iter().take(keep).enumerate() {
        if EpochLog::parse(r)?.epoch != i {
            return Err(Error::Format(format!("{} row {i} is out of order", path.display())));
        }
    }
    Ok(rows.into_iter().take(keep).collect())
}

fn log_text(rows: &[String]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// World hash and target speaker vocabulary stamped into conversion
/// checkpoints.
pub fn vc_meta(run: &Run, targets: &[usize]) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("world_hash".to_string(), run.manifest.world_hash.clone());
    let speakers: Vec<String> = target_ids(targets).into_iter().zip(targets).map(|(id, s)| format!("{id}={s}")).collect();
    meta.insert("speakers".to_string(), speakers.join(","));
    meta
}

/// Trains (or resumes) the conversion model of `system`. The checkpoint and
/// log are rewritten after every epoch, so an interrupted run continues from
/// its last finished epoch; a finished checkpoint is left untouched.
pub fn train_vc(opts: &Options, system: SystemId) -> Result<TrainOutcome> {
    let mut run = Run::open(opts)?;
    let ck_rel = vc_ckpt(system);
    let log_rel = vc_log(system);
    let registry = run.registry(system)?;
    let corpus = run.corpus()?;
    let cfg = run.config().clone();
    let seed = run.seed();
    let (mut model, mut rows) = if run.path(&ck_rel).exists() && !opts.force {
        let model = run.vc(system)?;
        let rows = read_log(&run.path(&log_rel), model.epoch)?;
        (model, rows)
    } else {
        let si = registry.si.as_ref().expect("registry holds the SI model");
        (VcModel::new(cfg.vc.clone(), si.bn_dim(), si.frame_dim(), seed)?, Vec::new())
    };
    let start = model.epoch;
    let ck_path = run.path(&ck_rel);
    let log_path = run.path(&log_rel);
    if start < cfg.train.epochs || !model.trained {
        let items = prepare_items(&corpus.train, &corpus.targets, &registry, system)?;
        let mut meta = BTreeMap::new();
        meta.insert("manifest".to_string(), run.manifest.hash.clone());
        meta.insert("seed".to_string(), seed.to_string());
        meta.insert("system".to_string(), system.to_string());
        meta.extend(vc_meta(&run, &corpus.targets));
        let progress = opts.progress;
        train_system(&mut model, &items, system, &cfg.train, seed, &mut |log, m| {
            rows.push(log.tsv());
            write_file(&log_path, log_text(&rows).as_bytes())?;
            write_file(&ck_path, &m.to_checkpoint(meta.clone()).encode())?;
            progress(&format!("{system} seed {seed} {}", log.tsv()));
            Ok(())
        })?;
        run.write(&ck_rel, &model.to_checkpoint(meta).encode())?;
        run.write(&log_rel, log_text(&rows).as_bytes())?;
    }
    Ok(TrainOutcome {
        checkpoint: ck_path,
        log: log_path,
        epochs_run: cfg.train.epochs.saturating_sub(start),
    })
}

/// Valid target ids for `convert`: `s1`, `s2`, ... in plan order.
pub fn target_ids(targets: &[usize]) -> Vec<String> {
    targets.iter().map(|&s| target_label(targets, s)).collect()
}

/// Converts the standard source set with `system`'s model. `target` and
/// `accent` narrow the output to one speaker or accent; the default is every
/// target in both accents, written to `convert/{system}.avc`.
pub fn convert(opts: &Options, system: SystemId, target: Option<&str>, accent: Option<Accent>) -> Result<PathBuf> {
    let mut run = Run::open(opts)?;
    let corpus = run.corpus()?;
    let ids = target_ids(&corpus.targets);
    let targets: Vec<usize> = match target {
        None => corpus.targets.clone(),
        Some(t) => match ids.iter().position(|id| id == t) {
            Some(i) => vec![corpus.targets[i]],
            None => {
                return Err(Error::Input(format!("unknown target {t:?}; valid targets: {}", ids.join(", "))));
            }
        },
    };
    let rel = match (target, accent) {
        (None, None) => converted_path(system),
        _ => format!("convert/{system}-{}-{}.avc", target.unwrap_or("all"), accent.map_or("all".into(), |a| a.to_string())),
    };
    run.check_new(&rel)?;
    let model = run.trained_vc(system)?;
    let registry = run.registry(system)?;
    let sources = conversion_sources(&corpus, run.config().eval.convert_per_source);
    let mut records = convert_set(&model, &registry, system, &sources, &targets)?;
    if let Some(a) = accent {
        records.retain(|u| u.accent == a);
    }
    let file = SplitFile {
        split: format!("converted-{system}"),
        world_hash: run.manifest.world_hash.clone(),
        seed: run.seed(),
        records,
    };
    run.write(&rel, &file.encode())
}

/// Metrics of one seed plus the report built from them.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub runs: Vec<(SystemId, u64, Vec<Metric>)>,
}

/// Scores every system with a conversion checkpoint. Systems without one
/// show up as absent in the report.
pub fn eval(opts: &Options) -> Result<EvalOutcome> {
    let mut run = Run::open(opts)?;
    run.check_new(REPORT_TSV)?;
    run.check_new(REPORT_JSON)?;
    let world = run.world()?;
    let corpus = run.corpus()?;
    let cfg = run.config().eval.clone();
    let present: Vec<SystemId> = SystemId::ALL.into_iter().filter(|s| run.path(&vc_ckpt(*s)).exists()).collect();
    let mut runs = Vec::new();
    if !present.is_empty() {
        let probes = train_output_probes(&corpus, world.num_tokens(), &cfg)?;
        for system in present {
            let model = run.trained_vc(system)?;
            let registry = run.registry(system)?;
            let converted = run.converted(system)?;
            let heldout = prepare_items(&corpus.heldout, &corpus.targets, &registry, system)?;
            let ctx = EvalContext {
                world: &world,
                corpus: &corpus,
                registry: &registry,
                probes: &probes,
                cfg: &cfg,
            };
            let ev = evaluate_system(&ctx, &model, system, &heldout, &converted)?;
            runs.push((system, run.seed(), ev.metrics));
        }
    }
    let report = build_report(&run.manifest.hash, &runs, &[run.seed()]);
    run.write(REPORT_TSV, report.to_tsv().as_bytes())?;
    run.write(REPORT_JSON, report.to_json().as_bytes())?;
    Ok(EvalOutcome { report, runs })
}

/// PCA projection of time-averaged encoder outputs on the parallel set.
pub fn project(opts: &Options, system: SystemId) -> Result<PathBuf> {
    let mut run = Run::open(opts)?;
    let rel = projection_path(system);
    run.check_new(&rel)?;
    let corpus = run.corpus()?;
    let model = run.trained_vc(system)?;
    let registry = run.registry(system)?;
    let means = encoder_means(&model, &registry, system, &corpus.parallel)?;
    let proj = pca2(&means)?;
    let text = projection_tsv(&run.manifest.hash, &corpus.parallel, &proj)?;
    run.write(&rel, text.as_bytes())
}

pub const ABLATION_TSV: &str = "ablation.tsv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_MANIFEST: &str = "ablation-manifest.json";

/// Full pipeline for every seed and system, then one report across seeds.
pub fn ablation(opts: &Options, seeds: &[u64]) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let config = opts.config.clone().unwrap_or_default();
    config.validate()?;
    for name in [ABLATION_TSV, ABLATION_JSON] {
        let p = opts.out.join(name);
        if p.exists() && !opts.force {
            return Err(Error::Exists(p));
        }
    }
    let world = build_world(config.world.seed, &config.world)?;
    let mut all = Vec::new();
    for &seed in seeds {
        let o = Options {
            seed,
            config: Some(config.clone()),
            ..opts.clone()
        };
        (opts.progress)(&format!("seed {seed}: corpus"));
        gen_corpus(&o)?;
        (opts.progress)(&format!("seed {seed}: recognizers"));
        train_recognizer(&o)?;
        finetune_recognizer(&o)?;
        for system in SystemId::ALL {
            (opts.progress)(&format!("seed {seed}: train {system}"));
            train_vc(&o, system)?;
            convert(&o, system, None, None)?;
        }
        (opts.progress)(&format!("seed {seed}: eval"));
        all.extend(eval(&o)?.runs);
    }
    let mut manifest = RunManifest::new(config.clone(), seeds.to_vec(), world.hash());
    let report = build_report(&manifest.hash, &all, seeds);
    for (name, text) in [(ABLATION_TSV, report.to_tsv()), (ABLATION_JSON, report.to_json())] {
        write_file(&opts.out.join(name), text.as_bytes())?;
        manifest.artifacts.insert(name.into(), sha256_hex(text.as_bytes()));
    }
    write_file(&opts.out.join(ABLATION_MANIFEST), manifest.to_json().as_bytes())?;
    Ok(report)
}

/// Finite-difference checks for one layer kind or all of them.
pub fn grad_checks(layer: Option<LayerKind>, trials: usize, tol: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    let kinds: Vec<LayerKind> = match layer {
        Some(k) => vec![k],
        None => LayerKind::ALL.to_vec(),
    };
    kinds.into_iter().map(|k| grad_check(k, trials, tol, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = Config::default();
        let back = Config::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[train]\nepoch = 3\n", "[trian]\nepochs = 3\n", "seeed = 1\n"] {
            let err = Config::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
        let err = Config::parse("[train]\nepoch = 3\n").unwrap_err().to_string();
        assert!(err.contains("epoch"), "{err}");
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = Config::parse("[train]\nepochs = 7\nbeta = 0.0\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.beta, 0.0);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.world, WorldSpec::default());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(Config::parse("[train]\nbeta = -1.0\n").is_err());
        assert!(Config::parse("[eval]\ntrain_fraction = 1.0\n").is_err());
    }

    #[test]
    fn manifest_hash_ignores_bookkeeping() {
        let mut a = RunManifest::new(Config::default(), vec![1], "w".into());
        let h = a.hash.clone();
        a.created_unix += 100;
        a.artifacts.insert("x".into(), "y".into());
        assert_eq!(manifest_hash(&a.config, &a.seeds), h);
        let mut cfg = Config::default();
        cfg.train.beta = 0.1;
        assert_ne!(manifest_hash(&cfg, &[1]), h);
        assert_ne!(manifest_hash(&Config::default(), &[2]), h);
    }

    #[test]
    fn target_ids_follow_plan_order() {
        assert_eq!(target_ids(&[0, 1, 2]), vec!["s1", "s2", "s3"]);
    }
}
