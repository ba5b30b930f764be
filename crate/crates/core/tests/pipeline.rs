use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use accentvc::corpus::SplitFile;
use accentvc::pipeline::*;
use accentvc::recognizer::Registry;
use accentvc::train::{prepare_items, train_system, TrainConfig};
use accentvc::vc::VcModel;
use accentvc::{Error, SystemId};

fn tiny() -> Config {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/tests/data/tiny.toml")).unwrap();
    Config::parse(&text).unwrap()
}

fn opts(out: &Path, seed: u64) -> Options {
    Options {
        config: Some(tiny()),
        ..Options::new(out, seed)
    }
}

fn prepared(out: &Path) -> Options {
    let o = opts(out, 1);
    gen_corpus(&o).unwrap();
    train_recognizer(&o).unwrap();
    finetune_recognizer(&o).unwrap();
    o
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[test]
fn gen_corpus_is_deterministic_and_refuses_to_overwrite() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = gen_corpus(&opts(a.path(), 3)).unwrap();
    let rb = gen_corpus(&opts(b.path(), 3)).unwrap();
    assert_eq!(ra.manifest.artifacts, rb.manifest.artifacts);
    assert_eq!(ra.manifest.hash, rb.manifest.hash);
    let err = gen_corpus(&opts(a.path(), 3)).unwrap_err();
    assert!(matches!(err, Error::Exists(_)), "{err}");
    let forced = Options { force: true, ..opts(a.path(), 3) };
    assert_eq!(gen_corpus(&forced).unwrap().manifest.artifacts, ra.manifest.artifacts);
    let other = gen_corpus(&opts(a.path(), 4)).unwrap();
    assert_ne!(other.manifest.artifacts, ra.manifest.artifacts);
}

#[test]
fn default_gen_corpus_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    gen_corpus(&Options::new(dir.path(), 1)).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    eprintln!("default gen-corpus took {secs:.2}s");
    assert!(secs < 30.0);
}

#[test]
fn plan_breaking_native_coupling_names_the_speaker() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    let mut dup = cfg.corpus.entries[0].clone();
    dup.accent = accentvc::corpus::Accent::T;
    cfg.corpus.entries.push(dup);
    let err = gen_corpus(&Options { config: Some(cfg), ..Options::new(dir.path(), 1) }).unwrap_err();
    assert!(matches!(err, Error::Plan(_)), "{err}");
    assert!(err.to_string().contains("speaker 0"), "{err}");
}

#[test]
fn commands_before_gen_corpus_name_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let err = train_recognizer(&opts(dir.path(), 1)).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)));
    assert!(err.to_string().contains("manifest.json"), "{err}");
}

#[test]
fn mismatched_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(&opts(dir.path(), 1)).unwrap();
    let mut cfg = tiny();
    cfg.train.beta = 0.2;
    let err = train_recognizer(&Options { config: Some(cfg), ..Options::new(dir.path(), 1) }).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn vc_training_needs_the_finetuned_recognizer_for_p2() {
    let dir = tempfile::tempdir().unwrap();
    let o = opts(dir.path(), 1);
    gen_corpus(&o).unwrap();
    train_recognizer(&o).unwrap();
    let err = train_vc(&o, SystemId::P2).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
    assert!(err.to_string().contains("accent-T.ckpt"), "{err}");
    // BL gets by with the SI model alone
    train_vc(&o, SystemId::BL).unwrap();
}

#[test]
fn vc_log_has_one_row_per_epoch_and_rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = prepared(dir.path());
    let first = train_vc(&o, SystemId::P2).unwrap();
    assert_eq!(first.epochs_run, tiny().train.epochs);
    let ck = read(&first.checkpoint);
    let log = fs::read_to_string(&first.log).unwrap();
    assert_eq!(log.lines().count(), 1 + tiny().train.epochs);
    let again = train_vc(&o, SystemId::P2).unwrap();
    assert_eq!(again.epochs_run, 0);
    assert_eq!(read(&again.checkpoint), ck);
    assert_eq!(fs::read_to_string(&again.log).unwrap(), log);
}

#[test]
fn interrupted_vc_training_resumes_to_the_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = prepared(a.path());
    let ob = prepared(b.path());
    let full = train_vc(&oa, SystemId::P2).unwrap();

    // leave run b as if it had stopped after two epochs
    let run = Run::open(&ob).unwrap();
    let cfg = run.config().clone();
    let registry = Registry { si: Some(run.si().unwrap()), accented: Some(run.accented().unwrap()) };
    let corpus = run.corpus().unwrap();
    let items = prepare_items(&corpus.train, &corpus.targets, &registry, SystemId::P2).unwrap();
    let mut model = VcModel::new(cfg.vc.clone(), 16, 16, 1).unwrap();
    let partial = TrainConfig { epochs: 2, ..cfg.train.clone() };
    train_system(&mut model, &items, SystemId::P2, &partial, 1, &mut |_, _| Ok(())).unwrap();
    model.trained = false;
    let mut meta = BTreeMap::new();
    meta.insert("manifest".to_string(), run.manifest.hash.clone());
    meta.insert("seed".to_string(), "1".to_string());
    meta.insert("system".to_string(), "P2".to_string());
    meta.extend(vc_meta(&run, &corpus.targets));
    fs::create_dir_all(run.path("vc")).unwrap();
    model.to_checkpoint(meta).save(&run.path(&vc_ckpt(SystemId::P2))).unwrap();
    let log = fs::read_to_string(&full.log).unwrap();
    let head: Vec<&str> = log.lines().take(3).collect();
    fs::write(run.path(&vc_log(SystemId::P2)), head.join("\n") + "\n").unwrap();

    let resumed = train_vc(&ob, SystemId::P2).unwrap();
    assert_eq!(resumed.epochs_run, cfg.train.epochs - 2);
    assert_eq!(read(&resumed.checkpoint), read(&full.checkpoint));
    assert_eq!(fs::read_to_string(&resumed.log).unwrap(), log);
}

#[test]
fn conversion_outputs_and_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let o = prepared(dir.path());
    train_vc(&o, SystemId::P1).unwrap();
    let path = convert(&o, SystemId::P1, None, None).unwrap();
    let bytes = read(&path);
    let file = SplitFile::decode(&bytes).unwrap();
    // two source speakers × five utterances, three targets, two accents
    assert_eq!(file.records.len(), 60);
    assert_eq!(file.encode(), bytes);
    let run = Run::open(&o).unwrap();
    let sources = run.corpus().unwrap().source;
    for r in &file.records {
        let src = sources.iter().find(|s| r.id.contains(&s.id)).expect("source id embedded");
        assert_eq!(r.tokens, src.tokens);
        assert_eq!(r.durations, src.durations);
    }

    let one = convert(&o, SystemId::P1, Some("s3"), Some(accentvc::corpus::Accent::T)).unwrap();
    assert_eq!(SplitFile::load(&one).unwrap().records.len(), 10);
    let err = convert(&o, SystemId::P1, Some("s7"), None).unwrap_err();
    assert!(err.to_string().contains("s1, s2, s3"), "{err}");
    let err = convert(&o, SystemId::P1, None, None).unwrap_err();
    assert!(matches!(err, Error::Exists(_)));

    let report = eval(&o).unwrap().report;
    let tsv = read(run.path(REPORT_TSV));
    let json = read(run.path(REPORT_JSON));
    assert!(report.rows.iter().any(|r| r.system == "BL" && r.value == accentvc::eval::Value::Absent));
    assert!(report.rows.iter().filter(|r| r.system == "P1").all(|r| r.value != accentvc::eval::Value::Absent));
    assert!(String::from_utf8_lossy(&tsv).starts_with(&format!("# manifest {}", run.manifest.hash)));
    assert!(matches!(eval(&o).unwrap_err(), Error::Exists(_)));

    let forced = Options { force: true, ..o.clone() };
    eval(&forced).unwrap();
    assert_eq!(read(run.path(REPORT_TSV)), tsv);
    assert_eq!(read(run.path(REPORT_JSON)), json);
    let p = project(&o, SystemId::P1).unwrap();
    let proj = read(&p);
    project(&forced, SystemId::P1).unwrap();
    assert_eq!(read(&p), proj);
    let text = String::from_utf8(proj).unwrap();
    assert_eq!(text.lines().count(), 2 + run.corpus().unwrap().parallel.len());
}

#[test]
fn eval_needs_conversions_for_trained_systems() {
    let dir = tempfile::tempdir().unwrap();
    let o = prepared(dir.path());
    train_vc(&o, SystemId::BL).unwrap();
    let err = eval(&o).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
    assert!(err.to_string().contains("convert/BL.avc"), "{err}");
}

#[test]
fn manifest_records_artifact_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let o = prepared(dir.path());
    let run = Run::open(&o).unwrap();
    for (rel, hash) in &run.manifest.artifacts {
        assert_eq!(&accentvc::codec::sha256_hex(&read(run.path(rel))), hash, "{rel}");
    }
    assert!(run.manifest.artifacts.contains_key(SI_CKPT));
    assert!(run.manifest.notes.contains_key("si_heldout_m_accuracy"));
}
