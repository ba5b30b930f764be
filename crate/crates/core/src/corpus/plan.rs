use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::utterance::{render, sample_content, sample_utterance, Utterance};
use super::world::{Accent, World};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub speaker: usize,
    pub accent: Accent,
    pub utterances: usize,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusPlan {
    pub entries: Vec<PlanEntry>,
    /// Fraction of each target speaker's utterances kept for training.
    pub train_ratio: f64,
    /// Fresh accent-M utterances per M speaker for the speaker-independent
    /// recognizer.
    pub asr_utterances: usize,
    /// Reference utterances per speaker per accent for evaluation probes.
    pub probe_utterances: usize,
    /// Shared token sequences for the parallel invariance set.
    pub parallel_contents: usize,
    /// Source speakers rendering each parallel content.
    pub parallel_speakers: usize,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        let mut entries = vec![
            PlanEntry { speaker: 0, accent: Accent::M, utterances: 300, role: Role::Target },
            PlanEntry { speaker: 1, accent: Accent::M, utterances: 300, role: Role::Target },
            PlanEntry { speaker: 2, accent: Accent::T, utterances: 300, role: Role::Target },
        ];
        for s in 3..12 {
            entries.push(PlanEntry { speaker: s, accent: Accent::M, utterances: 30, role: Role::Source });
        }
        CorpusPlan {
            entries,
            train_ratio: 0.9,
            asr_utterances: 60,
            probe_utterances: 20,
            parallel_contents: 10,
            parallel_speakers: 3,
        }
    }
}

impl CorpusPlan {
    pub fn validate(&self, world: &World) -> Result<()> {
        let mut seen: BTreeMap<usize, Accent> = BTreeMap::new();
        for e in &self.entries {
            if e.speaker >= world.num_speakers() {
                return Err(Error::Plan(format!(
                    "speaker {} does not exist (world has {})",
                    e.speaker,
                    world.num_speakers()
                )));
            }
            if let Some(&prev) = seen.get(&e.speaker) {
                if prev != e.accent {
                    return Err(Error::Plan(format!(
                        "speaker {} is assigned both accent {} and accent {}; each speaker has one native accent",
                        e.speaker, prev, e.accent
                    )));
                }
                return Err(Error::Plan(format!("speaker {} listed twice", e.speaker)));
            }
            seen.insert(e.speaker, e.accent);
        }
        let targets = self.targets();
        if targets.len() < 2 {
            return Err(Error::Plan("need at least two target speakers".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(Error::Plan(format!("train_ratio {} outside (0, 1]", self.train_ratio)));
        }
        if self.parallel_speakers > self.sources().len() {
            return Err(Error::Plan(format!(
                "parallel set wants {} source speakers, plan has {}",
                self.parallel_speakers,
                self.sources().len()
            )));
        }
        Ok(())
    }

    /// Target speakers in plan order with their native accents.
    pub fn targets(&self) -> Vec<(usize, Accent)> {
        self.entries
            .iter()
            .filter(|e| e.role == Role::Target)
            .map(|e| (e.speaker, e.accent))
            .collect()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.role == Role::Source)
            .map(|e| e.speaker)
            .collect()
    }

    /// Utterances per target speaker held out: `round((1 − ratio) · count)`.
    pub fn heldout_count(&self, count: usize) -> usize {
        ((1.0 - self.train_ratio) * count as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Heldout,
    Source,
    Asr,
    Probe,
    Parallel,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::Train,
        Split::Heldout,
        Split::Source,
        Split::Asr,
        Split::Probe,
        Split::Parallel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
            Split::Source => "source",
            Split::Asr => "asr",
            Split::Probe => "probe",
            Split::Parallel => "parallel",
        }
    }

    fn code(&self) -> u64 {
        match self {
            Split::Train | Split::Heldout => 1,
            Split::Source => 2,
            Split::Asr => 3,
            Split::Probe => 4,
            Split::Parallel => 5,
        }
    }
}

/// Independent ChaCha20 substream for one utterance.
pub fn substream(seed: u64, split_code: u64, speaker: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((split_code << 56) | (speaker << 32) | index);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub train: Vec<Utterance>,
    pub heldout: Vec<Utterance>,
    pub source: Vec<Utterance>,
    pub asr: Vec<Utterance>,
    pub probe: Vec<Utterance>,
    pub parallel: Vec<Utterance>,
    /// World speaker id of each target, in plan order.
    pub targets: Vec<usize>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
            Split::Source => &self.source,
            Split::Asr => &self.asr,
            Split::Probe => &self.probe,
            Split::Parallel => &self.parallel,
        }
    }

    /// Index of a world speaker among the targets.
    pub fn target_index(&self, speaker: usize) -> Result<usize> {
        self.targets
            .iter()
            .position(|&s| s == speaker)
            .ok_or_else(|| Error::Input(format!("speaker {speaker} is not a target speaker")))
    }
}

fn utt_id(split: Split, speaker: usize, accent: Accent, index: usize) -> String {
    format!("{}-s{:02}-{}-{:04}", split.name(), speaker, accent, index)
}

/// Asserts every speaker in `utts` appears with exactly one accent.
pub fn check_native_coupling(utts: &[Utterance]) -> Result<()> {
    let mut seen: BTreeMap<usize, Accent> = BTreeMap::new();
    for u in utts {
        if let Some(&a) = seen.get(&u.speaker) {
            if a != u.accent {
                return Err(Error::Plan(format!(
                    "speaker {} appears with accents {} and {}",
                    u.speaker, a, u.accent
                )));
            }
        }
        seen.insert(u.speaker, u.accent);
    }
    Ok(())
}

pub fn generate_corpus(world: &World, plan: &CorpusPlan, seed: u64) -> Result<Corpus> {
    plan.validate(world)?;
    let mut corpus = Corpus {
        seed,
        train: Vec::new(),
        heldout: Vec::new(),
        source: Vec::new(),
        asr: Vec::new(),
        probe: Vec::new(),
        parallel: Vec::new(),
        targets: plan.targets().iter().map(|t| t.0).collect(),
    };

    for e in &plan.entries {
        match e.role {
            Role::Target => {
                let held = plan.heldout_count(e.utterances);
                let n_train = e.utterances - held;
                for i in 0..e.utterances {
                    let split = if i < n_train { Split::Train } else { Split::Heldout };
                    let mut rng = substream(seed, split.code(), e.speaker as u64, i as u64);
                    let u = sample_utterance(world, utt_id(split, e.speaker, e.accent, i), e.speaker, e.accent, &mut rng)?;
                    if i < n_train {
                        corpus.train.push(u);
                    } else {
                        corpus.heldout.push(u);
                    }
                }
            }
            Role::Source => {
                for i in 0..e.utterances {
                    let mut rng = substream(seed, Split::Source.code(), e.speaker as u64, i as u64);
                    corpus.source.push(sample_utterance(
                        world,
                        utt_id(Split::Source, e.speaker, e.accent, i),
                        e.speaker,
                        e.accent,
                        &mut rng,
                    )?);
                }
            }
        }
    }

    for e in plan.entries.iter().filter(|e| e.accent == Accent::M) {
        for i in 0..plan.asr_utterances {
            let mut rng = substream(seed, Split::Asr.code(), e.speaker as u64, i as u64);
            corpus.asr.push(sample_utterance(world, utt_id(Split::Asr, e.speaker, Accent::M, i), e.speaker, Accent::M, &mut rng)?);
        }
    }

    for s in 0..world.num_speakers() {
        for a in Accent::ALL {
            for i in 0..plan.probe_utterances {
                let idx = (a.index() * plan.probe_utterances + i) as u64;
                let mut rng = substream(seed, Split::Probe.code(), s as u64, idx);
                corpus.probe.push(sample_utterance(world, utt_id(Split::Probe, s, a, i), s, a, &mut rng)?);
            }
        }
    }

    let par_speakers: Vec<usize> = plan.sources().into_iter().take(plan.parallel_speakers).collect();
    for c in 0..plan.parallel_contents {
        let mut crng = substream(seed, Split::Parallel.code(), 0xFFFF, c as u64);
        let (tokens, durations) = sample_content(world, &mut crng);
        for &s in &par_speakers {
            let mut rng = substream(seed, Split::Parallel.code(), s as u64, c as u64);
            let id = format!("parallel-c{:02}-s{:02}", c, s);
            corpus.parallel.push(render(world, id, tokens.clone(), durations.clone(), s, Accent::M, &mut rng)?);
        }
    }

    check_native_coupling(&corpus.train)?;
    check_native_coupling(&corpus.asr)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::world::{build_world, WorldSpec};

    fn small_plan() -> CorpusPlan {
        CorpusPlan {
            entries: vec![
                PlanEntry { speaker: 0, accent: Accent::M, utterances: 20, role: Role::Target },
                PlanEntry { speaker: 1, accent: Accent::M, utterances: 20, role: Role::Target },
                PlanEntry { speaker: 2, accent: Accent::T, utterances: 20, role: Role::Target },
                PlanEntry { speaker: 3, accent: Accent::M, utterances: 4, role: Role::Source },
                PlanEntry { speaker: 4, accent: Accent::M, utterances: 4, role: Role::Source },
            ],
            asr_utterances: 3,
            probe_utterances: 2,
            parallel_contents: 2,
            parallel_speakers: 2,
            ..CorpusPlan::default()
        }
    }

    #[test]
    fn default_plan_s3_is_all_t() {
        let w = build_world(1, &WorldSpec::default()).unwrap();
        let c = generate_corpus(&w, &small_plan(), 4).unwrap();
        assert!(c.train.iter().chain(&c.heldout).filter(|u| u.speaker == 2).all(|u| u.accent == Accent::T));
        check_native_coupling(&c.train).unwrap();
        assert_eq!(CorpusPlan::default().targets(), vec![(0, Accent::M), (1, Accent::M), (2, Accent::T)]);
    }

    #[test]
    fn heldout_counts_follow_ratio() {
        let w = build_world(1, &WorldSpec::default()).unwrap();
        let c = generate_corpus(&w, &small_plan(), 4).unwrap();
        for s in 0..3 {
            assert_eq!(c.heldout.iter().filter(|u| u.speaker == s).count(), 2);
            assert_eq!(c.train.iter().filter(|u| u.speaker == s).count(), 18);
        }
        assert_eq!(CorpusPlan::default().heldout_count(300), 30);
        assert!(c.train.iter().all(|u| u.speaker < 3));
    }

    #[test]
    fn same_seed_same_corpus() {
        let w = build_world(1, &WorldSpec::default()).unwrap();
        let a = generate_corpus(&w, &small_plan(), 9).unwrap();
        let b = generate_corpus(&w, &small_plan(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&w, &small_plan(), 10).unwrap();
        assert_ne!(a.train[0].frames, c.train[0].frames);
    }

    #[test]
    fn utterances_do_not_depend_on_generation_order() {
        let w = build_world(1, &WorldSpec::default()).unwrap();
        let a = generate_corpus(&w, &small_plan(), 9).unwrap();
        let mut reordered = small_plan();
        reordered.entries.reverse();
        let b = generate_corpus(&w, &reordered, 9).unwrap();
        let find = |c: &Corpus, id: &str| c.train.iter().find(|u| u.id == id).cloned().unwrap();
        for u in &a.train {
            assert_eq!(find(&b, &u.id), *u);
        }
    }

    #[test]
    fn two_accents_for_one_speaker_is_plan_error() {
        let w = build_world(1, &WorldSpec::default()).unwrap();
        let mut plan = small_plan();
        plan.entries.push(PlanEntry { speaker: 2, accent: Accent::M, utterances: 5, role: Role::Target });
        let err = generate_corpus(&w, &plan, 0).unwrap_err();
        assert!(matches!(err, Error::Plan(_)));
        assert!(err.to_string().contains("speaker 2"), "{err}");
    }

    #[test]
    fn parallel_set_shares_content_across_speakers() {
        let w = build_world(1, &WorldSpec::default()).unwrap();
        let c = generate_corpus(&w, &small_plan(), 4).unwrap();
        assert_eq!(c.parallel.len(), 4);
        assert_eq!(c.parallel[0].tokens, c.parallel[1].tokens);
        assert_ne!(c.parallel[0].speaker, c.parallel[1].speaker);
        assert_ne!(c.parallel[0].tokens, c.parallel[2].tokens);
    }
}
