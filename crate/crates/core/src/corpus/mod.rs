//! Synthetic accented-speech world and corpus generation.

pub mod format;
pub mod plan;
pub mod utterance;
pub mod world;

pub use format::{records_hash, SplitFile};
pub use plan::{check_native_coupling, generate_corpus, Corpus, CorpusPlan, PlanEntry, Role, Split};
pub use utterance::{ideal_frames, render, sample_content, sample_utterance, Provenance, Utterance};
pub use world::{build_world, tone_realize, Accent, World, WorldSpec};
