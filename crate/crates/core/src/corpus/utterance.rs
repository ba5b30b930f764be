use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::world::{tone_realize, Accent, World};
use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// Where a record's frames came from. Evaluation probes refuse anything that
/// is not [`Provenance::Real`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Converted { system: String },
    Bottleneck { extractor: String },
}

impl Provenance {
    pub fn tag(&self) -> String {
        match self {
            Provenance::Real => "real".into(),
            Provenance::Converted { system } => format!("converted:{system}"),
            Provenance::Bottleneck { extractor } => format!("bn:{extractor}"),
        }
    }

    pub fn parse(tag: &str) -> Result<Provenance> {
        if tag == "real" {
            Ok(Provenance::Real)
        } else if let Some(s) = tag.strip_prefix("converted:") {
            Ok(Provenance::Converted { system: s.into() })
        } else if let Some(s) = tag.strip_prefix("bn:") {
            Ok(Provenance::Bottleneck { extractor: s.into() })
        } else {
            Err(Error::Format(format!("unknown provenance tag {tag:?}")))
        }
    }
}

/// A token sequence rendered as frames, with every latent factor attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub provenance: Provenance,
    pub speaker: usize,
    pub accent: Accent,
    pub tokens: Vec<usize>,
    /// Realized tone per token (1..=4).
    pub tones: Vec<u8>,
    /// Frames per token.
    pub durations: Vec<usize>,
    /// `T_total × D`.
    pub frames: Tensor,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Token label of every frame.
    pub fn frame_labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.durations.iter().sum());
        for (&k, &d) in self.tokens.iter().zip(&self.durations) {
            out.extend(std::iter::repeat_n(k, d));
        }
        out
    }

    /// Frame ranges of each token span.
    pub fn spans(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.durations
            .iter()
            .map(|&d| {
                let r = start..start + d;
                start += d;
                r
            })
            .collect()
    }
}

pub const MIN_TOKENS: usize = 5;
pub const MAX_TOKENS: usize = 12;
pub const MIN_DURATION: usize = 2;
pub const MAX_DURATION: usize = 4;

/// Draws a token sequence with durations: `L ~ U{5..12}`, `d ~ U{2..4}`.
pub fn sample_content(world: &World, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let len = rng.random_range(MIN_TOKENS..=MAX_TOKENS);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..world.num_tokens())).collect();
    let durations: Vec<usize> = (0..len).map(|_| rng.random_range(MIN_DURATION..=MAX_DURATION)).collect();
    (tokens, durations)
}

/// Renders a given token sequence for a speaker and accent, drawing the
/// realized tones and frame noise from `rng`.
pub fn render(
    world: &World,
    id: String,
    tokens: Vec<usize>,
    durations: Vec<usize>,
    speaker: usize,
    accent: Accent,
    rng: &mut impl Rng,
) -> Result<Utterance> {
    world.check_speaker(speaker)?;
    if tokens.len() != durations.len() {
        return Err(Error::Input("tokens and durations differ in length".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&k| k >= world.num_tokens()) {
        return Err(Error::Domain(format!("token {bad} not in vocabulary")));
    }
    let tones: Vec<u8> = tokens.iter().map(|&k| tone_realize(world, k, accent, rng)).collect();
    let total: usize = durations.iter().sum();
    let d = world.frame_dim();
    let sigma = world.spec.noise;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut data = Vec::with_capacity(total * d);
    for ((&k, &tone), &dur) in tokens.iter().zip(&tones).zip(&durations) {
        let clean = world.clean_frame(k, tone, speaker, accent);
        for _ in 0..dur {
            if sigma > 0.0 {
                data.extend(clean.iter().map(|&v| v + noise.sample(rng)));
            } else {
                data.extend_from_slice(&clean);
            }
        }
    }
    Ok(Utterance {
        id,
        provenance: Provenance::Real,
        speaker,
        accent,
        tokens,
        tones,
        durations,
        frames: Tensor::matrix(total, d, data)?,
    })
}

pub fn sample_utterance(
    world: &World,
    id: String,
    speaker: usize,
    accent: Accent,
    rng: &mut impl Rng,
) -> Result<Utterance> {
    world.check_speaker(speaker)?;
    let (tokens, durations) = sample_content(world, rng);
    render(world, id, tokens, durations, speaker, accent, rng)
}

/// Noise-free rendering with expected tones, the reference a perfect
/// conversion of `tokens` to `(speaker, accent)` would approach.
pub fn ideal_frames(
    world: &World,
    tokens: &[usize],
    durations: &[usize],
    speaker: usize,
    accent: Accent,
) -> Result<Tensor> {
    world.check_speaker(speaker)?;
    let total: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(total * world.frame_dim());
    for (&k, &dur) in tokens.iter().zip(durations) {
        let f = world.expected_frame(k, speaker, accent);
        for _ in 0..dur {
            data.extend_from_slice(&f);
        }
    }
    Tensor::matrix(total, world.frame_dim(), data)
}
