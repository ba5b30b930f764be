//! The generative world: token codebook, tones, speakers, accents and the
//! observation projection that renders them into frames.
//!
//! A frame for token `k` with realized tone `τ'`, speaker `s` and accent `a`
//! is `W_obs · [B[k] + o_a ; U[τ'] ; V[s]] + ε`. Accent M is the identity
//! accent (zero offset, no tone remapping); accent T adds an offset to the
//! content block and realizes tone-1 tokens as tone 3 with probability p_T.
//!
//! All randomness is ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded from a
//! `u64`, with independent streams selected by `set_stream`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, Writer};
use crate::error::{Error, Result};
use crate::kernel::Tensor;

pub const NUM_TONES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Accent {
    M,
    T,
}

impl Accent {
    pub const ALL: [Accent; 2] = [Accent::M, Accent::T];

    pub fn index(self) -> usize {
        match self {
            Accent::M => 0,
            Accent::T => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Accent> {
        match i {
            0 => Ok(Accent::M),
            1 => Ok(Accent::T),
            _ => Err(Error::Domain(format!("unknown accent id {i}; valid: 0 (M), 1 (T)"))),
        }
    }
}

impl fmt::Display for Accent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Accent::M => "M",
            Accent::T => "T",
        })
    }
}

impl FromStr for Accent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Accent> {
        match s {
            "M" | "m" => Ok(Accent::M),
            "T" | "t" => Ok(Accent::T),
            _ => Err(Error::Domain(format!("unknown accent {s:?}; valid: M, T"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    pub tokens: usize,
    pub content_dim: usize,
    pub tone_dim: usize,
    pub speaker_dim: usize,
    pub frame_dim: usize,
    pub speakers: usize,
    /// Probability that accent T realizes a tone-1 token as tone 3.
    pub remap_prob: f64,
    pub noise: f64,
    pub accent_offset_norm: f64,
    pub tone_norm: f64,
    pub speaker_scale: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 20_201_021,
            tokens: 20,
            content_dim: 8,
            tone_dim: 4,
            speaker_dim: 4,
            frame_dim: 16,
            speakers: 12,
            remap_prob: 0.8,
            noise: 0.05,
            accent_offset_norm: 0.5,
            tone_norm: 0.6,
            speaker_scale: 0.5,
        }
    }
}

impl WorldSpec {
    pub fn latent_dim(&self) -> usize {
        self.content_dim + self.tone_dim + self.speaker_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens < 8 {
            return Err(Error::Config(format!("need at least 8 tokens, got {}", self.tokens)));
        }
        if self.frame_dim < self.latent_dim() {
            return Err(Error::Config(format!(
                "frame_dim {} is smaller than content+tone+speaker = {}",
                self.frame_dim,
                self.latent_dim()
            )));
        }
        if self.content_dim == 0 || self.tone_dim == 0 || self.speaker_dim == 0 {
            return Err(Error::Config("latent block dimensions must be positive".into()));
        }
        if self.speakers < 2 {
            return Err(Error::Config("need at least 2 speakers".into()));
        }
        if !(0.0..=1.0).contains(&self.remap_prob) {
            return Err(Error::Config(format!("remap_prob {} outside [0, 1]", self.remap_prob)));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Minimum pairwise distance required between unit-normalized codebook
/// vectors.
pub const CODEBOOK_MIN_DISTANCE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `K × d_c`, rows unit-norm.
    pub codebook: Tensor,
    /// Canonical tone (1..=4) per token.
    pub tone_of: Vec<u8>,
    /// `4 × d_tone`, row `i` is tone `i + 1`.
    pub tones: Tensor,
    /// `N_spk × d_spk`.
    pub speakers: Tensor,
    /// `2 × d_c`, row per accent; the M row is zero.
    pub accent_offsets: Tensor,
    /// Tone-1 → tone-3 remap probability per accent.
    pub remap_prob: [f64; 2],
    /// `D × (d_c + d_tone + d_spk)`.
    pub projection: Tensor,
}

fn normal_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Smallest pairwise Euclidean distance between rows.
pub fn min_pairwise_distance(rows: &Tensor) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..rows.rows() {
        for j in i + 1..rows.rows() {
            best = best.min(dist(rows.row(i), rows.row(j)));
        }
    }
    best
}

pub fn build_world(seed: u64, spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let k = spec.tokens;

    let codebook = loop {
        let mut data = Vec::with_capacity(k * spec.content_dim);
        for _ in 0..k {
            data.extend(unit(normal_vec(&mut rng, spec.content_dim)));
        }
        let cb = Tensor::matrix(k, spec.content_dim, data)?;
        if min_pairwise_distance(&cb) > CODEBOOK_MIN_DISTANCE {
            break cb;
        }
    };

    let mut tone_of: Vec<u8> = (0..k).map(|i| (i % NUM_TONES) as u8 + 1).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        tone_of.swap(i, j);
    }

    let tones = loop {
        let mut data = Vec::new();
        for _ in 0..NUM_TONES {
            data.extend(unit(normal_vec(&mut rng, spec.tone_dim)).into_iter().map(|v| v * spec.tone_norm));
        }
        let t = Tensor::matrix(NUM_TONES, spec.tone_dim, data)?;
        if min_pairwise_distance(&t) > 0.25 * spec.tone_norm {
            break t;
        }
    };

    let spk_data: Vec<f64> = normal_vec(&mut rng, spec.speakers * spec.speaker_dim)
        .into_iter()
        .map(|v| v * spec.speaker_scale)
        .collect();
    let speakers = Tensor::matrix(spec.speakers, spec.speaker_dim, spk_data)?;

    let mut offsets = vec![0.0; spec.content_dim];
    offsets.extend(
        unit(normal_vec(&mut rng, spec.content_dim))
            .into_iter()
            .map(|v| v * spec.accent_offset_norm),
    );
    let accent_offsets = Tensor::matrix(2, spec.content_dim, offsets)?;

    let n = spec.latent_dim();
    let scale = 1.0 / (n as f64).sqrt();
    let proj: Vec<f64> = normal_vec(&mut rng, spec.frame_dim * n)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let projection = Tensor::matrix(spec.frame_dim, n, proj)?;

    Ok(World {
        spec: spec.clone(),
        codebook,
        tone_of,
        tones,
        speakers,
        accent_offsets,
        remap_prob: [0.0, spec.remap_prob],
        projection,
    })
}

impl World {
    pub fn num_tokens(&self) -> usize {
        self.spec.tokens
    }

    pub fn num_speakers(&self) -> usize {
        self.spec.speakers
    }

    pub fn frame_dim(&self) -> usize {
        self.spec.frame_dim
    }

    pub fn check_speaker(&self, speaker: usize) -> Result<()> {
        if speaker >= self.num_speakers() {
            return Err(Error::Domain(format!(
                "unknown speaker {speaker}; world has {}",
                self.num_speakers()
            )));
        }
        Ok(())
    }

    /// Latent vector `[B[k] + o_a ; tone ; V[s]]` with an arbitrary tone
    /// vector (a realized tone or an expected one).
    fn latent(&self, token: usize, tone_vec: &[f64], speaker: usize, accent: Accent) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.spec.latent_dim());
        let off = self.accent_offsets.row(accent.index());
        z.extend(self.codebook.row(token).iter().zip(off).map(|(b, o)| b + o));
        z.extend_from_slice(tone_vec);
        z.extend_from_slice(self.speakers.row(speaker));
        z
    }

    fn project(&self, z: &[f64]) -> Vec<f64> {
        (0..self.frame_dim())
            .map(|d| {
                let mut s = 0.0;
                for (w, v) in self.projection.row(d).iter().zip(z) {
                    s += w * v;
                }
                s
            })
            .collect()
    }

    /// Noise-free frame for one factor combination.
    pub fn clean_frame(&self, token: usize, tone: u8, speaker: usize, accent: Accent) -> Vec<f64> {
        let z = self.latent(token, self.tones.row(tone as usize - 1), speaker, accent);
        self.project(&z)
    }

    /// Noise-free frame with the accent's expected tone vector, the
    /// MSE-optimal rendering when the realized tone is unknown.
    pub fn expected_frame(&self, token: usize, speaker: usize, accent: Accent) -> Vec<f64> {
        let canon = self.tone_of[token];
        let p = if canon == 1 { self.remap_prob[accent.index()] } else { 0.0 };
        let tone: Vec<f64> = self
            .tones
            .row(canon as usize - 1)
            .iter()
            .zip(self.tones.row(2))
            .map(|(c, r)| (1.0 - p) * c + p * r)
            .collect();
        let z = self.latent(token, &tone, speaker, accent);
        self.project(&z)
    }

    /// Stable byte encoding used for hashing and the world file.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(b"AVCWRLD\0");
        w.u32(1);
        w.str(&serde_json::to_string(&self.spec).expect("spec serializes"));
        for t in [&self.codebook, &self.tones, &self.speakers, &self.accent_offsets, &self.projection] {
            w.u32(t.rows() as u32);
            w.u32(t.cols() as u32);
            w.f64s(t.data());
        }
        w.u32s(&self.tone_of.iter().map(|&t| t as u32).collect::<Vec<_>>());
        w.f64s(&self.remap_prob);
        w.finish()
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.encode())
    }
}

/// Realized tone of `token` under `accent`.
pub fn tone_realize(world: &World, token: usize, accent: Accent, rng: &mut impl Rng) -> u8 {
    let canon = world.tone_of[token];
    if canon == 1 {
        let p = world.remap_prob[accent.index()];
        // M never consumes randomness, so its realization is exact
        if p > 0.0 && rng.random_bool(p) {
            return 3;
        }
    }
    canon
}
