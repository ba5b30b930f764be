//! Corpus split container.
//!
//! Version 1, little-endian, strings as `u32` length + UTF-8:
//!
//! ```text
//! magic        8 bytes  "AVCCORP\0"
//! version      u32      1
//! split        str
//! world_hash   str      hex SHA-256 of the encoded world
//! seed         u64
//! n_records    u32      then per record:
//!   id         str
//!   provenance str      "real", "converted:<system>" or "bn:<extractor>"
//!   speaker    u32
//!   accent     u32      0 = M, 1 = T
//!   tokens     u32 len + u32 × len
//!   tones      u32 len + u32 × len
//!   durations  u32 len + u32 × len
//!   rows, cols u64, u64
//!   frames     f64 × rows·cols, row-major
//! ```
//!
//! Bottleneck sequences reuse the layout with a `bn:` provenance and
//! `cols = d_bn`.

use std::path::Path;

use super::utterance::{Provenance, Utterance};
use super::world::Accent;
use crate::codec::{sha256_hex, Reader, Writer};
use crate::error::{Error, Result};
use crate::kernel::Tensor;

pub const CORPUS_MAGIC: &[u8; 8] = b"AVCCORP\0";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitFile {
    pub split: String,
    pub world_hash: String,
    pub seed: u64,
    pub records: Vec<Utterance>,
}

fn to_u32s(v: &[usize]) -> Vec<u32> {
    v.iter().map(|&x| x as u32).collect()
}

fn write_records(w: &mut Writer, records: &[Utterance]) {
    w.u32(records.len() as u32);
    for u in records {
        w.str(&u.id);
        w.str(&u.provenance.tag());
        w.u32(u.speaker as u32);
        w.u32(u.accent.index() as u32);
        w.u32s(&to_u32s(&u.tokens));
        w.u32s(&u.tones.iter().map(|&t| t as u32).collect::<Vec<_>>());
        w.u32s(&to_u32s(&u.durations));
        w.u64(u.frames.rows() as u64);
        w.u64(u.frames.cols() as u64);
        w.f64s(u.frames.data());
    }
}

/// Content hash of a record list, independent of split name and seed.
pub fn records_hash(records: &[Utterance]) -> String {
    let mut w = Writer::new();
    write_records(&mut w, records);
    sha256_hex(&w.finish())
}

impl SplitFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CORPUS_MAGIC);
        w.u32(CORPUS_VERSION);
        w.str(&self.split);
        w.str(&self.world_hash);
        w.u64(self.seed);
        write_records(&mut w, &self.records);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<SplitFile> {
        let mut r = Reader::new(bytes);
        r.expect(CORPUS_MAGIC)?;
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(Error::Format(format!("unsupported corpus version {version}")));
        }
        let split = r.str()?;
        let world_hash = r.str()?;
        let seed = r.u64()?;
        let n = r.u32()?;
        let mut records = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let id = r.str()?;
            let provenance = Provenance::parse(&r.str()?)?;
            let speaker = r.u32()? as usize;
            let accent = Accent::from_index(r.u32()? as usize)
                .map_err(|_| Error::Format(format!("record {id}: bad accent index")))?;
            let tokens: Vec<usize> = r.u32s()?.into_iter().map(|x| x as usize).collect();
            let tones: Vec<u8> = r.u32s()?.into_iter().map(|x| x as u8).collect();
            let durations: Vec<usize> = r.u32s()?.into_iter().map(|x| x as usize).collect();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let frames = Tensor::matrix(rows, cols, r.f64s(rows * cols)?)?;
            if tokens.len() != durations.len() || tones.len() != tokens.len() {
                return Err(Error::Format(format!("record {id}: label arrays differ in length")));
            }
            if durations.iter().sum::<usize>() != rows {
                return Err(Error::Format(format!("record {id}: durations do not sum to {rows} frames")));
            }
            records.push(Utterance { id, provenance, speaker, accent, tokens, tones, durations, frames });
        }
        r.finish()?;
        Ok(SplitFile { split, world_hash, seed, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SplitFile> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::utterance::sample_utterance;
    use crate::corpus::world::{build_world, WorldSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn file() -> SplitFile {
        let w = build_world(3, &WorldSpec::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut records: Vec<Utterance> = (0..4)
            .map(|i| sample_utterance(&w, format!("u{i}"), i, Accent::T, &mut rng).unwrap())
            .collect();
        records[1].provenance = Provenance::Converted { system: "P1".into() };
        SplitFile { split: "train".into(), world_hash: w.hash(), seed: 5, records }
    }

    #[test]
    fn roundtrip_is_exact() {
        let f = file();
        let bytes = f.encode();
        let back = SplitFile::decode(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = file().encode();
        assert!(matches!(SplitFile::decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(SplitFile::decode(&extra), Err(Error::Format(_))));
        let mut wrong = bytes;
        wrong[0] = b'X';
        assert!(matches!(SplitFile::decode(&wrong), Err(Error::Format(_))));
    }
}
