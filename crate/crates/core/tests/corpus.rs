use accentvc::codec::sha256_hex;
use accentvc::corpus::{build_world, generate_corpus, sample_utterance, Accent, CorpusPlan, PlanEntry, Role, SplitFile, WorldSpec};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[test]
fn pseudo_inverse_recovers_latent_blocks() {
    let spec = WorldSpec { noise: 0.0, ..WorldSpec::default() };
    let w = build_world(7, &spec).unwrap();
    let n = spec.latent_dim();
    let proj = DMatrix::from_row_slice(spec.frame_dim, n, w.projection.data());
    let pinv = proj.clone().pseudo_inverse(1e-12).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for (s, a) in [(0, Accent::M), (2, Accent::T), (7, Accent::T)] {
        let u = sample_utterance(&w, "u".into(), s, a, &mut rng).unwrap();
        for (j, span) in u.spans().into_iter().enumerate() {
            let x = DVector::from_row_slice(u.frames.row(span.start));
            let z = &pinv * x;
            let k = u.tokens[j];
            let dc = spec.content_dim;
            for i in 0..dc {
                let expect = w.codebook.get(k, i) + w.accent_offsets.get(a.index(), i);
                assert!((z[i] - expect).abs() < 1e-9);
            }
            for i in 0..spec.tone_dim {
                let expect = w.tones.get(u.tones[j] as usize - 1, i);
                assert!((z[dc + i] - expect).abs() < 1e-9);
            }
            for i in 0..spec.speaker_dim {
                let expect = w.speakers.get(s, i);
                assert!((z[dc + spec.tone_dim + i] - expect).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn neutralized_accent_matches_identity_accent_statistics() {
    let spec = WorldSpec { remap_prob: 0.0, accent_offset_norm: 0.0, ..WorldSpec::default() };
    let w = build_world(5, &spec).unwrap();
    let d = spec.frame_dim;
    // one sample per token span: frames inside a span share their token, so
    // spans are the independent units
    let mut sum = [vec![0.0; d], vec![0.0; d]];
    let mut sq = [vec![0.0; d], vec![0.0; d]];
    let mut n = [0usize; 2];
    for a in Accent::ALL {
        let ai = a.index();
        let mut rng = ChaCha20Rng::seed_from_u64(100 + ai as u64);
        for i in 0..600 {
            let u = sample_utterance(&w, format!("u{i}"), i % 12, a, &mut rng).unwrap();
            for span in u.spans() {
                for j in 0..d {
                    let m = span.clone().map(|t| u.frames.get(t, j)).sum::<f64>() / span.len() as f64;
                    sum[ai][j] += m;
                    sq[ai][j] += m * m;
                }
                n[ai] += 1;
            }
        }
    }
    for j in 0..d {
        let stats: Vec<(f64, f64)> = (0..2)
            .map(|ai| {
                let m = sum[ai][j] / n[ai] as f64;
                (m, (sq[ai][j] / n[ai] as f64 - m * m) / n[ai] as f64)
            })
            .collect();
        let diff = stats[0].0 - stats[1].0;
        let se = (stats[0].1 + stats[1].1).sqrt();
        assert!(diff.abs() < 3.0 * se, "dim {j}: diff {diff} vs 3se {}", 3.0 * se);
    }
}

#[test]
fn corpus_files_are_hash_equal_across_runs() {
    let w = build_world(1, &WorldSpec::default()).unwrap();
    let plan = CorpusPlan {
        entries: vec![
            PlanEntry { speaker: 0, accent: Accent::M, utterances: 10, role: Role::Target },
            PlanEntry { speaker: 2, accent: Accent::T, utterances: 10, role: Role::Target },
            PlanEntry { speaker: 5, accent: Accent::M, utterances: 3, role: Role::Source },
        ],
        asr_utterances: 2,
        probe_utterances: 1,
        parallel_contents: 2,
        parallel_speakers: 1,
        ..CorpusPlan::default()
    };
    let hash = || {
        let c = generate_corpus(&w, &plan, 33).unwrap();
        let f = SplitFile { split: "train".into(), world_hash: w.hash(), seed: 33, records: c.train };
        sha256_hex(&f.encode())
    };
    assert_eq!(hash(), hash());
}
