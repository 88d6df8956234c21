//! Checks against values computed outside this crate, and cross-module
//! properties that need the synthetic corpus.

use cm3_core::decoding::{rerank, Candidate, CandidatePool, LogitSource, Strategy};
use cm3_core::eval::{generate_synthetic_corpus, SyntheticSpec};
use cm3_core::ngram::train_ngram;
use cm3_core::objective::{infill_transform, InfillConfig};
use cm3_core::retrieval::{
    build_memory_bank, caption_image_similarity, embed_document, mips_search, AlignedEmbedder, Embedder, HashedEmbedder,
};
use cm3_core::seed::rng_from_seed;
use cm3_core::vocab::{serialize_document, BREAK, EOS};
use cm3_core::{TokenId, TokenStream, VocabLayout};

fn vocab() -> VocabLayout {
    VocabLayout::new(512, 64, 1).unwrap()
}

fn pool_of(images: &[Vec<TokenId>]) -> CandidatePool {
    CandidatePool {
        candidates: images
            .iter()
            .enumerate()
            .map(|(index, tokens)| Candidate {
                index,
                strategy: Strategy::Cfg,
                tokens: tokens.clone(),
                score: None,
            })
            .collect(),
    }
}

// Reference values from a standalone float64 reimplementation of the
// splitmix-based token vectors (caption [100, 200, 300], 64 dims).
const HASHED_REFERENCE: [(u32, f64, f64); 4] = [
    (0, -0.1224240701800405, 0.09064012612250007),
    (1, -0.08928382571413397, -0.021878314638167733),
    (2, 0.08650956802153562, 0.11065343659626126),
    (3, 0.05774207010847809, -0.1337195376296525),
];

#[test]
fn hashed_similarity_matches_reference_values() {
    let v = vocab();
    let caption = [100, 200, 300];
    let gt: Vec<TokenId> = (0..16).map(|i| v.image_range().start + i).collect();
    let rnd: Vec<TokenId> = (0..16).map(|i| v.image_range().start + (7 * i + 3) % 64).collect();
    for (seed, want_gt, want_rnd) in HASHED_REFERENCE {
        let e = HashedEmbedder::new(64, seed).unwrap();
        let got_gt = caption_image_similarity(&e, &caption, &gt);
        let got_rnd = caption_image_similarity(&e, &caption, &rnd);
        assert!((got_gt - want_gt).abs() < 1e-12, "seed {seed}: {got_gt} vs {want_gt}");
        assert!(
            (got_rnd - want_rnd).abs() < 1e-12,
            "seed {seed}: {got_rnd} vs {want_rnd}"
        );
    }
    // Independent random vectors carry no caption/image association: at
    // seed 0 the arbitrary candidate outscores the matching one.
    let e = HashedEmbedder::new(64, 0).unwrap();
    let (best, _) = rerank(&pool_of(&[gt, rnd]), &caption, &e).unwrap();
    assert_eq!(best, 1);
}

#[test]
fn aligned_embedder_ranks_ground_truth_first() {
    let v = vocab();
    let corpus = generate_synthetic_corpus(&SyntheticSpec::default(), &v).unwrap();
    let e = AlignedEmbedder::fit(&corpus.docs, HashedEmbedder::new(64, 0).unwrap());
    let mut rng = rng_from_seed(11);
    for (c, class) in corpus.classes.iter().enumerate() {
        let other = &corpus.classes[(c + 5) % corpus.classes.len()].pattern;
        let random: Vec<TokenId> = (0..16)
            .map(|_| v.image_range().start + rand::Rng::gen_range(&mut rng, 0..64))
            .collect();
        let pool = pool_of(&[other.clone(), random, class.pattern.clone()]);
        let (best, scored) = rerank(&pool, &class.caption, &e).unwrap();
        assert_eq!(
            best,
            2,
            "class {c}: {:?}",
            scored.candidates.iter().map(|x| x.score).collect::<Vec<_>>()
        );
    }
}

#[test]
fn mips_matches_naive_scan_on_embedded_corpus() {
    let v = vocab();
    let spec = SyntheticSpec {
        n_docs: 300,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, &v).unwrap();
    let e = HashedEmbedder::new(32, 4).unwrap();
    let bank = build_memory_bank(corpus.docs.clone(), &e).unwrap();
    for d in corpus.docs.iter().take(40) {
        let q = e.embed_text(&d.caption);
        let mut naive: Vec<(f64, String)> = corpus
            .docs
            .iter()
            .map(|o| {
                let row = embed_document(o, &e).unwrap();
                let s: f64 = row.iter().map(|&x| x as f32 as f64).zip(&q).map(|(a, b)| a * b).sum();
                (s, o.id.clone())
            })
            .collect();
        naive.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let hits = mips_search(&bank, &q, 10).unwrap();
        for (i, h) in hits.iter().enumerate() {
            assert!((h.score - naive[i].0).abs() < 1e-9, "{} vs {}", h.score, naive[i].0);
            let isolated = (i == 0 || naive[i - 1].0 - naive[i].0 > 1e-9) && naive[i].0 - naive[i + 1].0 > 1e-9;
            if isolated {
                assert_eq!(h.doc_id, naive[i].1);
            }
        }
    }
}

/// Mean ln p of the gold image tokens after `prefix`, teacher-forced.
fn image_log_likelihood<M: LogitSource>(model: &M, prefix: &[TokenId], image: &[TokenId]) -> f64 {
    let mut ctx = prefix.to_vec();
    let mut total = 0.0;
    for &t in image {
        total += model.log_prob(&ctx, t);
        ctx.push(t);
    }
    total / image.len() as f64
}

#[test]
fn true_caption_beats_masked_caption_on_heldout_images() {
    let v = vocab();
    let corpus = generate_synthetic_corpus(&SyntheticSpec::default(), &v).unwrap();
    let split = corpus.docs.len() * 9 / 10;
    let mut rng = rng_from_seed(3);
    let cfg = InfillConfig::default();
    let train: Vec<TokenStream> = corpus.docs[..split]
        .iter()
        .map(|d| {
            infill_transform(&serialize_document(d, &v).unwrap(), &mut rng, &cfg, &v)
                .unwrap()
                .tokens
        })
        .collect();
    let model = train_ngram(&train, 3, 0.1, v.total_size()).unwrap();

    let (mut cond, mut uncond) = (0.0, 0.0);
    let heldout = &corpus.docs[split..];
    for d in heldout {
        let mut p = vec![EOS];
        p.extend(&d.caption);
        p.push(BREAK);
        cond += image_log_likelihood(&model, &p, &d.image);
        uncond += image_log_likelihood(&model, &[EOS, v.mask(0), BREAK], &d.image);
    }
    let n = heldout.len() as f64;
    assert!(
        cond / n > uncond / n,
        "conditional {} vs unconditional {}",
        cond / n,
        uncond / n
    );
}
