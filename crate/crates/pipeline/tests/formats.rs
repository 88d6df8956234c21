use std::path::Path;

use cm3_core::ngram::train_ngram;
use cm3_core::retrieval::{build_memory_bank, HashedEmbedder};
use cm3_core::vq::{Codebook, GrayImage};
use cm3_core::{Document, TokenStream};
use cm3_pipeline::formats::*;
use cm3_pipeline::PipelineError;
use proptest::prelude::*;

fn p() -> &'static Path {
    Path::new("mem")
}

#[test]
fn codebook_round_trip() {
    let cb = Codebook::new(2, 99, vec![vec![0.0, 1.5, -2.0, 255.0], vec![3.25, 4.0, 5.0, 6.0]]).unwrap();
    let bytes = encode_codebook(&cb).unwrap();
    assert_eq!(&bytes[..6], CODEBOOK_MAGIC);
    assert_eq!(decode_codebook(&bytes, p()).unwrap(), cb);
}

#[test]
fn bank_round_trip_through_file() {
    let docs = vec![
        Document::new("a", vec![10, 11], vec![517, 518]),
        Document::new("b", vec![12], vec![519, 520]),
    ];
    let bank = build_memory_bank(docs, &HashedEmbedder::new(8, 3).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/bank.bin");
    write_bank(&path, &bank).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..6], BANK_MAGIC);
    assert_eq!(read_bank(&path).unwrap(), bank);
}

#[test]
fn model_round_trip_and_magic() {
    let corpus = vec![
        TokenStream::new(vec![1, 5, 6, 2, 7, 1]),
        TokenStream::new(vec![1, 5, 8]),
    ];
    let model = train_ngram(&corpus, 3, 0.25, 10).unwrap();
    let bytes = encode_model(&model).unwrap();
    assert_eq!(&bytes[..6], MODEL_MAGIC);
    assert_eq!(decode_model(&bytes, p()).unwrap(), model);
    // Encoding is canonical.
    assert_eq!(encode_model(&decode_model(&bytes, p()).unwrap()).unwrap(), bytes);
}

#[test]
fn loaders_reject_other_versions_and_magics() {
    let model = train_ngram(&[TokenStream::new(vec![1, 2, 1])], 2, 0.1, 4).unwrap();
    let mut bytes = encode_model(&model).unwrap();
    bytes[5] = b'9';
    let err = decode_model(&bytes, p()).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    let cb = Codebook::new(1, 0, vec![vec![1.0]]).unwrap();
    let cb_bytes = encode_codebook(&cb).unwrap();
    let err = decode_model(&cb_bytes, p()).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
    assert!(matches!(
        decode_codebook(&cb_bytes[..9], p()),
        Err(PipelineError::Format { .. })
    ));
}

#[test]
fn pgm_round_trip_and_errors() {
    let img = GrayImage::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
    let bytes = encode_pgm(&img);
    assert!(bytes.starts_with(b"P5"));
    assert_eq!(decode_pgm(&bytes, p()).unwrap(), img);
    assert!(decode_pgm(b"P2\n1 1\n255\n0", p()).is_err());

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pgm");
    let err = read_pgm(&missing).unwrap_err();
    assert!(err.to_string().contains("nope.pgm"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn jsonl_errors_name_the_line() {
    let bytes = b"{\"id\":\"a\",\"caption\":[5],\"image\":[517]}\n\nnot json\n";
    let err = parse_jsonl::<Document>(bytes, Path::new("docs.jsonl"))
        .unwrap_err()
        .to_string();
    assert!(err.contains("docs.jsonl") && err.contains('3'), "{err}");
}

proptest! {
    #[test]
    fn random_models_round_trip(
        streams in prop::collection::vec(prop::collection::vec(0u32..12, 1..20), 1..6),
        order in 1usize..4,
        delta in 0.01f64..2.0,
    ) {
        let corpus: Vec<TokenStream> = streams.into_iter().map(TokenStream::new).collect();
        let model = train_ngram(&corpus, order, delta, 12).unwrap();
        let bytes = encode_model(&model).unwrap();
        prop_assert_eq!(decode_model(&bytes, p()).unwrap(), model);
    }

    #[test]
    fn random_pgms_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
        let pixels = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = GrayImage::new(w, h, pixels).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&img), p()).unwrap(), img);
    }
}
