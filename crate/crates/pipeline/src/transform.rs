//! Retrieval-augmented corpus construction and inference-time contexts.

use cm3_core::objective::{infill_transform, InfillConfig, MaskRecord};
use cm3_core::retrieval::{
    build_training_context, retrieve_by_caption, retrieve_for_query, sample_training_retrievals, Embedder, MemoryBank,
    RetrievalParams,
};
use cm3_core::seed::{derive_labeled, derive_seed, rng_from_seed};
use cm3_core::vocab::serialize_document;
use cm3_core::{Document, TokenId, TokenStream, VocabLayout};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One training instance as written by `transform`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformedRecord {
    pub id: String,
    pub tokens: TokenStream,
    pub mask_records: Vec<MaskRecord>,
    /// Ids of the documents placed before the query, in order.
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformSettings<'a> {
    pub vocab: &'a VocabLayout,
    pub seq_len: usize,
    pub retrieved: usize,
    pub infill: &'a InfillConfig,
    pub params: &'a RetrievalParams,
    pub seed: u64,
}

/// Retrieves for `doc`, keeps the first `retrieved` of the sampled
/// neighbours, builds the context and applies the infill transform. The
/// neighbour sample does not depend on `retrieved`, so smaller settings see
/// a prefix of what larger ones see.
pub fn transform_document<E: Embedder + ?Sized>(
    bank: &MemoryBank,
    doc: &Document,
    index: usize,
    embedder: &E,
    s: &TransformSettings<'_>,
) -> Result<TransformedRecord> {
    let mut rng = rng_from_seed(derive_seed(derive_labeled(s.seed, "transform"), index as u64));
    let pool = retrieve_for_query(bank, doc, embedder, &mut rng, true, s.params)?;
    let sampled = sample_training_retrievals(&pool, &mut rng);
    let docs: Vec<&Document> = sampled.iter().take(s.retrieved).map(|h| bank.doc(h.index)).collect();
    let ctx = build_training_context(&docs, doc, s.seq_len, s.vocab)?;
    let inst = infill_transform(&ctx, &mut rng, s.infill, s.vocab)?;
    // Leading documents that did not fit were dropped from the context.
    let mut room = ctx.len() - doc.serialized_len();
    let mut keep = 0;
    for d in docs.iter().rev() {
        if d.serialized_len() > room {
            break;
        }
        room -= d.serialized_len();
        keep += 1;
    }
    let retrieved = docs[docs.len() - keep..].iter().map(|d| d.id.clone()).collect();
    Ok(TransformedRecord {
        id: doc.id.clone(),
        tokens: inst.tokens,
        mask_records: inst.mask_records,
        retrieved,
    })
}

pub fn transform_corpus<E: Embedder + Sync + ?Sized>(
    bank: &MemoryBank,
    docs: &[Document],
    embedder: &E,
    s: &TransformSettings<'_>,
) -> Result<Vec<TransformedRecord>> {
    docs.par_iter()
        .enumerate()
        .map(|(i, d)| transform_document(bank, d, i, embedder, s))
        .collect()
}

/// Serialized top-`n` caption neighbours, oldest dropped first until the
/// context fits in `budget` tokens. Returns the tokens and the kept ids.
#[allow(clippy::too_many_arguments)]
pub fn inference_context<E: Embedder + ?Sized>(
    bank: &MemoryBank,
    caption: &[TokenId],
    exclude: Option<&str>,
    embedder: &E,
    n: usize,
    params: &RetrievalParams,
    budget: usize,
    vocab: &VocabLayout,
) -> Result<(Vec<TokenId>, Vec<String>)> {
    let hits = retrieve_by_caption(bank, caption, exclude, embedder, n, params)?;
    let mut parts = Vec::with_capacity(hits.len());
    for h in &hits {
        parts.push((h.doc_id.clone(), serialize_document(bank.doc(h.index), vocab)?));
    }
    let mut total: usize = parts.iter().map(|p| p.1.len()).sum();
    let mut skip = 0;
    while total > budget {
        total -= parts[skip].1.len();
        skip += 1;
    }
    let mut tokens = Vec::with_capacity(total);
    let mut ids = Vec::new();
    for (id, s) in parts.into_iter().skip(skip) {
        tokens.extend(s.into_inner());
        ids.push(id);
    }
    Ok((tokens, ids))
}
