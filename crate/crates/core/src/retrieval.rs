//! Dense retrieval over a memory bank of caption-image documents.
//!
//! A document is embedded as the normalized average of its text and image
//! embeddings; relevance is the inner product of unit vectors, searched
//! exactly. Candidates too close to the query (relevance above the cap) or
//! to an already kept candidate are skipped.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::math::{dot, floor, normalize};
use crate::seed::{derive_seed, splitmix64};
use crate::vocab::{serialize_document, Document, TokenId, TokenStream, VocabLayout};

pub const MAX_RELEVANCE: f64 = 0.9;
pub const DEDUP_THRESHOLD: f64 = 0.9;
pub const QUERY_DROPOUT_RATE: f64 = 0.2;
pub const TRAINING_RETRIEVALS: usize = 3;
pub const DEFAULT_EMBED_DIM: usize = 64;

pub trait Embedder {
    fn dim(&self) -> usize;
    /// Seed recorded alongside embeddings built with this embedder.
    fn seed(&self) -> u32;
    /// Unit vector, or all zeros for an empty sequence.
    fn embed_text(&self, tokens: &[TokenId]) -> Vec<f64>;
    /// Unit vector, or all zeros for an empty sequence.
    fn embed_image(&self, tokens: &[TokenId]) -> Vec<f64>;
}

/// Bag-of-tokens embedder: every token id owns a pseudo-random unit vector
/// derived from `(seed, id)`; a sequence embeds to the normalized sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub seed: u32,
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u32) -> Result<Self> {
        if dim == 0 {
            return Err(invalid_config("embedding dim must be >= 1"));
        }
        Ok(Self { dim, seed })
    }

    pub fn token_vector(&self, token: TokenId) -> Vec<f64> {
        let mut state = derive_seed(self.seed as u64, token as u64);
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| {
                state = splitmix64(state);
                // 53 random bits mapped to [-1, 1).
                (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
            })
            .collect();
        if normalize(&mut v) == 0.0 {
            v[0] = 1.0;
        }
        v
    }

    fn bag(&self, tokens: &[TokenId]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for &t in tokens {
            for (a, x) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += x;
            }
        }
        normalize(&mut acc);
        acc
    }
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn seed(&self) -> u32 {
        self.seed
    }

    fn embed_text(&self, tokens: &[TokenId]) -> Vec<f64> {
        self.bag(tokens)
    }

    fn embed_image(&self, tokens: &[TokenId]) -> Vec<f64> {
        self.bag(tokens)
    }
}

/// Cross-modal scorer used for re-ranking: text embeds as in the hashed
/// embedder, while each image token's vector is the normalized sum of the
/// caption embeddings it co-occurred with in a paired corpus, so that an
/// image lands near the captions it was seen with.
#[derive(Debug, Clone)]
pub struct AlignedEmbedder {
    base: HashedEmbedder,
    image_vectors: BTreeMap<TokenId, Vec<f64>>,
}

impl AlignedEmbedder {
    pub fn fit(docs: &[Document], base: HashedEmbedder) -> Self {
        let mut acc: BTreeMap<TokenId, Vec<f64>> = BTreeMap::new();
        for d in docs {
            let t = base.embed_text(&d.caption);
            for &tok in &d.image {
                let slot = acc.entry(tok).or_insert_with(|| vec![0.0; base.dim]);
                for (a, x) in slot.iter_mut().zip(&t) {
                    *a += x;
                }
            }
        }
        acc.retain(|_, v| normalize(v) > 0.0);
        Self {
            base,
            image_vectors: acc,
        }
    }

    pub fn base(&self) -> &HashedEmbedder {
        &self.base
    }
}

impl Embedder for AlignedEmbedder {
    fn dim(&self) -> usize {
        self.base.dim
    }

    fn seed(&self) -> u32 {
        self.base.seed
    }

    fn embed_text(&self, tokens: &[TokenId]) -> Vec<f64> {
        self.base.embed_text(tokens)
    }

    fn embed_image(&self, tokens: &[TokenId]) -> Vec<f64> {
        let mut acc = vec![0.0; self.base.dim];
        for &t in tokens {
            let v = match self.image_vectors.get(&t) {
                Some(v) => v.clone(),
                None => self.base.token_vector(t),
            };
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        normalize(&mut acc);
        acc
    }
}

/// `normalize((text + image) / 2)`; a document without caption uses its image alone.
pub fn embed_document<E: Embedder + ?Sized>(doc: &Document, embedder: &E) -> Result<Vec<f64>> {
    let image = embedder.embed_image(&doc.image);
    let mut v = if doc.caption.is_empty() {
        image
    } else {
        let text = embedder.embed_text(&doc.caption);
        text.iter().zip(&image).map(|(a, b)| (a + b) / 2.0).collect()
    };
    if normalize(&mut v) < 1e-12 {
        return Err(Error::DegenerateEmbedding(format!(
            "document {:?} averages to a zero vector",
            doc.id
        )));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    docs: Vec<Document>,
    dim: usize,
    embedder_seed: u32,
    /// Row-major `docs.len() x dim`.
    embeddings: Vec<f32>,
    by_id: BTreeMap<String, usize>,
}

impl MemoryBank {
    /// Assembles a bank from stored parts, checking shapes and ids.
    pub fn from_parts(docs: Vec<Document>, dim: usize, embedder_seed: u32, embeddings: Vec<f32>) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyInput("memory bank needs at least one document".into()));
        }
        if dim == 0 || embeddings.len() != docs.len() * dim {
            return Err(Error::Shape {
                expected: docs.len() * dim,
                found: embeddings.len(),
            });
        }
        let mut by_id = BTreeMap::new();
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self {
            docs,
            dim,
            embedder_seed,
            embeddings,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_seed(&self) -> u32 {
        self.embedder_seed
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, index: usize) -> &Document {
        &self.docs[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.embeddings[index * self.dim..(index + 1) * self.dim]
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    /// Inner product of two bank rows.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        self.row(a)
            .iter()
            .zip(self.row(b))
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum()
    }

    fn score(&self, index: usize, query: &[f64]) -> f64 {
        let s: f64 = self.row(index).iter().zip(query).map(|(&x, &y)| x as f64 * y).sum();
        s.clamp(-1.0, 1.0)
    }
}

pub fn build_memory_bank<E: Embedder + ?Sized>(docs: Vec<Document>, embedder: &E) -> Result<MemoryBank> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("memory bank needs at least one document".into()));
    }
    let mut seen = BTreeMap::new();
    for d in &docs {
        if seen.insert(d.id.as_str(), ()).is_some() {
            return Err(Error::DuplicateId(d.id.clone()));
        }
    }
    let mut embeddings = Vec::with_capacity(docs.len() * embedder.dim());
    for d in &docs {
        embeddings.extend(embed_document(d, embedder)?.into_iter().map(|x| x as f32));
    }
    MemoryBank::from_parts(docs, embedder.dim(), embedder.seed(), embeddings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryModality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    /// Row of the document in the bank.
    pub index: usize,
    pub doc_id: String,
    pub score: f64,
    pub modality: Option<QueryModality>,
}

fn rank_order(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Exact top-`k` maximum inner product search. Scores descend; equal
/// scores are ordered by ascending doc id.
pub fn mips_search(bank: &MemoryBank, query: &[f64], k: usize) -> Result<Vec<RetrievalHit>> {
    if query.len() != bank.dim() {
        return Err(Error::Shape {
            expected: bank.dim(),
            found: query.len(),
        });
    }
    if k == 0 {
        return Err(invalid_config("K must be >= 1"));
    }
    let mut hits: Vec<RetrievalHit> = (0..bank.len())
        .map(|i| RetrievalHit {
            index: i,
            doc_id: bank.doc(i).id.clone(),
            score: bank.score(i, query),
            modality: None,
        })
        .collect();
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    Ok(hits)
}

/// Runs [`mips_search`] for several queries; results are in query order.
pub fn mips_search_batch(bank: &MemoryBank, queries: &[Vec<f64>], k: usize) -> Result<Vec<Vec<RetrievalHit>>> {
    queries.iter().map(|q| mips_search(bank, q, k)).collect()
}

/// Drops hits scoring above `max_relevance`, then greedily keeps hits whose
/// similarity to every already kept hit is at most `dedup_threshold`.
pub fn filter_candidates(
    hits: &[RetrievalHit],
    bank: &MemoryBank,
    max_relevance: f64,
    dedup_threshold: f64,
) -> Vec<RetrievalHit> {
    let mut kept: Vec<RetrievalHit> = Vec::new();
    for h in hits.iter().filter(|h| h.score <= max_relevance) {
        if kept
            .iter()
            .all(|k| bank.similarity(k.index, h.index) <= dedup_threshold)
        {
            kept.push(h.clone());
        }
    }
    kept
}

/// Removes `floor(rate * len)` tokens chosen uniformly without replacement.
pub fn query_dropout<R: Rng + ?Sized>(tokens: &[TokenId], rate: f64, rng: &mut R) -> Result<Vec<TokenId>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid_config(format!("query dropout rate {rate} not in [0, 1)")));
    }
    // The small slack keeps e.g. 0.29 * 100 from flooring to 28.
    let n_drop = floor(rate * tokens.len() as f64 + 1e-9) as usize;
    if n_drop == 0 {
        return Ok(tokens.to_vec());
    }
    let mut drop = vec![false; tokens.len()];
    for i in rand::seq::index::sample(rng, tokens.len(), n_drop) {
        drop[i] = true;
    }
    Ok(tokens
        .iter()
        .zip(drop)
        .filter_map(|(&t, d)| (!d).then_some(t))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    /// Hits requested from each MIPS query before filtering.
    pub search_k: usize,
    pub max_relevance: f64,
    pub dedup_threshold: f64,
    pub dropout_rate: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            search_k: 16,
            max_relevance: MAX_RELEVANCE,
            dedup_threshold: DEDUP_THRESHOLD,
            dropout_rate: QUERY_DROPOUT_RATE,
        }
    }
}

fn filtered_search(
    bank: &MemoryBank,
    query: &[f64],
    exclude: Option<&str>,
    modality: QueryModality,
    params: &RetrievalParams,
) -> Result<Vec<RetrievalHit>> {
    if query.iter().all(|&x| x == 0.0) {
        return Ok(Vec::new());
    }
    let k = params.search_k.max(1) + usize::from(exclude.is_some());
    let mut hits = mips_search(bank, query, k)?;
    if let Some(id) = exclude {
        hits.retain(|h| h.doc_id != id);
    }
    let mut kept = filter_candidates(&hits, bank, params.max_relevance, params.dedup_threshold);
    for h in &mut kept {
        h.modality = Some(modality);
    }
    Ok(kept)
}

/// Training-time candidate pool for `doc`: one search from the caption
/// embedding (after query dropout when enabled) and one from the image
/// embedding, each filtered, then merged by id keeping the higher score.
/// The query document itself never appears.
pub fn retrieve_for_query<E: Embedder + ?Sized, R: Rng + ?Sized>(
    bank: &MemoryBank,
    doc: &Document,
    embedder: &E,
    rng: &mut R,
    use_dropout: bool,
    params: &RetrievalParams,
) -> Result<Vec<RetrievalHit>> {
    let caption = if use_dropout {
        query_dropout(&doc.caption, params.dropout_rate, rng)?
    } else {
        doc.caption.clone()
    };
    let exclude = Some(doc.id.as_str());
    let text_hits = filtered_search(
        bank,
        &embedder.embed_text(&caption),
        exclude,
        QueryModality::Text,
        params,
    )?;
    let image_hits = filtered_search(
        bank,
        &embedder.embed_image(&doc.image),
        exclude,
        QueryModality::Image,
        params,
    )?;

    let mut merged: BTreeMap<String, RetrievalHit> = BTreeMap::new();
    for h in text_hits.into_iter().chain(image_hits) {
        match merged.get(&h.doc_id) {
            Some(prev) if prev.score >= h.score => {}
            _ => {
                merged.insert(h.doc_id.clone(), h);
            }
        }
    }
    let mut pool: Vec<RetrievalHit> = merged.into_values().collect();
    pool.sort_by(rank_order);
    Ok(pool)
}

/// Inference-time retrieval: the best surviving hit per modality, at most two documents.
pub fn retrieve_for_inference<E: Embedder + ?Sized>(
    bank: &MemoryBank,
    doc: &Document,
    embedder: &E,
    params: &RetrievalParams,
) -> Result<Vec<RetrievalHit>> {
    let exclude = Some(doc.id.as_str());
    let text_hits = filtered_search(
        bank,
        &embedder.embed_text(&doc.caption),
        exclude,
        QueryModality::Text,
        params,
    )?;
    let image_hits = filtered_search(
        bank,
        &embedder.embed_image(&doc.image),
        exclude,
        QueryModality::Image,
        params,
    )?;
    let mut out: Vec<RetrievalHit> = text_hits.into_iter().take(1).collect();
    if let Some(h) = image_hits
        .into_iter()
        .find(|h| out.iter().all(|o| o.doc_id != h.doc_id))
    {
        out.push(h);
    }
    Ok(out)
}

/// Caption-only retrieval for prompts whose image is unknown: the top `n` filtered hits.
pub fn retrieve_by_caption<E: Embedder + ?Sized>(
    bank: &MemoryBank,
    caption: &[TokenId],
    exclude: Option<&str>,
    embedder: &E,
    n: usize,
    params: &RetrievalParams,
) -> Result<Vec<RetrievalHit>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut hits = filtered_search(
        bank,
        &embedder.embed_text(caption),
        exclude,
        QueryModality::Text,
        params,
    )?;
    hits.truncate(n);
    Ok(hits)
}

/// Up to three hits sampled uniformly without replacement, kept in pool order.
pub fn sample_training_retrievals<R: Rng + ?Sized>(pool: &[RetrievalHit], rng: &mut R) -> Vec<RetrievalHit> {
    if pool.len() <= TRAINING_RETRIEVALS {
        return pool.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, pool.len(), TRAINING_RETRIEVALS).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

/// Retrieved documents in order, then the query document. Leading
/// retrieved documents are dropped until the whole context fits `seq_len`.
pub fn build_training_context(
    retrieved: &[&Document],
    query: &Document,
    seq_len: usize,
    vocab: &VocabLayout,
) -> Result<TokenStream> {
    let q = serialize_document(query, vocab)?;
    if q.len() > seq_len {
        return Err(Error::TooLong {
            len: q.len(),
            max: seq_len,
        });
    }
    let mut parts = retrieved
        .iter()
        .map(|d| serialize_document(d, vocab))
        .collect::<Result<Vec<_>>>()?;
    let mut total: usize = parts.iter().map(TokenStream::len).sum::<usize>() + q.len();
    let mut skip = 0;
    while total > seq_len {
        total -= parts[skip].len();
        skip += 1;
    }
    let mut out = Vec::with_capacity(total);
    for p in parts.drain(skip..) {
        out.extend(p.into_inner());
    }
    out.extend(q.into_inner());
    Ok(TokenStream(out))
}

/// Inner product of unit-normalized caption and image embeddings.
pub fn caption_image_similarity<E: Embedder + ?Sized>(embedder: &E, caption: &[TokenId], image: &[TokenId]) -> f64 {
    dot(&embedder.embed_text(caption), &embedder.embed_image(image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use alloc::vec;

    /// Embedder returning fixed vectors, keyed by the first token.
    struct Table {
        text: BTreeMap<TokenId, Vec<f64>>,
        image: BTreeMap<TokenId, Vec<f64>>,
    }

    impl Embedder for Table {
        fn dim(&self) -> usize {
            2
        }
        fn seed(&self) -> u32 {
            0
        }
        fn embed_text(&self, t: &[TokenId]) -> Vec<f64> {
            t.first().map(|k| self.text[k].clone()).unwrap_or(vec![0.0, 0.0])
        }
        fn embed_image(&self, t: &[TokenId]) -> Vec<f64> {
            t.first().map(|k| self.image[k].clone()).unwrap_or(vec![0.0, 0.0])
        }
    }

    fn bank_of(rows: &[(&str, [f32; 2])]) -> MemoryBank {
        let docs = rows
            .iter()
            .map(|(id, _)| Document::new(*id, vec![], vec![600]))
            .collect();
        let emb = rows.iter().flat_map(|(_, r)| r.iter().copied()).collect();
        MemoryBank::from_parts(docs, 2, 0, emb).unwrap()
    }

    #[test]
    fn document_embedding_rules() {
        let table = Table {
            text: [(10, vec![1.0, 0.0]), (11, vec![0.0, -1.0])].into(),
            image: [(600, vec![0.0, 1.0])].into(),
        };
        let d = Document::new("a", vec![10], vec![600]);
        let e = embed_document(&d, &table).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((e[0] - r).abs() < 1e-15 && (e[1] - r).abs() < 1e-15);

        let no_caption = Document::new("b", vec![], vec![600]);
        assert_eq!(embed_document(&no_caption, &table).unwrap(), vec![0.0, 1.0]);

        let opposed = Document::new("c", vec![11], vec![600]);
        assert!(matches!(
            embed_document(&opposed, &table),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn mips_examples() {
        let bank = bank_of(&[("a", [1.0, 0.0]), ("b", [0.6, 0.8]), ("c", [0.0, 1.0])]);
        let hits = mips_search(&bank, &[1.0, 0.0], 2).unwrap();
        let got: Vec<(&str, f64)> = hits.iter().map(|h| (h.doc_id.as_str(), h.score)).collect();
        assert_eq!(got[0], ("a", 1.0));
        assert_eq!(got[1].0, "b");
        assert!((got[1].1 - 0.6).abs() < 1e-7);
        assert_eq!(mips_search(&bank, &[1.0, 0.0], 10).unwrap().len(), 3);
        assert!(matches!(mips_search(&bank, &[1.0], 1), Err(Error::Shape { .. })));

        let tied = bank_of(&[("z", [0.0, 1.0]), ("m", [0.0, 1.0]), ("a", [1.0, 0.0])]);
        let ids: Vec<String> = mips_search(&tied, &[0.0, 1.0], 2)
            .unwrap()
            .into_iter()
            .map(|h| h.doc_id)
            .collect();
        assert_eq!(ids, vec!["m", "z"]);
    }

    #[test]
    fn filter_examples() {
        let bank = bank_of(&[("a", [1.0, 0.0]), ("b", [0.6, 0.8]), ("c", [0.0, 1.0])]);
        let hits = mips_search(&bank, &[1.0, 0.0], 2).unwrap();
        let kept = filter_candidates(&hits, &bank, MAX_RELEVANCE, DEDUP_THRESHOLD);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].doc_id, "b");

        let (s, c) = (0.95f32, (1.0f32 - 0.95 * 0.95).sqrt());
        let close = bank_of(&[("p", [1.0, 0.0]), ("q", [s, c])]);
        let hits = mips_search(&close, &[0.8, 0.6], 2).unwrap();
        assert_eq!(filter_candidates(&hits, &close, 0.9, 0.9).len(), 1);

        let all_high = mips_search(&bank, &[1.0, 0.0], 1).unwrap();
        assert!(filter_candidates(&all_high, &bank, 0.9, 0.9).is_empty());
    }

    #[test]
    fn dropout_counts() {
        let toks: Vec<u32> = (10..20).collect();
        let out = query_dropout(&toks, 0.2, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out.len(), 8);
        assert!(out.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(query_dropout(&toks, 0.0, &mut rng_from_seed(1)).unwrap(), toks);
        assert_eq!(
            query_dropout(&toks, 0.2, &mut rng_from_seed(5)).unwrap(),
            query_dropout(&toks, 0.2, &mut rng_from_seed(5)).unwrap()
        );
        assert!(query_dropout(&toks, 1.0, &mut rng_from_seed(1)).is_err());
        let hundred: Vec<u32> = (0..100).collect();
        assert_eq!(query_dropout(&hundred, 0.29, &mut rng_from_seed(1)).unwrap().len(), 71);
    }

    #[test]
    fn training_samples() {
        let hit = |i: usize| RetrievalHit {
            index: i,
            doc_id: format!("d{i}"),
            score: 0.5,
            modality: None,
        };
        let pool: Vec<_> = (0..5).map(hit).collect();
        let s = sample_training_retrievals(&pool, &mut rng_from_seed(2));
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0].index < w[1].index));
        assert_eq!(sample_training_retrievals(&pool[..2], &mut rng_from_seed(2)).len(), 2);
        assert!(sample_training_retrievals(&[], &mut rng_from_seed(2)).is_empty());
    }

    #[test]
    fn context_assembly() {
        let v = VocabLayout::default();
        let img = vec![517; 4];
        let docs: Vec<Document> = (0..4)
            .map(|i| Document::new(format!("d{i}"), vec![10 + i], img.clone()))
            .collect();
        let refs: Vec<&Document> = docs[..3].iter().collect();
        let ctx = build_training_context(&refs, &docs[3], 64, &v).unwrap();
        assert_eq!(ctx.len(), 4 * 7);
        assert_eq!(&ctx[21..], serialize_document(&docs[3], &v).unwrap().tokens());

        let ctx = build_training_context(&refs, &docs[3], 27, &v).unwrap();
        assert_eq!(ctx.len(), 21);
        assert_eq!(ctx[1], 11, "first retrieved doc dropped");

        let ctx = build_training_context(&[], &docs[3], 7, &v).unwrap();
        assert_eq!(ctx.len(), 7);
        assert!(matches!(
            build_training_context(&[], &docs[3], 6, &v),
            Err(Error::TooLong { .. })
        ));
    }

    #[test]
    fn hashed_embedder_is_unit_and_deterministic() {
        let e = HashedEmbedder::new(64, 7).unwrap();
        let a = e.embed_text(&[10, 11, 12]);
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(a, HashedEmbedder::new(64, 7).unwrap().embed_text(&[10, 11, 12]));
        assert!(e.embed_text(&[]).iter().all(|&x| x == 0.0));
    }
}
