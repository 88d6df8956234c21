//! Desk-scale experiment suite on the synthetic caption/pattern corpus:
//! a retrieval-count sweep, a guidance-weight sweep and a candidate-pool
//! sweep comparing guided, contrastive and mixed pools.
//!
//! Image fidelity is measured by proxies (positional pattern accuracy and
//! caption/image embedding similarity), not by FID.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cm3_core::decoding::{generate_pool, DecodeConfig, Prompt, Strategy};
use cm3_core::eval::{
    conditional_fidelity, generate_synthetic_corpus, pattern_accuracy, suffix_perplexity, SyntheticCorpus,
    SyntheticSpec,
};
use cm3_core::math::argmax;
use cm3_core::ngram::{train_ngram, NGramModel};
use cm3_core::retrieval::{build_memory_bank, caption_image_similarity, AlignedEmbedder, HashedEmbedder, MemoryBank};
use cm3_core::seed::{derive_labeled, derive_seed};
use cm3_core::{Document, TokenId, TokenStream, VocabLayout};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::formats::{write_bytes, write_json};
use crate::transform::{inference_context, transform_corpus, TransformSettings};

pub const FIDELITY_NOTE: &str = "fidelity columns are desk-scale proxies (positional pattern accuracy against the \
class pattern, caption/image embedding similarity); they are not FID and are not comparable to FID values";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_patterns: usize,
    pub noise_rate: f64,
    pub n_docs: usize,
    pub caption_len: usize,
    /// Trailing fraction of the corpus held out for evaluation.
    pub heldout_fraction: f64,
    /// Candidates averaged per query in the retrieval and guidance sweeps.
    pub samples_per_query: usize,
    pub retrieved_grid: Vec<usize>,
    pub cfg_grid: Vec<f64>,
    pub pool_sizes: Vec<usize>,
    /// Retrieval count of the model and prompts used by the guidance and pool sweeps.
    pub sweep_retrieved: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_patterns: 16,
            noise_rate: 0.1,
            n_docs: 2000,
            caption_len: 3,
            heldout_fraction: 0.1,
            samples_per_query: 4,
            retrieved_grid: vec![0, 1, 2, 3],
            cfg_grid: vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0],
            pool_sizes: vec![1, 2, 4, 8, 16],
            sweep_retrieved: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(PipelineError::Config("heldout_fraction must be in (0, 1)".into()));
        }
        if self.samples_per_query == 0 {
            return Err(PipelineError::Config("samples_per_query must be >= 1".into()));
        }
        if self.pool_sizes.contains(&0) {
            return Err(PipelineError::Config("pool sizes must be >= 1".into()));
        }
        if self
            .retrieved_grid
            .iter()
            .chain([&self.sweep_retrieved])
            .any(|&r| r > 3)
        {
            return Err(PipelineError::Config("retrieval counts must be in 0..=3".into()));
        }
        if self.cfg_grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(PipelineError::Config("guidance weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub retrieved: usize,
    pub train_tokens: usize,
    pub perplexity: f64,
    pub accuracy: f64,
    pub similarity: f64,
    pub reranked_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfgRow {
    pub cfg_alpha: f64,
    pub accuracy: f64,
    pub similarity: f64,
    pub reranked_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub pool_size: usize,
    /// `cfg`, `cdk`, `mixed` (equal budget split) or `union` (cfg and cdk pools of this size combined).
    pub pool: String,
    pub candidates: usize,
    pub best_accuracy: f64,
    pub reranked_accuracy: f64,
    pub best_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub train_docs: usize,
    pub heldout_docs: usize,
    pub classes: usize,
    pub vocab_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub note: String,
    pub effective_config: RunConfig,
    pub corpus: CorpusSummary,
    pub retrieval_sweep: Vec<RetrievalRow>,
    pub cfg_sweep: Vec<CfgRow>,
    pub pool_sweep: Vec<PoolRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_eval: Option<ModelEval>,
}

/// Perplexity of a stored model on a stored held-out file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub model: PathBuf,
    pub heldout: PathBuf,
    pub streams: usize,
    pub perplexity: f64,
}

struct Setup {
    vocab: VocabLayout,
    corpus: SyntheticCorpus,
    n_train: usize,
    bank: MemoryBank,
    embedder: HashedEmbedder,
    scorer: AlignedEmbedder,
}

impl Setup {
    fn train_docs(&self) -> &[Document] {
        &self.corpus.docs[..self.n_train]
    }

    fn heldout(&self) -> impl IndexedParallelIterator<Item = (usize, &Document, &[TokenId])> + '_ {
        self.corpus.docs[self.n_train..]
            .par_iter()
            .zip(&self.corpus.labels[self.n_train..])
            .enumerate()
            .map(|(j, (d, &l))| (j, d, self.corpus.classes[l].pattern.as_slice()))
    }
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let vocab = cfg.vocab_layout()?;
    let e = &cfg.experiment;
    let spec = SyntheticSpec {
        seed: cfg.seed,
        n_patterns: e.n_patterns,
        noise_rate: e.noise_rate,
        n_docs: e.n_docs,
        caption_len: e.caption_len,
        tokens_per_image: cfg.tokens_per_image,
    };
    let corpus = generate_synthetic_corpus(&spec, &vocab)?;
    let n_held = ((e.n_docs as f64) * e.heldout_fraction).round() as usize;
    if n_held == 0 || n_held >= e.n_docs {
        return Err(PipelineError::Config("held-out split leaves an empty side".into()));
    }
    let n_train = e.n_docs - n_held;
    let embedder = HashedEmbedder::new(cfg.embedder.dim, cfg.embedder.seed)?;
    let bank = build_memory_bank(corpus.docs[..n_train].to_vec(), &embedder)?;
    let scorer = AlignedEmbedder::fit(&corpus.docs[..n_train], embedder);
    Ok(Setup {
        vocab,
        corpus,
        n_train,
        bank,
        embedder,
        scorer,
    })
}

fn train_with_retrieval(cfg: &RunConfig, s: &Setup, retrieved: usize) -> Result<(NGramModel, usize)> {
    let settings = TransformSettings {
        vocab: &s.vocab,
        seq_len: cfg.seq_len,
        retrieved,
        infill: &cfg.infill,
        params: &cfg.retrieval,
        seed: cfg.seed,
    };
    let records = transform_corpus(&s.bank, s.train_docs(), &s.embedder, &settings)?;
    let streams: Vec<TokenStream> = records.into_iter().map(|r| r.tokens).collect();
    let tokens = streams.iter().map(|t| t.len()).sum();
    let model = train_ngram(&streams, cfg.ngram.order, cfg.ngram.delta, s.vocab.total_size())?;
    Ok((model, tokens))
}

/// Prompt for a held-out query with `retrieved` caption neighbours in front.
fn query_prompt(cfg: &RunConfig, s: &Setup, doc: &Document, retrieved: usize) -> Result<Prompt> {
    let budget = cfg.seq_len.saturating_sub(doc.caption.len() + 2 + cfg.tokens_per_image);
    let (ctx, _) = inference_context(
        &s.bank,
        &doc.caption,
        None,
        &s.embedder,
        retrieved,
        &cfg.retrieval,
        budget,
        &s.vocab,
    )?;
    Ok(Prompt::caption_to_image(&ctx, &doc.caption, &s.vocab)?)
}

fn image_config(cfg: &RunConfig, strategy: Strategy) -> DecodeConfig {
    DecodeConfig {
        strategy,
        max_len: cfg.tokens_per_image,
        min_len: cfg.tokens_per_image,
        ..cfg.decode.base
    }
}

fn query_seed(cfg: &RunConfig, j: usize) -> u64 {
    derive_seed(derive_labeled(cfg.seed, "experiment-query"), j as u64)
}

#[derive(Default, Clone, Copy)]
struct Acc {
    accuracy: f64,
    similarity: f64,
    reranked: f64,
}

/// Mean fidelity over held-out queries of a `samples_per_query` pool drawn with `dc`.
fn mean_fidelity(cfg: &RunConfig, s: &Setup, model: &NGramModel, retrieved: usize, dc: DecodeConfig) -> Result<Acc> {
    let per_query = s
        .heldout()
        .map(|(j, doc, gold)| {
            let prompt = query_prompt(cfg, s, doc, retrieved)?;
            let pool = generate_pool(
                model,
                &prompt,
                &[(dc, cfg.experiment.samples_per_query)],
                query_seed(cfg, j),
                0,
            )?;
            let cands: Vec<&[TokenId]> = pool.candidates.iter().map(|c| c.content()).collect();
            let m = conditional_fidelity(&cands, gold, &doc.caption, &s.scorer)?;
            Ok(Acc {
                accuracy: m.mean_accuracy,
                similarity: m.mean_similarity,
                reranked: m.reranked_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_query.len() as f64;
    Ok(per_query.iter().fold(Acc::default(), |a, q| Acc {
        accuracy: a.accuracy + q.accuracy / n,
        similarity: a.similarity + q.similarity / n,
        reranked: a.reranked + q.reranked / n,
    }))
}

/// Perplexity of the query documents' tokens after their `retrieved` caption
/// neighbours; the query's leading `<eos>` is never scored, so every setting
/// scores the same targets.
fn heldout_perplexity(cfg: &RunConfig, s: &Setup, model: &NGramModel, retrieved: usize) -> Result<f64> {
    let items = s
        .heldout()
        .map(|(_, doc, _)| {
            let budget = cfg.seq_len.saturating_sub(doc.serialized_len());
            let (mut ctx, _) = inference_context(
                &s.bank,
                &doc.caption,
                None,
                &s.embedder,
                retrieved,
                &cfg.retrieval,
                budget,
                &s.vocab,
            )?;
            let from = ctx.len() + 1;
            ctx.extend(cm3_core::vocab::serialize_document(doc, &s.vocab)?.into_inner());
            Ok((TokenStream(ctx), from))
        })
        .collect::<Result<Vec<_>>>()?;
    let (streams, from): (Vec<_>, Vec<_>) = items.into_iter().unzip();
    Ok(suffix_perplexity(model, &streams, &from)?)
}

fn best_of(acc: &[f64], sim: &[f64]) -> (f64, f64, f64) {
    let best_acc = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r = argmax(sim).unwrap_or(0);
    (best_acc, acc[r], sim[r])
}

fn pool_sweep(cfg: &RunConfig, s: &Setup, model: &NGramModel) -> Result<Vec<PoolRow>> {
    let max = cfg.experiment.pool_sizes.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Ok(Vec::new());
    }
    let guided = image_config(cfg, Strategy::Cfg);
    let contrastive = image_config(cfg, Strategy::Cdk);
    // Per query: accuracy and similarity of `max` guided then `max` contrastive candidates.
    let scored = s
        .heldout()
        .map(|(j, doc, gold)| {
            let prompt = query_prompt(cfg, s, doc, cfg.experiment.sweep_retrieved)?;
            let pool = generate_pool(
                model,
                &prompt,
                &[(guided, max), (contrastive, max)],
                query_seed(cfg, j),
                0,
            )?;
            let mut acc = Vec::with_capacity(2 * max);
            let mut sim = Vec::with_capacity(2 * max);
            for c in &pool.candidates {
                acc.push(pattern_accuracy(c.content(), gold)?);
                sim.push(caption_image_similarity(&s.scorer, &doc.caption, c.content()));
            }
            Ok((acc, sim))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = scored.len() as f64;
    let mut rows = Vec::new();
    for &size in &cfg.experiment.pool_sizes {
        let half = size.div_ceil(2);
        let members: [(&str, Vec<usize>); 4] = [
            ("cfg", (0..size).collect()),
            ("cdk", (max..max + size).collect()),
            ("mixed", (0..half).chain(max..max + size - half).collect()),
            ("union", (0..size).chain(max..max + size).collect()),
        ];
        for (name, idx) in members {
            let (mut b, mut r, mut bs) = (0.0, 0.0, 0.0);
            for (acc, sim) in &scored {
                let a: Vec<f64> = idx.iter().map(|&i| acc[i]).collect();
                let si: Vec<f64> = idx.iter().map(|&i| sim[i]).collect();
                let (x, y, z) = best_of(&a, &si);
                b += x / n;
                r += y / n;
                bs += z / n;
            }
            rows.push(PoolRow {
                pool_size: size,
                pool: name.to_string(),
                candidates: idx.len(),
                best_accuracy: b,
                reranked_accuracy: r,
                best_similarity: bs,
            });
        }
    }
    Ok(rows)
}

/// Runs the three sweeps. Output depends only on `cfg`, never on the thread count.
pub fn run_experiment_suite(cfg: &RunConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    let s = setup(cfg)?;
    let e = &cfg.experiment;

    let mut counts: Vec<usize> = e.retrieved_grid.clone();
    counts.push(e.sweep_retrieved);
    counts.sort_unstable();
    counts.dedup();
    let models: BTreeMap<usize, (NGramModel, usize)> = counts
        .par_iter()
        .map(|&r| Ok((r, train_with_retrieval(cfg, &s, r)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    let guided = image_config(cfg, Strategy::Cfg);
    let retrieval_sweep = e
        .retrieved_grid
        .par_iter()
        .map(|&r| {
            let (model, tokens) = &models[&r];
            let f = mean_fidelity(cfg, &s, model, r, guided)?;
            Ok(RetrievalRow {
                retrieved: r,
                train_tokens: *tokens,
                perplexity: heldout_perplexity(cfg, &s, model, r)?,
                accuracy: f.accuracy,
                similarity: f.similarity,
                reranked_accuracy: f.reranked,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let sweep_model = &models[&e.sweep_retrieved].0;
    let cfg_sweep = e
        .cfg_grid
        .par_iter()
        .map(|&alpha| {
            let dc = DecodeConfig {
                cfg_alpha: alpha,
                ..guided
            };
            let f = mean_fidelity(cfg, &s, sweep_model, e.sweep_retrieved, dc)?;
            Ok(CfgRow {
                cfg_alpha: alpha,
                accuracy: f.accuracy,
                similarity: f.similarity,
                reranked_accuracy: f.reranked,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let pool_sweep = pool_sweep(cfg, &s, sweep_model)?;

    Ok(SuiteReport {
        note: FIDELITY_NOTE.to_string(),
        effective_config: cfg.clone(),
        corpus: CorpusSummary {
            train_docs: s.n_train,
            heldout_docs: s.corpus.docs.len() - s.n_train,
            classes: s.corpus.classes.len(),
            vocab_size: s.vocab.total_size(),
        },
        retrieval_sweep,
        cfg_sweep,
        pool_sweep,
        model_eval: None,
    })
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    w.into_inner().map_err(|e| PipelineError::Config(e.to_string()))
}

/// `report.json` plus one CSV per sweep under `dir`.
pub fn write_report(dir: &Path, report: &SuiteReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_bytes(&dir.join("retrieval_sweep.csv"), &csv_bytes(&report.retrieval_sweep)?)?;
    write_bytes(&dir.join("cfg_sweep.csv"), &csv_bytes(&report.cfg_sweep)?)?;
    write_bytes(&dir.join("pool_sweep.csv"), &csv_bytes(&report.pool_sweep)?)?;
    Ok(())
}
