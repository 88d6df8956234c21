//! Synthetic caption/image corpora and the metrics used to score models
//! and decoders on them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::LogitSource;
use crate::error::{invalid_config, Error, Result};
use crate::math::{argmax, exp};
use crate::objective::loss_weights;
use crate::retrieval::{caption_image_similarity, Embedder};
use crate::seed::{derive_labeled, rng_from_seed};
use crate::vocab::{Document, TokenId, TokenStream, VocabLayout, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Number of caption classes.
    pub n_patterns: usize,
    /// Probability that an image token is replaced by a uniformly random one.
    pub noise_rate: f64,
    pub n_docs: usize,
    pub caption_len: usize,
    pub tokens_per_image: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_patterns: 16,
            noise_rate: 0.1,
            n_docs: 2000,
            caption_len: 3,
            tokens_per_image: 16,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, vocab: &VocabLayout) -> Result<()> {
        if self.n_patterns < 2 {
            return Err(invalid_config("n_patterns must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(invalid_config(format!("noise_rate {} not in [0, 1)", self.noise_rate)));
        }
        if self.caption_len < 1 || self.tokens_per_image < 1 {
            return Err(invalid_config("caption_len and tokens_per_image must be >= 1"));
        }
        if self.n_patterns * self.caption_len > vocab.n_text() as usize {
            return Err(invalid_config("text block too small for distinct class captions"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub caption: Vec<TokenId>,
    /// Canonical image tokens of the class.
    pub pattern: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub docs: Vec<Document>,
    pub classes: Vec<SyntheticClass>,
    /// Class of each document.
    pub labels: Vec<usize>,
}

/// Each class owns distinct caption words and a distinct canonical image
/// pattern; documents draw a class and copy its pattern with per-token noise.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, vocab: &VocabLayout) -> Result<SyntheticCorpus> {
    spec.validate(vocab)?;
    let mut rng = rng_from_seed(derive_labeled(spec.seed, "synthetic-classes"));
    let words = rand::seq::index::sample(&mut rng, vocab.n_text() as usize, spec.n_patterns * spec.caption_len);
    let text0 = vocab.text_range().start;
    let image = vocab.image_range();
    let mut classes: Vec<SyntheticClass> = Vec::with_capacity(spec.n_patterns);
    for c in 0..spec.n_patterns {
        let caption = (0..spec.caption_len)
            .map(|j| text0 + words.index(c * spec.caption_len + j) as u32)
            .collect();
        let pattern = loop {
            let p: Vec<TokenId> = (0..spec.tokens_per_image)
                .map(|_| rng.gen_range(image.clone()))
                .collect();
            if classes.iter().all(|k| k.pattern != p) {
                break p;
            }
        };
        classes.push(SyntheticClass { caption, pattern });
    }

    let mut rng = rng_from_seed(derive_labeled(spec.seed, "synthetic-docs"));
    let mut docs = Vec::with_capacity(spec.n_docs);
    let mut labels = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let c = rng.gen_range(0..spec.n_patterns);
        let img = classes[c]
            .pattern
            .iter()
            .map(|&t| {
                if rng.gen::<f64>() < spec.noise_rate {
                    rng.gen_range(image.clone())
                } else {
                    t
                }
            })
            .collect();
        docs.push(Document::new(format!("syn-{i:05}"), classes[c].caption.clone(), img));
        labels.push(c);
    }
    Ok(SyntheticCorpus { docs, classes, labels })
}

/// `exp` of the mean negative log-likelihood of every weighted target.
///
/// Targets are positions `1..len` of each stream, predicted from the
/// tokens before them; `<pad>` targets carry zero weight.
pub fn perplexity<M: LogitSource + ?Sized>(model: &M, heldout: &[TokenStream]) -> Result<f64> {
    let from = vec![1; heldout.len()];
    suffix_perplexity(model, heldout, &from)
}

/// Like [`perplexity`], but only targets at positions `>= score_from[i]`
/// of stream `i` are scored; earlier tokens still act as context.
pub fn suffix_perplexity<M: LogitSource + ?Sized>(
    model: &M,
    heldout: &[TokenStream],
    score_from: &[usize],
) -> Result<f64> {
    if heldout.len() != score_from.len() {
        return Err(Error::Shape {
            expected: heldout.len(),
            found: score_from.len(),
        });
    }
    let mut nll = 0.0;
    let mut n = 0.0;
    for (s, &from) in heldout.iter().zip(score_from) {
        let w = loss_weights(s);
        for i in from.max(1)..s.len() {
            if w[i] == 0.0 {
                continue;
            }
            nll -= w[i] * model.log_prob(&s[..i], s[i]);
            n += w[i];
        }
    }
    if n == 0.0 {
        return Err(Error::EmptyInput("no scored positions in held-out streams".into()));
    }
    Ok(exp(nll / n))
}

/// Fraction of positions where `candidate` matches `gold`.
pub fn pattern_accuracy(candidate: &[TokenId], gold: &[TokenId]) -> Result<f64> {
    let candidate = match candidate.split_last() {
        Some((&EOS, rest)) => rest,
        _ => candidate,
    };
    if candidate.len() != gold.len() || gold.is_empty() {
        return Err(Error::Shape {
            expected: gold.len(),
            found: candidate.len(),
        });
    }
    let hits = candidate.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityMetrics {
    pub mean_accuracy: f64,
    /// Best accuracy over the pool.
    pub best_accuracy: f64,
    pub mean_similarity: f64,
    pub best_similarity: f64,
    /// Accuracy of the candidate the similarity re-ranker would pick.
    pub reranked_accuracy: f64,
}

pub fn conditional_fidelity<E: Embedder + ?Sized, C: AsRef<[TokenId]>>(
    candidates: &[C],
    gold_pattern: &[TokenId],
    caption: &[TokenId],
    embedder: &E,
) -> Result<FidelityMetrics> {
    if candidates.is_empty() {
        return Err(Error::EmptyPool);
    }
    let acc = candidates
        .iter()
        .map(|c| pattern_accuracy(c.as_ref(), gold_pattern))
        .collect::<Result<Vec<_>>>()?;
    let sim: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let c = c.as_ref();
            let c = match c.split_last() {
                Some((&EOS, rest)) => rest,
                _ => c,
            };
            caption_image_similarity(embedder, caption, c)
        })
        .collect();
    let n = candidates.len() as f64;
    let best = argmax(&sim).unwrap_or(0);
    Ok(FidelityMetrics {
        mean_accuracy: acc.iter().sum::<f64>() / n,
        best_accuracy: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_similarity: sim.iter().sum::<f64>() / n,
        best_similarity: sim[best],
        reranked_accuracy: acc[best],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::FixtureModel;
    use crate::retrieval::HashedEmbedder;

    #[test]
    fn noiseless_classes_share_images() {
        let v = VocabLayout::default();
        let spec = SyntheticSpec {
            noise_rate: 0.0,
            n_docs: 200,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec, &v).unwrap();
        for (d, &l) in c.docs.iter().zip(&c.labels) {
            assert_eq!(d.image, c.classes[l].pattern);
            assert_eq!(d.caption, c.classes[l].caption);
            d.validate(&v, Some(16)).unwrap();
        }
        assert_eq!(c, generate_synthetic_corpus(&spec, &v).unwrap());
    }

    #[test]
    fn two_classes_are_distinct() {
        let v = VocabLayout::default();
        let spec = SyntheticSpec {
            n_patterns: 2,
            n_docs: 10,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec, &v).unwrap();
        assert_ne!(c.classes[0].pattern, c.classes[1].pattern);
        assert_ne!(c.classes[0].caption, c.classes[1].caption);
        assert!(generate_synthetic_corpus(&SyntheticSpec { n_patterns: 1, ..spec }, &v).is_err());
    }

    #[test]
    fn perplexity_analytic_cases() {
        let uniform = FixtureModel::new(vec![0.0; 9]).unwrap();
        let held = vec![TokenStream(vec![1, 5, 6, 7, 0, 0])];
        assert!((perplexity(&uniform, &held).unwrap() - 9.0).abs() < 1e-9);

        let mut sure = vec![-1e9; 9];
        sure[5] = 0.0;
        let mut to6 = vec![-1e9; 9];
        to6[6] = 0.0;
        let mut to7 = vec![-1e9; 9];
        to7[7] = 0.0;
        let exact = FixtureModel::new(vec![0.0; 9])
            .unwrap()
            .with_rule(vec![1], sure)
            .unwrap()
            .with_rule(vec![5], to6)
            .unwrap()
            .with_rule(vec![6], to7)
            .unwrap();
        assert!((perplexity(&exact, &held).unwrap() - 1.0).abs() < 1e-12);
        assert!(perplexity(&uniform, &[TokenStream(vec![1])]).is_err());
        // Scoring only the last two targets of the exact model still gives 1.
        assert!((suffix_perplexity(&exact, &held, &[2]).unwrap() - 1.0).abs() < 1e-12);
        assert!(suffix_perplexity(&uniform, &held, &[]).is_err());
    }

    #[test]
    fn fidelity_metrics() {
        let e = HashedEmbedder::new(16, 3).unwrap();
        let gold = [600u32, 601, 602, 603];
        let m = conditional_fidelity(&[gold.to_vec()], &gold, &[10], &e).unwrap();
        assert_eq!(m.mean_accuracy, 1.0);
        assert_eq!(m.reranked_accuracy, 1.0);
        let half = vec![600u32, 601, 0, 0];
        let m = conditional_fidelity(&[half.clone(), gold.to_vec()], &gold, &[10], &e).unwrap();
        assert_eq!(m.best_accuracy, 1.0);
        assert_eq!(m.mean_accuracy, 0.75);
        assert!(conditional_fidelity(&[vec![600u32]], &gold, &[10], &e).is_err());
        let empty: [Vec<u32>; 0] = [];
        assert!(conditional_fidelity(&empty, &gold, &[10], &e).is_err());
        let with_eos = vec![600u32, 601, 602, 603, EOS];
        assert_eq!(pattern_accuracy(&with_eos, &gold).unwrap(), 1.0);
    }

    #[test]
    fn random_candidates_hit_one_in_n_image() {
        // Monte Carlo check of the analytic expectation 1 / n_image.
        let v = VocabLayout::default();
        let mut rng = rng_from_seed(99);
        let gold: Vec<u32> = (0..16).map(|_| rng.gen_range(v.image_range())).collect();
        let draws = 20_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let c: Vec<u32> = (0..16).map(|_| rng.gen_range(v.image_range())).collect();
            total += pattern_accuracy(&c, &gold).unwrap();
        }
        let mean = total / draws as f64;
        let p = 1.0 / v.n_image() as f64;
        let sigma = libm::sqrt(p * (1.0 - p) / (16.0 * draws as f64));
        assert!((mean - p).abs() < 3.0 * sigma, "mean {mean} vs {p} (sigma {sigma})");
    }
}
