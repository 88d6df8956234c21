//! Count-based back-off n-gram model and a scripted fixture model, both
//! usable as a [`LogitSource`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::decoding::LogitSource;
use crate::error::{invalid_config, Error, Result};
use crate::math::ln;
use crate::vocab::{TokenId, TokenStream, PAD};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_DELTA: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Counts {
    total: u64,
    next: BTreeMap<TokenId, u32>,
}

/// Add-delta smoothed n-gram model with longest-context back-off.
///
/// Contexts of every length `0..order` are counted. Scoring uses the
/// longest context of at most `order - 1` tokens that was observed, with
/// `P(w | ctx) = (c(ctx, w) + delta) / (c(ctx) + delta * V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    vocab_size: u32,
    delta: f64,
    /// `tables[len]` maps contexts of `len` tokens to next-token counts.
    tables: Vec<BTreeMap<Vec<TokenId>, Counts>>,
}

impl NGramModel {
    pub fn empty(order: usize, vocab_size: u32, delta: f64) -> Result<Self> {
        if order < 1 {
            return Err(invalid_config("n-gram order must be >= 1"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid_config(format!("smoothing delta {delta} must be > 0")));
        }
        if vocab_size == 0 {
            return Err(invalid_config("vocab size must be >= 1"));
        }
        Ok(Self {
            order,
            vocab_size,
            delta,
            tables: vec![BTreeMap::new(); order],
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn vocab_size_u32(&self) -> u32 {
        self.vocab_size
    }

    fn check_token(&self, t: TokenId) -> Result<()> {
        if t >= self.vocab_size {
            return Err(Error::OutOfRange {
                token: t,
                limit: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Counts one stream. Contexts never reach before the stream start;
    /// `<pad>` targets are skipped.
    pub fn observe(&mut self, stream: &[TokenId]) -> Result<()> {
        for &t in stream {
            self.check_token(t)?;
        }
        for (i, &target) in stream.iter().enumerate() {
            if target == PAD {
                continue;
            }
            for len in 0..self.order.min(i + 1) {
                let ctx = &stream[i - len..i];
                let table = &mut self.tables[len];
                let entry = match table.get_mut(ctx) {
                    Some(e) => e,
                    None => table.entry(ctx.to_vec()).or_default(),
                };
                entry.total += 1;
                *entry.next.entry(target).or_insert(0) += 1;
            }
        }
        Ok(())
    }

    /// Inserts a stored `(context, token, count)` entry.
    pub fn add_count(&mut self, context: &[TokenId], token: TokenId, count: u32) -> Result<()> {
        if context.len() >= self.order {
            return Err(invalid_config(format!(
                "context of {} tokens exceeds order {}",
                context.len(),
                self.order
            )));
        }
        self.check_token(token)?;
        for &t in context {
            self.check_token(t)?;
        }
        let entry = self.tables[context.len()].entry(context.to_vec()).or_default();
        entry.total += count as u64;
        *entry.next.entry(token).or_insert(0) += count;
        Ok(())
    }

    /// All `(context, token, count)` entries, sorted by context length,
    /// then context, then token.
    pub fn entries(&self) -> impl Iterator<Item = (&[TokenId], TokenId, u32)> {
        self.tables.iter().flat_map(|t| {
            t.iter()
                .flat_map(|(ctx, c)| c.next.iter().map(move |(&tok, &n)| (ctx.as_slice(), tok, n)))
        })
    }

    pub fn n_entries(&self) -> usize {
        self.tables.iter().flat_map(|t| t.values()).map(|c| c.next.len()).sum()
    }

    fn context_for(&self, prefix: &[TokenId]) -> Option<&Counts> {
        let max = (self.order - 1).min(prefix.len());
        (0..=max).rev().find_map(|len| {
            self.tables[len]
                .get(&prefix[prefix.len() - len..])
                .filter(|c| c.total > 0)
        })
    }

    /// Smoothed distribution after `prefix`.
    pub fn probabilities(&self, prefix: &[TokenId]) -> Vec<f64> {
        let v = self.vocab_size as usize;
        match self.context_for(prefix) {
            None => vec![1.0 / v as f64; v],
            Some(c) => {
                let denom = c.total as f64 + self.delta * v as f64;
                let mut p = vec![self.delta / denom; v];
                for (&t, &n) in &c.next {
                    p[t as usize] = (n as f64 + self.delta) / denom;
                }
                p
            }
        }
    }
}

pub fn train_ngram(corpus: &[TokenStream], order: usize, delta: f64, vocab_size: u32) -> Result<NGramModel> {
    if corpus.is_empty() || corpus.iter().all(|s| s.iter().all(|&t| t == PAD)) {
        return Err(Error::EmptyInput("n-gram training corpus is empty".into()));
    }
    let mut model = NGramModel::empty(order, vocab_size, delta)?;
    for s in corpus {
        model.observe(s)?;
    }
    Ok(model)
}

/// Natural-log probabilities of every token after `prefix`.
pub fn ngram_logits(model: &NGramModel, prefix: &[TokenId]) -> Vec<f64> {
    let v = model.vocab_size as usize;
    match model.context_for(prefix) {
        None => vec![-ln(v as f64); v],
        Some(c) => {
            let denom = c.total as f64 + model.delta * v as f64;
            let mut l = vec![ln(model.delta / denom); v];
            for (&t, &n) in &c.next {
                l[t as usize] = ln((n as f64 + model.delta) / denom);
            }
            l
        }
    }
}

impl LogitSource for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    fn logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        ngram_logits(self, prefix)
    }

    fn log_prob(&self, prefix: &[TokenId], token: TokenId) -> f64 {
        let v = self.vocab_size as f64;
        match self.context_for(prefix) {
            None => -ln(v),
            Some(c) => {
                let n = c.next.get(&token).copied().unwrap_or(0) as f64;
                ln((n + self.delta) / (c.total as f64 + self.delta * v))
            }
        }
    }
}

/// Scripted logits for tests: the rule with the longest key matching the
/// end of the prefix wins, otherwise the default vector is returned.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureModel {
    vocab_size: usize,
    default: Vec<f64>,
    rules: Vec<(Vec<TokenId>, Vec<f64>)>,
}

impl FixtureModel {
    pub fn new(default: Vec<f64>) -> Result<Self> {
        if default.is_empty() {
            return Err(invalid_config("fixture logits must be non-empty"));
        }
        Ok(Self {
            vocab_size: default.len(),
            default,
            rules: Vec::new(),
        })
    }

    pub fn with_rule(mut self, suffix: Vec<TokenId>, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != self.vocab_size {
            return Err(Error::Shape {
                expected: self.vocab_size,
                found: logits.len(),
            });
        }
        self.rules.push((suffix, logits));
        Ok(self)
    }
}

impl LogitSource for FixtureModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.rules
            .iter()
            .filter(|(k, _)| prefix.ends_with(k))
            .max_by_key(|(k, _)| k.len())
            .map(|(_, l)| l.clone())
            .unwrap_or_else(|| self.default.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::exp;
    use proptest::prelude::*;

    const A: u32 = 5;
    const B: u32 = 6;

    fn abab() -> Vec<TokenStream> {
        vec![TokenStream(vec![A, B, A, B])]
    }

    #[test]
    fn counting_concentrates_mass() {
        let m = train_ngram(&abab(), 2, 1e-9, 8).unwrap();
        assert!(m.probabilities(&[A])[B as usize] > 1.0 - 1e-6);
        let l = ngram_logits(&m, &[A]);
        assert_eq!(crate::math::argmax(&l), Some(B as usize));
    }

    #[test]
    fn smoothing_and_backoff() {
        let m = train_ngram(&abab(), 2, 1.0, 8).unwrap();
        assert!(m.probabilities(&[A]).iter().all(|&p| p > 0.0));
        // Token 7 never appears as a context: back off to unigram counts (2 A, 2 B over 4).
        let p = m.probabilities(&[7]);
        assert!((p[A as usize] - 3.0 / 12.0).abs() < 1e-15);
        assert!((p[0] - 1.0 / 12.0).abs() < 1e-15);
        assert!((m.log_prob(&[7], A) - (3.0f64 / 12.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn deterministic_training() {
        let a = train_ngram(&abab(), 3, 0.1, 8).unwrap();
        let b = train_ngram(&abab(), 3, 0.1, 8).unwrap();
        assert_eq!(a, b);
        assert!(train_ngram(&[], 3, 0.1, 8).is_err());
        assert!(train_ngram(&abab(), 0, 0.1, 8).is_err());
        assert!(train_ngram(&abab(), 2, 0.0, 8).is_err());
        assert!(train_ngram(&abab(), 2, 0.1, 4).is_err());
    }

    #[test]
    fn entries_rebuild_the_model() {
        let m = train_ngram(&[TokenStream(vec![1, 5, 6, 2, 7, 7])], 3, 0.1, 8).unwrap();
        let mut r = NGramModel::empty(3, 8, 0.1).unwrap();
        for (ctx, t, n) in m.entries() {
            r.add_count(ctx, t, n).unwrap();
        }
        assert_eq!(m, r);
        let keys: Vec<_> = m.entries().map(|(c, t, _)| (c.len(), c.to_vec(), t)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn fixture_longest_suffix() {
        let f = FixtureModel::new(vec![0.0; 3])
            .unwrap()
            .with_rule(vec![1], vec![1.0, 0.0, 0.0])
            .unwrap()
            .with_rule(vec![2, 1], vec![0.0, 0.0, 1.0])
            .unwrap();
        assert_eq!(f.logits(&[1]), vec![1.0, 0.0, 0.0]);
        assert_eq!(f.logits(&[2, 1]), vec![0.0, 0.0, 1.0]);
        assert_eq!(f.logits(&[2]), vec![0.0; 3]);
        assert!(FixtureModel::new(vec![0.0; 3])
            .unwrap()
            .with_rule(vec![], vec![0.0])
            .is_err());
    }

    proptest! {
        #[test]
        fn logits_normalize(
            corpus in proptest::collection::vec(proptest::collection::vec(0u32..12, 1..30), 1..5),
            prefix in proptest::collection::vec(0u32..12, 0..6),
            order in 1usize..5,
        ) {
            let streams: Vec<TokenStream> = corpus.into_iter().map(TokenStream).collect();
            prop_assume!(streams.iter().any(|s| s.iter().any(|&t| t != PAD)));
            let m = train_ngram(&streams, order, 0.1, 12).unwrap();
            let s: f64 = ngram_logits(&m, &prefix).iter().map(|&l| exp(l)).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
