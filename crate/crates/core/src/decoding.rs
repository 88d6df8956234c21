//! Sampling strategies over an abstract next-token scorer.
//!
//! Conditional and unconditional streams are decoded in lockstep: the
//! unconditional prefix is the prompt with its caption replaced by
//! `<mask_0>`, and every sampled token is appended to both.
//!
//! Order of operations per step:
//! * `temperature` / `topp`: softmax(cond / T), nucleus filter, sample.
//! * `cfg`: blend raw logits `uncond + a_c * (cond - uncond)`, then T, nucleus, sample.
//! * `cd` / `cdk`: softmax both streams at T, score tokens by the
//!   expert/amateur log ratio inside the plausibility set, sample
//!   proportionally to `exp(score)` (or take the argmax when greedy).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::math::{argmax, exp, ln, log_sum_exp};
use crate::retrieval::{caption_image_similarity, Embedder};
use crate::seed::{derive_seed, rng_from_seed};
use crate::vocab::{TokenId, VocabLayout, BREAK, EOS};

/// Floor applied to amateur probabilities inside the contrastive log ratio.
pub const CD_EPSILON: f64 = 1e-12;

const DIST_TOLERANCE: f64 = 1e-9;

/// Anything that scores the next token after a prefix.
pub trait LogitSource {
    fn vocab_size(&self) -> usize;

    /// Unnormalized scores for every token id, length [`Self::vocab_size`].
    fn logits(&self, prefix: &[TokenId]) -> Vec<f64>;

    /// Natural-log probability of `token` after `prefix`.
    fn log_prob(&self, prefix: &[TokenId], token: TokenId) -> f64 {
        let l = self.logits(prefix);
        l[token as usize] - log_sum_exp(&l)
    }
}

impl<T: LogitSource + ?Sized> LogitSource for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        (**self).logits(prefix)
    }

    fn log_prob(&self, prefix: &[TokenId], token: TokenId) -> f64 {
        (**self).log_prob(prefix, token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Temperature,
    Topp,
    Cfg,
    Cd,
    Cdk,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Temperature => "temperature",
            Strategy::Topp => "topp",
            Strategy::Cfg => "cfg",
            Strategy::Cd => "cd",
            Strategy::Cdk => "cdk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "temperature" | "temp" => Ok(Strategy::Temperature),
            "topp" | "top_p" => Ok(Strategy::Topp),
            "cfg" => Ok(Strategy::Cfg),
            "cd" => Ok(Strategy::Cd),
            "cdk" | "cd-k" | "cd_k" => Ok(Strategy::Cdk),
            other => Err(invalid_config(format!("unknown strategy {other:?}"))),
        }
    }

    /// Whether the strategy consumes the unconditional stream.
    pub fn uses_unconditional(self) -> bool {
        matches!(self, Strategy::Cfg | Strategy::Cd | Strategy::Cdk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub temperature: f64,
    pub top_p: f64,
    pub cfg_alpha: f64,
    pub cd_alpha: f64,
    pub cd_k: usize,
    pub max_len: usize,
    /// `<eos>` is not sampleable before this many tokens are generated.
    pub min_len: usize,
    /// Take the argmax instead of sampling.
    pub greedy: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Cfg,
            temperature: 1.0,
            top_p: 1.0,
            cfg_alpha: 3.0,
            cd_alpha: 0.5,
            cd_k: 2,
            max_len: 16,
            min_len: 0,
            greedy: false,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid_config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid_config(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if !(self.cfg_alpha >= 0.0 && self.cfg_alpha.is_finite()) {
            return Err(invalid_config(format!("cfg_alpha {} must be >= 0", self.cfg_alpha)));
        }
        if !(self.cd_alpha > 0.0 && self.cd_alpha <= 1.0) {
            return Err(invalid_config(format!("cd_alpha {} not in (0, 1]", self.cd_alpha)));
        }
        if self.cd_k < 1 {
            return Err(invalid_config("cd_k must be >= 1"));
        }
        if self.max_len < 1 {
            return Err(invalid_config("max_len must be >= 1"));
        }
        Ok(())
    }

    /// Rank used for the plausibility threshold; plain CD is rank 1.
    pub fn effective_k(&self) -> usize {
        match self.strategy {
            Strategy::Cd => 1,
            _ => self.cd_k,
        }
    }
}

/// `uncond + alpha * (cond - uncond)`, exact at `alpha = 0` and `alpha = 1`.
pub fn cfg_blend(cond: &[f64], uncond: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::Shape {
            expected: cond.len(),
            found: uncond.len(),
        });
    }
    if alpha == 1.0 {
        return Ok(cond.to_vec());
    }
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| u + alpha * (c - u)).collect())
}

pub fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {x} is not a probability")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// Contrastive scores with a rank-`k` plausibility threshold.
///
/// `tau = alpha * (k-th largest expert probability)`; tokens with expert
/// probability at least `tau` score `ln(p_exp / max(p_ama, eps))`, every
/// other token scores `-inf`. `k = 1` is plain contrastive decoding.
pub fn cd_scores(p_exp: &[f64], p_ama: &[f64], alpha: f64, k: usize) -> Result<Vec<f64>> {
    check_distribution(p_exp)?;
    check_distribution(p_ama)?;
    if p_exp.len() != p_ama.len() {
        return Err(Error::Shape {
            expected: p_exp.len(),
            found: p_ama.len(),
        });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid_config(format!("alpha {alpha} not in (0, 1]")));
    }
    if k < 1 || k > p_exp.len() {
        return Err(invalid_config(format!("k {k} not in [1, {}]", p_exp.len())));
    }
    let tau = alpha * kth_largest(p_exp, k);
    Ok(p_exp
        .iter()
        .zip(p_ama)
        .map(|(&e, &a)| {
            if e >= tau {
                ln(e / a.max(CD_EPSILON))
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

/// The `k`-th largest value (1-based).
pub fn kth_largest(v: &[f64], k: usize) -> f64 {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    sorted[k - 1]
}

/// `softmax(logits / T)` with max subtraction; `-inf` logits get zero mass.
pub fn temperature_probs(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid_config(format!("temperature {temperature} must be > 0")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::InvalidDistribution("no finite logit".into()));
    }
    let mut p: Vec<f64> = logits.iter().map(|&l| exp((l - m) / temperature)).collect();
    let s: f64 = p.iter().sum();
    for x in &mut p {
        *x /= s;
    }
    Ok(p)
}

/// Keeps the smallest set of most probable tokens whose mass reaches `p`
/// (always at least one; ties ordered by token id) and renormalizes.
pub fn top_p_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    check_distribution(probs)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid_config(format!("top_p {p} not in (0, 1]")));
    }
    if p >= 1.0 {
        return Ok(probs.to_vec());
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; probs.len()];
    let mut cum = 0.0;
    for &i in &order {
        out[i] = probs[i];
        cum += probs[i];
        if cum >= p - 1e-12 {
            break;
        }
    }
    for x in &mut out {
        *x /= cum;
    }
    Ok(out)
}

/// Draws an index proportionally to non-negative weights.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().filter(|w| w.is_finite() && **w > 0.0).sum();
    if total.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
        return None;
    }
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w.is_finite() && w > 0.0 {
            acc += w;
            last = Some(i);
            if acc > target {
                return Some(i);
            }
        }
    }
    last
}

/// Conditional and unconditional prefixes plus the set of sampleable tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub conditional: Vec<TokenId>,
    pub unconditional: Vec<TokenId>,
    /// When set, only this id range and `<eos>` may be generated.
    pub allowed: Option<Range<TokenId>>,
}

impl Prompt {
    pub fn new(conditional: Vec<TokenId>, unconditional: Vec<TokenId>) -> Self {
        Self {
            conditional,
            unconditional,
            allowed: None,
        }
    }

    /// `context ++ [<eos>, caption.., <break>]`, unconditional twin
    /// `context ++ [<eos>, <mask_0>, <break>]`, image tokens only.
    pub fn caption_to_image(context: &[TokenId], caption: &[TokenId], vocab: &VocabLayout) -> Result<Self> {
        if let Some(&t) = caption.iter().find(|&&t| !vocab.is_text(t)) {
            return Err(Error::ModalityViolation(format!(
                "caption token {t} outside the text block"
            )));
        }
        let mut cond = context.to_vec();
        cond.push(EOS);
        cond.extend_from_slice(caption);
        cond.push(BREAK);
        let mut uncond = context.to_vec();
        uncond.extend_from_slice(&[EOS, vocab.mask(0), BREAK]);
        Ok(Self {
            conditional: cond,
            unconditional: uncond,
            allowed: Some(vocab.image_range()),
        })
    }

    fn mask_logits(&self, logits: &mut [f64], generated: usize, min_len: usize) {
        if let Some(r) = &self.allowed {
            for (i, l) in logits.iter_mut().enumerate() {
                let t = i as TokenId;
                if t != EOS && !r.contains(&t) {
                    *l = f64::NEG_INFINITY;
                }
            }
        }
        if generated < min_len {
            if let Some(l) = logits.get_mut(EOS as usize) {
                *l = f64::NEG_INFINITY;
            }
        }
    }
}

fn checked_logits<M: LogitSource + ?Sized>(model: &M, prefix: &[TokenId]) -> Result<Vec<f64>> {
    let l = model.logits(prefix);
    if l.len() != model.vocab_size() {
        return Err(Error::Shape {
            expected: model.vocab_size(),
            found: l.len(),
        });
    }
    Ok(l)
}

fn pick<R: Rng + ?Sized>(weights: &[f64], greedy: bool, rng: &mut R) -> Result<usize> {
    let idx = if greedy {
        argmax(weights)
    } else {
        sample_index(weights, rng)
    };
    idx.ok_or_else(|| Error::InvalidDistribution("no sampleable token".into()))
}

/// Generates up to `max_len` tokens; stops after emitting `<eos>`.
pub fn decode_sequence<M: LogitSource + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prompt: &Prompt,
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    config.validate()?;
    let mut cond = prompt.conditional.clone();
    let mut uncond = prompt.unconditional.clone();
    let mut out = Vec::with_capacity(config.max_len);
    while out.len() < config.max_len {
        let mut lc = checked_logits(model, &cond)?;
        let next = match config.strategy {
            Strategy::Temperature | Strategy::Topp => {
                prompt.mask_logits(&mut lc, out.len(), config.min_len);
                let p = top_p_filter(&temperature_probs(&lc, config.temperature)?, config.top_p)?;
                pick(&p, config.greedy, rng)?
            }
            Strategy::Cfg => {
                let lu = checked_logits(model, &uncond)?;
                let mut blended = cfg_blend(&lc, &lu, config.cfg_alpha)?;
                prompt.mask_logits(&mut blended, out.len(), config.min_len);
                let p = top_p_filter(&temperature_probs(&blended, config.temperature)?, config.top_p)?;
                pick(&p, config.greedy, rng)?
            }
            Strategy::Cd | Strategy::Cdk => {
                let mut lu = checked_logits(model, &uncond)?;
                prompt.mask_logits(&mut lc, out.len(), config.min_len);
                prompt.mask_logits(&mut lu, out.len(), config.min_len);
                let pe = temperature_probs(&lc, config.temperature)?;
                let pa = temperature_probs(&lu, config.temperature)?;
                let k = config.effective_k().min(pe.len());
                let scores = cd_scores(&pe, &pa, config.cd_alpha, k)?;
                if config.greedy {
                    pick(&scores, true, rng)?
                } else {
                    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = scores.iter().map(|&s| exp(s - m)).collect();
                    pick(&w, false, rng)?
                }
            }
        } as TokenId;
        out.push(next);
        cond.push(next);
        uncond.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Position in the overall candidate numbering; drives the seed.
    pub index: usize,
    pub strategy: Strategy,
    pub tokens: Vec<TokenId>,
    pub score: Option<f64>,
}

impl Candidate {
    /// Generated tokens without a terminal `<eos>`.
    pub fn content(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn extend(&mut self, other: CandidatePool) {
        self.candidates.extend(other.candidates);
    }
}

/// Seed of candidate `index` in a pool seeded with `master`.
pub fn candidate_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, index as u64)
}

/// `(candidate index, config)` for every candidate a mix asks for.
pub fn plan_pool(mix: &[(DecodeConfig, usize)], first_index: usize) -> Vec<(usize, DecodeConfig)> {
    let mut out = Vec::new();
    let mut idx = first_index;
    for (cfg, n) in mix {
        for _ in 0..*n {
            out.push((idx, *cfg));
            idx += 1;
        }
    }
    out
}

pub fn generate_candidate<M: LogitSource + ?Sized>(
    model: &M,
    prompt: &Prompt,
    config: &DecodeConfig,
    master_seed: u64,
    index: usize,
) -> Result<Candidate> {
    let mut rng = rng_from_seed(candidate_seed(master_seed, index));
    Ok(Candidate {
        index,
        strategy: config.strategy,
        tokens: decode_sequence(model, prompt, config, &mut rng)?,
        score: None,
    })
}

/// Generates every candidate of `mix`, numbered from `first_index`, each
/// from its own derived seed. Splitting a mix across calls with matching
/// `first_index` values yields the same candidates.
pub fn generate_pool<M: LogitSource + ?Sized>(
    model: &M,
    prompt: &Prompt,
    mix: &[(DecodeConfig, usize)],
    master_seed: u64,
    first_index: usize,
) -> Result<CandidatePool> {
    let plan = plan_pool(mix, first_index);
    if plan.is_empty() {
        return Err(invalid_config("candidate pool needs n >= 1"));
    }
    let candidates = plan
        .iter()
        .map(|(i, cfg)| generate_candidate(model, prompt, cfg, master_seed, *i))
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidatePool { candidates })
}

/// Scores candidates by caption/image embedding similarity. Returns the
/// position of the best candidate (lowest position on ties) and the scored pool.
pub fn rerank<E: Embedder + ?Sized>(
    pool: &CandidatePool,
    caption: &[TokenId],
    embedder: &E,
) -> Result<(usize, CandidatePool)> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut scored = pool.clone();
    for c in &mut scored.candidates {
        c.score = Some(caption_image_similarity(embedder, caption, c.content()));
    }
    let scores: Vec<f64> = scored
        .candidates
        .iter()
        .map(|c| c.score.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let best = argmax(&scores).unwrap_or(0);
    Ok((best, scored))
}
