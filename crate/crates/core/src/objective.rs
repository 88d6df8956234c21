//! Causal-masked infilling: spans are cut out of a stream, replaced by
//! `<mask_i>` sentinels and relocated after an `<infill>` marker, each
//! relocated span introduced by its sentinel:
//!
//! ```text
//! <eos> c1 c2 c3 <break> i1 i2   ->   <eos> c1 <mask_0> <break> i1 i2 <infill> <mask_0> c2 c3
//! ```
//!
//! Spans never cross a special token, so no span contains `<break>` or `<eos>`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::vocab::{content_segments, TokenId, TokenKind, TokenStream, VocabLayout, BREAK, EOS, INFILL, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfillConfig {
    pub max_spans: u32,
    pub span_len_min: usize,
    pub span_len_max: usize,
    /// Probability that a stream is transformed at all.
    pub mask_prob: f64,
}

impl Default for InfillConfig {
    fn default() -> Self {
        Self {
            max_spans: 1,
            span_len_min: 1,
            span_len_max: 4,
            mask_prob: 0.5,
        }
    }
}

impl InfillConfig {
    pub fn validate(&self, vocab: &VocabLayout) -> Result<()> {
        if self.max_spans < 1 {
            return Err(invalid_config("max_spans must be >= 1"));
        }
        if self.max_spans > vocab.n_masks() {
            return Err(invalid_config(format!(
                "max_spans {} exceeds the {} mask sentinels of the vocab",
                self.max_spans,
                vocab.n_masks()
            )));
        }
        if self.span_len_min < 1 || self.span_len_min > self.span_len_max {
            return Err(invalid_config(format!(
                "need 1 <= span_len_min <= span_len_max, got [{}, {}]",
                self.span_len_min, self.span_len_max
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(invalid_config(format!("mask_prob {} not in [0, 1]", self.mask_prob)));
        }
        Ok(())
    }
}

/// One relocated span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub sentinel: TokenId,
    /// Start of the span in the original stream.
    pub position: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillInstance {
    pub tokens: TokenStream,
    pub mask_records: Vec<MaskRecord>,
}

impl InfillInstance {
    pub fn unchanged(stream: TokenStream) -> Self {
        Self {
            tokens: stream,
            mask_records: Vec::new(),
        }
    }
}

/// Randomly applies the infilling transform.
///
/// With probability `mask_prob`, draws a span count uniformly from
/// `1..=max_spans` and places that many non-overlapping spans, each with a
/// length drawn uniformly from `[span_len_min, span_len_max]` (shortened to
/// the longest placement available) and a start drawn uniformly among the
/// placements that stay inside one content segment. Segments shorter than
/// `span_len_min` never host a span; if nothing can be placed the stream is
/// returned unchanged.
pub fn infill_transform<R: Rng + ?Sized>(
    stream: &TokenStream,
    rng: &mut R,
    config: &InfillConfig,
    vocab: &VocabLayout,
) -> Result<InfillInstance> {
    config.validate(vocab)?;
    if stream
        .iter()
        .any(|&t| t == INFILL || matches!(vocab.kind(t), TokenKind::Mask(_)))
    {
        return Err(Error::MalformedInfill("stream is already an infill instance".into()));
    }
    let draw: f64 = rng.gen();
    if draw >= config.mask_prob {
        return Ok(InfillInstance::unchanged(stream.clone()));
    }
    let n_spans = rng.gen_range(1..=config.max_spans) as usize;
    let segments = content_segments(stream, vocab);

    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(n_spans);
    for _ in 0..n_spans {
        let mut len = rng.gen_range(config.span_len_min..=config.span_len_max);
        let placed = loop {
            let starts = valid_starts(&segments, &spans, len);
            if !starts.is_empty() {
                break Some((starts[rng.gen_range(0..starts.len())], len));
            }
            if len == config.span_len_min {
                break None;
            }
            len -= 1;
        };
        match placed {
            Some(span) => spans.push(span),
            None => break,
        }
    }
    if spans.is_empty() {
        return Ok(InfillInstance::unchanged(stream.clone()));
    }
    spans.sort_unstable();
    Ok(apply_spans(stream, &spans, vocab))
}

/// Every start at which a span of `len` fits inside one segment without
/// touching already placed spans.
fn valid_starts(segments: &[core::ops::Range<usize>], taken: &[(usize, usize)], len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for seg in segments {
        if seg.len() < len {
            continue;
        }
        for s in seg.start..=seg.end - len {
            let overlaps = taken.iter().any(|&(ts, tl)| s < ts + tl && ts < s + len);
            if !overlaps {
                out.push(s);
            }
        }
    }
    out
}

/// Builds the instance for explicit `(start, len)` spans sorted by start.
///
/// Spans must lie inside content segments and not overlap.
pub fn apply_spans(stream: &[TokenId], spans: &[(usize, usize)], vocab: &VocabLayout) -> InfillInstance {
    let mut body = Vec::with_capacity(stream.len() + 1);
    let mut suffix = Vec::new();
    let mut records = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for (i, &(start, len)) in spans.iter().enumerate() {
        let sentinel = vocab.mask(i as u32);
        body.extend_from_slice(&stream[cursor..start]);
        body.push(sentinel);
        suffix.push(sentinel);
        suffix.extend_from_slice(&stream[start..start + len]);
        records.push(MaskRecord {
            sentinel,
            position: start,
            len,
        });
        cursor = start + len;
    }
    body.extend_from_slice(&stream[cursor..]);
    body.push(INFILL);
    body.extend(suffix);
    InfillInstance {
        tokens: TokenStream(body),
        mask_records: records,
    }
}

/// Same as [`apply_spans`] but checks that spans avoid special tokens.
pub fn infill_with_spans(
    stream: &TokenStream,
    spans: &[(usize, usize)],
    vocab: &VocabLayout,
) -> Result<InfillInstance> {
    if spans.len() > vocab.n_masks() as usize {
        return Err(invalid_config("more spans than mask sentinels"));
    }
    let mut sorted = spans.to_vec();
    sorted.sort_unstable();
    let mut end = 0;
    for &(s, l) in &sorted {
        if l == 0 || s < end || s + l > stream.len() {
            return Err(invalid_config(format!("span ({s}, {l}) overlaps or leaves the stream")));
        }
        if let Some(&t) = stream[s..s + l].iter().find(|&&t| !vocab.is_content(t)) {
            return Err(invalid_config(format!("span ({s}, {l}) covers special token {t}")));
        }
        end = s + l;
    }
    Ok(apply_spans(stream, &sorted, vocab))
}

/// Splices relocated spans back over their sentinels.
pub fn invert_infill(instance: &InfillInstance, vocab: &VocabLayout) -> Result<TokenStream> {
    let toks = instance.tokens.tokens();
    let sentinel_of = |t: TokenId| match vocab.kind(t) {
        TokenKind::Mask(i) => Some(i),
        _ => None,
    };
    let Some(split) = toks.iter().position(|&t| t == INFILL) else {
        if let Some(&t) = toks.iter().find(|&&t| sentinel_of(t).is_some()) {
            return Err(Error::MalformedInfill(format!("sentinel {t} without <infill>")));
        }
        return Ok(instance.tokens.clone());
    };
    let (body, suffix) = (&toks[..split], &toks[split + 1..]);

    let mut spans: Vec<(u32, &[TokenId])> = Vec::new();
    let mut i = 0;
    while i < suffix.len() {
        let Some(m) = sentinel_of(suffix[i]) else {
            return Err(Error::MalformedInfill(format!(
                "suffix token {} at offset {i} is not introduced by a sentinel",
                suffix[i]
            )));
        };
        let start = i + 1;
        let mut end = start;
        while end < suffix.len() && sentinel_of(suffix[end]).is_none() {
            let t = suffix[end];
            if t == INFILL || t == EOS || t == BREAK || t == PAD {
                return Err(Error::MalformedInfill(format!(
                    "special token {t} inside a relocated span"
                )));
            }
            end += 1;
        }
        if spans.iter().any(|&(prev, _)| prev == m) {
            return Err(Error::MalformedInfill(format!("<mask_{m}> relocated twice")));
        }
        spans.push((m, &suffix[start..end]));
        i = end;
    }

    let mut out = Vec::with_capacity(toks.len());
    let mut used = Vec::with_capacity(spans.len());
    for &t in body {
        match sentinel_of(t) {
            Some(m) => {
                if used.contains(&m) {
                    return Err(Error::MalformedInfill(format!("<mask_{m}> appears twice in the body")));
                }
                let Some(&(_, span)) = spans.iter().find(|&&(sm, _)| sm == m) else {
                    return Err(Error::MalformedInfill(format!("<mask_{m}> has no relocated span")));
                };
                used.push(m);
                out.extend_from_slice(span);
            }
            None => out.push(t),
        }
    }
    if let Some(&(m, _)) = spans.iter().find(|(m, _)| !used.contains(m)) {
        return Err(Error::MalformedInfill(format!(
            "relocated <mask_{m}> missing from the body"
        )));
    }
    Ok(TokenStream(out))
}

/// `[<eos>, caption.., <break>]`; generation continues with image tokens.
pub fn caption_to_image_prompt(caption: &[TokenId], vocab: &VocabLayout) -> Result<TokenStream> {
    if let Some(&t) = caption.iter().find(|&&t| !vocab.is_text(t)) {
        return Err(Error::ModalityViolation(format!(
            "caption token {t} outside the text block"
        )));
    }
    let mut out = Vec::with_capacity(caption.len() + 2);
    out.push(EOS);
    out.extend_from_slice(caption);
    out.push(BREAK);
    Ok(TokenStream(out))
}

/// `[<eos>, <mask_0>, <break>, image.., <infill>, <mask_0>]`; generation
/// continues with the caption tokens of the masked span.
pub fn image_to_caption_prompt(image: &[TokenId], vocab: &VocabLayout, tokens_per_image: usize) -> Result<TokenStream> {
    if image.len() != tokens_per_image || image.is_empty() {
        return Err(Error::Shape {
            expected: tokens_per_image,
            found: image.len(),
        });
    }
    if let Some(&t) = image.iter().find(|&&t| !vocab.is_image(t)) {
        return Err(Error::ModalityViolation(format!(
            "image token {t} outside the image block"
        )));
    }
    let m = vocab.mask(0);
    let mut out = Vec::with_capacity(image.len() + 5);
    out.extend_from_slice(&[EOS, m, BREAK]);
    out.extend_from_slice(image);
    out.extend_from_slice(&[INFILL, m]);
    Ok(TokenStream(out))
}

/// Uniform weights: 1 for every real token, retrieved context included; 0 for `<pad>`.
pub fn loss_weights(stream: &[TokenId]) -> Vec<f64> {
    stream.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use crate::vocab::validate_stream;
    use alloc::vec;
    use proptest::prelude::*;

    const C1: u32 = 10;
    const C2: u32 = 11;
    const C3: u32 = 12;
    const I1: u32 = 519;
    const I2: u32 = 520;

    fn v() -> VocabLayout {
        VocabLayout::new(512, 64, 3).unwrap()
    }

    #[test]
    fn forced_span_example() {
        let v = v();
        let s = TokenStream(vec![EOS, C1, C2, C3, BREAK, I1, I2]);
        let inst = infill_with_spans(&s, &[(2, 2)], &v).unwrap();
        let m0 = v.mask(0);
        assert_eq!(inst.tokens.tokens(), &[EOS, C1, m0, BREAK, I1, I2, INFILL, m0, C2, C3]);
        assert_eq!(
            inst.mask_records,
            vec![MaskRecord {
                sentinel: m0,
                position: 2,
                len: 2
            }]
        );
        assert_eq!(invert_infill(&inst, &v).unwrap(), s);
        assert_eq!(validate_stream(&inst.tokens, &v), Ok(()));
    }

    #[test]
    fn span_over_break_rejected() {
        let v = v();
        let s = TokenStream(vec![EOS, C1, C2, C3, BREAK, I1, I2]);
        assert!(infill_with_spans(&s, &[(3, 2)], &v).is_err());
    }

    #[test]
    fn identity_branch() {
        let v = v();
        let s = TokenStream(vec![EOS, C1, C2, BREAK, I1, I2]);
        let cfg = InfillConfig {
            mask_prob: 0.0,
            ..InfillConfig::default()
        };
        let inst = infill_transform(&s, &mut rng_from_seed(1), &cfg, &v).unwrap();
        assert_eq!(inst.tokens, s);
        assert!(inst.mask_records.is_empty());
        assert_eq!(invert_infill(&inst, &v).unwrap(), s);
    }

    #[test]
    fn too_many_spans_for_vocab() {
        let v = VocabLayout::new(512, 64, 1).unwrap();
        let cfg = InfillConfig {
            max_spans: 2,
            ..InfillConfig::default()
        };
        let s = TokenStream(vec![EOS, C1, BREAK, I1]);
        assert!(matches!(
            infill_transform(&s, &mut rng_from_seed(0), &cfg, &v),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn segments_too_short_are_skipped() {
        let v = v();
        let cfg = InfillConfig {
            span_len_min: 3,
            span_len_max: 3,
            mask_prob: 1.0,
            max_spans: 1,
        };
        let s = TokenStream(vec![EOS, C1, BREAK, I1, I2]);
        let inst = infill_transform(&s, &mut rng_from_seed(4), &cfg, &v).unwrap();
        assert_eq!(inst.tokens, s);
    }

    #[test]
    fn malformed_instances() {
        let v = v();
        let m0 = v.mask(0);
        let twice = InfillInstance {
            tokens: TokenStream(vec![EOS, m0, m0, BREAK, I1, INFILL, m0, C1]),
            mask_records: vec![],
        };
        assert!(matches!(invert_infill(&twice, &v), Err(Error::MalformedInfill(_))));
        let missing = InfillInstance {
            tokens: TokenStream(vec![EOS, m0, BREAK, I1, INFILL]),
            mask_records: vec![],
        };
        assert!(matches!(invert_infill(&missing, &v), Err(Error::MalformedInfill(_))));
        let orphan = InfillInstance {
            tokens: TokenStream(vec![EOS, C1, BREAK, I1, INFILL, m0, C2]),
            mask_records: vec![],
        };
        assert!(matches!(invert_infill(&orphan, &v), Err(Error::MalformedInfill(_))));
    }

    #[test]
    fn prompts() {
        let v = VocabLayout::new(512, 64, 1).unwrap();
        assert_eq!(
            caption_to_image_prompt(&[C1, C2], &v).unwrap().tokens(),
            &[EOS, C1, C2, BREAK]
        );
        assert_eq!(caption_to_image_prompt(&[], &v).unwrap().tokens(), &[EOS, BREAK]);
        assert!(matches!(
            caption_to_image_prompt(&[I1], &v),
            Err(Error::ModalityViolation(_))
        ));

        let img = [517, 518, 519, 520];
        let p = image_to_caption_prompt(&img, &v, 4).unwrap();
        assert_eq!(p.tokens(), &[EOS, 4, BREAK, 517, 518, 519, 520, INFILL, 4]);
        assert!(validate_stream(&p, &v).is_ok());
        assert!(matches!(image_to_caption_prompt(&[], &v, 4), Err(Error::Shape { .. })));
        assert!(matches!(
            image_to_caption_prompt(&img[..3], &v, 4),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn uniform_loss_weights() {
        let mut s = vec![EOS, C1, BREAK, I1, I2, EOS, C2, C3, BREAK, I1];
        s.extend([PAD, PAD]);
        let w = loss_weights(&s);
        assert_eq!(&w[..10], &[1.0; 10]);
        assert_eq!(&w[10..], &[0.0, 0.0]);
        assert_eq!(loss_weights(&[PAD; 4]), vec![0.0; 4]);
    }

    fn arb_stream() -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::vec(
            (
                proptest::collection::vec(7u32..519, 0..6),
                proptest::collection::vec(519u32..583, 1..10),
            ),
            1..4,
        )
        .prop_map(|docs| {
            let mut out = Vec::new();
            for (c, i) in docs {
                out.push(EOS);
                out.extend(c);
                out.push(BREAK);
                out.extend(i);
            }
            out
        })
    }

    proptest! {
        #[test]
        fn round_trip_and_structure(stream in arb_stream(), seed in any::<u64>(), spans in 1u32..=3) {
            let v = v();
            let cfg = InfillConfig { max_spans: spans, mask_prob: 0.9, ..InfillConfig::default() };
            let s = TokenStream(stream);
            let inst = infill_transform(&s, &mut rng_from_seed(seed), &cfg, &v).unwrap();
            prop_assert_eq!(invert_infill(&inst, &v).unwrap(), s.clone());
            prop_assert!(validate_stream(&inst.tokens, &v).is_ok());
            let mut before: Vec<u32> = s.iter().copied().filter(|&t| v.is_content(t)).collect();
            let mut after: Vec<u32> = inst.tokens.iter().copied().filter(|&t| v.is_content(t)).collect();
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
            for r in &inst.mask_records {
                let covered = &s[r.position..r.position + r.len];
                prop_assert!(covered.iter().all(|&t| v.is_content(t)));
                let count = inst.tokens.iter().filter(|&&t| t == r.sentinel).count();
                prop_assert_eq!(count, 2);
            }
        }
    }
}
