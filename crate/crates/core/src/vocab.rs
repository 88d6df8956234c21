//! Unified vocabulary, document framing, packing and stream validation.
//!
//! Id layout: `<pad>=0, <eos>=1, <break>=2, <infill>=3, <mask_i>=4+i`,
//! followed by the text block and then the image block.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const BREAK: TokenId = 2;
pub const INFILL: TokenId = 3;
const FIRST_MASK: TokenId = 4;

/// Desk-scale defaults.
pub const DEFAULT_N_TEXT: u32 = 512;
pub const DEFAULT_N_IMAGE: u32 = 64;
pub const DEFAULT_N_MASKS: u32 = 1;
pub const DEFAULT_TOKENS_PER_IMAGE: usize = 16;
pub const DEFAULT_SEQ_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabLayout {
    n_text: u32,
    n_image: u32,
    n_masks: u32,
}

/// What a token id denotes under a [`VocabLayout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Eos,
    Break,
    Infill,
    Mask(u32),
    Text,
    Image,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

impl VocabLayout {
    pub fn new(n_text: u32, n_image: u32, n_masks: u32) -> Result<Self> {
        if n_text == 0 || n_image == 0 || n_masks == 0 {
            return Err(invalid_config(format!(
                "vocab counts must be >= 1 (n_text={n_text}, n_image={n_image}, n_masks={n_masks})"
            )));
        }
        let total = FIRST_MASK as u64 + n_masks as u64 + n_text as u64 + n_image as u64;
        if total > u32::MAX as u64 {
            return Err(invalid_config("vocab does not fit in 32-bit token ids"));
        }
        Ok(Self {
            n_text,
            n_image,
            n_masks,
        })
    }

    pub fn n_text(&self) -> u32 {
        self.n_text
    }

    pub fn n_image(&self) -> u32 {
        self.n_image
    }

    pub fn n_masks(&self) -> u32 {
        self.n_masks
    }

    pub fn n_specials(&self) -> u32 {
        FIRST_MASK + self.n_masks
    }

    pub fn pad(&self) -> TokenId {
        PAD
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    pub fn brk(&self) -> TokenId {
        BREAK
    }

    pub fn infill(&self) -> TokenId {
        INFILL
    }

    /// Sentinel `<mask_i>`; panics if `i >= n_masks`.
    pub fn mask(&self, i: u32) -> TokenId {
        assert!(i < self.n_masks, "mask index {i} >= n_masks {}", self.n_masks);
        FIRST_MASK + i
    }

    pub fn text_range(&self) -> Range<TokenId> {
        let start = self.n_specials();
        start..start + self.n_text
    }

    pub fn image_range(&self) -> Range<TokenId> {
        let start = self.n_specials() + self.n_text;
        start..start + self.n_image
    }

    pub fn total_size(&self) -> u32 {
        self.n_specials() + self.n_text + self.n_image
    }

    pub fn kind(&self, t: TokenId) -> TokenKind {
        match t {
            PAD => TokenKind::Pad,
            EOS => TokenKind::Eos,
            BREAK => TokenKind::Break,
            INFILL => TokenKind::Infill,
            t if t < self.n_specials() => TokenKind::Mask(t - FIRST_MASK),
            t if self.text_range().contains(&t) => TokenKind::Text,
            t if self.image_range().contains(&t) => TokenKind::Image,
            _ => TokenKind::Invalid,
        }
    }

    pub fn is_text(&self, t: TokenId) -> bool {
        self.text_range().contains(&t)
    }

    pub fn is_image(&self, t: TokenId) -> bool {
        self.image_range().contains(&t)
    }

    /// Content tokens are the text and image blocks; everything else is special.
    pub fn is_content(&self, t: TokenId) -> bool {
        t >= self.n_specials() && t < self.total_size()
    }

    pub fn modality(&self, t: TokenId) -> Option<Modality> {
        match self.kind(t) {
            TokenKind::Text => Some(Modality::Text),
            TokenKind::Image => Some(Modality::Image),
            _ => None,
        }
    }

    /// Image token id for codebook entry `code`.
    pub fn image_token(&self, code: u32) -> Result<TokenId> {
        if code >= self.n_image {
            return Err(Error::OutOfRange {
                token: code,
                limit: self.n_image,
            });
        }
        Ok(self.image_range().start + code)
    }

    /// Codebook entry for an image token id.
    pub fn image_code(&self, t: TokenId) -> Result<u32> {
        if !self.is_image(t) {
            return Err(Error::ModalityViolation(format!("token {t} is not an image token")));
        }
        Ok(t - self.image_range().start)
    }
}

impl Default for VocabLayout {
    fn default() -> Self {
        Self::new(DEFAULT_N_TEXT, DEFAULT_N_IMAGE, DEFAULT_N_MASKS).expect("defaults are valid")
    }
}

pub fn build_vocab(n_text: u32, n_image: u32, n_masks: u32) -> Result<VocabLayout> {
    VocabLayout::new(n_text, n_image, n_masks)
}

/// A caption-image pair; token ids are absolute ids in the unified vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(rename = "caption_tokens")]
    pub caption: Vec<TokenId>,
    #[serde(rename = "image_tokens")]
    pub image: Vec<TokenId>,
}

impl Document {
    pub fn new(id: impl Into<String>, caption: Vec<TokenId>, image: Vec<TokenId>) -> Self {
        Self {
            id: id.into(),
            caption,
            image,
        }
    }

    /// Checks block membership and, when given, the fixed image length.
    pub fn validate(&self, vocab: &VocabLayout, tokens_per_image: Option<usize>) -> Result<()> {
        if let Some(&t) = self.caption.iter().find(|&&t| !vocab.is_text(t)) {
            return Err(Error::ModalityViolation(format!(
                "document {:?}: caption token {t} outside the text block",
                self.id
            )));
        }
        if let Some(&t) = self.image.iter().find(|&&t| !vocab.is_image(t)) {
            return Err(Error::ModalityViolation(format!(
                "document {:?}: image token {t} outside the image block",
                self.id
            )));
        }
        if self.image.is_empty() {
            return Err(Error::InvalidDocument(format!(
                "document {:?} has no image tokens",
                self.id
            )));
        }
        if let Some(n) = tokens_per_image {
            if self.image.len() != n {
                return Err(Error::Shape {
                    expected: n,
                    found: self.image.len(),
                });
            }
        }
        Ok(())
    }

    /// Length of the serialized form: `<eos>`, caption, `<break>`, image.
    pub fn serialized_len(&self) -> usize {
        2 + self.caption.len() + self.image.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenStream(pub Vec<TokenId>);

impl TokenStream {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl From<Vec<TokenId>> for TokenStream {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl core::ops::Deref for TokenStream {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

/// `[<eos>, caption.., <break>, image..]`. The next document's `<eos>`
/// (or the end of the sequence) terminates it.
pub fn serialize_document(doc: &Document, vocab: &VocabLayout) -> Result<TokenStream> {
    doc.validate(vocab, None)?;
    let mut out = Vec::with_capacity(doc.serialized_len());
    out.push(EOS);
    out.extend_from_slice(&doc.caption);
    out.push(BREAK);
    out.extend_from_slice(&doc.image);
    Ok(TokenStream(out))
}

/// Packs streams in input order into `<pad>`-filled rows of `seq_len`.
///
/// A stream goes into the current row when it fits, otherwise it opens a
/// new row, so removing pads from the concatenated rows restores the input
/// sequence exactly. Streams are never split.
pub fn pack_sequences(streams: &[TokenStream], seq_len: usize) -> Result<Vec<TokenStream>> {
    if seq_len == 0 {
        return Err(invalid_config("seq_len must be >= 1"));
    }
    let mut rows: Vec<Vec<TokenId>> = Vec::new();
    let mut current: Vec<TokenId> = Vec::new();
    for s in streams {
        if s.len() > seq_len {
            return Err(Error::TooLong {
                len: s.len(),
                max: seq_len,
            });
        }
        if current.len() + s.len() > seq_len && !current.is_empty() {
            rows.push(core::mem::take(&mut current));
        }
        current.extend_from_slice(s);
    }
    if !current.is_empty() {
        rows.push(current);
    }
    Ok(rows
        .into_iter()
        .map(|mut r| {
            r.resize(seq_len, PAD);
            TokenStream(r)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Id outside the vocabulary.
    UnknownToken { pos: usize, token: TokenId },
    /// A content token in a segment of the other modality.
    Modality {
        pos: usize,
        token: TokenId,
        expected: Modality,
    },
    /// The modality changed inside a segment without a `<break>`.
    MissingBreak { pos: usize },
    /// `<infill>` with no pending sentinel in the body.
    StrayInfill { pos: usize },
    /// A sentinel that is duplicated, unmatched or out of order.
    StraySentinel { pos: usize, mask: u32 },
    /// A structural token (`<eos>`, `<break>`) inside the relocated suffix.
    StructuralInSuffix { pos: usize, token: TokenId },
    /// A relocated span mixing text and image tokens.
    MixedSpan { pos: usize },
    /// A content token in the suffix before any sentinel.
    UnlabelledSpan { pos: usize },
    /// Non-pad content after padding started.
    ContentAfterPad { pos: usize },
}

impl Violation {
    pub fn describe(&self) -> String {
        format!("{self:?}")
    }
}

#[derive(Default)]
struct InfillState {
    /// Sentinels seen in the body, in order.
    body: Vec<u32>,
    in_suffix: bool,
    /// Index into `body` of the next sentinel expected in the suffix.
    next_suffix: usize,
    span_modality: Option<Modality>,
    span_open: bool,
}

impl InfillState {
    fn finish(&mut self, pos: usize, out: &mut Vec<Violation>) {
        if self.in_suffix {
            for &m in &self.body[self.next_suffix..] {
                out.push(Violation::StraySentinel { pos, mask: m });
            }
        } else {
            for &m in &self.body {
                out.push(Violation::StraySentinel { pos, mask: m });
            }
        }
        *self = InfillState::default();
    }
}

/// Structural check of a token stream.
///
/// Segments start as text at the beginning of the stream and after every
/// `<eos>`; each `<break>` switches modality. Sentinels may stand in for
/// content in the body; after `<infill>` every relocated span must be
/// introduced by its sentinel, in body order, and hold a single modality.
pub fn validate_stream(stream: &[TokenId], vocab: &VocabLayout) -> core::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut segment = Modality::Text;
    let mut segment_has_content = false;
    let mut infill = InfillState::default();
    let mut padding = false;

    for (pos, &t) in stream.iter().enumerate() {
        let kind = vocab.kind(t);
        if padding && kind != TokenKind::Pad {
            out.push(Violation::ContentAfterPad { pos });
            padding = false;
        }
        match kind {
            TokenKind::Invalid => out.push(Violation::UnknownToken { pos, token: t }),
            TokenKind::Pad => padding = true,
            TokenKind::Eos => {
                if infill.in_suffix {
                    infill.finish(pos, &mut out);
                }
                segment = Modality::Text;
                segment_has_content = false;
            }
            TokenKind::Break => {
                if infill.in_suffix {
                    out.push(Violation::StructuralInSuffix { pos, token: t });
                    continue;
                }
                segment = match segment {
                    Modality::Text => Modality::Image,
                    Modality::Image => Modality::Text,
                };
                segment_has_content = false;
            }
            TokenKind::Infill => {
                if infill.in_suffix || infill.body.is_empty() {
                    out.push(Violation::StrayInfill { pos });
                } else {
                    infill.in_suffix = true;
                    infill.span_open = false;
                }
            }
            TokenKind::Mask(m) => {
                if !infill.in_suffix {
                    if infill.body.contains(&m) {
                        out.push(Violation::StraySentinel { pos, mask: m });
                    } else {
                        infill.body.push(m);
                    }
                } else if infill.body.get(infill.next_suffix) == Some(&m) {
                    infill.next_suffix += 1;
                    infill.span_open = true;
                    infill.span_modality = None;
                } else {
                    out.push(Violation::StraySentinel { pos, mask: m });
                }
            }
            TokenKind::Text | TokenKind::Image => {
                let m = if kind == TokenKind::Text {
                    Modality::Text
                } else {
                    Modality::Image
                };
                if infill.in_suffix {
                    if !infill.span_open {
                        out.push(Violation::UnlabelledSpan { pos });
                    } else {
                        match infill.span_modality {
                            None => infill.span_modality = Some(m),
                            Some(prev) if prev != m => out.push(Violation::MixedSpan { pos }),
                            _ => {}
                        }
                    }
                } else if m != segment {
                    if segment_has_content {
                        out.push(Violation::MissingBreak { pos });
                        segment = m;
                    } else {
                        out.push(Violation::Modality {
                            pos,
                            token: t,
                            expected: segment,
                        });
                    }
                } else {
                    segment_has_content = true;
                }
            }
        }
    }
    if infill.in_suffix || !infill.body.is_empty() {
        infill.finish(stream.len(), &mut out);
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Positions of content tokens grouped into maximal runs between specials.
pub fn content_segments(stream: &[TokenId], vocab: &VocabLayout) -> Vec<Range<usize>> {
    let mut segs = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &t) in stream.iter().enumerate() {
        if vocab.is_content(t) {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            segs.push(s..i);
        }
    }
    if let Some(s) = start {
        segs.push(s..stream.len());
    }
    segs
}

/// Convenience for tests and tools: a serialized document from block-relative ids.
pub fn document_from_codes(
    id: &str,
    vocab: &VocabLayout,
    caption_codes: &[u32],
    image_codes: &[u32],
) -> Result<Document> {
    let caption = caption_codes
        .iter()
        .map(|&c| {
            if c < vocab.n_text() {
                Ok(vocab.text_range().start + c)
            } else {
                Err(Error::OutOfRange {
                    token: c,
                    limit: vocab.n_text(),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let image = image_codes
        .iter()
        .map(|&c| vocab.image_token(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Document::new(id, caption, image))
}
