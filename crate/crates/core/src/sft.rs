//! Instruction-tuning templates rendered into token streams.
//!
//! A template is an ordered list of literal text, named slots and
//! `<break>` markers. Literal text goes through a deterministic word hash
//! into the text block; a reserved tail of the text block holds the
//! discretized coordinates used by grounding tasks.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::seed::fnv1a64;
use crate::vocab::{validate_stream, TokenId, TokenStream, VocabLayout, BREAK};

pub const DEFAULT_COORD_BUCKETS: u32 = 100;

/// Stand-in for the table's `[newline]` marker, rendered as one text token.
pub const NEWLINE_WORD: &str = "[newline]";

/// Maps words to text-block ids. The last `coord_buckets` ids of the text
/// block are reserved for coordinates and never produced by words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordMap {
    vocab: VocabLayout,
    coord_buckets: u32,
}

impl WordMap {
    pub fn new(vocab: VocabLayout, coord_buckets: u32) -> Result<Self> {
        if coord_buckets == 0 || coord_buckets >= vocab.n_text() {
            return Err(invalid_config(format!(
                "coord_buckets {coord_buckets} must be in [1, n_text={})",
                vocab.n_text()
            )));
        }
        Ok(Self { vocab, coord_buckets })
    }

    pub fn with_defaults(vocab: VocabLayout) -> Result<Self> {
        Self::new(vocab, DEFAULT_COORD_BUCKETS)
    }

    pub fn vocab(&self) -> &VocabLayout {
        &self.vocab
    }

    pub fn coord_buckets(&self) -> u32 {
        self.coord_buckets
    }

    fn n_words(&self) -> u32 {
        self.vocab.n_text() - self.coord_buckets
    }

    pub fn word_id(&self, word: &str) -> TokenId {
        let h = fnv1a64(word.to_lowercase().as_bytes());
        self.vocab.text_range().start + (h % self.n_words() as u64) as u32
    }

    /// Token for a coordinate in `[0, 1]`, discretized into `coord_buckets` bins.
    pub fn coord_id(&self, value: f64) -> TokenId {
        let n = self.coord_buckets;
        let b = if value.is_nan() {
            0
        } else {
            ((value.clamp(0.0, 1.0) * n as f64) as u32).min(n - 1)
        };
        self.vocab.text_range().start + self.n_words() + b
    }

    /// Whitespace split, with every ASCII punctuation character its own word.
    pub fn words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let mut cur = String::new();
            for ch in chunk.chars() {
                if ch.is_ascii_punctuation() {
                    if !cur.is_empty() {
                        out.push(core::mem::take(&mut cur));
                    }
                    out.push(ch.to_string());
                } else {
                    cur.push(ch);
                }
            }
            if !cur.is_empty() {
                out.push(cur);
            }
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        Self::words(text).iter().map(|w| self.word_id(w)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Text,
    Image,
    /// Labelled boxes rendered as `label at y0 x0 y1 x1, ...`.
    Detections,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Literal(String),
    Slot { name: String, kind: SlotKind },
    Break,
    Newline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    /// `[ymin, xmin, ymax, xmax]` in `[0, 1]`.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Text(String),
    TextTokens(Vec<TokenId>),
    Image(Vec<TokenId>),
    Detections(Vec<Detection>),
}

pub type Fields = BTreeMap<String, FieldValue>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTemplate {
    pub task: String,
    pub variant: usize,
    pub parts: Vec<Part>,
}

impl TaskTemplate {
    pub fn slots(&self) -> impl Iterator<Item = (&str, SlotKind)> {
        self.parts.iter().filter_map(|p| match p {
            Part::Slot { name, kind } => Some((name.as_str(), *kind)),
            _ => None,
        })
    }

    pub fn slot_kind(&self, name: &str) -> Option<SlotKind> {
        self.slots().find(|(n, _)| *n == name).map(|(_, k)| k)
    }

    /// Placeholder values for every slot, for smoke tests and demos.
    pub fn dummy_fields(&self, vocab: &VocabLayout, tokens_per_image: usize) -> Fields {
        let img = vocab.image_range();
        self.slots()
            .map(|(name, kind)| {
                let v = match kind {
                    SlotKind::Text => FieldValue::Text(format!("sample {name}")),
                    SlotKind::Image => FieldValue::Image(
                        (0..tokens_per_image)
                            .map(|i| img.start + (i as u32 % vocab.n_image()))
                            .collect(),
                    ),
                    SlotKind::Detections => FieldValue::Detections(vec![
                        Detection {
                            label: "cat".into(),
                            bbox: [0.1, 0.2, 0.5, 0.6],
                        },
                        Detection {
                            label: "dog".into(),
                            bbox: [0.4, 0.0, 1.0, 0.3],
                        },
                    ]),
                };
                (name.to_owned(), v)
            })
            .collect()
    }
}

fn modality_error(name: &str, want: SlotKind) -> Error {
    Error::ModalityViolation(format!("field {name:?} does not hold a {want:?} value"))
}

/// Renders `template` with `fields`; the result is checked with [`validate_stream`].
pub fn render_template(template: &TaskTemplate, fields: &Fields, words: &WordMap) -> Result<TokenStream> {
    let vocab = words.vocab();
    let mut out: Vec<TokenId> = Vec::new();
    for part in &template.parts {
        match part {
            Part::Literal(text) => out.extend(words.tokenize(text)),
            Part::Break => out.push(BREAK),
            Part::Newline => out.push(words.word_id(NEWLINE_WORD)),
            Part::Slot { name, kind } => {
                let value = fields.get(name).ok_or_else(|| Error::MissingField(name.clone()))?;
                match (kind, value) {
                    (SlotKind::Text, FieldValue::Text(s)) => out.extend(words.tokenize(s)),
                    (SlotKind::Text, FieldValue::TextTokens(ts)) => {
                        if ts.iter().any(|&t| !vocab.is_text(t)) {
                            return Err(modality_error(name, SlotKind::Text));
                        }
                        out.extend_from_slice(ts);
                    }
                    (SlotKind::Image, FieldValue::Image(ts)) => {
                        if ts.is_empty() || ts.iter().any(|&t| !vocab.is_image(t)) {
                            return Err(modality_error(name, SlotKind::Image));
                        }
                        out.extend_from_slice(ts);
                    }
                    (SlotKind::Detections, FieldValue::Detections(ds)) => {
                        for (i, d) in ds.iter().enumerate() {
                            if i > 0 {
                                out.push(words.word_id(","));
                            }
                            out.extend(words.tokenize(&d.label));
                            out.push(words.word_id("at"));
                            out.extend(d.bbox.iter().map(|&c| words.coord_id(c)));
                        }
                    }
                    (kind, _) => return Err(modality_error(name, *kind)),
                }
            }
        }
    }
    validate_stream(&out, vocab).map_err(|v| {
        Error::ModalityViolation(format!(
            "template {}#{} renders an invalid stream: {}",
            template.task,
            template.variant,
            v.first().map(|x| x.describe()).unwrap_or_default()
        ))
    })?;
    Ok(TokenStream(out))
}

#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    tasks: BTreeMap<String, Vec<TaskTemplate>>,
}

impl TemplateRegistry {
    pub fn insert(&mut self, task: &str, variants: Vec<Vec<Part>>) {
        let templates = variants
            .into_iter()
            .enumerate()
            .map(|(variant, parts)| TaskTemplate {
                task: task.to_owned(),
                variant,
                parts,
            })
            .collect();
        self.tasks.insert(task.to_owned(), templates);
    }

    pub fn lookup(&self, task: &str) -> Result<&[TaskTemplate]> {
        self.tasks
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::NotFound(format!("task {task:?}")))
    }

    pub fn get(&self, task: &str, variant: usize) -> Result<&TaskTemplate> {
        let all = self.lookup(task)?;
        all.get(variant)
            .ok_or_else(|| Error::NotFound(format!("task {task:?} variant {variant} (has {})", all.len())))
    }

    pub fn choose<R: Rng + ?Sized>(&self, task: &str, rng: &mut R) -> Result<&TaskTemplate> {
        let all = self.lookup(task)?;
        Ok(&all[rng.gen_range(0..all.len())])
    }

    pub fn task_names(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskTemplate> {
        self.tasks.values().flatten()
    }
}

fn lit(s: &str) -> Part {
    Part::Literal(s.to_owned())
}

fn text(name: &str) -> Part {
    Part::Slot {
        name: name.to_owned(),
        kind: SlotKind::Text,
    }
}

fn image(name: &str) -> Part {
    Part::Slot {
        name: name.to_owned(),
        kind: SlotKind::Image,
    }
}

pub fn builtin_templates() -> TemplateRegistry {
    use Part::{Break, Newline};
    let mut reg = TemplateRegistry::default();

    reg.insert(
        "instruct_pix2pix",
        vec![vec![
            lit("Edit first image following the instruction"),
            Break,
            image("image1"),
            Break,
            text("instruction"),
            Break,
            image("image2"),
        ]],
    );
    reg.insert(
        "ocr",
        vec![vec![
            lit("draw \""),
            text("ocr_content"),
            lit("\""),
            Break,
            image("image"),
        ]],
    );
    reg.insert(
        "object_detection",
        vec![vec![
            lit("Generate high quality image of"),
            text("caption"),
            lit("with segmentations"),
            Part::Slot {
                name: "objects".into(),
                kind: SlotKind::Detections,
            },
            Break,
            image("image"),
        ]],
    );
    for (task, instruction) in [
        ("edge_to_image", "Make high quality image from canny edge features"),
        ("seg_to_image", "Make high quality image from a segmentation map"),
        ("hed_to_image", "Make high quality image from hed features"),
        ("pose_to_image", "Make high quality image from openpose features"),
        ("depth_to_image", "Make high quality image from depth features"),
        ("norm_to_image", "Make high quality image from 3D norm features"),
        ("scribble_to_image", "Make high quality image from children's scribbles"),
    ] {
        reg.insert(
            task,
            vec![vec![
                lit(instruction),
                Break,
                image("feature_image"),
                Break,
                text("caption"),
                Break,
                image("image"),
            ]],
        );
    }

    let short_caption = || {
        vec![
            vec![text("caption"), Break, image("image")],
            vec![
                lit("Describe the given picture."),
                text("caption"),
                Break,
                image("image"),
            ],
        ]
    };
    reg.insert("coco_captioning", short_caption());
    reg.insert("flickr30k", short_caption());

    let long = |second: &str| {
        vec![
            vec![
                lit("Describe the given picture in very detail."),
                text("caption"),
                Break,
                image("image"),
            ],
            vec![lit(second), text("caption"), Break, image("image")],
            vec![
                lit("Generate a long caption for the given image."),
                text("caption"),
                Break,
                image("image"),
            ],
        ]
    };
    reg.insert(
        "image_paragraph",
        long("Describe all the objects in the given image in very detail."),
    );
    reg.insert(
        "localized_narratives",
        long("Generate a long narration of what is happening in the given image."),
    );

    let vqa = || {
        vec![
            vec![
                lit("Question:"),
                text("question"),
                lit("Answer:"),
                text("answer"),
                lit("."),
                Break,
                image("image"),
            ],
            vec![
                lit("Question:"),
                text("question"),
                Newline,
                text("answer"),
                Break,
                image("image"),
            ],
            vec![
                lit("Question:"),
                text("question"),
                lit("The answer is"),
                text("answer"),
                lit("."),
                Break,
                image("image"),
            ],
        ]
    };
    reg.insert("vqa2", vqa());
    reg.insert("vizwiz", vqa());
    reg.insert("okvqa", vqa());

    let science_head = || {
        vec![
            lit("Question:"),
            text("question"),
            Newline,
            lit("Context:"),
            text("context"),
            Newline,
            lit("Options:"),
            text("choices_text"),
            Newline,
        ]
    };
    let mut direct = science_head();
    direct.extend([lit("Answer:"), text("answer"), lit("."), Break, image("image")]);
    let mut reasoned = science_head();
    reasoned.extend([
        lit("Answer: Let's think step-by-step:"),
        text("explanation"),
        lit("So the answer is"),
        text("answer"),
        lit("."),
        Break,
        image("image"),
    ]);
    reg.insert("scienceqa", vec![direct, reasoned]);
    reg
}
