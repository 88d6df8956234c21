//! `cm3` command-line driver.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use cm3_core::decoding::{generate_pool, rerank, Candidate, Prompt, Strategy};
use cm3_core::eval::{generate_synthetic_corpus, perplexity, SyntheticSpec};
use cm3_core::ngram::train_ngram;
use cm3_core::retrieval::{build_memory_bank, AlignedEmbedder, Embedder, HashedEmbedder};
use cm3_core::seed::{derive_labeled, derive_seed, rng_from_seed};
use cm3_core::sft::{builtin_templates, render_template, Detection, FieldValue, Fields, SlotKind, WordMap};
use cm3_core::vq::{decode_tokens, encode_image, fit_codebook, Codebook, GrayImage};
use cm3_core::{Document, TokenId, TokenStream, VocabLayout};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{load_config, resolve_threads, PathsConfig, RunConfig, THREADS_ENV};
use crate::error::{PipelineError, Result};
use crate::experiments::{run_experiment_suite, write_report, ModelEval};
use crate::formats::{
    read_bank, read_codebook, read_jsonl, read_model, read_pgm, write_bank, write_bytes, write_codebook, write_jsonl,
    write_model, write_pgm,
};
use crate::transform::{inference_context, transform_corpus, TransformSettings};

#[derive(Debug, Parser)]
#[command(name = "cm3", version, about = "Retrieval-augmented caption/image token pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to CM3_PIPELINE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    vocab_text: Option<u32>,
    #[arg(long, global = true)]
    vocab_image: Option<u32>,
    #[arg(long, global = true)]
    tokens_per_image: Option<usize>,
    #[arg(long, global = true)]
    seq_len: Option<usize>,
    /// Retrieved documents per query.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(0..=3))]
    retrieved: Option<u8>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// temperature, topp, cfg, cd or cdk.
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    top_p: Option<f64>,
    #[arg(long, global = true)]
    cfg_alpha: Option<f64>,
    #[arg(long, global = true)]
    cd_alpha: Option<f64>,
    #[arg(long, global = true)]
    cd_k: Option<usize>,
    #[arg(long, global = true)]
    max_len: Option<usize>,
    /// Candidates per prompt.
    #[arg(long = "n", global = true)]
    n_candidates: Option<usize>,
    /// Pool split, e.g. cfg=4,cdk=4.
    #[arg(long, global = true)]
    mix: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize JSONL documents (token ids, or caption text plus a PGM image).
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Needed for documents given as caption text plus PGM.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Fit a patch codebook on PGM images (files, or JSONL documents naming them).
    FitVq {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Embed a tokenized corpus into a memory bank.
    BuildBank {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build retrieval-augmented, infill-transformed training streams.
    Transform {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the n-gram model on JSONL records with a "tokens" field.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate image-token candidates for a caption and re-rank them.
    Generate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Caption as text.
        #[arg(long, conflicts_with = "caption_tokens", required_unless_present = "caption_tokens")]
        caption: Option<String>,
        /// Caption as comma-separated token ids.
        #[arg(long, value_delimiter = ',')]
        caption_tokens: Option<Vec<TokenId>>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Decode the best candidate to a PGM (needs --codebook).
        #[arg(long, requires = "codebook")]
        image_out: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Run the experiment suite and write CSV/JSON reports.
    Evaluate {
        #[arg(long)]
        report_dir: Option<PathBuf>,
        /// Also report the perplexity of this model on --heldout.
        #[arg(long, requires = "heldout")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        heldout: Option<PathBuf>,
    },
    /// Render SFT task records into token streams.
    RenderSft {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Needed for image fields given as PGM paths.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Write the synthetic caption/pattern corpus as tokenized JSONL.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        n_docs: Option<usize>,
    },
}

impl GlobalArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.vocab_text {
            cfg.vocab.n_text = v;
        }
        if let Some(v) = self.vocab_image {
            cfg.vocab.n_image = v;
        }
        if let Some(v) = self.tokens_per_image {
            cfg.tokens_per_image = v;
        }
        if let Some(v) = self.seq_len {
            cfg.seq_len = v;
        }
        if let Some(v) = self.retrieved {
            cfg.retrieved = v as usize;
        }
        let d = &self.decode;
        let base = &mut cfg.decode.base;
        if let Some(s) = &d.strategy {
            base.strategy = Strategy::parse(s).map_err(|e| PipelineError::Usage(e.to_string()))?;
        }
        macro_rules! set {
            ($($f:ident => $t:expr),*) => { $(if let Some(v) = d.$f { $t = v; })* };
        }
        set!(temperature => base.temperature, top_p => base.top_p, cfg_alpha => base.cfg_alpha,
             cd_alpha => base.cd_alpha, cd_k => base.cd_k, max_len => base.max_len,
             n_candidates => cfg.decode.n_candidates);
        if let Some(m) = &d.mix {
            cfg.decode.mix = Some(m.clone());
        }
        Ok(())
    }
}

fn required(opt: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    opt.or_else(|| fallback.clone())
        .ok_or_else(|| PipelineError::Usage(format!("no {what} path given (flag or config paths.{what})")))
}

fn word_map(vocab: VocabLayout) -> Result<WordMap> {
    Ok(WordMap::with_defaults(vocab)?)
}

/// Resolves `p` against the directory of the file that referenced it.
fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn encode_pgm_tokens(path: &Path, codebook: &Codebook, vocab: &VocabLayout) -> Result<Vec<TokenId>> {
    let img = read_pgm(path)?;
    let codes = encode_image(&img, codebook).map_err(|e| PipelineError::format(path, e.to_string()))?;
    codes
        .into_iter()
        .map(|c| {
            vocab
                .image_token(c)
                .map_err(|e| PipelineError::format(path, e.to_string()))
        })
        .collect()
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum InputDoc {
    Tokens(Document),
    Raw {
        id: String,
        caption_text: String,
        image_pgm: PathBuf,
    },
}

fn load_corpus(path: &Path, cfg: &RunConfig) -> Result<Vec<Document>> {
    let vocab = cfg.vocab_layout()?;
    let docs: Vec<Document> = read_jsonl(path)?;
    for d in &docs {
        d.validate(&vocab, Some(cfg.tokens_per_image))
            .map_err(|e| PipelineError::format(path, e.to_string()))?;
    }
    Ok(docs)
}

fn cmd_ingest(cfg: &RunConfig, input: &Path, output: &Path, codebook: Option<&Path>) -> Result<()> {
    let vocab = cfg.vocab_layout()?;
    let words = word_map(vocab)?;
    let codebook = codebook.map(read_codebook).transpose()?;
    let raw: Vec<InputDoc> = read_jsonl(input)?;
    let mut docs = Vec::with_capacity(raw.len());
    for r in raw {
        let doc = match r {
            InputDoc::Tokens(d) => d,
            InputDoc::Raw {
                id,
                caption_text,
                image_pgm,
            } => {
                let cb = codebook.as_ref().ok_or_else(|| {
                    PipelineError::Usage(format!("document {id:?} names a PGM image; pass --codebook"))
                })?;
                let image = encode_pgm_tokens(&relative_to(input, &image_pgm), cb, &vocab)?;
                Document::new(id, words.tokenize(&caption_text), image)
            }
        };
        doc.validate(&vocab, Some(cfg.tokens_per_image))
            .map_err(|e| PipelineError::format(input, e.to_string()))?;
        docs.push(doc);
    }
    write_jsonl(output, &docs)
}

fn cmd_fit_vq(cfg: &RunConfig, inputs: &[PathBuf], output: &Path) -> Result<()> {
    let mut images: Vec<GrayImage> = Vec::new();
    for p in inputs {
        if p.extension().is_some_and(|e| e == "jsonl") {
            let docs: Vec<Value> = read_jsonl(p)?;
            for d in docs {
                if let Some(img) = d.get("image_pgm").and_then(Value::as_str) {
                    images.push(read_pgm(&relative_to(p, Path::new(img)))?);
                }
            }
        } else {
            images.push(read_pgm(p)?);
        }
    }
    if cfg.vq.k as u64 > cfg.vocab.n_image as u64 {
        return Err(PipelineError::Config(format!(
            "codebook size {} exceeds the image vocabulary {}",
            cfg.vq.k, cfg.vocab.n_image
        )));
    }
    let seed = derive_labeled(cfg.seed, "fit-vq") as u32;
    let cb = fit_codebook(&images, cfg.vq.k, cfg.vq.patch_size, cfg.vq.iters, seed)?;
    write_codebook(output, &cb)
}

fn embedder(cfg: &RunConfig) -> Result<HashedEmbedder> {
    Ok(HashedEmbedder::new(cfg.embedder.dim, cfg.embedder.seed)?)
}

fn cmd_build_bank(cfg: &RunConfig, corpus: &Path, output: &Path) -> Result<()> {
    let docs = load_corpus(corpus, cfg)?;
    let bank = build_memory_bank(docs, &embedder(cfg)?)?;
    write_bank(output, &bank)
}

fn cmd_transform(cfg: &RunConfig, corpus: &Path, bank: &Path, output: &Path) -> Result<()> {
    let vocab = cfg.vocab_layout()?;
    let docs = load_corpus(corpus, cfg)?;
    let bank = read_bank(bank)?;
    let emb = HashedEmbedder::new(bank.dim(), bank.embedder_seed())?;
    let settings = TransformSettings {
        vocab: &vocab,
        seq_len: cfg.seq_len,
        retrieved: cfg.retrieved,
        infill: &cfg.infill,
        params: &cfg.retrieval,
        seed: cfg.seed,
    };
    let records = transform_corpus(&bank, &docs, &emb, &settings)?;
    write_jsonl(output, &records)
}

#[derive(Debug, Deserialize)]
struct TokensOnly {
    tokens: TokenStream,
}

fn read_streams(path: &Path) -> Result<Vec<TokenStream>> {
    let recs: Vec<TokensOnly> = read_jsonl(path)?;
    Ok(recs.into_iter().map(|r| r.tokens).collect())
}

fn cmd_train(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let vocab = cfg.vocab_layout()?;
    let streams = read_streams(input)?;
    let model = train_ngram(&streams, cfg.ngram.order, cfg.ngram.delta, vocab.total_size())
        .map_err(|e| PipelineError::format(input, e.to_string()))?;
    write_model(output, &model)
}

#[derive(Debug, Serialize)]
struct GenerateOutput {
    caption_tokens: Vec<TokenId>,
    retrieved: Vec<String>,
    candidates: Vec<Candidate>,
    best: Candidate,
    effective_config: RunConfig,
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    cfg: &RunConfig,
    model: &Path,
    bank: Option<&Path>,
    caption: Option<&str>,
    caption_tokens: Option<&[TokenId]>,
    output: Option<&Path>,
    image_out: Option<&Path>,
    codebook: Option<&Path>,
) -> Result<String> {
    let vocab = cfg.vocab_layout()?;
    let caption: Vec<TokenId> = match (caption, caption_tokens) {
        (_, Some(t)) => t.to_vec(),
        (Some(text), None) => word_map(vocab)?.tokenize(text),
        (None, None) => return Err(PipelineError::Usage("give --caption or --caption-tokens".into())),
    };
    let mix = cfg.decode.pool_mix()?;
    let model = read_model(model)?;
    if model.vocab_size_u32() != vocab.total_size() {
        return Err(PipelineError::Config(format!(
            "model vocabulary {} does not match the configured layout ({})",
            model.vocab_size_u32(),
            vocab.total_size()
        )));
    }
    let bank = bank.map(read_bank).transpose()?;
    if bank.is_none() && cfg.retrieved > 0 {
        return Err(PipelineError::Usage("--retrieved > 0 needs --bank".into()));
    }
    let budget = cfg.seq_len.saturating_sub(caption.len() + 2 + cfg.decode.base.max_len);
    let (ctx, retrieved, scorer): (Vec<TokenId>, Vec<String>, Box<dyn Embedder>) = match &bank {
        Some(b) => {
            let emb = HashedEmbedder::new(b.dim(), b.embedder_seed())?;
            let (ctx, ids) = inference_context(b, &caption, None, &emb, cfg.retrieved, &cfg.retrieval, budget, &vocab)?;
            (ctx, ids, Box::new(AlignedEmbedder::fit(b.docs(), emb)))
        }
        None => (Vec::new(), Vec::new(), Box::new(embedder(cfg)?)),
    };
    let prompt = Prompt::caption_to_image(&ctx, &caption, &vocab)?;
    let pool = generate_pool(&model, &prompt, &mix, cfg.seed, 0)?;
    let (best, scored) = rerank(&pool, &caption, scorer.as_ref())?;
    let best = scored.candidates[best].clone();

    if let (Some(out), Some(cb)) = (image_out, codebook) {
        let cb = read_codebook(cb)?;
        let codes = best
            .content()
            .iter()
            .map(|&t| vocab.image_code(t))
            .collect::<cm3_core::Result<Vec<_>>>()?;
        let side = (codes.len() as f64).sqrt().round() as usize;
        if side * side != codes.len() || side == 0 {
            return Err(PipelineError::Config(format!(
                "{} image tokens do not form a square grid",
                codes.len()
            )));
        }
        write_pgm(out, &decode_tokens(&codes, &cb, (side, side))?)?;
    }

    let out = GenerateOutput {
        caption_tokens: caption,
        retrieved,
        candidates: scored.candidates,
        best,
        effective_config: cfg.clone(),
    };
    let mut json = serde_json::to_string_pretty(&out).map_err(|e| PipelineError::Config(e.to_string()))?;
    json.push('\n');
    if let Some(p) = output {
        write_bytes(p, json.as_bytes())?;
    }
    Ok(json)
}

fn cmd_evaluate(cfg: &RunConfig, dir: &Path, model: Option<&Path>, heldout: Option<&Path>) -> Result<()> {
    let mut report = run_experiment_suite(cfg)?;
    if let (Some(m), Some(h)) = (model, heldout) {
        let streams = read_streams(h)?;
        let ppl = perplexity(&read_model(m)?, &streams).map_err(|e| PipelineError::format(h, e.to_string()))?;
        report.model_eval = Some(ModelEval {
            model: m.to_path_buf(),
            heldout: h.to_path_buf(),
            streams: streams.len(),
            perplexity: ppl,
        });
    }
    write_report(dir, &report)
}

#[derive(Debug, Deserialize)]
struct TaskRecord {
    task: String,
    variant: Option<usize>,
    #[serde(default)]
    fields: serde_json::Map<String, Value>,
}

#[derive(Debug, Serialize)]
struct RenderedTask {
    task: String,
    variant: usize,
    tokens: TokenStream,
}

fn field_value(
    name: &str,
    kind: SlotKind,
    v: &Value,
    input: &Path,
    codebook: Option<&Codebook>,
    vocab: &VocabLayout,
) -> Result<FieldValue> {
    let bad = || PipelineError::format(input, format!("field {name:?} has the wrong shape for a {kind:?} slot"));
    let ids = |v: &Value| -> Result<Vec<TokenId>> { serde_json::from_value(v.clone()).map_err(|_| bad()) };
    Ok(match (kind, v) {
        (SlotKind::Text, Value::String(s)) => FieldValue::Text(s.clone()),
        (SlotKind::Text, Value::Array(_)) => FieldValue::TextTokens(ids(v)?),
        (SlotKind::Image, Value::Array(_)) => FieldValue::Image(ids(v)?),
        (SlotKind::Image, Value::String(p)) => {
            let cb =
                codebook.ok_or_else(|| PipelineError::Usage(format!("field {name:?} names a PGM; pass --codebook")))?;
            FieldValue::Image(encode_pgm_tokens(&relative_to(input, Path::new(p)), cb, vocab)?)
        }
        (SlotKind::Detections, Value::Array(_)) => {
            let d: Vec<Detection> = serde_json::from_value(v.clone()).map_err(|_| bad())?;
            FieldValue::Detections(d)
        }
        _ => return Err(bad()),
    })
}

fn cmd_render_sft(cfg: &RunConfig, input: &Path, output: &Path, codebook: Option<&Path>) -> Result<()> {
    let vocab = cfg.vocab_layout()?;
    let words = word_map(vocab)?;
    let codebook = codebook.map(read_codebook).transpose()?;
    let registry = builtin_templates();
    let tasks: Vec<TaskRecord> = read_jsonl(input)?;
    let mut out = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let tmpl = match t.variant {
            Some(v) => registry.get(&t.task, v),
            None => registry.choose(
                &t.task,
                &mut rng_from_seed(derive_seed(derive_labeled(cfg.seed, "sft"), i as u64)),
            ),
        }
        .map_err(|e| PipelineError::format(input, format!("record {}: {e}", i + 1)))?;
        let mut fields = Fields::new();
        for (name, v) in &t.fields {
            let kind = tmpl.slot_kind(name).ok_or_else(|| {
                PipelineError::format(
                    input,
                    format!("record {}: task {:?} has no field {name:?}", i + 1, t.task),
                )
            })?;
            fields.insert(
                name.clone(),
                field_value(name, kind, v, input, codebook.as_ref(), &vocab)?,
            );
        }
        let tokens = render_template(tmpl, &fields, &words)
            .map_err(|e| PipelineError::format(input, format!("record {}: {e}", i + 1)))?;
        out.push(RenderedTask {
            task: t.task.clone(),
            variant: tmpl.variant,
            tokens,
        });
    }
    write_jsonl(output, &out)
}

fn cmd_synth(cfg: &RunConfig, output: &Path, n_docs: Option<usize>) -> Result<()> {
    let vocab = cfg.vocab_layout()?;
    let e = &cfg.experiment;
    let spec = SyntheticSpec {
        seed: cfg.seed,
        n_patterns: e.n_patterns,
        noise_rate: e.noise_rate,
        n_docs: n_docs.unwrap_or(e.n_docs),
        caption_len: e.caption_len,
        tokens_per_image: cfg.tokens_per_image,
    };
    write_jsonl(output, &generate_synthetic_corpus(&spec, &vocab)?.docs)
}

fn dispatch(cli: Cli, env_threads: Option<String>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => {
            let (cfg, warnings) = load_config(p)?;
            for w in warnings {
                let _ = writeln!(stderr, "warning: {}: {w}", p.display());
            }
            cfg
        }
        None => RunConfig::default(),
    };
    cli.global.apply(&mut cfg)?;
    cfg.threads = resolve_threads(cli.global.threads, env_threads.as_deref(), cfg.threads)?;
    if let Command::FitVq {
        k, patch_size, iters, ..
    } = &cli.command
    {
        cfg.vq.k = k.unwrap_or(cfg.vq.k);
        cfg.vq.patch_size = patch_size.unwrap_or(cfg.vq.patch_size);
        cfg.vq.iters = iters.unwrap_or(cfg.vq.iters);
    }
    cfg.decode.base.seed = cfg.seed;
    cfg.validate()?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| PipelineError::Usage(format!("cannot start {:?} threads: {e}", cfg.threads)))?;

    let paths = cfg.paths.clone();
    let printed = pool.install(|| -> Result<Option<String>> { run_command(cli.command, &cfg, &paths) })?;
    if let Some(text) = printed {
        stdout
            .write_all(text.as_bytes())
            .map_err(|e| PipelineError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

/// Executes one subcommand; returns text destined for stdout, if any.
fn run_command(command: Command, cfg: &RunConfig, paths: &PathsConfig) -> Result<Option<String>> {
    match command {
        Command::Ingest {
            input,
            output,
            codebook,
        } => cmd_ingest(cfg, &input, &output, codebook.or(paths.codebook.clone()).as_deref())?,
        Command::FitVq { inputs, output, .. } => {
            cmd_fit_vq(cfg, &inputs, &required(output, &paths.codebook, "codebook")?)?
        }
        Command::BuildBank { corpus, output } => cmd_build_bank(
            cfg,
            &required(corpus, &paths.corpus, "corpus")?,
            &required(output, &paths.bank, "bank")?,
        )?,
        Command::Transform { corpus, bank, output } => cmd_transform(
            cfg,
            &required(corpus, &paths.corpus, "corpus")?,
            &required(bank, &paths.bank, "bank")?,
            &output,
        )?,
        Command::Train { input, output } => cmd_train(cfg, &input, &required(output, &paths.model, "model")?)?,
        Command::Generate {
            model,
            bank,
            caption,
            caption_tokens,
            output,
            image_out,
            codebook,
        } => {
            let json = cmd_generate(
                cfg,
                &required(model, &paths.model, "model")?,
                bank.or(paths.bank.clone()).as_deref(),
                caption.as_deref(),
                caption_tokens.as_deref(),
                output.as_deref(),
                image_out.as_deref(),
                codebook.or(paths.codebook.clone()).as_deref(),
            )?;
            return Ok(output.is_none().then_some(json));
        }
        Command::Evaluate {
            report_dir,
            model,
            heldout,
        } => cmd_evaluate(
            cfg,
            &required(report_dir, &paths.report, "report")?,
            model.as_deref(),
            heldout.as_deref(),
        )?,
        Command::RenderSft {
            input,
            output,
            codebook,
        } => cmd_render_sft(cfg, &input, &output, codebook.or(paths.codebook.clone()).as_deref())?,
        Command::Synth { output, n_docs } => cmd_synth(cfg, &output, n_docs)?,
    }
    Ok(None)
}

/// Runs the command line `args` (program name first) and returns the exit code:
/// 0 on success, 1 on usage errors, 2 on data errors.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    1
                }
            };
        }
    };
    match dispatch(cli, std::env::var(THREADS_ENV).ok(), stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
