//! On-disk formats: binary PGM images, codebook / memory bank / n-gram
//! artifacts, and JSONL record files.
//!
//! Every artifact starts with a six-byte magic whose last byte is the
//! format version; integers and floats are little-endian.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use cm3_core::ngram::NGramModel;
use cm3_core::retrieval::MemoryBank;
use cm3_core::vq::{Codebook, GrayImage};
use cm3_core::Document;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{PipelineError, Result};

pub const CODEBOOK_MAGIC: &[u8; 6] = b"CM3VQ1";
pub const BANK_MAGIC: &[u8; 6] = b"CM3MB1";
pub const MODEL_MAGIC: &[u8; 6] = b"CM3NG1";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PipelineError::io(path, e))
}

/// Writes through a sibling temp file so readers never see a partial artifact.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| PipelineError::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| PipelineError::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PipelineError::format(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 6]) -> Result<()> {
        let got = self
            .take(6)
            .map_err(|_| PipelineError::format(self.path, "file too short for a header"))?;
        if got[..5] != want[..5] {
            return Err(PipelineError::format(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        if got[5] != want[5] {
            return Err(PipelineError::format(
                self.path,
                format!(
                    "unsupported format version {:?} (this build reads version {:?})",
                    got[5] as char, want[5] as char
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(PipelineError::format(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| PipelineError::Config(format!("{what} {v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

// ---------------------------------------------------------------- PGM

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |msg: &str| PipelineError::format(path, format!("not a binary 8-bit PGM: {msg}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P5" {
        return Err(bad("missing P5 signature"));
    }
    let num = |f: &[u8], name: &str| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(&format!("invalid {name}")))
    };
    let (w, h, maxval) = (
        num(fields[1], "width")?,
        num(fields[2], "height")?,
        num(fields[3], "maxval")?,
    );
    if !(1..=255).contains(&maxval) {
        return Err(bad("maxval must be in 1..=255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("raster shorter than width x height"))?;
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&p| ((p.min(maxval as u8) as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
            .collect()
    };
    GrayImage::new(w, h, pixels).map_err(|e| PipelineError::format(path, e.to_string()))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path)?, path)
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(image))
}

// ---------------------------------------------------------------- codebook

pub fn encode_codebook(cb: &Codebook) -> Result<Vec<u8>> {
    let mut out = CODEBOOK_MAGIC.to_vec();
    put_u32(&mut out, cb.k(), "K")?;
    put_u32(&mut out, cb.patch_size(), "patch size")?;
    out.extend_from_slice(&cb.seed().to_le_bytes());
    for c in cb.centroids() {
        for x in c {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_codebook(bytes: &[u8], path: &Path) -> Result<Codebook> {
    let mut r = Reader::new(bytes, path);
    r.magic(CODEBOOK_MAGIC)?;
    let k = r.u32()? as usize;
    let patch = r.u32()? as usize;
    let seed = r.u32()?;
    let d = patch * patch;
    if k.checked_mul(d).is_none_or(|n| n * 4 != bytes.len() - 18) {
        return Err(PipelineError::format(
            path,
            format!("payload does not hold {k} centroids of {d} floats"),
        ));
    }
    let centroids = (0..k)
        .map(|_| (0..d).map(|_| r.f32()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Codebook::new(patch, seed, centroids).map_err(|e| PipelineError::format(path, e.to_string()))
}

pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    write_bytes(path, &encode_codebook(cb)?)
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    decode_codebook(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------- memory bank

pub fn encode_bank(bank: &MemoryBank) -> Result<Vec<u8>> {
    let mut out = BANK_MAGIC.to_vec();
    put_u32(&mut out, bank.len(), "bank size")?;
    put_u32(&mut out, bank.dim(), "embedding dim")?;
    out.extend_from_slice(&bank.embedder_seed().to_le_bytes());
    for x in bank.embeddings() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend(jsonl_bytes(bank.docs())?);
    Ok(out)
}

pub fn decode_bank(bytes: &[u8], path: &Path) -> Result<MemoryBank> {
    let mut r = Reader::new(bytes, path);
    r.magic(BANK_MAGIC)?;
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let seed = r.u32()?;
    let floats = n
        .checked_mul(dim)
        .filter(|&f| f * 4 <= bytes.len() - 18)
        .ok_or_else(|| PipelineError::format(path, format!("payload too short for {n} x {dim} embeddings")))?;
    let emb = (0..floats).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let docs: Vec<Document> = parse_jsonl(r.rest(), path)?;
    if docs.len() != n {
        return Err(PipelineError::format(
            path,
            format!("header says {n} documents, found {}", docs.len()),
        ));
    }
    MemoryBank::from_parts(docs, dim, seed, emb).map_err(|e| PipelineError::format(path, e.to_string()))
}

pub fn write_bank(path: &Path, bank: &MemoryBank) -> Result<()> {
    write_bytes(path, &encode_bank(bank)?)
}

pub fn read_bank(path: &Path) -> Result<MemoryBank> {
    decode_bank(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------- n-gram model

/// Header: order, V (u32), delta (f64 bits), entry count (u32); then per
/// entry the context length, context tokens, token and count as u32.
pub fn encode_model(model: &NGramModel) -> Result<Vec<u8>> {
    let mut out = MODEL_MAGIC.to_vec();
    put_u32(&mut out, model.order(), "order")?;
    out.extend_from_slice(&model.vocab_size_u32().to_le_bytes());
    out.extend_from_slice(&model.delta().to_bits().to_le_bytes());
    put_u32(&mut out, model.n_entries(), "entry count")?;
    for (ctx, tok, n) in model.entries() {
        put_u32(&mut out, ctx.len(), "context length")?;
        for t in ctx {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&tok.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<NGramModel> {
    let mut r = Reader::new(bytes, path);
    r.magic(MODEL_MAGIC)?;
    let order = r.u32()? as usize;
    let v = r.u32()?;
    let delta = f64::from_bits(r.u64()?);
    let n = r.u32()?;
    let bad = |e: cm3_core::Error| PipelineError::format(path, e.to_string());
    let mut model = NGramModel::empty(order, v, delta).map_err(bad)?;
    let mut ctx = Vec::with_capacity(order);
    for _ in 0..n {
        let len = r.u32()? as usize;
        if len >= order {
            return Err(PipelineError::format(
                path,
                format!("context of {len} tokens in an order-{order} model"),
            ));
        }
        ctx.clear();
        for _ in 0..len {
            ctx.push(r.u32()?);
        }
        let tok = r.u32()?;
        let count = r.u32()?;
        model.add_count(&ctx, tok, count).map_err(bad)?;
    }
    r.finish()?;
    Ok(model)
}

pub fn write_model(path: &Path, model: &NGramModel) -> Result<()> {
    write_bytes(path, &encode_model(model)?)
}

pub fn read_model(path: &Path) -> Result<NGramModel> {
    decode_model(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------- JSONL

pub fn jsonl_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| PipelineError::Config(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Parses one record per non-blank line; errors carry the line number.
pub fn parse_jsonl<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(bytes).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::format(path, format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| PipelineError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(&read_bytes(path)?, path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_bytes(path, &jsonl_bytes(records)?)
}

/// Pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::Config(e.to_string()))?;
    out.write_all(b"\n").expect("vec write");
    write_bytes(path, &out)
}
