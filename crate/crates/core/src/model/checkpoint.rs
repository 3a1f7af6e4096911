//! `RDL1` checkpoint container.
//!
//! Layout: magic, u32 header length, header text (`key=value` lines), u32
//! vocabulary length, vocabulary text, u32 tensor count, tensors (u16 name
//! length, name, u8 group, u8 rank, u32 dims, f32 LE data), and a trailing
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Group, Model, ModelConfig, ParamTensor, Params, SlotInput};
use crate::dataset::render_ground_truth;
use crate::error::{Error, Result};
use crate::imgedit::{apply_spec, synth_image, EditOp, EditSpec, Image};
use crate::prompting::{assemble, render_template, PromptSet, PromptStyle, TemplateSet, TokenVocab};

pub const MAGIC: &[u8; 4] = b"RDL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: TokenVocab,
    pub step: usize,
    /// Free-form metadata: validation metrics, experiment, prompt style.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(&format!("format_version={FORMAT_VERSION}\n"));
        for (k, v) in self.model.config.to_pairs() {
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(&format!("step={}\n", self.step));
        header.push_str(&format!("vocab_fingerprint={}\n", self.vocab.fingerprint()));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        let vocab = self.vocab.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_block(&mut out, header.as_bytes());
        put_block(&mut out, vocab.as_bytes());
        out.extend_from_slice(&(self.model.params.tensors.len() as u32).to_le_bytes());
        for t in &self.model.params.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.group.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not an RDL1 checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let header = r.text_block()?;
        let vocab_text = r.text_block()?;
        let mut pairs = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line `{line}`")))?;
            match k.strip_prefix("meta.") {
                Some(mk) => meta.insert(mk.to_string(), v.to_string()),
                None => pairs.insert(k.to_string(), v.to_string()),
            };
        }
        let version: u32 = header_value(&pairs, "format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let step = header_value(&pairs, "step")?;
        let fingerprint: String = header_value(&pairs, "vocab_fingerprint")?;
        let vocab = TokenVocab::from_text(&vocab_text)?;
        if vocab.fingerprint() != fingerprint {
            return Err(Error::Fingerprint {
                expected: fingerprint,
                found: vocab.fingerprint(),
            });
        }
        let config = ModelConfig::from_pairs(&pairs)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let group = Group::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("bad group for {name}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(ParamTensor { name, group, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        let model = Model::from_params(config, Params { tensors })?;
        if model.config.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model vocabulary {} does not match stored vocabulary {}",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Checkpoint { model, vocab, step, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the stored vocabulary against `vocab`.
    pub fn load_for(path: &Path, vocab: &TokenVocab) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.vocab.fingerprint() != vocab.fingerprint() {
            return Err(Error::Fingerprint {
                expected: vocab.fingerprint(),
                found: ckpt.vocab.fingerprint(),
            });
        }
        Ok(ckpt)
    }
}

fn header_value<V: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<V> {
    pairs
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("header is missing {key}")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad header value for {key}")))
}

fn put_block(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn text_block(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }
}

/// The fixed sample used for probe dumps and round-trip checks.
pub struct ProbeBatch {
    pub source: Image,
    pub edited: Image,
    pub sample: crate::prompting::EncodedSample,
}

pub fn probe_batch(vocab: &TokenVocab, k: usize) -> Result<ProbeBatch> {
    let spec = EditSpec::new(vec![EditOp::named("brightness", 0.5)?, EditOp::named("hue", -0.2)?])?;
    let source = synth_image(0x9e0b);
    let edited = apply_spec(&source, &spec)?;
    let template = PromptSet::builtin()
        .get(TemplateSet::WithCommand, 1)
        .ok_or_else(|| Error::Template("missing builtin template".into()))?;
    let prompt = render_template(template, Some("Please make it brighter"), PromptStyle::Plain);
    let sample = assemble(
        vocab,
        &vocab.tokenize(&prompt),
        &vocab.tokenize(&render_ground_truth(&spec)),
        k,
        true,
    )?;
    Ok(ProbeBatch { source, edited, sample })
}

/// Probe logits as lowercase hex of their f32 LE bytes, one position per line.
pub fn probe_hex(model: &Model<f32>, vocab: &TokenVocab) -> Result<String> {
    let probe = probe_batch(vocab, model.config.k)?;
    let logits = model.forward(
        &probe.sample.token_ids,
        &probe.sample.image_slots,
        SlotInput::Images([&probe.source, &probe.edited]),
    )?;
    let mut out = String::new();
    for row in logits.chunks_exact(model.config.vocab_size) {
        let bytes: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.push_str(&hex::encode(bytes));
        out.push('\n');
    }
    Ok(out)
}
