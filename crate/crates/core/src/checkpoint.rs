//! Single-file model archive.
//!
//! Layout: 8-byte magic, `u32` format version, then tagged sections, each a
//! 4-byte tag, a `u64` byte length and the payload. All integers and floats
//! are little-endian.
//!
//! | tag    | payload |
//! |--------|---------|
//! | `CONF` | canonical JSON `{"freeze": …, "model": …}` |
//! | `VOCB` | JSON `{"char_fallback": bool, "words": [...]}` |
//! | `TNSR` | JSON list of `{"name", "component", "rows", "cols"}` in storage order |
//! | `DATA` | concatenated `f32` tensor values |
//! | `TRST` | optional JSON training state |

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::{FreezeFlags, PipelineModel};
use crate::tensor::Mat;
use crate::tokenizer::Tokenizer;

pub const MAGIC: &[u8; 8] = b"DRMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Serialises any value as JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

#[derive(Serialize, Deserialize)]
struct ConfSection {
    model: ModelConfig,
    freeze: FreezeFlags,
}

#[derive(Serialize, Deserialize)]
struct VocabSection {
    char_fallback: bool,
    words: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    component: String,
    rows: usize,
    cols: usize,
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Archive bytes for a model and an optional training state.
pub fn to_bytes<S: Serialize>(model: &PipelineModel, state: Option<&S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let conf = canonical_json(&ConfSection { model: model.config().clone(), freeze: model.freeze })?;
    section(&mut out, b"CONF", conf.as_bytes());
    let tk = model.tokenizer();
    let vocab = canonical_json(&VocabSection { char_fallback: tk.char_fallback(), words: tk.words().to_vec() })?;
    section(&mut out, b"VOCB", vocab.as_bytes());
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (_, p) in model.params().iter() {
        entries.push(TensorEntry {
            name: p.name.clone(),
            component: p.component.name().to_string(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    section(&mut out, b"TNSR", canonical_json(&entries)?.as_bytes());
    section(&mut out, b"DATA", &blob);
    if let Some(s) = state {
        section(&mut out, b"TRST", canonical_json(s)?.as_bytes());
    }
    Ok(out)
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).at(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).at(dir)?;
    tmp.write_all(bytes).at(path)?;
    tmp.as_file().sync_all().at(path)?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn save<S: Serialize>(path: &Path, model: &PipelineModel, state: Option<&S>) -> Result<()> {
    write_atomic(path, &to_bytes(model, state)?)
}

/// A loaded archive; the training state stays raw until asked for.
pub struct Loaded {
    pub model: PipelineModel,
    state: Option<Vec<u8>>,
}

impl Loaded {
    pub fn has_state(&self) -> bool {
        self.state.is_some()
    }

    pub fn state<S: DeserializeOwned>(&self) -> Result<Option<S>> {
        self.state.as_deref().map(serde_json::from_slice).transpose().map_err(Error::from)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("archive is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Loaded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a model archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "archive format version {version} does not match supported version {FORMAT_VERSION}"
        )));
    }
    let (mut conf, mut vocab, mut tensors, mut data, mut state) = (None, None, None, None, None);
    while r.pos < bytes.len() {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let payload = r.take(len)?;
        match &tag {
            b"CONF" => conf = Some(payload),
            b"VOCB" => vocab = Some(payload),
            b"TNSR" => tensors = Some(payload),
            b"DATA" => data = Some(payload),
            b"TRST" => state = Some(payload.to_vec()),
            other => return Err(Error::Checkpoint(format!("unknown section {:?}", String::from_utf8_lossy(other)))),
        }
    }
    let missing = |name: &str| Error::Checkpoint(format!("missing {name} section"));
    let conf: ConfSection = serde_json::from_slice(conf.ok_or_else(|| missing("CONF"))?)?;
    let vocab: VocabSection = serde_json::from_slice(vocab.ok_or_else(|| missing("VOCB"))?)?;
    let entries: Vec<TensorEntry> = serde_json::from_slice(tensors.ok_or_else(|| missing("TNSR"))?)?;
    let data = data.ok_or_else(|| missing("DATA"))?;
    let need: usize = entries.iter().map(|e| e.rows * e.cols * 4).sum();
    if need != data.len() {
        return Err(Error::Checkpoint(format!("tensor data is {} bytes, manifest declares {need}", data.len())));
    }
    let mut off = 0;
    let mut mats = Vec::with_capacity(entries.len());
    for e in entries {
        let n = e.rows * e.cols;
        let vals = data[off..off + n * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        off += n * 4;
        mats.push((e.name, Mat::from_vec(e.rows, e.cols, vals)));
    }
    let tokenizer = Tokenizer::from_words(vocab.words, vocab.char_fallback)?;
    if conf.model.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Checkpoint(format!(
            "config vocab_size {} disagrees with stored vocabulary of {}",
            conf.model.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let mut model = PipelineModel::from_parts(conf.model, tokenizer, mats)?;
    model.freeze = conf.freeze;
    Ok(Loaded { model, state })
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).at(path)?;
    from_bytes(&bytes)
}
