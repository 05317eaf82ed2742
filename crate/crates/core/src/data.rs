//! Caption pairs, the unit of training, and their JSONL form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::prompts::{CANONICAL_PROMPTS, DIAGNOSIS_QUERY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Concepts = 1,
    Diagnosis = 2,
}

impl Stage {
    /// Question the target text answers during training.
    pub fn prompt(self) -> &'static str {
        match self {
            Stage::Concepts => CANONICAL_PROMPTS[0],
            Stage::Diagnosis => DIAGNOSIS_QUERY,
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Concepts),
            2 => Ok(Stage::Diagnosis),
            other => Err(Error::Validation(format!("stage must be 1 (concept captions) or 2 (diagnosis notes), got {other}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

/// One (image, target text) example. Ground-truth fields are filled when the
/// source knows them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    /// Path as written in the record; relative paths resolve against the
    /// directory of the JSONL file.
    pub image: String,
    pub text: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concepts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    /// Set when the loader had to substitute or cut the text.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

impl CaptionPair {
    pub fn new(image: impl Into<String>, text: impl Into<String>, stage: Stage) -> Self {
        Self { image: image.into(), text: text.into(), stage, prompt: None, concepts: Vec::new(), class: None, flagged: false }
    }

    pub fn prompt_text(&self) -> &str {
        self.prompt.as_deref().unwrap_or(self.stage.prompt())
    }
}

/// Pairs loaded from disk together with the directory their paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub base: PathBuf,
    pub pairs: Vec<CaptionPair>,
}

impl PairSet {
    pub fn image_path(&self, pair: &CaptionPair) -> PathBuf {
        let p = Path::new(&pair.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn load_images(&self) -> Result<Vec<Image>> {
        self.pairs.iter().map(|p| Image::load(&self.image_path(p))).collect()
    }
}

pub fn write_jsonl(path: &Path, pairs: &[CaptionPair]) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

pub fn read_jsonl(path: &Path) -> Result<PairSet> {
    let file = File::open(path).at(path)?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: CaptionPair = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        pairs.push(pair);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(PairSet { base, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = CaptionPair::new("images/00000.png", "This image shows Erythema.", Stage::Concepts);
        a.concepts = vec!["Erythema".into()];
        let mut b = CaptionPair::new("/abs/x.png", "No clinical concept annotated.", Stage::Diagnosis);
        b.flagged = true;
        let path = dir.path().join("p.jsonl");
        write_jsonl(&path, &[a.clone(), b.clone()]).unwrap();
        let set = read_jsonl(&path).unwrap();
        assert_eq!(set.pairs, vec![a.clone(), b.clone()]);
        assert_eq!(set.image_path(&a), dir.path().join("images/00000.png"));
        assert_eq!(set.image_path(&b), PathBuf::from("/abs/x.png"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"stage\":1"));
    }

    #[test]
    fn rejects_unknown_stage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(&path, "{\"image\":\"a.png\",\"text\":\"t\",\"stage\":3}\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Validation(_))));
    }
}
