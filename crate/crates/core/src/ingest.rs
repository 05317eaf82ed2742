//! Loaders for real-world-shaped datasets: concept-annotation tables for
//! stage 1 and folder-per-class image trees for stage 2.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CaptionPair, Stage};
use crate::error::{Error, IoContext, Result};
use crate::synth::{stage1_caption, stage2_caption};
use crate::taxonomy::{ConceptTaxonomy, DiseaseTaxonomy, OTHERS};
use crate::tokenizer::pieces;
use crate::train::NO_CONCEPT_CAPTION;

/// Header-name overrides for tables whose columns do not use taxonomy
/// spellings, e.g. `{"hyperpigmentation": "Brown(Hyperpigmentation)"}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub image_column: Option<String>,
    pub concepts: HashMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSummary {
    pub rows: usize,
    pub pairs: usize,
    pub skipped: usize,
    pub skip_reasons: Vec<String>,
    /// Rows kept without any positive concept.
    pub flagged_empty: usize,
    /// Positive count per concept, taxonomy order, concepts present in the header only.
    pub counts: Vec<(String, usize)>,
    pub unknown_columns: Vec<String>,
}

impl ConceptSummary {
    pub fn count(&self, concept: &str) -> usize {
        self.counts.iter().find(|(c, _)| c == concept).map_or(0, |(_, n)| *n)
    }
}

/// First column (or the mapped one) is an image path relative to
/// `images_root`; other columns are 0/1 flags per concept.
pub fn load_concept_dataset(
    csv_path: &Path,
    images_root: &Path,
    taxonomy: &ConceptTaxonomy,
    mapping: &ColumnMapping,
) -> Result<(Vec<CaptionPair>, ConceptSummary)> {
    let file = std::fs::File::open(csv_path).at(csv_path)?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let image_col = match &mapping.image_column {
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("{}: no column {name:?}", csv_path.display())))?,
        None => 0,
    };
    let mut summary = ConceptSummary::default();
    let mut columns: Vec<(usize, usize)> = Vec::new();
    for (i, h) in header.iter().enumerate() {
        if i == image_col {
            continue;
        }
        let name = mapping.concepts.get(h).map(String::as_str).unwrap_or(h);
        match taxonomy.index_of(name) {
            Some(c) => columns.push((i, c)),
            None => {
                log::warn!("{}: column {h:?} is not a clinical concept, ignored", csv_path.display());
                summary.unknown_columns.push(h.clone());
            }
        }
    }
    let mut counts = vec![0usize; taxonomy.len()];
    let mut pairs = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        summary.rows += 1;
        let row = line + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                summary.skipped += 1;
                summary.skip_reasons.push(format!("line {row}: {e}"));
                continue;
            }
        };
        let image = rec.get(image_col).unwrap_or("").trim().to_string();
        if image.is_empty() || !images_root.join(&image).is_file() {
            summary.skipped += 1;
            summary.skip_reasons.push(format!("line {row}: image {image:?} not found"));
            continue;
        }
        let mut present = Vec::new();
        let mut bad = None;
        for &(col, concept) in &columns {
            match rec.get(col).map(str::trim) {
                Some("1") => present.push(concept),
                Some("0") | Some("") | None => {}
                Some(v) => bad = Some(format!("line {row}: flag {v:?} in column {:?} is not 0/1", header[col])),
            }
        }
        if let Some(reason) = bad {
            summary.skipped += 1;
            summary.skip_reasons.push(reason);
            continue;
        }
        present.sort_unstable();
        present.dedup();
        for &c in &present {
            counts[c] += 1;
        }
        let names: Vec<String> = present.iter().map(|&c| taxonomy.names()[c].clone()).collect();
        let mut pair = if names.is_empty() {
            summary.flagged_empty += 1;
            let mut p = CaptionPair::new(image, NO_CONCEPT_CAPTION, Stage::Concepts);
            p.flagged = true;
            p
        } else {
            CaptionPair::new(image, stage1_caption(&names), Stage::Concepts)
        };
        pair.concepts = names;
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no usable rows out of {} ({} skipped)",
            csv_path.display(),
            summary.rows,
            summary.skipped
        )));
    }
    let mut seen: Vec<usize> = columns.iter().map(|c| c.1).collect();
    seen.sort_unstable();
    seen.dedup();
    summary.counts = seen.into_iter().map(|c| (taxonomy.names()[c].clone(), counts[c])).collect();
    summary.pairs = pairs.len();
    Ok((pairs, summary))
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "webp"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir).at(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().at(dir)?;
    out.sort();
    Ok(out)
}

/// Class directories are often named `<class> Photos`.
fn class_of_dir(taxonomy: &DiseaseTaxonomy, name: &str) -> Option<String> {
    let trimmed = name.trim();
    let stripped = trimmed
        .len()
        .checked_sub(" photos".len())
        .filter(|&cut| trimmed.is_char_boundary(cut) && trimmed[cut..].eq_ignore_ascii_case(" photos"))
        .map_or(trimmed, |cut| &trimmed[..cut]);
    taxonomy.canonical(trimmed).or_else(|| taxonomy.canonical(stripped)).map(String::from)
}

/// First `max_tokens` pieces of `text`, rejoined.
fn truncate_pieces(text: &str, max_tokens: usize) -> Option<String> {
    let ps = pieces(text);
    if ps.len() <= max_tokens {
        return None;
    }
    let mut out = String::new();
    for p in &ps[..max_tokens] {
        match p.strip_prefix(crate::tokenizer::GLUE) {
            Some(rest) if !rest.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(p);
            }
        }
    }
    Some(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTreeSummary {
    /// Images per canonical class, in class-taxonomy order; classes without images are omitted.
    pub counts: Vec<(String, usize)>,
    pub notes_used: usize,
    pub notes_truncated: usize,
    pub warnings: Vec<String>,
}

impl ClassTreeSummary {
    pub fn count(&self, class: &str) -> usize {
        self.counts.iter().find(|(c, _)| c == class).map_or(0, |(_, n)| *n)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.1).sum()
    }
}

/// One subdirectory per class; unknown directories count as "Others". A
/// sidecar `<image>.txt` replaces the templated caption verbatim, cut to
/// `max_text_len` tokens.
pub fn load_class_tree(
    root: &Path,
    taxonomy: &DiseaseTaxonomy,
    max_text_len: usize,
) -> Result<(Vec<CaptionPair>, ClassTreeSummary)> {
    if !root.is_dir() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "class tree root is not a directory"),
        });
    }
    let mut summary = ClassTreeSummary::default();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pairs = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let class = match class_of_dir(taxonomy, &name) {
            Some(c) => c,
            None => {
                let w = format!("directory {name:?} is not a known class, mapped to {OTHERS}");
                log::warn!("{w}");
                summary.warnings.push(w);
                OTHERS.to_string()
            }
        };
        let idx = taxonomy.index_of(&class).expect("canonical class");
        let images: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
        if images.is_empty() {
            let w = format!("class directory {name:?} has no images");
            log::warn!("{w}");
            summary.warnings.push(w);
            continue;
        }
        for img in images {
            let rel = img.strip_prefix(root).unwrap_or(&img).to_string_lossy().replace('\\', "/");
            let note_path = PathBuf::from(format!("{}.txt", img.display()));
            let mut flagged = false;
            let text = if note_path.is_file() {
                summary.notes_used += 1;
                let note = std::fs::read_to_string(&note_path).at(&note_path)?;
                let note = note.trim().to_string();
                match truncate_pieces(&note, max_text_len) {
                    Some(cut) => {
                        summary.notes_truncated += 1;
                        flagged = true;
                        cut
                    }
                    None => note,
                }
            } else {
                stage2_caption(&class, &[])
            };
            let mut pair = CaptionPair::new(rel, text, Stage::Diagnosis);
            pair.class = Some(class.clone());
            pair.flagged = flagged;
            pairs.push(pair);
            *counts.entry(idx).or_default() += 1;
        }
    }
    summary.counts = counts.into_iter().map(|(i, n)| (taxonomy.names()[i].clone(), n)).collect();
    Ok((pairs, summary))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub per_source: Vec<usize>,
    pub merged: usize,
    pub duplicates: Vec<String>,
}

/// Concatenates sources in order, keeping the first pair for each image path.
pub fn merge_stage2(sources: &[Vec<CaptionPair>]) -> Result<(Vec<CaptionPair>, MergeReport)> {
    if sources.is_empty() {
        return Err(Error::Validation("merge needs at least one source".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut report = MergeReport::default();
    for src in sources {
        report.per_source.push(src.len());
        for p in src {
            if seen.insert(p.image.clone()) {
                out.push(p.clone());
            } else {
                log::warn!("duplicate image path {:?}, keeping the first", p.image);
                report.duplicates.push(p.image.clone());
            }
        }
    }
    report.merged = out.len();
    Ok((out, report))
}
