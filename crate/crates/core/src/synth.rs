//! Synthetic corpus with planted, pixel-decodable concept motifs.
//!
//! Each image is split into four quadrants. A planted concept occupies one
//! quadrant as a coloured shape on a skin-tone background; colour and shape
//! together identify the concept. [`decode_oracle`] recovers the concepts
//! from pixel statistics alone.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, CaptionPair, Stage};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::taxonomy::{ConceptTaxonomy, DiseaseTaxonomy};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colour {
    Red,
    Brown,
    White,
    Yellow,
}

impl Colour {
    pub const ALL: [Colour; 4] = [Colour::Red, Colour::Brown, Colour::White, Colour::Yellow];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Colour::Red => [200, 40, 40],
            Colour::Brown => [110, 60, 20],
            Colour::White => [245, 245, 245],
            Colour::Yellow => [230, 200, 40],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Ring,
    Dots,
    Stripes,
}

pub const SKIN: [u8; 3] = [224, 172, 140];
const BACKGROUND_NOISE: i32 = 8;
const COLOUR_JITTER: i32 = 12;
/// A pixel belongs to a palette colour when it is closer to it than this.
const MATCH_RADIUS: f32 = 50.0;

/// Concept ↔ motif table. Every (colour, shape) pair is used at most once.
pub const MOTIFS: [(&str, Colour, Shape); 15] = [
    ("Erythema", Colour::Red, Shape::Disk),
    ("Plaque", Colour::Brown, Shape::Ring),
    ("Papule", Colour::Red, Shape::Dots),
    ("Brown(Hyperpigmentation)", Colour::Brown, Shape::Disk),
    ("White(Hypopigmentation)", Colour::White, Shape::Disk),
    ("Yellow", Colour::Yellow, Shape::Disk),
    ("Scale", Colour::White, Shape::Stripes),
    ("Crust", Colour::Yellow, Shape::Stripes),
    ("Pustule", Colour::Yellow, Shape::Dots),
    ("Nodule", Colour::Brown, Shape::Dots),
    ("Ulcer", Colour::Red, Shape::Ring),
    ("Vesicle", Colour::White, Shape::Dots),
    ("Erosion", Colour::Red, Shape::Stripes),
    ("Lichenification", Colour::Brown, Shape::Stripes),
    ("Scar", Colour::White, Shape::Ring),
];

/// Default planted concepts: the first twelve motifs.
pub fn default_concepts() -> Vec<String> {
    MOTIFS[..12].iter().map(|m| m.0.to_string()).collect()
}

/// Disease classes and the concepts that imply them. Groups are disjoint, so
/// the class of an image is the group its concepts come from.
pub const RULE_GROUPS: [(&str, &[&str]); 6] = [
    ("Acne and Rosacea", &["Erythema", "Papule", "Pustule"]),
    ("Psoriasis and Lichen Planus", &["Plaque", "Scale"]),
    ("Bullous Disease", &["Vesicle", "Crust", "Ulcer"]),
    ("Melanoma Skin Cancer, Nevi, Moles", &["Brown(Hyperpigmentation)", "Nodule"]),
    ("Light Diseases (vitiligo, sun damaged skin, etc.)", &["White(Hypopigmentation)", "Yellow"]),
    (
        "Dermatitis (Atopic Dermatitis, Eczema, Exanthems, Drug Eruptions, Contact Dermatitis, etc.)",
        &["Erosion", "Lichenification", "Scar"],
    ),
];

pub fn motif_of(concept: &str) -> Option<(Colour, Shape)> {
    let tax = ConceptTaxonomy::default();
    let canon = tax.canonical(concept)?;
    MOTIFS.iter().find(|m| m.0 == canon).map(|m| (m.1, m.2))
}

fn concept_of(colour: Colour, shape: Shape) -> Option<&'static str> {
    MOTIFS.iter().find(|m| m.1 == colour && m.2 == shape).map(|m| m.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleClass {
    pub class: String,
    pub concepts: Vec<String>,
}

/// Concept set → disease class, restricted to the supported concepts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisRule {
    pub classes: Vec<RuleClass>,
}

impl DiagnosisRule {
    pub fn for_concepts(supported: &[String]) -> Result<Self> {
        let tax = ConceptTaxonomy::default();
        let mut canon = Vec::new();
        for c in supported {
            let name = tax.canonical(c).ok_or_else(|| Error::InvalidInput(format!("{c:?} is not a clinical concept")))?;
            if motif_of(name).is_none() {
                return Err(Error::InvalidInput(format!("no synthetic motif for concept {name:?}")));
            }
            canon.push(name);
        }
        let classes = RULE_GROUPS
            .iter()
            .filter_map(|(class, group)| {
                let members: Vec<String> = tax
                    .names()
                    .iter()
                    .filter(|n| group.contains(&n.as_str()) && canon.contains(&n.as_str()))
                    .cloned()
                    .collect();
                (!members.is_empty()).then(|| RuleClass { class: class.to_string(), concepts: members })
            })
            .collect();
        Ok(Self { classes })
    }

    /// The class implied by a concept set, if all concepts share one group.
    pub fn classify<S: AsRef<str>>(&self, concepts: &[S]) -> Option<&str> {
        let first = concepts.first()?;
        let rc = self.classes.iter().find(|rc| rc.concepts.iter().any(|c| c == first.as_ref()))?;
        concepts
            .iter()
            .all(|c| rc.concepts.iter().any(|x| x == c.as_ref()))
            .then_some(rc.class.as_str())
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.class.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_images: usize,
    pub min_concepts: usize,
    pub max_concepts: usize,
    pub supported_concepts: Vec<String>,
    pub image_size: usize,
    pub seed: u64,
    pub class_balance: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 200,
            min_concepts: 1,
            max_concepts: 3,
            supported_concepts: default_concepts(),
            image_size: 64,
            seed: 0,
            class_balance: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::InvalidInput("n_images must be at least 1".into()));
        }
        if self.min_concepts == 0 || self.min_concepts > self.max_concepts || self.max_concepts > 3 {
            return Err(Error::InvalidInput(format!(
                "concepts per image must satisfy 1 <= min <= max <= 3, got {}..={}",
                self.min_concepts, self.max_concepts
            )));
        }
        if self.image_size < 32 || self.image_size % 2 != 0 {
            return Err(Error::InvalidInput(format!("image_size must be even and at least 32, got {}", self.image_size)));
        }
        if self.supported_concepts.is_empty() {
            return Err(Error::InvalidInput("no supported concepts".into()));
        }
        DiagnosisRule::for_concepts(&self.supported_concepts).map(|_| ())
    }
}

/// Ground truth for one generated image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedImage {
    pub index: usize,
    pub image: String,
    /// Taxonomy order.
    pub concepts: Vec<String>,
    pub class: String,
    /// Quadrant (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right) per concept.
    pub quadrants: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub rule: DiagnosisRule,
    pub images: Vec<PlantedImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub images: Vec<Image>,
    pub stage1: Vec<CaptionPair>,
    pub stage2: Vec<CaptionPair>,
    pub manifest: SynthManifest,
}

pub fn stage1_caption(concepts: &[String]) -> String {
    format!("This image shows {}.", concepts.join(", "))
}

/// Diagnosis note naming the class and the planted concepts in taxonomy order.
pub fn stage2_caption(class: &str, concepts: &[String]) -> String {
    if concepts.is_empty() {
        format!("The diagnosis is {class}.")
    } else {
        format!("The diagnosis is {class}. Features include {}.", concepts.join(", "))
    }
}

pub fn image_name(index: usize) -> String {
    format!("images/{index:05}.png")
}

pub fn generate_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let tax = ConceptTaxonomy::default();
    let rule = DiagnosisRule::for_concepts(&spec.supported_concepts)?;
    let mut images = Vec::with_capacity(spec.n_images);
    let mut planted = Vec::with_capacity(spec.n_images);
    for index in 0..spec.n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64);
        let group = if spec.class_balance {
            &rule.classes[index % rule.classes.len()]
        } else {
            &rule.classes[rng.gen_range(0..rule.classes.len())]
        };
        let k = rng.gen_range(spec.min_concepts..=spec.max_concepts).min(group.concepts.len());
        let chosen: Vec<String> = group.concepts.choose_multiple(&mut rng, k).cloned().collect();
        let mut quads = [0usize, 1, 2, 3];
        quads.shuffle(&mut rng);
        let mut img = background(spec.image_size, &mut rng);
        let mut quadrants = BTreeMap::new();
        for (c, &q) in chosen.iter().zip(&quads) {
            let (colour, shape) = motif_of(c).expect("validated");
            draw_motif(&mut img, q, colour, shape, &mut rng);
            quadrants.insert(c.clone(), q);
        }
        let concepts: Vec<String> =
            tax.ordered(chosen.iter().map(String::as_str))?.into_iter().map(String::from).collect();
        images.push(img);
        planted.push(PlantedImage { index, image: image_name(index), concepts, class: group.class.clone(), quadrants });
    }
    let mut stage1 = Vec::new();
    let mut stage2 = Vec::new();
    for p in &planted {
        let mut a = CaptionPair::new(&p.image, stage1_caption(&p.concepts), Stage::Concepts);
        a.concepts = p.concepts.clone();
        a.class = Some(p.class.clone());
        let mut b = CaptionPair::new(&p.image, stage2_caption(&p.class, &p.concepts), Stage::Diagnosis);
        b.concepts = p.concepts.clone();
        b.class = Some(p.class.clone());
        stage1.push(a);
        stage2.push(b);
    }
    let manifest = SynthManifest { format_version: MANIFEST_VERSION, spec: spec.clone(), rule, images: planted };
    Ok(Corpus { images, stage1, stage2, manifest })
}

impl Corpus {
    /// Writes `images/NNNNN.png`, `stage1.jsonl`, `stage2.jsonl` and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).at(&img_dir)?;
        for (img, p) in self.images.iter().zip(&self.manifest.images) {
            img.save_png(&dir.join(&p.image))?;
        }
        write_jsonl(&dir.join("stage1.jsonl"), &self.stage1)?;
        write_jsonl(&dir.join("stage2.jsonl"), &self.stage2)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?).at(&path)
    }
}

/// Reads back a directory written by `Corpus::write`.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    let images = manifest.images.iter().map(|p| Image::load(&dir.join(&p.image))).collect::<Result<Vec<_>>>()?;
    let stage1 = crate::data::read_jsonl(&dir.join("stage1.jsonl"))?.pairs;
    let stage2 = crate::data::read_jsonl(&dir.join("stage2.jsonl"))?.pairs;
    if stage1.len() != images.len() || stage2.len() != images.len() {
        return Err(Error::Validation(format!(
            "{}: {} images but {} stage-1 and {} stage-2 pairs",
            dir.display(),
            images.len(),
            stage1.len(),
            stage2.len()
        )));
    }
    Ok(Corpus { images, stage1, stage2, manifest })
}

pub fn read_manifest(path: &Path) -> Result<SynthManifest> {
    let bytes = std::fs::read(path).at(path)?;
    let m: SynthManifest = serde_json::from_slice(&bytes)?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Validation(format!(
            "manifest format {} is not supported (expected {MANIFEST_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(size, size, SKIN);
    for y in 0..size {
        for x in 0..size {
            let px = SKIN.map(|c| jitter(c, BACKGROUND_NOISE, rng));
            img.put(x, y, px);
        }
    }
    img
}

fn jitter(c: u8, amount: i32, rng: &mut ChaCha8Rng) -> u8 {
    (c as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8
}

/// Pixel offsets of a motif inside a quadrant of side `s`, relative to the
/// quadrant's top-left corner.
fn motif_pixels(shape: Shape, s: usize, cx: f32, cy: f32) -> Vec<(usize, usize)> {
    let sf = s as f32;
    let mut out = Vec::new();
    let inside = |x: usize, y: usize, f: &dyn Fn(f32, f32) -> bool| f(x as f32 + 0.5, y as f32 + 0.5);
    let disk = |r: f32| move |px: f32, py: f32| (px - cx).powi(2) + (py - cy).powi(2) <= r * r;
    for y in 0..s {
        for x in 0..s {
            let hit = match shape {
                Shape::Disk => inside(x, y, &disk(0.3 * sf)),
                Shape::Ring => inside(x, y, &disk(0.34 * sf)) && !inside(x, y, &disk(0.2 * sf)),
                Shape::Dots => {
                    let r = 0.07 * sf;
                    let (dx, dy) = (0.22 * sf, 0.24 * sf);
                    (0..3).any(|i| {
                        (0..2).any(|j| {
                            let ox = cx + (i as f32 - 1.0) * dx;
                            let oy = cy + (j as f32 - 0.5) * dy;
                            inside(x, y, &|px, py| (px - ox).powi(2) + (py - oy).powi(2) <= r * r)
                        })
                    })
                }
                Shape::Stripes => {
                    let half_w = 0.35 * sf;
                    let h = 0.1 * sf;
                    let gap = 0.22 * sf;
                    let px = x as f32 + 0.5;
                    let py = y as f32 + 0.5;
                    (px - cx).abs() <= half_w && (-1..=1).any(|i| (py - (cy + i as f32 * gap)).abs() <= h / 2.0)
                }
            };
            if hit {
                out.push((x, y));
            }
        }
    }
    out
}

fn draw_motif(img: &mut Image, quadrant: usize, colour: Colour, shape: Shape, rng: &mut ChaCha8Rng) {
    let s = img.width() / 2;
    let (ox, oy) = ((quadrant % 2) * s, (quadrant / 2) * s);
    let shift = (s as f32 * 0.08).floor();
    let cx = s as f32 / 2.0 + rng.gen_range(-shift..=shift).round();
    let cy = s as f32 / 2.0 + rng.gen_range(-shift..=shift).round();
    let base = colour.rgb().map(|c| jitter(c, COLOUR_JITTER, rng));
    for (x, y) in motif_pixels(shape, s, cx, cy) {
        img.put(ox + x, oy + y, base.map(|c| jitter(c, 4, rng)));
    }
}

fn nearest_palette(px: [u8; 3]) -> Option<Option<Colour>> {
    let dist = |c: [u8; 3]| -> f32 {
        px.iter().zip(c).map(|(&a, b)| (a as f32 - b as f32).powi(2)).sum::<f32>().sqrt()
    };
    let mut best = (dist(SKIN), None);
    for c in Colour::ALL {
        let d = dist(c.rgb());
        if d < best.0 {
            best = (d, Some(c));
        }
    }
    (best.0 < MATCH_RADIUS).then_some(best.1)
}

/// Recovers the planted concepts of a generated image from pixel statistics.
pub fn decode_oracle(image: &Image) -> Result<Vec<String>> {
    let size = image.width();
    if image.height() != size || size < 32 || size % 2 != 0 {
        return Err(Error::OracleInapplicable(format!("{}x{} is not a generated raster", size, image.height())));
    }
    let labels: Vec<Option<Option<Colour>>> = (0..size * size).map(|i| nearest_palette(image.pixel(i % size, i / size))).collect();
    let skin = labels.iter().filter(|l| matches!(l, Some(None))).count();
    if (skin as f32) < 0.2 * (size * size) as f32 {
        return Err(Error::OracleInapplicable("too few background pixels for a generated image".into()));
    }
    let s = size / 2;
    let mut found = Vec::new();
    for q in 0..4 {
        let (ox, oy) = ((q % 2) * s, (q / 2) * s);
        let at = |x: usize, y: usize| labels[(oy + y) * size + ox + x];
        let mut counts = [0usize; 4];
        for y in 0..s {
            for x in 0..s {
                if let Some(Some(c)) = at(x, y) {
                    counts[c as usize] += 1;
                }
            }
        }
        let (ci, &n) = counts.iter().enumerate().max_by_key(|(_, n)| **n).unwrap();
        if n < s * s / 100 {
            continue;
        }
        let colour = Colour::ALL[ci];
        let mask: Vec<bool> = (0..s * s).map(|i| at(i % s, i / s) == Some(Some(colour))).collect();
        let comps = components(&mask, s);
        let big: Vec<&Vec<usize>> = comps.iter().filter(|c| c.len() >= 3).collect();
        let shape = match big.len() {
            0 => continue,
            1 => {
                let c = big[0];
                let (sx, sy) = c.iter().fold((0usize, 0usize), |(a, b), &i| (a + i % s, b + i / s));
                let (mx, my) = (sx / c.len(), sy / c.len());
                if mask[my * s + mx] {
                    Shape::Disk
                } else {
                    Shape::Ring
                }
            }
            2 | 3 => Shape::Stripes,
            _ => Shape::Dots,
        };
        if let Some(name) = concept_of(colour, shape) {
            found.push(name);
        }
    }
    let tax = ConceptTaxonomy::default();
    Ok(tax.ordered(found)?.into_iter().map(String::from).collect())
}

/// 4-connected components of a square mask, as lists of flat indices.
fn components(mask: &[bool], s: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = (i % s, i / s);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < s {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - s);
            }
            if y + 1 < s {
                visit(i + s);
            }
        }
        out.push(comp);
    }
    out
}

/// Class names of the rule table, in the order of `DiseaseTaxonomy`.
pub fn rule_classes_in_taxonomy_order(rule: &DiagnosisRule) -> Vec<String> {
    let d = DiseaseTaxonomy::default();
    let mut names: Vec<String> = rule.class_names().into_iter().map(String::from).collect();
    names.sort_by_key(|n| d.index_of(n));
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motifs_are_distinct_and_in_taxonomy() {
        let tax = ConceptTaxonomy::default();
        for (i, a) in MOTIFS.iter().enumerate() {
            assert_eq!(tax.canonical(a.0), Some(a.0));
            for b in &MOTIFS[i + 1..] {
                assert!((a.1, a.2) != (b.1, b.2), "{} and {} share a motif", a.0, b.0);
            }
        }
        let d = DiseaseTaxonomy::default();
        for (class, _) in RULE_GROUPS {
            assert_eq!(d.canonical(class), Some(class));
        }
    }

    #[test]
    fn rule_groups_are_disjoint() {
        let mut all: Vec<&str> = RULE_GROUPS.iter().flat_map(|g| g.1.iter().copied()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        let rule = DiagnosisRule::for_concepts(&default_concepts()).unwrap();
        assert_eq!(rule.classes.len(), 5);
        assert_eq!(rule.classify(&["Papule", "Erythema"]), Some("Acne and Rosacea"));
        assert_eq!(rule.classify(&["Papule", "Plaque"]), None);
    }

    #[test]
    fn unsupported_concepts_are_rejected() {
        let spec = SynthSpec { supported_concepts: vec!["Cyst".into()], ..SynthSpec::default() };
        assert!(matches!(generate_corpus(&spec), Err(Error::InvalidInput(_))));
        let spec = SynthSpec { supported_concepts: vec!["Sunburn".into()], ..SynthSpec::default() };
        assert!(matches!(generate_corpus(&spec), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn every_motif_decodes_in_every_quadrant() {
        for &(name, colour, shape) in &MOTIFS {
            for q in 0..4 {
                let mut rng = ChaCha8Rng::seed_from_u64(q as u64);
                let mut img = background(64, &mut rng);
                draw_motif(&mut img, q, colour, shape, &mut rng);
                assert_eq!(decode_oracle(&img).unwrap(), vec![name.to_string()], "{name} in quadrant {q}");
            }
        }
    }

    #[test]
    fn black_image_is_not_synthetic() {
        assert!(matches!(decode_oracle(&Image::new(64, 64, [0, 0, 0])), Err(Error::OracleInapplicable(_))));
        assert!(matches!(decode_oracle(&Image::new(64, 32, SKIN)), Err(Error::OracleInapplicable(_))));
        assert_eq!(decode_oracle(&Image::new(64, 64, SKIN)).unwrap(), Vec::<String>::new());
    }
}
