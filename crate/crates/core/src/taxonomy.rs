//! Clinical concept and disease class vocabularies.

use crate::error::{Error, Result};

/// The 48 clinical concepts.
pub const CONCEPTS: [&str; 48] = [
    "Vesicle",
    "Papule",
    "Macule",
    "Plaque",
    "Abscess",
    "Pustule",
    "Bulla",
    "Patch",
    "Nodule",
    "Ulcer",
    "Crust",
    "Erosion",
    "Excoriation",
    "Atrophy",
    "Exudate",
    "Purpura/Petechiae",
    "Fissure",
    "Induration",
    "Xerosis",
    "Telangiectasia",
    "Scale",
    "Scar",
    "Friable",
    "Sclerosis",
    "Pedunculated",
    "Exophytic/Fungating",
    "Warty/Papillomatous",
    "Dome-shaped",
    "Flat topped",
    "Brown(Hyperpigmentation)",
    "Translucent",
    "White(Hypopigmentation)",
    "Purple",
    "Yellow",
    "Black",
    "Erythema",
    "Comedo",
    "Lichenification",
    "Blue",
    "Umbilicated",
    "Poikiloderma",
    "Salmon",
    "Wheal",
    "Acuminate",
    "Burrow",
    "Gray",
    "Pigmented",
    "Cyst",
];

/// The 15 major disease classes followed by the catch-all class.
pub const DISEASE_CLASSES: [&str; 16] = [
    "Acne and Rosacea",
    "Malignant Lesions (Actinic Keratosis, Basal Cell Carcinoma, etc.)",
    "Dermatitis (Atopic Dermatitis, Eczema, Exanthems, Drug Eruptions, Contact Dermatitis, etc.)",
    "Bullous Disease",
    "Bacterial Infections (Cellulitis, Impetigo, etc.)",
    "Light Diseases (vitiligo, sun damaged skin, etc.)",
    "Connective Tissue diseases (Lupus, etc.)",
    "Benign Tumors (Seborrheic Keratoses, etc.)",
    "Melanoma Skin Cancer, Nevi, Moles",
    "Fungal Infections (Nail Fungus, Tinea Ringworm, Candidiasis, etc.)",
    "Psoriasis and Lichen Planus",
    "Infestations and Bites (Scabies, Lyme Disease, etc.)",
    "Urticaria Hives",
    "Vascular Tumors",
    "Herpes",
    "Others",
];

pub const OTHERS: &str = "Others";

/// Lowercased with spaces, hyphens and underscores dropped, so that
/// "Flat-topped", "flat topped" and "Brown (Hyperpigmentation)" all match.
fn fold(name: &str) -> String {
    name.chars()
        .filter(|c| !matches!(c, ' ' | '-' | '_'))
        .flat_map(char::to_lowercase)
        .collect()
}

/// Text before the first parenthesis, trimmed: the part of a class name a
/// reply has to contain to count as naming it.
pub fn short_name(class: &str) -> &str {
    class.split('(').next().unwrap_or(class).trim()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptTaxonomy {
    names: Vec<String>,
}

impl Default for ConceptTaxonomy {
    fn default() -> Self {
        Self { names: CONCEPTS.iter().map(|s| s.to_string()).collect() }
    }
}

impl ConceptTaxonomy {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Position of a concept, ignoring case, spacing and hyphenation.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let key = fold(name);
        self.names.iter().position(|n| fold(n) == key)
    }

    /// Canonical spelling of `name`.
    pub fn canonical(&self, name: &str) -> Option<&str> {
        self.index_of(name).map(|i| self.names[i].as_str())
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::InvalidInput(format!("unknown clinical concept {name:?}")))
    }

    /// Sorts and deduplicates concepts into taxonomy order.
    pub fn ordered<'a>(&'a self, names: impl IntoIterator<Item = &'a str>) -> Result<Vec<&'a str>> {
        let mut idx: Vec<usize> = names.into_iter().map(|n| self.require(n)).collect::<Result<_>>()?;
        idx.sort_unstable();
        idx.dedup();
        Ok(idx.into_iter().map(|i| self.names[i].as_str()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiseaseTaxonomy {
    names: Vec<String>,
}

impl Default for DiseaseTaxonomy {
    fn default() -> Self {
        Self { names: DISEASE_CLASSES.iter().map(|s| s.to_string()).collect() }
    }
}

impl DiseaseTaxonomy {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Matches either the full class name or its short name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let key = fold(name);
        self.names.iter().position(|n| fold(n) == key || fold(short_name(n)) == key)
    }

    pub fn canonical(&self, name: &str) -> Option<&str> {
        self.index_of(name).map(|i| self.names[i].as_str())
    }

    /// Canonical class for a directory or label, falling back to "Others".
    pub fn resolve_or_others(&self, name: &str) -> &str {
        self.canonical(name).unwrap_or(OTHERS)
    }
}

/// Whether `text` names `class`: its short name occurs, ignoring case.
pub fn names_class(text: &str, class: &str) -> bool {
    text.to_lowercase().contains(&short_name(class).to_lowercase())
}

/// Concepts from `candidates` that occur in `text` as whole words, ignoring case.
pub fn mentioned_concepts<'a>(text: &str, candidates: &'a [String]) -> Vec<&'a str> {
    let lower = text.to_lowercase();
    candidates
        .iter()
        .filter(|c| {
            let needle = c.to_lowercase();
            lower.match_indices(&needle).any(|(i, _)| {
                let before = lower[..i].chars().next_back();
                let after = lower[i + needle.len()..].chars().next();
                !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
            })
        })
        .map(|c| c.as_str())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_uniqueness() {
        let c = ConceptTaxonomy::default();
        let d = DiseaseTaxonomy::default();
        assert_eq!(c.len(), 48);
        assert_eq!(d.len(), 16);
        let mut names: Vec<String> = c.names().iter().map(|n| fold(n)).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 48);
        assert_eq!(d.names().last().map(String::as_str), Some(OTHERS));
    }

    #[test]
    fn lookup_is_tolerant_but_canonical() {
        let c = ConceptTaxonomy::default();
        assert_eq!(c.canonical("erythema"), Some("Erythema"));
        assert_eq!(c.canonical("Flat-topped"), Some("Flat topped"));
        assert_eq!(c.canonical("Brown (Hyperpigmentation)"), Some("Brown(Hyperpigmentation)"));
        assert_eq!(c.canonical("Dome shaped"), Some("Dome-shaped"));
        assert!(c.canonical("Freckle").is_none());
        assert_eq!(c.ordered(["Erythema", "plaque", "Papule", "Plaque"]).unwrap(), vec!["Papule", "Plaque", "Erythema"]);
    }

    #[test]
    fn class_lookup_and_naming() {
        let d = DiseaseTaxonomy::default();
        assert_eq!(d.canonical("bullous disease"), Some("Bullous Disease"));
        assert_eq!(d.canonical("Light Diseases"), Some("Light Diseases (vitiligo, sun damaged skin, etc.)"));
        assert_eq!(d.resolve_or_others("Sunburn"), OTHERS);
        assert!(names_class("the diagnosis is light diseases ( vitiligo", "Light Diseases (vitiligo, sun damaged skin, etc.)"));
        assert!(!names_class("acne", "Bullous Disease"));
    }

    #[test]
    fn concept_mentions_need_word_boundaries() {
        let c: Vec<String> = ["Scale", "Scar", "Papule"].iter().map(|s| s.to_string()).collect();
        assert_eq!(mentioned_concepts("This image shows Scale, papule.", &c), vec!["Scale", "Papule"]);
        assert!(mentioned_concepts("Scarring", &c).is_empty());
    }
}
