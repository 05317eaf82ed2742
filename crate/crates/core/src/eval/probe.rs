//! Behavioural probe: ask a checkpoint about synthetic images and score the
//! replies against the planted ground truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{GenerationSettings, PipelineModel};
use crate::prompts::{fit_prompt, CANONICAL_PROMPTS, DIAGNOSIS_QUERY};
use crate::synth::read_manifest;
use crate::taxonomy::{mentioned_concepts, names_class};
use crate::tokenizer::UNK;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCase {
    pub image: Image,
    pub concepts: Vec<String>,
    pub class: String,
}

/// Cases of a generated corpus directory, read back from disk.
pub fn load_probe_cases(corpus_dir: &Path) -> Result<(Vec<ProbeCase>, Vec<String>)> {
    let m = read_manifest(&corpus_dir.join("manifest.json"))?;
    let cases = m
        .images
        .iter()
        .map(|p| {
            Ok(ProbeCase { image: Image::load(&corpus_dir.join(&p.image))?, concepts: p.concepts.clone(), class: p.class.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = m.rule.class_names().into_iter().map(String::from).collect();
    Ok((cases, classes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub description: String,
    pub diagnosis: String,
    pub concepts_named: usize,
    pub concepts_planted: usize,
    pub class_correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub cases: usize,
    /// Planted concepts named in the description reply, over all planted concepts.
    pub concept_recall: f64,
    /// Diagnosis replies naming the right class and no other class.
    pub class_accuracy: f64,
    pub chance: f64,
    pub outcomes: Vec<ProbeOutcome>,
}

/// Runs canonical prompt 1 and the diagnosis query as fresh single-turn
/// questions for every case.
pub fn probe_behavior(
    model: &PipelineModel,
    cases: &[ProbeCase],
    classes: &[String],
    gen: &GenerationSettings,
) -> Result<ProbeScores> {
    if cases.is_empty() {
        return Err(Error::Validation("probe split is empty".into()));
    }
    if classes.is_empty() {
        return Err(Error::Validation("no candidate classes".into()));
    }
    let tk = model.tokenizer();
    for name in cases.iter().flat_map(|c| c.concepts.iter()).chain(classes) {
        if tk.tokenize(name).ids.contains(&UNK) {
            return Err(Error::Config(format!("checkpoint vocabulary cannot express {name:?}")));
        }
    }
    let cfg = model.config();
    let ask = |prefix: &crate::model::PrefixEmbedding, q: &str| -> Result<String> {
        let p = fit_prompt(tk, &[], q, cfg.max_text_len, gen.max_new_tokens);
        Ok(model.generate(prefix, &p.tokens, gen)?.text)
    };
    let mut outcomes = Vec::with_capacity(cases.len());
    let (mut named, mut planted, mut correct) = (0usize, 0usize, 0usize);
    for case in cases {
        let prefix = model.prefix_for_image(&case.image)?;
        let description = ask(&prefix, CANONICAL_PROMPTS[0])?;
        let diagnosis = ask(&prefix, DIAGNOSIS_QUERY)?;
        let hits = mentioned_concepts(&description, &case.concepts).len();
        let class_correct = names_class(&diagnosis, &case.class)
            && classes.iter().filter(|c| **c != case.class).all(|c| !names_class(&diagnosis, c));
        named += hits;
        planted += case.concepts.len();
        correct += class_correct as usize;
        outcomes.push(ProbeOutcome {
            description,
            diagnosis,
            concepts_named: hits,
            concepts_planted: case.concepts.len(),
            class_correct,
        });
    }
    Ok(ProbeScores {
        cases: cases.len(),
        concept_recall: if planted == 0 { 0.0 } else { named as f64 / planted as f64 },
        class_accuracy: correct as f64 / cases.len() as f64,
        chance: 1.0 / classes.len() as f64,
        outcomes,
    })
}
