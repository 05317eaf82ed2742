//! The complete desk-scale recipe on a synthetic corpus: vocabulary, stage-0
//! pretraining of the vision side and the decoder, then the stage ablation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::{run_ablation, AblationReport, Corpora};
use super::pretrain::{pretrain_vision, vision_labels, PretrainConfig, PretrainReport};
use super::prior::{pretrain_decoder, vocabulary_texts, LanguagePrior};
use super::TrainConfig;
use crate::config::ModelConfig;
use crate::data::{CaptionPair, Stage};
use crate::error::{Error, Result};
use crate::eval::ProbeCase;
use crate::model::{GenerationSettings, PipelineModel};
use crate::synth::{generate_corpus, rule_classes_in_taxonomy_order, Corpus, DiagnosisRule, SynthSpec};
use crate::taxonomy::ConceptTaxonomy;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskPlan {
    /// Generates `n_train + n_probe` images; the tail is the held-in probe split.
    pub synth: SynthSpec,
    pub n_train: usize,
    /// Separate corpus for stage-0 vision pretraining, standing in for the
    /// data behind an off-the-shelf encoder. Only its labels are used.
    pub vision_corpus: SynthSpec,
    pub model: ModelConfig,
    pub vision: PretrainConfig,
    pub decoder: PretrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub generation: GenerationSettings,
}

impl Default for DeskPlan {
    fn default() -> Self {
        Self {
            synth: SynthSpec { n_images: 250, ..SynthSpec::default() },
            n_train: 200,
            vision_corpus: SynthSpec { n_images: 1000, seed: 1_000_003, ..SynthSpec::default() },
            model: ModelConfig::default(),
            vision: PretrainConfig { steps: 1000, batch_size: 8, lr: 1e-3, seed: 11 },
            decoder: PretrainConfig { steps: 1500, batch_size: 8, lr: 2e-3, seed: 12 },
            stage1: TrainConfig { seed: 21, ..TrainConfig::desk(Stage::Concepts) },
            stage2: TrainConfig { seed: 22, ..TrainConfig::desk(Stage::Diagnosis) },
            generation: GenerationSettings::default(),
        }
    }
}

impl DeskPlan {
    pub fn n_probe(&self) -> usize {
        self.synth.n_images.saturating_sub(self.n_train)
    }
}

/// Vocabulary covering the prompts, every templated reply and the captions.
pub fn desk_tokenizer<'a>(rule: &DiagnosisRule, captions: impl IntoIterator<Item = &'a CaptionPair>) -> Tokenizer {
    let mut texts = vocabulary_texts(rule);
    texts.extend(captions.into_iter().map(|p| p.text.clone()));
    Tokenizer::build(texts.iter().map(String::as_str), false)
}

pub struct Prepared {
    pub base: PipelineModel,
    pub corpora: Corpora,
    pub vision: PretrainReport,
    pub decoder: PretrainReport,
}

/// A fresh pipeline whose vision side and decoder are pretrained and whose
/// alignment layer is still random.
pub struct Stage0 {
    pub model: PipelineModel,
    pub vision: PretrainReport,
    pub decoder: PretrainReport,
}

/// Stage 0 for a corpus generated under `rule` with `captions`.
pub fn pretrain_stage0<'a>(
    plan: &DeskPlan,
    rule: &DiagnosisRule,
    captions: impl IntoIterator<Item = &'a CaptionPair>,
) -> Result<Stage0> {
    let tokenizer = desk_tokenizer(rule, captions);
    let mut model = PipelineModel::new(plan.model.clone(), tokenizer)?;

    let concepts: Vec<String> = ConceptTaxonomy::default()
        .ordered(rule.classes.iter().flat_map(|c| c.concepts.iter().map(String::as_str)))?
        .into_iter()
        .map(String::from)
        .collect();
    let classes = rule_classes_in_taxonomy_order(rule);
    let vision_data = generate_corpus(&plan.vision_corpus)?;
    if vision_data.manifest.rule != *rule {
        return Err(Error::Config("vision pretraining corpus uses a different diagnosis rule".into()));
    }
    let labels = vision_labels(&vision_data.stage1, &concepts, &classes);
    let vision = pretrain_vision(&mut model, &vision_data.images, &labels, &plan.vision)?;
    log::info!("vision pretraining: final loss {:?}, label accuracy {:?}", vision.losses.last(), vision.train_accuracy);

    let prior = LanguagePrior::new(model.tokenizer(), rule)?;
    let decoder = pretrain_decoder(&mut model, &prior, &plan.decoder)?;
    log::info!("decoder pretraining: final loss {:?}", decoder.losses.last());
    Ok(Stage0 { model, vision, decoder })
}

/// Stage 0 for `corpus` plus its train and probe splits.
pub fn prepare(plan: &DeskPlan, corpus: &Corpus) -> Result<Prepared> {
    let n = corpus.images.len();
    if plan.n_train == 0 || plan.n_train >= n {
        return Err(Error::Validation(format!("n_train {} leaves no probe split out of {n} images", plan.n_train)));
    }
    let rule = &corpus.manifest.rule;
    let Stage0 { model, vision, decoder } = pretrain_stage0(plan, rule, corpus.stage1.iter().chain(&corpus.stage2))?;

    let train_imgs = &corpus.images[..plan.n_train];
    let pair_up = |pairs: &[CaptionPair]| -> Vec<(CaptionPair, crate::image::Image)> {
        pairs[..plan.n_train].iter().cloned().zip(train_imgs.iter().cloned()).collect()
    };
    let probe = corpus.manifest.images[plan.n_train..]
        .iter()
        .zip(&corpus.images[plan.n_train..])
        .map(|(p, img)| ProbeCase { image: img.clone(), concepts: p.concepts.clone(), class: p.class.clone() })
        .collect();
    let corpora = Corpora {
        stage1: pair_up(&corpus.stage1),
        stage2: pair_up(&corpus.stage2),
        probe,
        classes: rule.class_names().into_iter().map(String::from).collect(),
    };
    Ok(Prepared { base: model, corpora, vision, decoder })
}

/// `prepare` followed by the ablation.
pub fn run_desk(plan: &DeskPlan, corpus: &Corpus, out: Option<&Path>) -> Result<(Prepared, AblationReport)> {
    let prepared = prepare(plan, corpus)?;
    let report = run_ablation(&prepared.base, &prepared.corpora, &plan.stage1, &plan.stage2, &plan.generation, out)?;
    Ok((prepared, report))
}
