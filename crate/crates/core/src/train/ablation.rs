//! Stage ablation: stage 1 only, stage 2 only and stage 1 followed by
//! stage 2, all from the same starting checkpoint and probed the same way.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train_stage, TrainConfig, TrainingData};
use crate::data::CaptionPair;
use crate::error::Result;
use crate::eval::{probe_behavior, ProbeCase, ProbeScores};
use crate::image::Image;
use crate::model::{GenerationSettings, PipelineModel};

pub struct Corpora {
    pub stage1: Vec<(CaptionPair, Image)>,
    pub stage2: Vec<(CaptionPair, Image)>,
    pub probe: Vec<ProbeCase>,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub steps: u64,
    pub final_loss: Option<f32>,
    pub concept_recall: f64,
    pub class_accuracy: f64,
}

impl AblationRow {
    fn new(variant: &str, steps: u64, final_loss: Option<f32>, s: &ProbeScores) -> Self {
        Self {
            variant: variant.into(),
            steps,
            final_loss,
            concept_recall: s.concept_recall,
            class_accuracy: s.class_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub chance: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// The combined run is at least as good as each single-stage run on that
    /// run's own metric.
    pub fn combined_dominates(&self) -> bool {
        match (self.row(STAGE1_ONLY), self.row(STAGE2_ONLY), self.row(BOTH)) {
            (Some(a), Some(b), Some(c)) => c.concept_recall >= a.concept_recall && c.class_accuracy >= b.class_accuracy,
            _ => false,
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:>7} {:>10} {:>15} {:>15}\n", "variant", "steps", "loss", "concept_recall", "class_accuracy");
        for r in &self.rows {
            let loss = r.final_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
            s.push_str(&format!(
                "{:<14} {:>7} {:>10} {:>15.3} {:>15.3}\n",
                r.variant, r.steps, loss, r.concept_recall, r.class_accuracy
            ));
        }
        s.push_str(&format!("chance class accuracy {:.3}\n", self.chance));
        s
    }
}

pub const UNTRAINED: &str = "untrained";
pub const STAGE1_ONLY: &str = "stage1-only";
pub const STAGE2_ONLY: &str = "stage2-only";
pub const BOTH: &str = "stage1+stage2";

fn with_images(items: &[(CaptionPair, Image)]) -> Vec<(CaptionPair, Result<Image>)> {
    items.iter().map(|(p, i)| (p.clone(), Ok(i.clone()))).collect()
}

/// The combined run continues from the stage-1 weights with a fresh
/// schedule on the stage-2 data.
pub fn run_ablation(
    base: &PipelineModel,
    corpora: &Corpora,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    gen: &GenerationSettings,
    out: Option<&Path>,
) -> Result<AblationReport> {
    let sub = |name: &str| out.map(|d| d.join(name));
    let probe = |m: &PipelineModel| probe_behavior(m, &corpora.probe, &corpora.classes, gen);
    let untrained = probe(base)?;
    let mut rows = vec![AblationRow::new(UNTRAINED, 0, None, &untrained)];

    let mut m1 = base.clone();
    if let Some(f) = stage1.freeze {
        m1.freeze = f;
    }
    let d1 = TrainingData::prepare(&m1, with_images(&corpora.stage1))?;
    let r1 = train_stage(&mut m1, &d1, stage1, sub(STAGE1_ONLY).as_deref())?;
    rows.push(AblationRow::new(STAGE1_ONLY, r1.steps, r1.tail_loss(20), &probe(&m1)?));

    let mut m2 = base.clone();
    if let Some(f) = stage2.freeze {
        m2.freeze = f;
    }
    let d2 = TrainingData::prepare(&m2, with_images(&corpora.stage2))?;
    let r2 = train_stage(&mut m2, &d2, stage2, sub(STAGE2_ONLY).as_deref())?;
    rows.push(AblationRow::new(STAGE2_ONLY, r2.steps, r2.tail_loss(20), &probe(&m2)?));

    let mut m12 = m1;
    if let Some(f) = stage2.freeze {
        m12.freeze = f;
    }
    let d12 = TrainingData::prepare(&m12, with_images(&corpora.stage2))?;
    let r12 = train_stage(&mut m12, &d12, stage2, sub(BOTH).as_deref())?;
    rows.push(AblationRow::new(BOTH, r1.steps + r12.steps, r12.tail_loss(20), &probe(&m12)?));

    Ok(AblationReport { chance: untrained.chance, rows })
}
