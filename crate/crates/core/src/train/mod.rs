//! Fine-tuning: learning-rate schedule, optimizers, the per-stage loop,
//! stage-0 pretraining and the stage ablation.

mod ablation;
mod desk;
mod optim;
mod pretrain;
mod prior;
mod schedule;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationReport, AblationRow, Corpora, BOTH, STAGE1_ONLY, STAGE2_ONLY, UNTRAINED};
pub use desk::{desk_tokenizer, prepare, pretrain_stage0, run_desk, DeskPlan, Prepared, Stage0};
pub use optim::{AdamState, Optimizer, OptimizerKind};
pub use pretrain::{pretrain_vision, vision_labels, PretrainConfig, PretrainReport};
pub use prior::{pretrain_decoder, reply_for, vocabulary_texts, LanguagePrior, PriorSample, NO_CONCEPT_CAPTION};
pub use schedule::{lr_at, Schedule};

use crate::checkpoint::{self, canonical_json};
use crate::data::{CaptionPair, PairSet, Stage};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::model::{FreezeFlags, PipelineModel, QueryEmbedding, WRAPPER_TOKENS};
use crate::prompts::fit_prompt;
use crate::tensor::Mat;
use crate::tokenizer::TokenSequence;

/// Smaller schedule for runs that must finish in minutes on a CPU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskScale {
    pub epochs: u64,
    pub iters_per_epoch: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
}

impl DeskScale {
    pub fn standard() -> Self {
        Self { epochs: 4, iters_per_epoch: 100, warmup_steps: 20, peak_lr: 0.05, batch_size: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub iters_per_epoch: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub max_text_len: usize,
    pub stage: Stage,
    pub resume_from: Option<PathBuf>,
    pub freeze: Option<FreezeFlags>,
    pub seed: u64,
    pub desk_scale_override: Option<DeskScale>,
    pub optimizer: OptimizerKind,
    /// Write an intermediate checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            iters_per_epoch: 5000,
            warmup_steps: 5000,
            batch_size: 2,
            peak_lr: 1e-4,
            max_text_len: 160,
            stage: Stage::Concepts,
            resume_from: None,
            freeze: None,
            seed: 0,
            desk_scale_override: None,
            optimizer: OptimizerKind::Sgd,
            checkpoint_every: 0,
        }
    }
}

/// The numbers a run actually uses after applying the desk-scale override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Effective {
    pub epochs: u64,
    pub iters_per_epoch: u64,
    pub batch_size: usize,
    pub schedule: Schedule,
}

impl Effective {
    pub fn total_steps(&self) -> u64 {
        self.epochs * self.iters_per_epoch
    }
}

impl TrainConfig {
    pub fn desk(stage: Stage) -> Self {
        Self { stage, desk_scale_override: Some(DeskScale::standard()), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.effective();
        if e.iters_per_epoch == 0 || e.batch_size == 0 || self.max_text_len == 0 {
            return Err(Error::Validation("iters_per_epoch, batch_size and max_text_len must be positive".into()));
        }
        if !(e.schedule.peak_lr > 0.0 && e.schedule.peak_lr.is_finite()) {
            return Err(Error::Validation(format!("peak_lr must be positive, got {}", e.schedule.peak_lr)));
        }
        Ok(())
    }

    pub fn effective(&self) -> Effective {
        match &self.desk_scale_override {
            Some(d) => Effective {
                epochs: d.epochs,
                iters_per_epoch: d.iters_per_epoch,
                batch_size: d.batch_size,
                schedule: Schedule { warmup_steps: d.warmup_steps, peak_lr: d.peak_lr },
            },
            None => Effective {
                epochs: self.epochs,
                iters_per_epoch: self.iters_per_epoch,
                batch_size: self.batch_size,
                schedule: Schedule { warmup_steps: self.warmup_steps, peak_lr: self.peak_lr },
            },
        }
    }
}

#[derive(Clone, Debug)]
enum Input {
    Cached(QueryEmbedding),
    Pixels(Image),
}

#[derive(Clone, Debug)]
pub struct Example {
    input: Input,
    pub prompt: TokenSequence,
    pub target: TokenSequence,
}

/// How the input pairs were used. `used + truncated + skipped == input`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataAccounting {
    pub input: usize,
    pub used: usize,
    pub truncated: usize,
    pub skipped: usize,
    pub skip_reasons: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainingData {
    pub examples: Vec<Example>,
    pub accounting: DataAccounting,
}

/// Pairs of a JSONL file with their images read from disk; unreadable
/// images surface as per-pair errors.
pub fn load_with_images(set: &PairSet) -> Vec<(CaptionPair, Result<Image>)> {
    set.pairs.iter().map(|p| (p.clone(), Image::load(&set.image_path(p)))).collect()
}

impl TrainingData {
    /// Tokenises pairs for `model`. Images are embedded once when the vision
    /// side is frozen.
    pub fn prepare(model: &PipelineModel, items: Vec<(CaptionPair, Result<Image>)>) -> Result<Self> {
        let cfg = model.config();
        let cache = model.freeze.vision && model.freeze.query;
        let mut acc = DataAccounting { input: items.len(), ..Default::default() };
        let mut embedded: HashMap<String, QueryEmbedding> = HashMap::new();
        let mut examples = Vec::new();
        for (pair, img) in items {
            let img = match img {
                Ok(i) => i.resized(cfg.image_size),
                Err(e) => {
                    acc.skipped += 1;
                    acc.skip_reasons.push(format!("{}: {e}", pair.image));
                    continue;
                }
            };
            let prompt = fit_prompt(model.tokenizer(), &[], pair.prompt_text(), cfg.max_text_len, 0).tokens;
            let room = cfg.max_text_len.saturating_sub(WRAPPER_TOKENS + prompt.len());
            if room == 0 {
                acc.skipped += 1;
                acc.skip_reasons.push(format!("{}: prompt fills the context", pair.image));
                continue;
            }
            let mut target = model.tokenizer().tokenize_target(&pair.text);
            if target.len() > room {
                target.ids.truncate(room);
                target.mask.truncate(room);
                acc.truncated += 1;
            } else {
                acc.used += 1;
            }
            let input = if cache {
                let q = match embedded.get(&pair.image) {
                    Some(q) => q.clone(),
                    None => {
                        let q = model.encode_image(&img)?;
                        embedded.insert(pair.image.clone(), q.clone());
                        q
                    }
                };
                Input::Cached(q)
            } else {
                Input::Pixels(img)
            };
            examples.push(Example { input, prompt, target });
        }
        if examples.is_empty() {
            return Err(Error::EmptyDataset(format!("none of {} pairs is usable", acc.input)));
        }
        Ok(Self { examples, accounting: acc })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub global_step: u64,
    pub lr: f64,
    pub running_loss: f64,
    pub rng: ChaCha8Rng,
    pub optimizer: Optimizer,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Self {
        Self {
            stage: cfg.stage,
            global_step: 0,
            lr: 0.0,
            running_loss: 0.0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            optimizer: Optimizer::new(cfg.optimizer),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub metrics: Vec<MetricRow>,
    pub accounting: DataAccounting,
    pub state: TrainState,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Mean loss over the last `n` logged steps.
    pub fn tail_loss(&self, n: usize) -> Option<f32> {
        let tail = &self.metrics[self.metrics.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|m| m.loss).sum::<f32>() / tail.len() as f32)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";
pub const CONFIG_ECHO: &str = "train_config.json";

/// One optimizer step on a batch: mean of per-example gradients.
pub fn step(model: &mut PipelineModel, batch: &[&Example], opt: &mut Optimizer, lr: f32) -> Result<f32> {
    let mut total = 0.0f32;
    let mut acc: HashMap<usize, (crate::model::ParamId, Mat<f32>)> = HashMap::new();
    for ex in batch {
        let (loss, grads) = match &ex.input {
            Input::Cached(q) => model.loss_and_grads(q, &ex.prompt, &ex.target)?,
            Input::Pixels(img) => model.loss_and_grads_from_image(img, &ex.prompt, &ex.target)?,
        };
        total += loss;
        for (id, g) in grads {
            match acc.get_mut(&id.index()) {
                Some((_, a)) => a.add_assign(&g),
                None => {
                    acc.insert(id.index(), (id, g));
                }
            }
        }
    }
    let n = batch.len() as f32;
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss became {loss}")));
    }
    opt.begin_step();
    let mut ids: Vec<_> = acc.into_values().collect();
    ids.sort_by_key(|(id, _)| id.index());
    for (id, mut g) in ids {
        g.scale_in_place(1.0 / n);
        let p = model.params_mut().get_mut(id);
        opt.update(id.index(), &mut p.value, &g, lr);
    }
    Ok(loss)
}

/// Runs `epochs × iters_per_epoch` optimizer steps from a fresh state.
pub fn train_stage(
    model: &mut PipelineModel,
    data: &TrainingData,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    resume_stage(model, data, cfg, out, TrainState::fresh(cfg))
}

/// Continues from a saved state until the configured step count.
pub fn resume_stage(
    model: &mut PipelineModel,
    data: &TrainingData,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut state: TrainState,
) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(f) = cfg.freeze {
        model.freeze = f;
    }
    let eff = cfg.effective();
    let total = eff.total_steps();
    let mut metrics_writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).at(dir)?;
            let cfg_path = dir.join(CONFIG_ECHO);
            std::fs::write(&cfg_path, canonical_json(cfg)?).at(&cfg_path)?;
            let path = dir.join(METRICS_FILE);
            let append = state.global_step > 0 && path.exists();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(&path)
                .at(&path)?;
            let mut w = csv::Writer::from_writer(file);
            if !append {
                w.write_record(["step", "lr", "loss"])?;
            }
            Some(w)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let n = data.examples.len();
    while state.global_step < total {
        let idx: Vec<usize> = (0..eff.batch_size).map(|_| state.rng.gen_range(0..n)).collect();
        let batch: Vec<&Example> = idx.iter().map(|&i| &data.examples[i]).collect();
        let next = state.global_step + 1;
        let lr = lr_at(next, &eff.schedule);
        let loss = match step(model, &batch, &mut state.optimizer, lr as f32) {
            Ok(l) => l,
            Err(e @ Error::Numerical(_)) => {
                if let Some(dir) = out {
                    checkpoint::save(&dir.join(DIAGNOSTIC_CHECKPOINT), model, Some(&state))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state.global_step = next;
        state.lr = lr;
        state.running_loss += (loss as f64 - state.running_loss) / next as f64;
        let row = MetricRow { step: next, lr, loss };
        if let Some(w) = metrics_writer.as_mut() {
            w.write_record([row.step.to_string(), row.lr.to_string(), row.loss.to_string()])?;
        }
        metrics.push(row);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && next % cfg.checkpoint_every == 0 && next < total {
                checkpoint::save(&dir.join(format!("step-{next:06}.ckpt")), model, Some(&state))?;
            }
        }
    }
    if let Some(w) = metrics_writer.as_mut() {
        w.flush().map_err(|e| Error::Io { path: out.unwrap().join(METRICS_FILE), source: e })?;
    }
    let checkpoint = match out {
        Some(dir) => {
            let p = dir.join(FINAL_CHECKPOINT);
            checkpoint::save(&p, model, Some(&state))?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainReport { steps: metrics.len() as u64, metrics, accounting: data.accounting.clone(), state, checkpoint })
}

/// Reads a metrics CSV back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| rec.get(i).unwrap_or("").to_string();
        rows.push(MetricRow {
            step: parse(0).parse().map_err(|e| Error::Validation(format!("bad step: {e}")))?,
            lr: parse(1).parse().map_err(|e| Error::Validation(format!("bad lr: {e}")))?,
            loss: parse(2).parse().map_err(|e| Error::Validation(format!("bad loss: {e}")))?,
        });
    }
    Ok(rows)
}
