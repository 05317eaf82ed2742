//! Stage 0 for the decoder: a small language prior standing in for a
//! pretrained language model.
//!
//! The decoder learns to answer the session prompts about a "soft" prefix: a
//! bag of token embeddings (one class word, one to three concept words)
//! mixed with random weights and noise in every prefix slot. Class and
//! concepts are drawn independently, so what the decoder says about one
//! depends only on the corresponding part of the prefix. Afterwards the
//! alignment layer only has to learn to write such bags.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{Optimizer, OptimizerKind};
use super::pretrain::{PretrainConfig, PretrainReport};
use crate::error::{Error, Result};
use crate::model::{gaussian, Component, Ctx, ParamId, PipelineModel};
use crate::prompts::{fit_prompt, Turn, ASSISTANT_TAG, CANONICAL_PROMPTS, DIAGNOSIS_QUERY, USER_TAG};
use crate::synth::{stage1_caption, stage2_caption, DiagnosisRule};
use crate::taxonomy::ConceptTaxonomy;
use crate::tensor::Mat;
use crate::tokenizer::{TokenSequence, Tokenizer, UNK};

/// Caption for concept-free rows of an annotation table.
pub const NO_CONCEPT_CAPTION: &str = "No clinical concept annotated.";

/// Templated answer to canonical prompt `index` (0-based), or to the
/// diagnosis query when `index` is `None`. `concepts` in taxonomy order.
pub fn reply_for(index: Option<usize>, class: &str, concepts: &[String]) -> String {
    match index {
        None => stage2_caption(class, concepts),
        Some(0) => stage1_caption(concepts),
        Some(1) => format!("Additional features observed in the image include {}.", concepts.join(", ")),
        Some(2) => format!("These findings point to {class}. The exact cause should be confirmed by a dermatologist."),
        Some(_) => format!("Treatment for {class} should be chosen by a dermatologist after an in-person examination."),
    }
}

/// Every text the prior and the corpora can produce, for building a vocabulary.
pub fn vocabulary_texts(rule: &DiagnosisRule) -> Vec<String> {
    let mut out: Vec<String> = CANONICAL_PROMPTS.iter().map(|s| s.to_string()).collect();
    out.push(DIAGNOSIS_QUERY.to_string());
    out.push(format!("{USER_TAG} {ASSISTANT_TAG}"));
    out.push(NO_CONCEPT_CAPTION.to_string());
    let all: Vec<String> = rule.classes.iter().flat_map(|c| c.concepts.iter().cloned()).collect();
    for rc in &rule.classes {
        for i in [None, Some(0), Some(1), Some(2), Some(3)] {
            out.push(reply_for(i, &rc.class, &all));
        }
    }
    out
}

fn indicator(tokenizer: &Tokenizer, name: &str) -> Result<u32> {
    let id = tokenizer.tokenize(name).ids.first().copied().unwrap_or(UNK);
    if id == UNK {
        return Err(Error::Config(format!("{name:?} is not in the vocabulary")));
    }
    Ok(id)
}

#[derive(Clone, Debug)]
pub struct LanguagePrior {
    /// Taxonomy order, with the token that stands for each.
    concepts: Vec<(String, u32)>,
    classes: Vec<(String, u32)>,
    pub max_noise: f32,
    /// Lower bound of the per-item probability of appearing in a slot.
    pub min_presence: f64,
}

/// One text-only training example: a soft prefix, a rendered dialogue and the answer.
pub struct PriorSample {
    pub prefix: Mat<f32>,
    pub prompt: TokenSequence,
    pub target: TokenSequence,
}

impl LanguagePrior {
    pub fn new(tokenizer: &Tokenizer, rule: &DiagnosisRule) -> Result<Self> {
        let tax = ConceptTaxonomy::default();
        let mut names: Vec<&str> = rule.classes.iter().flat_map(|c| c.concepts.iter().map(String::as_str)).collect();
        names = tax.ordered(names)?;
        let concepts = names.iter().map(|n| Ok((n.to_string(), indicator(tokenizer, n)?))).collect::<Result<Vec<_>>>()?;
        let classes =
            rule.classes.iter().map(|c| Ok((c.class.clone(), indicator(tokenizer, &c.class)?))).collect::<Result<Vec<_>>>()?;
        let mut ids: Vec<u32> = concepts.iter().chain(&classes).map(|c| c.1).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != concepts.len() + classes.len() {
            return Err(Error::Config("class and concept names must start with distinct words".into()));
        }
        Ok(Self { concepts, classes, max_noise: 0.5, min_presence: 1.0 })
    }

    pub fn sample(&self, model: &PipelineModel, rng: &mut ChaCha8Rng) -> PriorSample {
        let cfg = model.config();
        let (class, class_tok) = &self.classes[rng.gen_range(0..self.classes.len())];
        let m = rng.gen_range(1..=3usize.min(self.concepts.len()));
        let mut picked: Vec<usize> = (0..self.concepts.len()).collect::<Vec<_>>().choose_multiple(rng, m).copied().collect();
        picked.sort_unstable();
        let concepts: Vec<String> = picked.iter().map(|&i| self.concepts[i].0.clone()).collect();
        let mut bag: Vec<u32> = picked.iter().map(|&i| self.concepts[i].1).collect();
        bag.push(*class_tok);

        let emb = model.param("decoder.tok_embed").expect("decoder embeddings");
        let (k_slots, d) = (cfg.n_queries, cfg.d_decoder);
        // every bag item lands in a random non-empty subset of the slots
        let mut present = vec![vec![false; bag.len()]; k_slots];
        for j in 0..bag.len() {
            let p: f64 = rng.gen_range(self.min_presence..=1.0);
            for row in present.iter_mut() {
                row[j] = rng.gen_bool(p);
            }
            let k = rng.gen_range(0..k_slots);
            present[k][j] = true;
        }
        let noise = rng.gen_range(0.0..=self.max_noise);
        let mut prefix = Mat::zeros(k_slots, d);
        for (k, flags) in present.iter().enumerate() {
            let row = prefix.row_mut(k);
            for (&t, _) in bag.iter().zip(flags).filter(|(_, &on)| on) {
                let w: f32 = rng.gen_range(0.5..1.5);
                for (v, &e) in row.iter_mut().zip(emb.row(t as usize)) {
                    *v += w * e;
                }
            }
            for v in row.iter_mut() {
                *v += noise * gaussian(rng);
            }
        }

        // 0..=3 canonical prompts, 4 the diagnosis query; the two probed
        // questions are drawn more often
        let kind = match rng.gen_range(0..10) {
            0..=2 => 0,
            3..=5 => 4,
            6 => 1,
            7 => 2,
            _ => 3,
        };
        let (message, index, earlier): (&str, Option<usize>, Vec<usize>) = if kind == 4 {
            (DIAGNOSIS_QUERY, None, vec![0])
        } else {
            (CANONICAL_PROMPTS[kind], Some(kind), (0..kind).collect())
        };
        let keep = rng.gen_range(0..=earlier.len());
        let mut history = Vec::new();
        for &j in &earlier[earlier.len() - keep..] {
            history.push(Turn::user(CANONICAL_PROMPTS[j]));
            history.push(Turn::assistant(reply_for(Some(j), class, &concepts)));
        }
        let tk = model.tokenizer();
        let target = tk.tokenize_target(&reply_for(index, class, &concepts));
        let prompt = fit_prompt(tk, &history, message, cfg.max_text_len, target.len()).tokens;
        PriorSample { prefix, prompt, target }
    }
}

/// Trains the decoder alone on samples from `prior`.
pub fn pretrain_decoder(model: &mut PipelineModel, prior: &LanguagePrior, cfg: &PretrainConfig) -> Result<PretrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    let mc = model.config().clone();
    let budget = mc.max_text_len - crate::model::WRAPPER_TOKENS;
    let mut losses = Vec::new();
    for _ in 0..cfg.steps {
        let mut total = 0.0;
        let mut acc: Vec<Option<Mat<f32>>> = vec![None; model.params().len()];
        for _ in 0..cfg.batch_size {
            let s = prior.sample(model, &mut rng);
            let mut text = s.prompt.concat(&s.target);
            if text.len() > budget {
                text.ids.truncate(budget);
                text.mask.truncate(budget);
            }
            let mut ctx = Ctx::new(model.params(), &[Component::Decoder]);
            let p = ctx.tape.constant(s.prefix);
            let l = ctx.sequence_loss(model.layout(), &mc, p, &text);
            total += ctx.tape.scalar(l);
            let mut grads = ctx.tape.backward(l);
            for (id, g) in ctx.param_grads(&mut grads) {
                match &mut acc[id.index()] {
                    Some(a) => a.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let n = cfg.batch_size as f32;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("decoder pretraining loss became {loss}")));
        }
        losses.push(loss);
        opt.begin_step();
        for (i, g) in acc.into_iter().enumerate() {
            if let Some(mut g) = g {
                g.scale_in_place(1.0 / n);
                opt.update(i, &mut model.params_mut().get_mut(ParamId(i)).value, &g, cfg.lr as f32);
            }
        }
    }
    Ok(PretrainReport { losses, train_accuracy: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::default_concepts;
    use crate::ModelConfig;

    fn setup() -> (PipelineModel, LanguagePrior) {
        let rule = DiagnosisRule::for_concepts(&default_concepts()).unwrap();
        let texts = vocabulary_texts(&rule);
        let tk = Tokenizer::build(texts.iter().map(String::as_str), false);
        let model = PipelineModel::new(ModelConfig { d_vision: 16, d_decoder: 16, ..ModelConfig::default() }, tk).unwrap();
        let prior = LanguagePrior::new(model.tokenizer(), &rule).unwrap();
        (model, prior)
    }

    #[test]
    fn replies_are_in_vocabulary() {
        let (model, _) = setup();
        let rule = DiagnosisRule::for_concepts(&default_concepts()).unwrap();
        for t in vocabulary_texts(&rule) {
            let ids = model.tokenizer().tokenize(&t).ids;
            assert!(!ids.contains(&UNK), "{t}");
            assert_eq!(model.tokenizer().detokenize(&ids), t);
        }
    }

    #[test]
    fn samples_fit_the_context() {
        let (model, prior) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = prior.sample(&model, &mut rng);
            assert_eq!(s.prefix.shape(), (8, 16));
            assert!(s.prompt.mask.iter().all(|&m| m == 0));
            assert!(s.target.mask.iter().all(|&m| m == 1));
            assert!(s.prompt.len() + s.target.len() + crate::model::WRAPPER_TOKENS <= 160);
        }
    }
}
