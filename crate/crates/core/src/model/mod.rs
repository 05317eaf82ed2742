//! The four-stage vision-language pipeline: patch encoder, query
//! transformer, linear alignment layer and causal text decoder.
//!
//! ```text
//! image ─patchify─▶ PatchGrid ─encode_vision─▶ features (P×d_v)
//!       ─encode_queries─▶ QueryEmbedding (K×d_v) ─align─▶ PrefixEmbedding (K×d_d)
//!       ─decoder─▶ next-token logits over  <bos> [IMG] prefix [/IMG] prompt answer
//! ```

mod graph;
mod infer;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use graph::{Ctx, Layout};
pub(crate) use params::gaussian;
pub use params::{Component, Param, ParamId, ParamSet};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Mat, Scalar};
use crate::tokenizer::{TokenSequence, Tokenizer, BOS, EOS, IMG_CLOSE, IMG_OPEN, PAD, UNK};

/// Fixed rows of the decoder input besides prefix and text: `<bos> [IMG]` and `[/IMG]`.
pub const WRAPPER_TOKENS: usize = 3;

/// Flattened patches in row-major patch order; each patch is row-major
/// pixels with interleaved channels, scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Mat<f32>,
}

/// Cuts an image into non-overlapping square patches.
pub fn patchify(image: &Image, cfg: &ModelConfig) -> Result<PatchGrid> {
    let expected = cfg.image_size * cfg.image_size * cfg.channels;
    let actual = image.width() * image.height() * Image::CHANNELS;
    if image.width() != cfg.image_size || image.height() != cfg.image_size || cfg.channels != Image::CHANNELS {
        return Err(Error::InvalidInput(format!(
            "expected a {0}x{0}x{1} image ({expected} values), got {2}x{3}x{4} ({actual} values)",
            cfg.image_size,
            cfg.channels,
            image.width(),
            image.height(),
            Image::CHANNELS
        )));
    }
    let (ps, side, c) = (cfg.patch_size, cfg.patches_per_side(), cfg.channels);
    let mut patches = Mat::zeros(cfg.n_patches(), cfg.patch_len());
    let px = image.pixels();
    for py in 0..side {
        for pxi in 0..side {
            let row = patches.row_mut(py * side + pxi);
            let mut o = 0;
            for y in 0..ps {
                let start = ((py * ps + y) * cfg.image_size + pxi * ps) * c;
                for &v in &px[start..start + ps * c] {
                    row[o] = v as f32 / 255.0;
                    o += 1;
                }
            }
        }
    }
    Ok(PatchGrid { patches })
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid, cfg: &ModelConfig) -> Result<Image> {
    if grid.patches.shape() != (cfg.n_patches(), cfg.patch_len()) {
        return Err(Error::InvalidInput(format!(
            "patch grid is {:?}, config wants {:?}",
            grid.patches.shape(),
            (cfg.n_patches(), cfg.patch_len())
        )));
    }
    let (ps, side, c) = (cfg.patch_size, cfg.patches_per_side(), cfg.channels);
    let mut pixels = vec![0u8; cfg.image_size * cfg.image_size * c];
    for py in 0..side {
        for pxi in 0..side {
            let row = grid.patches.row(py * side + pxi);
            let mut o = 0;
            for y in 0..ps {
                let start = ((py * ps + y) * cfg.image_size + pxi * ps) * c;
                for v in &mut pixels[start..start + ps * c] {
                    *v = (row[o] * 255.0).round().clamp(0.0, 255.0) as u8;
                    o += 1;
                }
            }
        }
    }
    Image::from_raw(cfg.image_size, cfg.image_size, pixels)
}

/// K query-transformer outputs of width `d_vision`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding(pub Mat<f32>);

/// K prefix pseudo-token embeddings of width `d_decoder`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixEmbedding(pub Mat<f32>);

/// Which components are held fixed during optimisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezeFlags {
    pub vision: bool,
    pub query: bool,
    pub alignment: bool,
    pub decoder: bool,
}

impl Default for FreezeFlags {
    /// Only the alignment layer learns.
    fn default() -> Self {
        Self { vision: true, query: true, alignment: false, decoder: true }
    }
}

impl FreezeFlags {
    pub fn is_frozen(&self, c: Component) -> bool {
        match c {
            Component::Vision => self.vision,
            Component::Query => self.query,
            Component::Alignment => self.alignment,
            Component::Decoder => self.decoder,
        }
    }

    pub fn set(&mut self, c: Component, frozen: bool) {
        match c {
            Component::Vision => self.vision = frozen,
            Component::Query => self.query = frozen,
            Component::Alignment => self.alignment = frozen,
            Component::Decoder => self.decoder = frozen,
        }
    }

    pub fn trainable(&self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|&c| !self.is_frozen(c)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub mode: DecodeMode,
    pub temperature: f32,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, temperature: 1.0, max_new_tokens: 48, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    /// The end token was produced.
    Stop,
    MaxTokens,
    ContextFull,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub ids: Vec<u32>,
    pub finish: FinishReason,
    /// Generation ended on a length limit rather than the end token.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineModel {
    config: ModelConfig,
    tokenizer: Tokenizer,
    params: ParamSet<f32>,
    layout: Layout,
    pub freeze: FreezeFlags,
}

impl PipelineModel {
    /// Fresh model with randomly initialised parameters drawn from `config.seed`.
    pub fn new(mut config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.vocab_size = tokenizer.vocab_size();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (layout, params) = Layout::build(&config, &mut rng);
        Ok(Self { config, tokenizer, params, layout, freeze: FreezeFlags::default() })
    }

    /// Rebuilds a model around stored tensors; names and shapes must match the
    /// layout implied by `config`.
    pub fn from_parts(config: ModelConfig, tokenizer: Tokenizer, tensors: Vec<(String, Mat<f32>)>) -> Result<Self> {
        let mut model = Self::new(config, tokenizer)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, layout wants {:?}",
                    value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Overwrites one tensor by name, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Mat<f32>) -> Result<()> {
        let id = self.params.find(name).ok_or_else(|| Error::InvalidInput(format!("no parameter {name}")))?;
        let slot = self.params.get_mut(id);
        if slot.value.shape() != value.shape() {
            return Err(Error::InvalidInput(format!(
                "parameter {name} is {:?}, got {:?}",
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Mat<f32>> {
        self.params.find(name).map(|id| &self.params.get(id).value)
    }

    pub fn component_bytes(&self, c: Component) -> Vec<u8> {
        self.params.component_bytes(c)
    }

    pub fn param_count(&self, c: Component) -> usize {
        self.params.count(c)
    }

    pub fn trainable_components(&self) -> Vec<Component> {
        self.freeze.trainable()
    }

    pub fn patchify(&self, image: &Image) -> Result<PatchGrid> {
        patchify(image, &self.config)
    }

    pub fn encode_vision(&self, patches: &PatchGrid) -> Result<Mat<f32>> {
        if patches.patches.shape() != (self.config.n_patches(), self.config.patch_len()) {
            return Err(Error::InvalidInput(format!(
                "expected {} patches of length {}, got {:?}",
                self.config.n_patches(),
                self.config.patch_len(),
                patches.patches.shape()
            )));
        }
        let mut ctx = Ctx::new(&self.params, &[]);
        let f = ctx.vision_features(&self.layout, &self.config, &patches.patches);
        finite(ctx.tape.value(f).clone(), "vision features")
    }

    pub fn encode_queries(&self, features: &Mat<f32>) -> Result<QueryEmbedding> {
        if features.shape() != (self.config.n_patches(), self.config.d_vision) {
            return Err(Error::InvalidInput(format!(
                "expected features of shape {:?}, got {:?}",
                (self.config.n_patches(), self.config.d_vision),
                features.shape()
            )));
        }
        let mut ctx = Ctx::new(&self.params, &[]);
        let f = ctx.tape.constant(features.clone());
        let q = ctx.query_embedding(&self.layout, &self.config, f);
        finite(ctx.tape.value(q).clone(), "query embedding").map(QueryEmbedding)
    }

    /// Resizes to the configured resolution and runs the vision side.
    pub fn encode_image(&self, image: &Image) -> Result<QueryEmbedding> {
        let img = image.resized(self.config.image_size);
        let grid = self.patchify(&img)?;
        let features = self.encode_vision(&grid)?;
        self.encode_queries(&features)
    }

    pub fn align(&self, q: &QueryEmbedding) -> Result<PrefixEmbedding> {
        if q.0.shape() != (self.config.n_queries, self.config.d_vision) {
            return Err(Error::InvalidInput(format!(
                "expected {} query vectors of width {}, got {:?}",
                self.config.n_queries,
                self.config.d_vision,
                q.0.shape()
            )));
        }
        let mut ctx = Ctx::new(&self.params, &[]);
        let x = ctx.tape.constant(q.0.clone());
        let y = ctx.align(&self.layout, x);
        Ok(PrefixEmbedding(ctx.tape.value(y).clone()))
    }

    pub fn prefix_for_image(&self, image: &Image) -> Result<PrefixEmbedding> {
        self.align(&self.encode_image(image)?)
    }

    fn check_prefix(&self, prefix: &PrefixEmbedding) -> Result<()> {
        if prefix.0.shape() != (self.config.n_queries, self.config.d_decoder) {
            return Err(Error::InvalidInput(format!(
                "prefix must be {}x{}, got {:?}",
                self.config.n_queries,
                self.config.d_decoder,
                prefix.0.shape()
            )));
        }
        Ok(())
    }

    fn check_text(&self, text: &TokenSequence) -> Result<()> {
        text.validate(self.config.vocab_size)?;
        let budget = self.config.max_text_len.saturating_sub(WRAPPER_TOKENS);
        if text.len() > budget {
            return Err(Error::InvalidInput(format!(
                "{} text tokens exceed the budget of {budget} (max_text_len minus {WRAPPER_TOKENS} wrapper tokens)",
                text.len()
            )));
        }
        Ok(())
    }

    /// Raw decoder logits, one row per input position
    /// (`<bos> [IMG] prefix… [/IMG] text…`).
    pub fn decode_logits(&self, prefix: &PrefixEmbedding, text: &[u32]) -> Result<Mat<f32>> {
        self.check_prefix(prefix)?;
        self.check_text(&TokenSequence::new(text.to_vec(), false))?;
        let mut ctx = Ctx::new(&self.params, &[]);
        let p = ctx.tape.constant(prefix.0.clone());
        let l = ctx.decoder_logits(&self.layout, &self.config, p, text);
        finite(ctx.tape.value(l).clone(), "decoder logits")
    }

    /// Mean cross-entropy over the scored positions of `text`, with any mask.
    pub fn sequence_loss(&self, prefix: &PrefixEmbedding, text: &TokenSequence) -> Result<f32> {
        self.check_prefix(prefix)?;
        self.check_text(text)?;
        if !text.mask.contains(&1) {
            return Err(Error::InvalidInput("no scored positions in the sequence".into()));
        }
        let mut ctx = Ctx::new(&self.params, &[]);
        let p = ctx.tape.constant(prefix.0.clone());
        let l = ctx.sequence_loss(&self.layout, &self.config, p, text);
        let v = ctx.tape.scalar(l);
        if !v.is_finite() {
            return Err(Error::Numerical(format!("loss is {v}")));
        }
        Ok(v)
    }

    /// Next-token cross-entropy of `target` given the image prefix and a prompt.
    /// The prompt is context only; every target position is scored.
    pub fn decode_loss(&self, prefix: &PrefixEmbedding, prompt: &TokenSequence, target: &TokenSequence) -> Result<f32> {
        if target.is_empty() {
            return Err(Error::InvalidInput("target sequence is empty".into()));
        }
        if prompt.mask.iter().any(|&m| m != 0) {
            return Err(Error::InvalidInput("prompt positions must all be masked out".into()));
        }
        if target.mask.iter().any(|&m| m != 1) {
            return Err(Error::InvalidInput("target positions must all be scored".into()));
        }
        self.sequence_loss(prefix, &prompt.concat(target))
    }

    /// Loss of one (query embedding, prompt, target) example evaluated with an
    /// arbitrary parameter set of the same layout, in any precision.
    pub fn eval_loss<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        queries: &Mat<T>,
        prompt: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<T> {
        self.check_text(&prompt.concat(target))?;
        let mut ctx = Ctx::new(params, &[]);
        let q = ctx.tape.constant(queries.clone());
        let p = ctx.align(&self.layout, q);
        let l = ctx.sequence_loss(&self.layout, &self.config, p, &prompt.clone().as_context().concat(target));
        Ok(ctx.tape.scalar(l))
    }

    /// Loss and gradients for the components that are not frozen, starting
    /// from a cached query embedding (vision and query sides see no gradient).
    pub fn loss_and_grads(
        &self,
        queries: &QueryEmbedding,
        prompt: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<(f32, Vec<(ParamId, Mat<f32>)>)> {
        let text = prompt.clone().as_context().concat(target);
        self.check_text(&text)?;
        let trainable = self.trainable_components();
        let mut ctx = Ctx::new(&self.params, &trainable);
        let q = ctx.tape.constant(queries.0.clone());
        let p = ctx.align(&self.layout, q);
        let l = ctx.sequence_loss(&self.layout, &self.config, p, &text);
        let loss = ctx.tape.scalar(l);
        let mut grads = ctx.tape.backward(l);
        Ok((loss, ctx.param_grads(&mut grads)))
    }

    /// Same as [`Self::loss_and_grads`] but starting from pixels, so vision and
    /// query components receive gradients when unfrozen.
    pub fn loss_and_grads_from_image(
        &self,
        image: &Image,
        prompt: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<(f32, Vec<(ParamId, Mat<f32>)>)> {
        let text = prompt.clone().as_context().concat(target);
        self.check_text(&text)?;
        let grid = self.patchify(&image.resized(self.config.image_size))?;
        let trainable = self.trainable_components();
        let mut ctx = Ctx::new(&self.params, &trainable);
        let f = ctx.vision_features(&self.layout, &self.config, &grid.patches);
        let q = ctx.query_embedding(&self.layout, &self.config, f);
        let p = ctx.align(&self.layout, q);
        let l = ctx.sequence_loss(&self.layout, &self.config, p, &text);
        let loss = ctx.tape.scalar(l);
        let mut grads = ctx.tape.backward(l);
        Ok((loss, ctx.param_grads(&mut grads)))
    }

    /// Autoregressive continuation of `prompt` conditioned on the image prefix.
    pub fn generate(
        &self,
        prefix: &PrefixEmbedding,
        prompt: &TokenSequence,
        gen: &GenerationSettings,
    ) -> Result<Generation> {
        self.check_prefix(prefix)?;
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt is empty".into()));
        }
        self.check_text(prompt)?;
        let budget = self.config.max_text_len - WRAPPER_TOKENS;
        let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
        let mut out: Vec<u32> = Vec::new();
        let mut finish = FinishReason::MaxTokens;
        if gen.max_new_tokens > 0 {
            let mut state = infer::DecoderState::new(self, prefix, &prompt.ids);
            loop {
                if out.len() >= gen.max_new_tokens {
                    finish = FinishReason::MaxTokens;
                    break;
                }
                if prompt.len() + out.len() >= budget {
                    finish = FinishReason::ContextFull;
                    break;
                }
                let logits = state.last_logits();
                let next = pick_token(logits, gen, &mut rng);
                if next == EOS {
                    finish = FinishReason::Stop;
                    break;
                }
                out.push(next);
                state.push(next);
            }
        }
        let text = self.tokenizer.detokenize(&out);
        Ok(Generation { text, truncated: finish != FinishReason::Stop, ids: out, finish })
    }
}

fn finite(m: Mat<f32>, what: &str) -> Result<Mat<f32>> {
    if m.all_finite() {
        Ok(m)
    } else {
        Err(Error::Numerical(format!("{what} contain non-finite values")))
    }
}

const NEVER_EMITTED: [u32; 5] = [PAD, BOS, UNK, IMG_OPEN, IMG_CLOSE];

fn pick_token(logits: &[f32], gen: &GenerationSettings, rng: &mut ChaCha8Rng) -> u32 {
    let allowed = |i: usize| !NEVER_EMITTED.contains(&(i as u32));
    match gen.mode {
        DecodeMode::Greedy => {
            let mut best = EOS as usize;
            for (i, &l) in logits.iter().enumerate() {
                if allowed(i) && l > logits[best] {
                    best = i;
                }
            }
            best as u32
        }
        DecodeMode::Sampled => {
            let t = gen.temperature.max(1e-4);
            let mx = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let weights: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| if allowed(i) { (((l - mx) / t) as f64).exp() } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i as u32;
                }
                u -= w;
            }
            EOS
        }
    }
}

#[cfg(test)]
mod tests;
