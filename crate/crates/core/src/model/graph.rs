//! Parameter layout and the differentiable forward pass of every component.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttnMask, Grads, Tape, Var};
use crate::config::ModelConfig;
use crate::model::params::{Component, ParamBuilder, ParamId, ParamSet};
use crate::tensor::{Mat, Scalar};
use crate::tokenizer::{TokenSequence, BOS, IMG_CLOSE, IMG_OPEN};

#[derive(Clone, Debug)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct NormIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub ln2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub patch: LinearIds,
    pub vis_pos: ParamId,
    pub vis_blocks: Vec<BlockIds>,
    pub vis_ln: NormIds,
    pub queries: ParamId,
    pub q_blocks: Vec<BlockIds>,
    pub q_ln: NormIds,
    pub align: LinearIds,
    pub tok_emb: ParamId,
    pub dec_pos: ParamId,
    pub dec_blocks: Vec<BlockIds>,
    pub dec_ln: NormIds,
    pub head: LinearIds,
}

const INIT_STD: f32 = 0.02;

/// Keeps activations near unit scale at any width.
fn fan_in(din: usize) -> f32 {
    1.0 / (din as f32).sqrt()
}

fn linear(b: &mut ParamBuilder<'_>, name: &str, din: usize, dout: usize, std: f32) -> LinearIds {
    LinearIds { w: b.normal(format!("{name}.weight"), din, dout, std), b: b.constant(format!("{name}.bias"), 1, dout, 0.0) }
}

fn norm(b: &mut ParamBuilder<'_>, name: &str, d: usize) -> NormIds {
    NormIds { g: b.constant(format!("{name}.gamma"), 1, d, 1.0), b: b.constant(format!("{name}.beta"), 1, d, 0.0) }
}

fn block(b: &mut ParamBuilder<'_>, name: &str, d: usize, ratio: usize, n_layers: usize) -> BlockIds {
    let depth = ((2 * n_layers.max(1)) as f32).sqrt();
    BlockIds {
        ln1: norm(b, &format!("{name}.ln1"), d),
        attn: AttnIds {
            q: linear(b, &format!("{name}.attn.q"), d, d, fan_in(d)),
            k: linear(b, &format!("{name}.attn.k"), d, d, fan_in(d)),
            v: linear(b, &format!("{name}.attn.v"), d, d, fan_in(d)),
            o: linear(b, &format!("{name}.attn.o"), d, d, fan_in(d) / depth),
        },
        ln2: norm(b, &format!("{name}.ln2"), d),
        fc1: linear(b, &format!("{name}.mlp.fc1"), d, d * ratio, fan_in(d)),
        fc2: linear(b, &format!("{name}.mlp.fc2"), d * ratio, d, fan_in(d * ratio) / depth),
    }
}

impl Layout {
    pub fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Layout, ParamSet<f32>) {
        let mut b = ParamBuilder::new(rng);
        let (dv, dd) = (cfg.d_vision, cfg.d_decoder);

        b.component(Component::Vision);
        let patch = linear(&mut b, "vision.patch_embed", cfg.patch_len(), dv, fan_in(cfg.patch_len()));
        let vis_pos = b.normal("vision.pos_embed", cfg.n_patches(), dv, INIT_STD);
        let vis_blocks = (0..cfg.n_vision_layers)
            .map(|i| block(&mut b, &format!("vision.blocks.{i}"), dv, cfg.mlp_ratio, cfg.n_vision_layers))
            .collect();
        let vis_ln = norm(&mut b, "vision.ln_f", dv);

        b.component(Component::Query);
        let queries = b.normal("query.queries", cfg.n_queries, dv, fan_in(dv));
        let q_blocks = (0..cfg.n_query_layers)
            .map(|i| block(&mut b, &format!("query.blocks.{i}"), dv, cfg.mlp_ratio, cfg.n_query_layers))
            .collect();
        let q_ln = norm(&mut b, "query.ln_f", dv);

        b.component(Component::Alignment);
        let align = linear(&mut b, "alignment.proj", dv, dd, fan_in(dv));

        b.component(Component::Decoder);
        let tok_emb = b.normal("decoder.tok_embed", cfg.vocab_size, dd, 1.0);
        let dec_pos = b.normal("decoder.pos_embed", cfg.context_len(), dd, INIT_STD);
        let dec_blocks = (0..cfg.n_decoder_layers)
            .map(|i| block(&mut b, &format!("decoder.blocks.{i}"), dd, cfg.mlp_ratio, cfg.n_decoder_layers))
            .collect();
        let dec_ln = norm(&mut b, "decoder.ln_f", dd);
        let head = linear(&mut b, "decoder.head", dd, cfg.vocab_size, INIT_STD);

        let layout = Layout {
            patch,
            vis_pos,
            vis_blocks,
            vis_ln,
            queries,
            q_blocks,
            q_ln,
            align,
            tok_emb,
            dec_pos,
            dec_blocks,
            dec_ln,
            head,
        };
        (layout, b.finish())
    }
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub(crate) struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamSet<T>,
    bound: Vec<Option<Var>>,
    trainable: [bool; 4],
}

fn slot(c: Component) -> usize {
    match c {
        Component::Vision => 0,
        Component::Query => 1,
        Component::Alignment => 2,
        Component::Decoder => 3,
    }
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(params: &'a ParamSet<T>, trainable: &[Component]) -> Self {
        let mut t = [false; 4];
        for &c in trainable {
            t[slot(c)] = true;
        }
        Self { tape: Tape::new(), params, bound: vec![None; params.len()], trainable: t }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.params.get(id);
        let v = self.tape.leaf(param.value.clone(), self.trainable[slot(param.component)]);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients for every bound, trainable parameter.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<(ParamId, Mat<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let comp = self.params.get(ParamId(i)).component;
                if !self.trainable[slot(comp)] {
                    return None;
                }
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    pub fn linear(&mut self, x: Var, ids: &LinearIds) -> Var {
        let w = self.p(ids.w);
        let b = self.p(ids.b);
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    pub fn norm(&mut self, x: Var, ids: &NormIds) -> Var {
        let g = self.p(ids.g);
        let b = self.p(ids.b);
        self.tape.layer_norm(x, g, b)
    }

    pub fn attention(&mut self, xq: Var, xkv: Var, ids: &AttnIds, n_heads: usize, mask: AttnMask) -> Var {
        let q = self.linear(xq, &ids.q);
        let k = self.linear(xkv, &ids.k);
        let v = self.linear(xkv, &ids.v);
        let d = self.tape.value(q).cols();
        let dh = d / n_heads;
        let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let s = self.tape.matmul_nt(qh, kh);
            let s = self.tape.scale(s, scale);
            let p = self.tape.softmax_rows(s, mask);
            heads.push(self.tape.matmul(p, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { self.tape.concat_cols(&heads) };
        self.linear(cat, &ids.o)
    }

    fn mlp(&mut self, x: Var, ids: &BlockIds) -> Var {
        let h = self.linear(x, &ids.fc1);
        let h = self.tape.gelu(h);
        self.linear(h, &ids.fc2)
    }

    /// Pre-norm transformer block. With `context` set, attention reads keys
    /// and values from it (cross-attention) instead of from `x`.
    pub fn block(&mut self, x: Var, context: Option<Var>, ids: &BlockIds, n_heads: usize, mask: AttnMask) -> Var {
        let h = self.norm(x, &ids.ln1);
        let kv = context.unwrap_or(h);
        let a = self.attention(h, kv, &ids.attn, n_heads, mask);
        let x = self.tape.add(x, a);
        let h = self.norm(x, &ids.ln2);
        let m = self.mlp(h, ids);
        self.tape.add(x, m)
    }

    pub fn vision_features(&mut self, layout: &Layout, cfg: &ModelConfig, patches: &Mat<T>) -> Var {
        let x = self.tape.constant(patches.clone());
        let mut x = self.linear(x, &layout.patch);
        if cfg.vision_positions {
            let pos = self.p(layout.vis_pos);
            x = self.tape.add(x, pos);
        }
        for b in &layout.vis_blocks {
            x = self.block(x, None, b, cfg.n_heads, AttnMask::Full);
        }
        self.norm(x, &layout.vis_ln)
    }

    pub fn query_embedding(&mut self, layout: &Layout, cfg: &ModelConfig, features: Var) -> Var {
        let mut q = self.p(layout.queries);
        for b in &layout.q_blocks {
            q = self.block(q, Some(features), b, cfg.n_heads, AttnMask::Full);
        }
        self.norm(q, &layout.q_ln)
    }

    pub fn align(&mut self, layout: &Layout, queries: Var) -> Var {
        self.linear(queries, &layout.align)
    }

    /// Decoder input rows: `<bos> [IMG] prefix… [/IMG] text…`.
    pub fn decoder_input(&mut self, layout: &Layout, prefix: Var, text: &[u32]) -> Var {
        let emb = self.p(layout.tok_emb);
        let head = self.tape.gather_rows(emb, &[BOS as usize, IMG_OPEN as usize]);
        let mut tail_ids = vec![IMG_CLOSE as usize];
        tail_ids.extend(text.iter().map(|&i| i as usize));
        let tail = self.tape.gather_rows(emb, &tail_ids);
        let x = self.tape.concat_rows(&[head, prefix, tail]);
        let len = self.tape.value(x).rows();
        let pos = self.p(layout.dec_pos);
        let pos = self.tape.slice_rows(pos, 0, len);
        self.tape.add(x, pos)
    }

    pub fn decoder_logits(&mut self, layout: &Layout, cfg: &ModelConfig, prefix: Var, text: &[u32]) -> Var {
        let mut x = self.decoder_input(layout, prefix, text);
        for b in &layout.dec_blocks {
            x = self.block(x, None, b, cfg.n_heads, AttnMask::Causal);
        }
        let x = self.norm(x, &layout.dec_ln);
        self.linear(x, &layout.head)
    }

    /// Mean next-token cross-entropy over the scored positions of `text`.
    pub fn sequence_loss(&mut self, layout: &Layout, cfg: &ModelConfig, prefix: Var, text: &TokenSequence) -> Var {
        let k = self.tape.value(prefix).rows();
        let logits = self.decoder_logits(layout, cfg, prefix, &text.ids);
        // text token j sits at row 3 + k + j and is predicted by the row before it
        let first = 2 + k;
        let rows = self.tape.value(logits).rows();
        let logits = self.tape.slice_rows(logits, first, rows - first - 1);
        let targets: Vec<usize> = text.ids.iter().map(|&i| i as usize).collect();
        let weights: Vec<T> = text.mask.iter().map(|&m| if m == 1 { T::one() } else { T::zero() }).collect();
        self.tape.cross_entropy(logits, &targets, &weights)
    }
}
