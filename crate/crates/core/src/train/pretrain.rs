//! Stage 0 for the vision side: the encoder and query transformer learn to
//! expose labels through a throwaway linear head shared by every query slot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerKind};
use crate::data::CaptionPair;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{gaussian, Component, Ctx, ParamId, PipelineModel};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 8, lr: 3e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f32>,
    /// Fraction of label bits the head gets right on the training images
    /// after the last step.
    pub train_accuracy: Option<f32>,
}

/// Multi-hot targets: one bit per concept, then one per class.
pub fn vision_labels(pairs: &[CaptionPair], concepts: &[String], classes: &[String]) -> Vec<Vec<f32>> {
    pairs
        .iter()
        .map(|p| {
            let mut y = vec![0.0; concepts.len() + classes.len()];
            for c in &p.concepts {
                if let Some(i) = concepts.iter().position(|x| x == c) {
                    y[i] = 1.0;
                }
            }
            if let Some(cl) = &p.class {
                if let Some(i) = classes.iter().position(|x| x == cl) {
                    y[concepts.len() + i] = 1.0;
                }
            }
            y
        })
        .collect()
}

pub fn pretrain_vision(
    model: &mut PipelineModel,
    images: &[Image],
    labels: &[Vec<f32>],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::EmptyDataset(format!("{} images with {} label rows", images.len(), labels.len())));
    }
    let n_labels = labels[0].len();
    let mc = model.config().clone();
    let grids: Vec<Mat<f32>> =
        images.iter().map(|i| model.patchify(&i.resized(mc.image_size)).map(|g| g.patches)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head_w = Mat::from_fn(mc.d_vision, n_labels, |_, _| 0.02 * gaussian(&mut rng));
    let mut head_b = Mat::zeros(1, n_labels);
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    let head_slot = model.params().len();
    let trainable = [Component::Vision, Component::Query];
    let mut losses = Vec::new();
    for _ in 0..cfg.steps {
        let mut total = 0.0;
        let mut acc: Vec<Option<Mat<f32>>> = vec![None; model.params().len()];
        let mut gw = Mat::zeros(mc.d_vision, n_labels);
        let mut gb = Mat::zeros(1, n_labels);
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..images.len());
            let mut ctx = Ctx::new(model.params(), &trainable);
            let f = ctx.vision_features(model.layout(), &mc, &grids[i]);
            let q = ctx.query_embedding(model.layout(), &mc, f);
            let w = ctx.tape.leaf(head_w.clone(), true);
            let b = ctx.tape.leaf(head_b.clone(), true);
            let z = ctx.tape.matmul(q, w);
            let z = ctx.tape.add_row(z, b);
            let targets: Vec<f32> = (0..mc.n_queries).flat_map(|_| labels[i].iter().copied()).collect();
            let l = ctx.tape.bce_with_logits(z, &targets);
            total += ctx.tape.scalar(l);
            let mut grads = ctx.tape.backward(l);
            if let Some(g) = grads.take(w) {
                gw.add_assign(&g);
            }
            if let Some(g) = grads.take(b) {
                gb.add_assign(&g);
            }
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
            return Err(Error::Numerical(format!("vision pretraining loss became {loss}")));
        }
        losses.push(loss);
        opt.begin_step();
        let lr = cfg.lr as f32;
        for (i, g) in acc.into_iter().enumerate() {
            if let Some(mut g) = g {
                g.scale_in_place(1.0 / n);
                opt.update(i, &mut model.params_mut().get_mut(ParamId(i)).value, &g, lr);
            }
        }
        gw.scale_in_place(1.0 / n);
        gb.scale_in_place(1.0 / n);
        opt.update(head_slot, &mut head_w, &gw, lr);
        opt.update(head_slot + 1, &mut head_b, &gb, lr);
    }
    let train_accuracy = if cfg.steps > 0 {
        let mut right = 0usize;
        for (g, y) in grids.iter().zip(labels) {
            let feats = model.encode_vision(&crate::model::PatchGrid { patches: g.clone() })?;
            let q = model.encode_queries(&feats)?.0;
            let mut z = q.matmul(&head_w);
            for r in 0..z.rows() {
                for (v, &bb) in z.row_mut(r).iter_mut().zip(head_b.data()) {
                    *v += bb;
                }
            }
            for (j, &t) in y.iter().enumerate() {
                let mean = (0..z.rows()).map(|r| z.get(r, j)).sum::<f32>() / z.rows() as f32;
                if (mean > 0.0) == (t > 0.5) {
                    right += 1;
                }
            }
        }
        Some(right as f32 / (grids.len() * n_labels) as f32)
    } else {
        None
    };
    Ok(PretrainReport { losses, train_accuracy })
}
