//! Tape-free decoder forward with a key/value cache, used for generation.

use super::graph::{BlockIds, LinearIds, NormIds};
use super::{PipelineModel, PrefixEmbedding};
use crate::tensor::Mat;
use crate::tokenizer::{BOS, IMG_CLOSE, IMG_OPEN};

const LN_EPS: f32 = 1e-5;

pub(crate) struct DecoderState<'m> {
    model: &'m PipelineModel,
    keys: Vec<Mat<f32>>,
    values: Vec<Mat<f32>>,
    len: usize,
    last: Vec<f32>,
}

impl<'m> DecoderState<'m> {
    /// Runs the full context once and keeps per-layer keys and values.
    pub fn new(model: &'m PipelineModel, prefix: &PrefixEmbedding, prompt: &[u32]) -> Self {
        let layers = model.layout().dec_blocks.len();
        let d = model.config().d_decoder;
        let mut s = Self {
            model,
            keys: vec![Mat::zeros(0, d); layers],
            values: vec![Mat::zeros(0, d); layers],
            len: 0,
            last: Vec::new(),
        };
        let emb = &s.p(model.layout().tok_emb).clone();
        let mut rows: Vec<f32> = Vec::new();
        for id in [BOS, IMG_OPEN] {
            rows.extend_from_slice(emb.row(id as usize));
        }
        rows.extend_from_slice(prefix.0.data());
        rows.extend_from_slice(emb.row(IMG_CLOSE as usize));
        for &id in prompt {
            rows.extend_from_slice(emb.row(id as usize));
        }
        let x = Mat::from_vec(rows.len() / d, d, rows);
        s.forward(x);
        s
    }

    pub fn last_logits(&self) -> &[f32] {
        &self.last
    }

    pub fn push(&mut self, token: u32) {
        let emb = self.p(self.model.layout().tok_emb);
        let x = Mat::from_vec(1, emb.cols(), emb.row(token as usize).to_vec());
        self.forward(x);
    }

    fn p(&self, id: super::ParamId) -> &'m Mat<f32> {
        &self.model.params().get(id).value
    }

    fn forward(&mut self, mut x: Mat<f32>) {
        let layout = self.model.layout();
        let cfg = self.model.config();
        let start = self.len;
        let pos = self.p(layout.dec_pos);
        for r in 0..x.rows() {
            for (v, &p) in x.row_mut(r).iter_mut().zip(pos.row(start + r)) {
                *v += p;
            }
        }
        for (li, b) in layout.dec_blocks.iter().enumerate() {
            x = self.block(li, b, x, start, cfg.n_heads);
        }
        self.len += x.rows();
        let last = Mat::from_vec(1, x.cols(), x.row(x.rows() - 1).to_vec());
        let h = self.norm(&last, &layout.dec_ln);
        self.last = self.linear(&h, &layout.head).into_vec();
    }

    fn linear(&self, x: &Mat<f32>, ids: &LinearIds) -> Mat<f32> {
        let mut y = x.matmul(self.p(ids.w));
        let b = self.p(ids.b);
        for r in 0..y.rows() {
            for (v, &bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        y
    }

    fn norm(&self, x: &Mat<f32>, ids: &NormIds) -> Mat<f32> {
        let g = self.p(ids.g).data();
        let b = self.p(ids.b).data();
        let d = x.cols() as f32;
        let mut y = x.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let mean = row.iter().sum::<f32>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * is * g[j] + b[j];
            }
        }
        y
    }

    fn block(&mut self, li: usize, ids: &BlockIds, x: Mat<f32>, start: usize, n_heads: usize) -> Mat<f32> {
        let h = self.norm(&x, &ids.ln1);
        let q = self.linear(&h, &ids.attn.q);
        let k = self.linear(&h, &ids.attn.k);
        let v = self.linear(&h, &ids.attn.v);
        append_rows(&mut self.keys[li], &k);
        append_rows(&mut self.values[li], &v);
        let keys = &self.keys[li];
        let values = &self.values[li];
        let d = q.cols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut att = Mat::zeros(q.rows(), d);
        for r in 0..q.rows() {
            let visible = start + r + 1;
            for hd in 0..n_heads {
                let qh = &q.row(r)[hd * dh..(hd + 1) * dh];
                let mut scores: Vec<f32> = (0..visible)
                    .map(|j| qh.iter().zip(&keys.row(j)[hd * dh..(hd + 1) * dh]).map(|(a, b)| a * b).sum::<f32>() * scale)
                    .collect();
                let mx = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0;
                for s in &mut scores {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let out = &mut att.row_mut(r)[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter().enumerate() {
                    let w = s / z;
                    for (o, &vv) in out.iter_mut().zip(&values.row(j)[hd * dh..(hd + 1) * dh]) {
                        *o += w * vv;
                    }
                }
            }
        }
        let a = self.linear(&att, &ids.attn.o);
        let mut x = x;
        x.add_assign(&a);
        let h = self.norm(&x, &ids.ln2);
        let m = self.linear(&h, &ids.fc1);
        let m = m.map(gelu);
        let m = self.linear(&m, &ids.fc2);
        x.add_assign(&m);
        x
    }
}

fn append_rows(dst: &mut Mat<f32>, src: &Mat<f32>) {
    let mut data = std::mem::replace(dst, Mat::zeros(0, src.cols())).into_vec();
    data.extend_from_slice(src.data());
    *dst = Mat::from_vec(data.len() / src.cols(), src.cols(), data);
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}
