use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: BTreeMap<usize, Vec<f32>>,
    pub v: BTreeMap<usize, Vec<f32>>,
}

/// Update rule plus whatever per-tensor state it keeps, addressed by slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: BTreeMap::new(),
                v: BTreeMap::new(),
            }),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }

    /// Call once per optimizer step, before the per-tensor updates.
    pub fn begin_step(&mut self) {
        if let Optimizer::Adam(s) = self {
            s.t += 1;
        }
    }

    pub fn update(&mut self, slot: usize, value: &mut Mat<f32>, grad: &Mat<f32>, lr: f32) {
        assert_eq!(value.shape(), grad.shape(), "gradient shape mismatch");
        match self {
            Optimizer::Sgd => {
                for (w, g) in value.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * g;
                }
            }
            Optimizer::Adam(s) => {
                let n = grad.data().len();
                let m = s.m.entry(slot).or_insert_with(|| vec![0.0; n]);
                let v = s.v.entry(slot).or_insert_with(|| vec![0.0; n]);
                let t = s.t.max(1) as i32;
                let c1 = 1.0 - s.beta1.powi(t);
                let c2 = 1.0 - s.beta2.powi(t);
                for (i, (w, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
                    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    *w -= lr * mh / (vh.sqrt() + s.eps);
                }
            }
        }
    }
}
