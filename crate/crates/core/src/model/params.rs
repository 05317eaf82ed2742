use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Mat, Scalar};

/// The four trainable pieces of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Vision,
    Query,
    Alignment,
    Decoder,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Vision, Component::Query, Component::Alignment, Component::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Component::Vision => "vision",
            Component::Query => "query",
            Component::Alignment => "alignment",
            Component::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Component> {
        Component::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in storage order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub component: Component,
    pub value: Mat<T>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T: Scalar = f32> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), component: p.component, value: p.value.cast() })
                .collect(),
        }
    }

    pub fn count(&self, component: Component) -> usize {
        self.entries.iter().filter(|p| p.component == component).map(|p| p.value.data().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }
}

impl ParamSet<f32> {
    /// Little-endian bytes of every tensor in one component, in layout order.
    pub fn component_bytes(&self, component: Component) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|p| p.component == component)
            .flat_map(|p| p.value.data().iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }
}

/// Registers parameters in a fixed order and draws their initial values.
pub(crate) struct ParamBuilder<'r> {
    set: ParamSet<f32>,
    rng: &'r mut ChaCha8Rng,
    component: Component,
}

impl<'r> ParamBuilder<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { set: ParamSet::default(), rng, component: Component::Vision }
    }

    pub fn component(&mut self, c: Component) {
        self.component = c;
    }

    fn push(&mut self, name: String, value: Mat<f32>) -> ParamId {
        debug_assert!(self.set.find(&name).is_none(), "duplicate parameter {name}");
        self.set.entries.push(Param { name, component: self.component, value });
        ParamId(self.set.entries.len() - 1)
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f32) -> ParamId {
        let data = (0..rows * cols).map(|_| gaussian(self.rng) * std).collect();
        self.push(name.into(), Mat::from_vec(rows, cols, data))
    }

    pub fn constant(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f32) -> ParamId {
        self.push(name.into(), Mat::from_vec(rows, cols, vec![v; rows * cols]))
    }

    pub fn finish(self) -> ParamSet<f32> {
        self.set
    }
}

/// Standard normal draw (Box–Muller); kept local so initialisation is
/// reproducible across dependency upgrades.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}
