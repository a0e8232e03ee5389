//! Named parameter storage and the small layer types shared by every module.

use std::cell::Cell;

use qica_autograd::{Graph, Mat, Real, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Trainable groups, used for freezing, optimizer bookkeeping and
/// per-group gradient reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Text prompt grids.
    Prompts,
    /// Text-to-vision prompt coupling maps.
    Coupling,
    /// Category projection applied to the full text embedding.
    CategoryProjection,
    /// Quantity embedding table and projection.
    Quantity,
    /// Cost aggregation decoder (bridge, cost embedding, aggregation, upsampling).
    Decoder,
    /// Density prediction head.
    Head,
    TextBackbone,
    VisionBackbone,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Prompts,
        ParamGroup::Coupling,
        ParamGroup::CategoryProjection,
        ParamGroup::Quantity,
        ParamGroup::Decoder,
        ParamGroup::Head,
        ParamGroup::TextBackbone,
        ParamGroup::VisionBackbone,
    ];

    pub fn is_backbone(self) -> bool {
        matches!(self, ParamGroup::TextBackbone | ParamGroup::VisionBackbone)
    }

    /// Groups whose values depend on the quantity conditioning only.
    pub fn is_quantity_dependent(self) -> bool {
        matches!(self, ParamGroup::Quantity | ParamGroup::CategoryProjection)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    frozen_backbone: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            frozen_backbone: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set_frozen_backbone(&mut self, frozen: bool) {
        self.frozen_backbone = frozen;
    }

    pub fn frozen_backbone(&self) -> bool {
        self.frozen_backbone
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !(self.frozen_backbone && self.entries[id.0].group.is_backbone())
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.group == group)
            .map(|(i, _)| ParamId(i))
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.ids_in(group).map(|id| self.value(id).len()).sum()
    }

    /// FNV-1a over every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entries {
            for x in e.value.data() {
                for b in x.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
            frozen_backbone: self.frozen_backbone,
        }
    }
}

/// Parameter initialisation helper.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Mat<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Mat::from_fn(rows, cols, |_, _| T::of(dist.sample(self.rng)))
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in<T: Real>(&mut self, rows: usize, cols: usize) -> Mat<T> {
        let bound = 1.0 / (rows as f64).sqrt();
        Mat::from_fn(rows, cols, |_, _| T::of(self.rng.gen_range(-bound..bound)))
    }
}

/// Call counters for the quantity-dependent stages of a forward pass.
#[derive(Debug, Default)]
pub struct ForwardProbe {
    pub embed_quantity: Cell<usize>,
    pub category_project: Cell<usize>,
}

impl ForwardProbe {
    pub fn quantity_calls(&self) -> usize {
        self.embed_quantity.get() + self.category_project.get()
    }

    pub(crate) fn bump(counter: &Cell<usize>) {
        counter.set(counter.get() + 1);
    }
}

/// Per-forward access to parameters inside a graph.
pub struct Ctx<'a, T> {
    pub graph: &'a Graph<T>,
    pub params: &'a ParamStore<T>,
    pub probe: ForwardProbe,
    grad: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(graph: &'a Graph<T>, params: &'a ParamStore<T>) -> Self {
        Self {
            graph,
            params,
            probe: ForwardProbe::default(),
            grad: true,
        }
    }

    /// Parameters enter the graph as constants; no backward closures are kept.
    pub fn no_grad(graph: &'a Graph<T>, params: &'a ParamStore<T>) -> Self {
        Self {
            grad: false,
            ..Self::new(graph, params)
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.graph.param(
            id.0,
            self.params.value(id),
            self.grad && self.params.is_trainable(id),
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = init.fan_in(fan_in, fan_out);
        Self::with_weight(store, name, group, w)
    }

    pub fn with_weight<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        weight: Mat<T>,
    ) -> Self {
        let out = weight.cols();
        Self {
            weight: store.add(format!("{name}.weight"), group, weight),
            bias: store.add(format!("{name}.bias"), group, Mat::zeros(1, out)),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var) -> Var {
        ctx.graph.linear(x, ctx.p(self.weight), ctx.p(self.bias))
    }

    pub fn dims<T: Real>(&self, store: &ParamStore<T>) -> (usize, usize) {
        store.value(self.weight).shape()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), group, Mat::full(1, width, T::one())),
            bias: store.add(format!("{name}.bias"), group, Mat::zeros(1, width)),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var) -> Var {
        ctx.graph
            .layer_norm(x, ctx.p(self.gain), ctx.p(self.bias), LN_EPS)
    }
}
