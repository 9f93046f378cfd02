//! Label propagation over the relevance graph.
//!
//! Three interchangeable strategies share the [`Propagator`] trait:
//!
//! * `normal`: `Z(l) = σ(S X(l) W(l))` with `X(l+1) = Z(l)`; the last
//!   attention is multiplied back into the initial embeddings,
//!   `G = renorm(Z(L) ⊙ X(0))`.
//! * `residual`: `X(l+1) = renorm(Z(l) ⊙ X(l))`, anchors reset after every
//!   layer, `G = X(L+1)`.
//! * `group_loss`: the fixed replicator iteration with no trainable weights.
//!
//! `renorm` clamps negatives to zero and divides each row by its sum
//! (guarded at 1e-12). Anchor rows of every output equal their labels.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};
use crate::numkernel::{xavier_uniform, Matrix, ParamId, ParamStore, Rng, Tape, Var, SHIFT_EPS};

use super::graph::RelevanceGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Normal,
    Residual,
}

impl Structure {
    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Normal => "normal",
            Structure::Residual => "residual",
        }
    }
}

/// Output of one propagation pass.
#[derive(Debug, Clone)]
pub struct Propagation {
    /// `M x D`, row-stochastic, anchors equal to their labels.
    pub output: Var,
    /// Per-layer attention `Z(l)` (GCN) or confidence `π(t)` (group loss).
    pub layers: Vec<Var>,
}

pub trait Propagator: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn propagate(&self, tape: &mut Tape, store: &ParamStore, graph: &RelevanceGraph) -> Result<Propagation>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagatorOptions {
    pub depth: usize,
    pub activation: Activation,
    /// Multiply `S` by `1/M` before propagation.
    pub degree_scale: bool,
    /// Apply the replicator π-shift to each attention row before the product.
    pub shift_attention: bool,
    pub group_iterations: usize,
    /// Side of the stored `W(l)`; graphs of width `D` use the top-left `D x D` block.
    pub max_width: usize,
}

impl Default for PropagatorOptions {
    fn default() -> Self {
        Self {
            depth: 2,
            activation: Activation::Sigmoid,
            degree_scale: false,
            shift_attention: false,
            group_iterations: 5,
            max_width: 1,
        }
    }
}

/// Layer weights and settings shared by both GCN structures.
#[derive(Debug, Clone)]
pub struct GcnStack {
    pub weights: Vec<ParamId>,
    pub activation: Activation,
    pub degree_scale: bool,
    pub shift_attention: bool,
}

pub fn gcn_weight_name(layer: usize) -> String {
    format!("gcn.w{layer}")
}

impl GcnStack {
    /// Binds `gcn.w1..=gcn.wL`, registering Xavier-initialised weights for any
    /// layer not yet in `store`.
    pub fn bind_or_init(opts: &PropagatorOptions, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        if opts.depth == 0 {
            return Err(DrlError::Config("GCN depth must be >= 1".into()));
        }
        let mut weights = Vec::with_capacity(opts.depth);
        for l in 1..=opts.depth {
            let name = gcn_weight_name(l);
            let id = match store.id(&name) {
                Some(id) if store.get(id).shape() == (opts.max_width, opts.max_width) => id,
                Some(_) => {
                    return Err(DrlError::Config(format!(
                        "`{name}` is not {w}x{w}",
                        w = opts.max_width
                    )))
                }
                None => store.insert(name, xavier_uniform(opts.max_width, opts.max_width, rng)),
            };
            weights.push(id);
        }
        Ok(Self {
            weights,
            activation: opts.activation,
            degree_scale: opts.degree_scale,
            shift_attention: opts.shift_attention,
        })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    fn relation(&self, tape: &mut Tape, graph: &RelevanceGraph) -> Var {
        if self.degree_scale {
            let m = graph.node_count() as f64;
            tape.scale(graph.relation, 1.0 / m)
        } else {
            graph.relation
        }
    }

    /// `σ(S X W(layer))`, optionally π-shifted.
    fn attention(&self, tape: &mut Tape, store: &ParamStore, s: Var, x: Var, layer: usize) -> Result<Var> {
        let d = tape.value(x).cols();
        let w_full = tape.param(store, self.weights[layer]);
        if tape.value(w_full).rows() < d {
            return Err(DrlError::Shape {
                op: "gcn_forward",
                left: tape.value(w_full).shape(),
                right: (d, d),
            });
        }
        let w = tape.slice(w_full, 0, d, 0, d)?;
        let sx = tape.matmul_exact(s, x)?;
        let pre = tape.matmul(sx, w)?;
        let z = match self.activation {
            Activation::Sigmoid => tape.sigmoid(pre),
            Activation::Identity => pre,
        };
        Ok(if self.shift_attention { tape.row_shift(z) } else { z })
    }
}

/// Clamp negatives to zero, then divide each row by its guarded sum.
pub fn renorm(tape: &mut Tape, x: Var) -> Var {
    let clamped = tape.relu(x);
    tape.row_normalize(clamped)
}

#[derive(Debug, Clone)]
pub struct NormalGcn(pub GcnStack);

impl Propagator for NormalGcn {
    fn name(&self) -> &'static str {
        "normal"
    }

    fn propagate(&self, tape: &mut Tape, store: &ParamStore, graph: &RelevanceGraph) -> Result<Propagation> {
        let stack = &self.0;
        let s = stack.relation(tape, graph);
        let mut x = graph.x0;
        let mut layers = Vec::with_capacity(stack.depth());
        for l in 0..stack.depth() {
            let z = stack.attention(tape, store, s, x, l)?;
            layers.push(z);
            x = z;
        }
        let last = *layers.last().expect("depth >= 1");
        let g = tape.mul(last, graph.x0)?;
        let g = renorm(tape, g);
        let output = graph.clamp_anchors(tape, g)?;
        Ok(Propagation { output, layers })
    }
}

#[derive(Debug, Clone)]
pub struct ResidualGcn(pub GcnStack);

impl Propagator for ResidualGcn {
    fn name(&self) -> &'static str {
        "residual"
    }

    fn propagate(&self, tape: &mut Tape, store: &ParamStore, graph: &RelevanceGraph) -> Result<Propagation> {
        let stack = &self.0;
        let s = stack.relation(tape, graph);
        let mut x = graph.x0;
        let mut layers = Vec::with_capacity(stack.depth());
        for l in 0..stack.depth() {
            let z = stack.attention(tape, store, s, x, l)?;
            layers.push(z);
            let next = tape.mul(z, x)?;
            let next = renorm(tape, next);
            x = graph.clamp_anchors(tape, next)?;
        }
        Ok(Propagation { output: x, layers })
    }
}

/// Differentiable replicator iteration: `π = shift(S X)`,
/// `r ← r ⊙ π / Σ r ⊙ π` on drift rows, anchors held at their labels.
#[derive(Debug, Clone)]
pub struct GroupLoss {
    pub iterations: usize,
}

impl Propagator for GroupLoss {
    fn name(&self) -> &'static str {
        "group_loss"
    }

    fn propagate(&self, tape: &mut Tape, _store: &ParamStore, graph: &RelevanceGraph) -> Result<Propagation> {
        if self.iterations == 0 {
            return Err(DrlError::Precondition("group loss needs at least one iteration".into()));
        }
        let mut x = graph.x0;
        let mut layers = Vec::with_capacity(self.iterations);
        for _ in 0..self.iterations {
            let sx = tape.matmul_exact(graph.relation, x)?;
            let pi = tape.row_shift(sx);
            layers.push(pi);
            let prod = tape.mul(x, pi)?;
            check_normalizers(tape.value(prod), &graph.anchor_mask)?;
            let next = tape.row_normalize(prod);
            x = graph.clamp_anchors(tape, next)?;
        }
        Ok(Propagation { output: x, layers })
    }
}

fn check_normalizers(prod: &Matrix, anchor_mask: &[bool]) -> Result<()> {
    for (m, &anchor) in anchor_mask.iter().enumerate() {
        if anchor {
            continue;
        }
        let total: f64 = prod.row(m).iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(DrlError::DegenerateUpdate { node: m });
        }
    }
    Ok(())
}

/// Plain-matrix replicator iteration on drift rows.
///
/// Nodes are ordered anchors first (`anchor_slots`, one-hot of width
/// `p0.cols()`), then the drift rows `p0`. Each iteration computes
/// `π_m = Σ_j S[m][j] x_j`, shifts each row by `-min(0, min π_m) + 1e-12`,
/// and sets `r_m ← r_m ⊙ π_m / Σ_μ r_mμ π_mμ` for every drift node.
pub fn group_loss_iterate(s: &Matrix, p0: &Matrix, anchor_slots: &[usize], iterations: usize) -> Result<Matrix> {
    if iterations == 0 {
        return Err(DrlError::Precondition("group loss needs T >= 1".into()));
    }
    let d = p0.cols();
    let n_anchor = anchor_slots.len();
    let m = n_anchor + p0.rows();
    if s.shape() != (m, m) {
        return Err(DrlError::Shape {
            op: "group_loss_iterate",
            left: s.shape(),
            right: (m, m),
        });
    }
    let mut x = Matrix::zeros(m, d);
    for (i, &slot) in anchor_slots.iter().enumerate() {
        if slot >= d {
            return Err(DrlError::Label { label: slot, width: d });
        }
        x.set(i, slot, 1.0);
    }
    for r in 0..p0.rows() {
        x.row_mut(n_anchor + r).copy_from_slice(p0.row(r));
    }
    for _ in 0..iterations {
        let mut next = x.clone();
        for node in n_anchor..m {
            let mut pi = vec![0.0; d];
            for j in 0..m {
                let sj = s.get(node, j);
                for (c, p) in pi.iter_mut().enumerate() {
                    *p += sj * x.get(j, c);
                }
            }
            let lowest = pi.iter().copied().fold(f64::INFINITY, f64::min);
            let shift = lowest.min(0.0);
            pi.iter_mut().for_each(|p| *p = *p - shift + SHIFT_EPS);
            let denom: f64 = (0..d).map(|c| x.get(node, c) * pi[c]).sum();
            if !(denom > 0.0 && denom.is_finite()) {
                return Err(DrlError::DegenerateUpdate { node });
            }
            for (c, p) in pi.iter().enumerate() {
                next.set(node, c, x.get(node, c) * p / denom);
            }
        }
        x = next;
    }
    Ok(Matrix::from_fn(p0.rows(), d, |r, c| x.get(n_anchor + r, c)))
}

pub type PropagatorFactory = fn(&PropagatorOptions, &mut ParamStore, &mut Rng) -> Result<Box<dyn Propagator>>;

/// Propagation strategies selectable by name.
pub struct PropagatorRegistry {
    entries: Vec<(&'static str, PropagatorFactory)>,
}

impl PropagatorRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("normal", |o, store, rng| {
            Ok(Box::new(NormalGcn(GcnStack::bind_or_init(o, store, rng)?)))
        });
        r.register("residual", |o, store, rng| {
            Ok(Box::new(ResidualGcn(GcnStack::bind_or_init(o, store, rng)?)))
        });
        r.register("group_loss", |o, _, _| {
            Ok(Box::new(GroupLoss {
                iterations: o.group_iterations,
            }))
        });
        r
    }

    pub fn register(&mut self, name: &'static str, factory: PropagatorFactory) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, name: &str, opts: &PropagatorOptions, store: &mut ParamStore, rng: &mut Rng) -> Result<Box<dyn Propagator>> {
        let (_, factory) = self
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| DrlError::UnknownStrategy {
                kind: "propagator",
                name: name.to_string(),
            })?;
        factory(opts, store, rng)
    }
}

impl Default for PropagatorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
