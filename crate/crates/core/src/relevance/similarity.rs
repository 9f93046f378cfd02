//! Relation-matrix metrics and their name registry.

use std::fmt::Debug;

use crate::error::{DrlError, Result};
use crate::numkernel::{xavier_uniform, Matrix, ParamId, ParamStore, Rng, Tape, Var};

/// Builds the `M x M` relation matrix over node features (`M x d`).
pub trait SimilarityMetric: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn relation(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricOptions {
    pub feat_dim: usize,
    /// Fixed Gaussian bandwidth; `None` selects the median heuristic per graph.
    pub bandwidth: Option<f64>,
    pub mlp_hidden: usize,
}

/// Pearson correlation across feature coordinates.
#[derive(Debug, Clone, Default)]
pub struct Pearson;

impl SimilarityMetric for Pearson {
    fn name(&self) -> &'static str {
        "pearson"
    }

    fn relation(&self, tape: &mut Tape, _store: &ParamStore, features: Var) -> Result<Var> {
        if tape.value(features).cols() < 2 {
            return Err(DrlError::Precondition("pearson needs feat_dim >= 2".into()));
        }
        let centered = tape.center_rows(features);
        let unit = tape.normalize_rows_l2(centered).map_err(|e| match e {
            DrlError::DegenerateFeature { node, .. } => DrlError::DegenerateFeature {
                node,
                reason: "zero variance",
            },
            other => other,
        })?;
        gram_with_unit_diagonal(tape, unit)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Cosine;

impl SimilarityMetric for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn relation(&self, tape: &mut Tape, _store: &ParamStore, features: Var) -> Result<Var> {
        let unit = tape.normalize_rows_l2(features)?;
        gram_with_unit_diagonal(tape, unit)
    }
}

fn gram_with_unit_diagonal(tape: &mut Tape, unit: Var) -> Result<Var> {
    let t = tape.transpose(unit);
    let gram = tape.matmul(unit, t)?;
    tape.set_diagonal_one(gram)
}

/// `1 / (1 + ||f_m - f_n||)`.
#[derive(Debug, Clone, Default)]
pub struct Euclidean;

impl SimilarityMetric for Euclidean {
    fn name(&self) -> &'static str {
        "euclidean"
    }

    fn relation(&self, tape: &mut Tape, _store: &ParamStore, features: Var) -> Result<Var> {
        let d = tape.pairwise_dist(features);
        let shifted = tape.add_scalar(d, 1.0);
        let s = tape.recip(shifted)?;
        tape.set_diagonal_one(s)
    }
}

/// `exp(-||f_m - f_n||² / (2 h²))`.
#[derive(Debug, Clone, Default)]
pub struct GaussianKernel {
    pub bandwidth: Option<f64>,
}

/// Median of the off-diagonal pairwise distances between rows.
pub fn median_pairwise_distance(x: &Matrix) -> f64 {
    let m = x.rows();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let d2: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    }
}

impl SimilarityMetric for GaussianKernel {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn relation(&self, tape: &mut Tape, _store: &ParamStore, features: Var) -> Result<Var> {
        // The median heuristic is read off the current values and held
        // constant for differentiation.
        let h = self
            .bandwidth
            .unwrap_or_else(|| median_pairwise_distance(tape.value(features)))
            .max(1e-12);
        let d2 = tape.pairwise_sq_dist(features);
        let scaled = tape.scale(d2, -1.0 / (2.0 * h * h));
        let s = tape.exp(scaled);
        tape.set_diagonal_one(s)
    }
}

/// `sigmoid(mlp(|f_m - f_n|))` with a one-hidden-layer ReLU MLP, self-similarity
/// fixed at 1. Symmetric because the input is.
#[derive(Debug, Clone)]
pub struct LearnedMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LearnedMlp {
    /// Binds to `similarity.*` parameters in `store`, registering fresh ones
    /// when absent.
    pub fn bind_or_init(feat_dim: usize, hidden: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        if let Some(w1) = store.id("similarity.w1") {
            let net = Self {
                w1,
                b1: store.expect_id("similarity.b1")?,
                w2: store.expect_id("similarity.w2")?,
                b2: store.expect_id("similarity.b2")?,
            };
            if store.get(w1).rows() != feat_dim {
                return Err(DrlError::Config(format!(
                    "similarity.w1 expects feat_dim {}, got {feat_dim}",
                    store.get(w1).rows()
                )));
            }
            return Ok(net);
        }
        Ok(Self {
            w1: store.insert("similarity.w1", xavier_uniform(feat_dim, hidden, rng)),
            b1: store.insert("similarity.b1", Matrix::zeros(1, hidden)),
            w2: store.insert("similarity.w2", xavier_uniform(hidden, 1, rng)),
            b2: store.insert("similarity.b2", Matrix::zeros(1, 1)),
        })
    }
}

impl SimilarityMetric for LearnedMlp {
    fn name(&self) -> &'static str {
        "learned"
    }

    fn relation(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let m = tape.value(features).rows();
        let diffs = tape.pairwise_abs_diff(features);
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(diffs, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        let s = tape.sigmoid(o);
        let s = tape.reshape(s, m, m)?;
        tape.set_diagonal_one(s)
    }
}

pub type MetricFactory = fn(&MetricOptions, &mut ParamStore, &mut Rng) -> Result<Box<dyn SimilarityMetric>>;

/// Similarity metrics selectable by name.
pub struct MetricRegistry {
    entries: Vec<(&'static str, MetricFactory)>,
}

impl MetricRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("pearson", |_, _, _| Ok(Box::new(Pearson)));
        r.register("cosine", |_, _, _| Ok(Box::new(Cosine)));
        r.register("euclidean", |_, _, _| Ok(Box::new(Euclidean)));
        r.register("gaussian", |o, _, _| {
            Ok(Box::new(GaussianKernel {
                bandwidth: o.bandwidth,
            }))
        });
        r.register("learned", |o, store, rng| {
            Ok(Box::new(LearnedMlp::bind_or_init(o.feat_dim, o.mlp_hidden, store, rng)?))
        });
        r
    }

    pub fn register(&mut self, name: &'static str, factory: MetricFactory) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    /// Registered names in registration order.
    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, name: &str, opts: &MetricOptions, store: &mut ParamStore, rng: &mut Rng) -> Result<Box<dyn SimilarityMetric>> {
        let canonical = canonical_metric_name(name);
        let (_, factory) = self
            .entries
            .iter()
            .find(|(n, _)| *n == canonical)
            .ok_or_else(|| DrlError::UnknownStrategy {
                kind: "similarity metric",
                name: name.to_string(),
            })?;
        factory(opts, store, rng)
    }
}

pub fn canonical_metric_name(name: &str) -> &str {
    match name {
        "learned_mlp" | "mlp" => "learned",
        "gaussian_kernel" => "gaussian",
        other => other,
    }
}

impl Default for MetricRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
