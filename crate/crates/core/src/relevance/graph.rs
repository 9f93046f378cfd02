use crate::episodes::Episode;
use crate::error::{DrlError, Result};
use crate::metanet::FeatureBundle;
use crate::numkernel::{Matrix, ParamStore, Tape, Var};

use super::similarity::SimilarityMetric;

/// Support nodes (anchors) followed by RoI nodes (drifts).
#[derive(Debug, Clone)]
pub struct RelevanceGraph {
    /// `M x feat_dim`, or `None` when the graph was assembled from a bare relation matrix.
    pub node_features: Option<Var>,
    /// `M x M`.
    pub relation: Var,
    /// `M x D` initial embeddings: one-hot labels for anchors, probability rows for drifts.
    pub x0: Var,
    pub anchor_mask: Vec<bool>,
    /// One-hot rows at anchor positions, zeros elsewhere.
    pub anchor_targets: Matrix,
}

impl RelevanceGraph {
    /// Assembles a graph from an existing relation matrix and drift rows.
    /// Anchors come first, one per entry of `anchor_slots`.
    pub fn from_parts(tape: &mut Tape, relation: Var, anchor_slots: &[usize], drift_probs: Var) -> Result<Self> {
        let d = tape.value(drift_probs).cols();
        let n_anchor = anchor_slots.len();
        let m = n_anchor + tape.value(drift_probs).rows();
        let s = tape.value(relation);
        if s.shape() != (m, m) {
            return Err(DrlError::Shape {
                op: "build_graph",
                left: s.shape(),
                right: (m, m),
            });
        }
        if let Some(&bad) = anchor_slots.iter().find(|&&c| c >= d) {
            return Err(DrlError::Label { label: bad, width: d });
        }
        let mut targets = Matrix::zeros(m, d);
        for (i, &slot) in anchor_slots.iter().enumerate() {
            targets.set(i, slot, 1.0);
        }
        let x0 = if n_anchor > 0 {
            let onehots = Matrix::from_fn(n_anchor, d, |r, c| targets.get(r, c));
            let anchors = tape.constant(onehots);
            tape.concat_rows(&[anchors, drift_probs])?
        } else {
            drift_probs
        };
        Ok(Self {
            node_features: None,
            relation,
            x0,
            anchor_mask: (0..m).map(|i| i < n_anchor).collect(),
            anchor_targets: targets,
        })
    }

    pub fn node_count(&self) -> usize {
        self.anchor_mask.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_mask.iter().filter(|&&a| a).count()
    }

    pub fn drift_indices(&self) -> Vec<usize> {
        (self.anchor_count()..self.node_count()).collect()
    }

    pub fn width(&self) -> usize {
        self.anchor_targets.cols()
    }

    /// Resets anchor rows of `x` to their one-hot labels.
    pub fn clamp_anchors(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.replace_rows(x, &self.anchor_mask, &self.anchor_targets)
    }
}

/// Builds the per-episode graph: nodes are `[support features; RoI features]`,
/// the relation comes from `metric`, and drifts start at the head's probability rows.
pub fn build_graph(
    tape: &mut Tape,
    store: &ParamStore,
    bundle: &FeatureBundle,
    episode: &Episode,
    metric: &dyn SimilarityMetric,
) -> Result<RelevanceGraph> {
    let nodes = tape.concat_rows(&[bundle.support_features, bundle.roi_features])?;
    let relation = metric.relation(tape, store, nodes)?;
    let mut graph = RelevanceGraph::from_parts(tape, relation, &episode.support_slots(), bundle.probs)?;
    graph.node_features = Some(nodes);
    Ok(graph)
}
