use crate::error::{DrlError, Result};
use crate::numkernel::{Tape, Var};

use super::graph::RelevanceGraph;

/// Cross-entropy of the propagated drift rows against the RoI labels,
/// averaged over drift nodes only. Anchor rows never contribute.
pub fn drl_loss(tape: &mut Tape, graph: &RelevanceGraph, output: Var, roi_slots: &[usize]) -> Result<Var> {
    let drifts = graph.drift_indices();
    if drifts.len() != roi_slots.len() {
        return Err(DrlError::Shape {
            op: "drl_loss",
            left: (drifts.len(), graph.width()),
            right: (roi_slots.len(), 1),
        });
    }
    let rows = tape.select_rows(output, &drifts)?;
    tape.nll_mean(rows, roi_slots)
}
