use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numkernel::{Matrix, Tape};

use super::graph::RelevanceGraph;
use super::propagate::Propagation;

/// Snapshot of one propagation pass for fixture comparison. `layers` is
/// keyed by 1-based layer index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub relation: Matrix,
    pub x0: Matrix,
    pub anchor_mask: Vec<bool>,
    pub layers: BTreeMap<usize, Matrix>,
    pub output: Matrix,
}

impl GraphDump {
    pub fn capture(tape: &Tape, graph: &RelevanceGraph, prop: &Propagation) -> Self {
        Self {
            relation: tape.value(graph.relation).clone(),
            x0: tape.value(graph.x0).clone(),
            anchor_mask: graph.anchor_mask.clone(),
            layers: prop
                .layers
                .iter()
                .enumerate()
                .map(|(i, &z)| (i + 1, tape.value(z).clone()))
                .collect(),
            output: tape.value(prop.output).clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dump serializes")
    }
}
