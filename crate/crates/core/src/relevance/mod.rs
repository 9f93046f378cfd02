//! Relation matrices, dynamic GCN propagation and the relevance loss.

mod dump;
mod graph;
mod loss;
mod propagate;
mod separation;
mod similarity;

pub use dump::GraphDump;
pub use graph::{build_graph, RelevanceGraph};
pub use loss::drl_loss;
pub use propagate::{
    gcn_weight_name, group_loss_iterate, renorm, Activation, GcnStack, GroupLoss, NormalGcn, Propagation, Propagator,
    PropagatorFactory, PropagatorOptions, PropagatorRegistry, ResidualGcn, Structure,
};
pub use separation::{class_separation, SeparationReport};
pub use similarity::{
    canonical_metric_name, median_pairwise_distance, Cosine, Euclidean, GaussianKernel, LearnedMlp, MetricFactory,
    MetricOptions, MetricRegistry, Pearson, SimilarityMetric,
};
