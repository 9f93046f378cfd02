use serde::{Deserialize, Serialize};

use crate::episodes::DatasetSpec;
use crate::error::{DrlError, Result};
use crate::relevance::{canonical_metric_name, Activation, MetricRegistry, PropagatorRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub base_classes: usize,
    pub novel_classes: usize,
    pub base_shots: usize,
    /// Novel pool size; defaults to `train.shots`.
    pub novel_shots: Option<usize>,
    pub raw_dim: usize,
    pub class_mean_radius: f64,
    pub within_class_std: f64,
    pub background_std: f64,
    pub include_background: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            base_classes: d.base_class_count,
            novel_classes: d.novel_class_count,
            base_shots: d.base_shots,
            novel_shots: None,
            raw_dim: d.raw_dim,
            class_mean_radius: d.class_mean_radius,
            within_class_std: d.within_class_std,
            background_std: d.background_std,
            include_background: d.include_background,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub feat_dim: usize,
    /// Hidden width of the learned similarity MLP.
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            feat_dim: 16,
            mlp_hidden: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceConfig {
    pub use_drl: bool,
    /// Registered propagator: `normal`, `residual` or `group_loss`.
    pub structure: String,
    pub depth: usize,
    /// Registered similarity metric.
    pub metric: String,
    pub activation: Activation,
    /// Gaussian bandwidth; the median heuristic when unset.
    pub bandwidth: Option<f64>,
    pub degree_scale: bool,
    pub group_iterations: usize,
    /// Draw fresh GCN weights before fine-tuning instead of carrying them over.
    pub reinit_for_finetune: bool,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self {
            use_drl: true,
            structure: "normal".into(),
            depth: 2,
            metric: "pearson".into(),
            activation: Activation::Sigmoid,
            bandwidth: None,
            degree_scale: false,
            group_iterations: 5,
            reinit_for_finetune: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub use_meta: bool,
    pub lr: f64,
    pub momentum: f64,
    pub base_episodes: usize,
    pub finetune_episodes: usize,
    /// K, shared by both stages.
    pub shots: usize,
    pub n_roi: usize,
    /// Permit fine-tuning parameters that never went through base training.
    pub allow_scratch_finetune: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            use_meta: true,
            lr: 0.01,
            momentum: 0.9,
            base_episodes: 300,
            finetune_episodes: 100,
            shots: 3,
            n_roi: 32,
            allow_scratch_finetune: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 10 }
    }
}

/// Complete description of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub relevance: RelevanceConfig,
    pub train: OptimConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            base_class_count: self.data.base_classes,
            novel_class_count: self.data.novel_classes,
            base_shots: self.data.base_shots,
            novel_shots: self.data.novel_shots.unwrap_or(self.train.shots),
            raw_dim: self.data.raw_dim,
            class_mean_radius: self.data.class_mean_radius,
            within_class_std: self.data.within_class_std,
            background_std: self.data.background_std,
            include_background: self.data.include_background,
            seed: self.seed,
        }
    }

    /// Field-level validation; the message names the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(DrlError::Config(format!("{key}: {msg}")));
        if self.relevance.depth < 1 {
            return bad("relevance.depth", "must be >= 1".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad("train.lr", format!("must be > 0, got {}", self.train.lr));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return bad("train.momentum", format!("must be in [0, 1), got {}", self.train.momentum));
        }
        if self.train.shots < 1 {
            return bad("train.shots", "must be >= 1".into());
        }
        if self.train.n_roi < 1 {
            return bad("train.n_roi", "must be >= 1".into());
        }
        if self.eval.episodes < 1 {
            return bad("eval.episodes", "must be >= 1".into());
        }
        if self.model.feat_dim < 2 {
            return bad("model.feat_dim", "must be >= 2".into());
        }
        if self.model.hidden_dim < 1 || self.model.mlp_hidden < 1 {
            return bad("model.hidden_dim", "hidden widths must be >= 1".into());
        }
        if self.relevance.group_iterations < 1 {
            return bad("relevance.group_iterations", "must be >= 1".into());
        }
        if let Some(h) = self.relevance.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return bad("relevance.bandwidth", format!("must be > 0, got {h}"));
            }
        }
        if !MetricRegistry::with_builtins()
            .names()
            .contains(&canonical_metric_name(&self.relevance.metric))
        {
            return bad("relevance.metric", format!("unknown metric `{}`", self.relevance.metric));
        }
        if !PropagatorRegistry::with_builtins()
            .names()
            .contains(&self.relevance.structure.as_str())
        {
            return bad(
                "relevance.structure",
                format!("unknown structure `{}`", self.relevance.structure),
            );
        }
        self.dataset_spec().validate().map_err(|e| match e {
            DrlError::Config(m) => DrlError::Config(format!("data: {m}")),
            other => other,
        })?;
        let spec = self.dataset_spec();
        if self.train.shots > spec.novel_shots {
            return bad(
                "train.shots",
                format!("exceeds novel pool of {} samples", spec.novel_shots),
            );
        }
        Ok(())
    }
}
