//! Loss composition, optimisation and the two-stage protocol.

mod config;
mod gradsuite;

pub use config::{DataConfig, EvalConfig, ModelConfig, OptimConfig, RelevanceConfig, TrainConfig};
pub use gradsuite::{check_full_loss, gradient_suite, tiny_config, GradSuiteCase, SUITE_STEP, SUITE_TOLERANCE};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::episodes::{Episode, EpisodeGenerator, Stage};
use crate::error::{DrlError, Result};
use crate::metanet::{cls_loss, MetaNet, MetaNetConfig};
use crate::numkernel::{Matrix, ParamStore, Rng, Tape, Var};
use crate::relevance::{
    build_graph, class_separation, drl_loss, gcn_weight_name, MetricOptions, MetricRegistry, Propagation,
    Propagator, PropagatorOptions, PropagatorRegistry, SimilarityMetric,
};

// Sub-stream ids of the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_BASE: u64 = 2;
const STREAM_FINETUNE: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_REINIT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub l_cls: f64,
    pub l_meta: f64,
    pub l_drl: f64,
    pub total: f64,
}

/// Raw loss terms of one episode, before composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_meta: f64,
    pub l_drl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub use_meta: bool,
    pub use_drl: bool,
}

impl LossToggles {
    /// Whether the meta term enters the total in `stage`. Never in fine-tune.
    pub fn meta_active(self, stage: Stage) -> bool {
        self.use_meta && stage == Stage::Base
    }
}

/// Unit-weight sum of the enabled terms. Base: `cls + meta + drl`;
/// fine-tune: `cls + drl`. Disabled terms are reported as zero.
pub fn compose_loss(stage: Stage, parts: LossParts, toggles: LossToggles) -> Result<LossReport> {
    for (name, v) in [("l_cls", parts.l_cls), ("l_meta", parts.l_meta), ("l_drl", parts.l_drl)] {
        if !v.is_finite() {
            return Err(DrlError::NonFinite(name.into()));
        }
    }
    let l_meta = if toggles.meta_active(stage) { parts.l_meta } else { 0.0 };
    let l_drl = if toggles.use_drl { parts.l_drl } else { 0.0 };
    Ok(LossReport {
        stage,
        l_cls: parts.l_cls,
        l_meta,
        l_drl,
        total: parts.l_cls + l_meta + l_drl,
    })
}

/// `v ← momentum·v + g; θ ← θ − lr·v`.
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, velocity: &mut Matrix, lr: f64, momentum: f64) -> Result<()> {
    param.same_shape(grad, "sgd_step")?;
    param.same_shape(velocity, "sgd_step")?;
    for ((p, g), v) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(velocity.as_mut_slice())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Trainable state plus the strategies selected by the config.
#[derive(Debug)]
pub struct Model {
    pub net: MetaNet,
    pub metric: Box<dyn SimilarityMetric>,
    pub propagator: Box<dyn Propagator>,
    pub store: ParamStore,
    pub base_trained: bool,
}

impl Model {
    pub fn meta_config(cfg: &TrainConfig) -> MetaNetConfig {
        MetaNetConfig {
            raw_dim: cfg.data.raw_dim,
            hidden_dim: cfg.model.hidden_dim,
            feat_dim: cfg.model.feat_dim,
            max_classes: cfg.data.base_classes + cfg.data.novel_classes,
            include_background: cfg.data.include_background,
        }
    }

    fn metric_options(cfg: &TrainConfig) -> MetricOptions {
        MetricOptions {
            feat_dim: cfg.model.feat_dim,
            bandwidth: cfg.relevance.bandwidth,
            mlp_hidden: cfg.model.mlp_hidden,
        }
    }

    pub fn propagator_options(cfg: &TrainConfig) -> PropagatorOptions {
        PropagatorOptions {
            depth: cfg.relevance.depth,
            activation: cfg.relevance.activation,
            degree_scale: cfg.relevance.degree_scale,
            shift_attention: false,
            group_iterations: cfg.relevance.group_iterations,
            max_width: Self::meta_config(cfg).max_width(),
        }
    }

    /// Fresh parameters for `cfg`, seeded from `cfg.seed`.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(cfg.seed, STREAM_INIT);
        let net = MetaNet::init(Self::meta_config(cfg), &mut store, &mut rng);
        Self::assemble(cfg, net, store, false, &mut rng)
    }

    /// Rebinds a checkpoint to the strategies of `cfg`.
    pub fn from_checkpoint(cfg: &TrainConfig, ck: Checkpoint) -> Result<Self> {
        let net = MetaNet::bind(Self::meta_config(cfg), &ck.params)?;
        let mut rng = Rng::stream(cfg.seed, STREAM_INIT);
        Self::assemble(cfg, net, ck.params, ck.base_trained, &mut rng)
    }

    fn assemble(cfg: &TrainConfig, net: MetaNet, mut store: ParamStore, base_trained: bool, rng: &mut Rng) -> Result<Self> {
        let metric = MetricRegistry::with_builtins().build(&cfg.relevance.metric, &Self::metric_options(cfg), &mut store, rng)?;
        let propagator = PropagatorRegistry::with_builtins().build(
            &cfg.relevance.structure,
            &Self::propagator_options(cfg),
            &mut store,
            rng,
        )?;
        Ok(Self {
            net,
            metric,
            propagator,
            store,
            base_trained,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.store.clone(), self.base_trained)
    }
}

/// Tape handles for one episode's forward pass.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    pub l_cls: Var,
    pub l_meta: Option<Var>,
    pub l_drl: Option<Var>,
    pub total: Var,
    pub propagation: Option<Propagation>,
    pub report: LossReport,
}

/// Records the full training loss of `episode` on `tape`, reading parameters from `store`.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss(
    tape: &mut Tape,
    net: &MetaNet,
    metric: &dyn SimilarityMetric,
    propagator: &dyn Propagator,
    store: &ParamStore,
    episode: &Episode,
    stage: Stage,
    toggles: LossToggles,
) -> Result<EpisodeForward> {
    let bundle = net.forward(tape, store, episode)?;
    let roi_slots = episode.query_slots();
    let l_cls = cls_loss(tape, bundle.probs, &roi_slots)?;

    let l_meta = if toggles.meta_active(stage) {
        let ids: Vec<usize> = episode.support.iter().map(|s| s.class_id).collect();
        Some(net.meta_loss(tape, store, bundle.support_features, &ids, episode.num_classes())?)
    } else {
        None
    };

    let (l_drl, propagation) = if toggles.use_drl {
        let graph = build_graph(tape, store, &bundle, episode, metric)?;
        let prop = propagator.propagate(tape, store, &graph)?;
        (Some(drl_loss(tape, &graph, prop.output, &roi_slots)?), Some(prop))
    } else {
        (None, None)
    };

    let parts = LossParts {
        l_cls: tape.scalar(l_cls),
        l_meta: l_meta.map_or(0.0, |v| tape.scalar(v)),
        l_drl: l_drl.map_or(0.0, |v| tape.scalar(v)),
    };
    let report = compose_loss(stage, parts, toggles)?;
    let terms: Vec<Var> = std::iter::once(l_cls).chain(l_meta).chain(l_drl).collect();
    let total = tape.add_scalars(&terms)?;
    Ok(EpisodeForward {
        l_cls,
        l_meta,
        l_drl,
        total,
        propagation,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Numerical { episode: usize, source: DrlError },
    Other(DrlError),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Numerical { episode, source } => write!(f, "episode {episode}: {source}"),
            TrainError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<DrlError> for TrainError {
    fn from(e: DrlError) -> Self {
        TrainError::Other(e)
    }
}

fn toggles(cfg: &TrainConfig) -> LossToggles {
    LossToggles {
        use_meta: cfg.train.use_meta,
        use_drl: cfg.relevance.use_drl,
    }
}

/// Runs one training stage: one SGD step per sampled episode.
pub fn train_stage(gen: &EpisodeGenerator, cfg: &TrainConfig, stage: Stage, model: &mut Model) -> std::result::Result<Vec<LossReport>, TrainError> {
    let episodes = match stage {
        Stage::Base => cfg.train.base_episodes,
        Stage::FineTune => cfg.train.finetune_episodes,
    };
    if stage == Stage::FineTune && !model.base_trained && !cfg.train.allow_scratch_finetune && episodes > 0 {
        return Err(DrlError::Precondition(
            "fine-tune requires base-trained parameters (set train.allow_scratch_finetune)".into(),
        )
        .into());
    }
    if stage == Stage::FineTune && cfg.relevance.reinit_for_finetune {
        let mut rng = Rng::stream(cfg.seed, STREAM_REINIT);
        let w = Model::propagator_options(cfg).max_width;
        for l in 1..=cfg.relevance.depth {
            if model.store.id(&gcn_weight_name(l)).is_some() {
                model
                    .store
                    .insert(gcn_weight_name(l), crate::numkernel::xavier_uniform(w, w, &mut rng));
            }
        }
    }
    let stream = match stage {
        Stage::Base => STREAM_BASE,
        Stage::FineTune => STREAM_FINETUNE,
    };
    let mut rng = Rng::stream(cfg.seed, stream);
    let mut velocity: Vec<Matrix> = model
        .store
        .iter()
        .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let toggles = toggles(cfg);
    let mut reports = Vec::with_capacity(episodes);

    for index in 0..episodes {
        let episode = gen.sample_episode(stage, cfg.train.shots, cfg.train.n_roi, &mut rng)?;
        let mut tape = Tape::new();
        let fwd = episode_loss(
            &mut tape,
            &model.net,
            model.metric.as_ref(),
            model.propagator.as_ref(),
            &model.store,
            &episode,
            stage,
            toggles,
        )
        .map_err(|e| match e {
            DrlError::NonFinite(_) | DrlError::DegenerateFeature { .. } | DrlError::DegenerateUpdate { .. } => {
                TrainError::Numerical { episode: index, source: e }
            }
            other => TrainError::Other(other),
        })?;
        if !tape.scalar(fwd.total).is_finite() {
            return Err(TrainError::Numerical {
                episode: index,
                source: DrlError::NonFinite("total".into()),
            });
        }
        let grads = tape.backward(fwd.total);
        for (i, id) in model.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get_or_zeros(id, &model.store);
            if !g.is_finite() {
                return Err(TrainError::Numerical {
                    episode: index,
                    source: DrlError::NonFinite(format!("gradient of `{}`", model.store.name(id))),
                });
            }
            sgd_step(model.store.get_mut(id), &g, &mut velocity[i], cfg.train.lr, cfg.train.momentum)?;
        }
        reports.push(fwd.report);
    }
    if stage == Stage::Base {
        model.base_trained = true;
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Argmax of the head's probability rows against RoI labels.
    pub query_accuracy: f64,
    /// Indexed by probability slot; `None` when the slot never occurred.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean silhouette of pooled foreground RoI features.
    pub class_separation: Option<f64>,
    pub episodes: usize,
}

/// Scores `model` on held-out fine-tune-style episodes. The relevance graph
/// is not built; parameters are only read.
pub fn evaluate(gen: &EpisodeGenerator, cfg: &TrainConfig, model: &Model, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(DrlError::Precondition("evaluate needs at least one episode".into()));
    }
    let mut rng = Rng::stream(cfg.seed, STREAM_EVAL);
    let width = Model::meta_config(cfg).max_width();
    let mut hits = vec![0usize; width];
    let mut seen = vec![0usize; width];
    let mut pooled: Vec<Vec<f64>> = Vec::new();
    let mut pooled_labels = Vec::new();

    for _ in 0..episodes {
        let episode = gen.sample_episode(Stage::FineTune, cfg.train.shots, cfg.train.n_roi, &mut rng)?;
        let mut tape = Tape::new();
        let bundle = model.net.forward(&mut tape, &model.store, &episode)?;
        let probs = tape.value(bundle.probs);
        let feats = tape.value(bundle.roi_features);
        for (j, slot) in episode.query_slots().into_iter().enumerate() {
            seen[slot] += 1;
            if probs.row_argmax(j) == slot {
                hits[slot] += 1;
            }
            let label = episode.queries[j].label;
            if label > 0 {
                pooled.push(feats.row(j).to_vec());
                pooled_labels.push(episode.class_ids[label - 1]);
            }
        }
    }
    let total_seen: usize = seen.iter().sum();
    let total_hits: usize = hits.iter().sum();
    let per_class_accuracy = hits
        .iter()
        .zip(&seen)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    let class_separation = if pooled.len() >= 2 {
        Matrix::from_rows(&pooled)
            .ok()
            .and_then(|x| class_separation(&x, &pooled_labels).ok())
            .map(|r| r.score)
    } else {
        None
    };
    Ok(EvalReport {
        query_accuracy: total_hits as f64 / total_seen as f64,
        per_class_accuracy,
        class_separation,
        episodes,
    })
}

/// Outcome of a full base → fine-tune → evaluate run.
#[derive(Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub base_losses: Vec<LossReport>,
    pub finetune_losses: Vec<LossReport>,
    pub eval: EvalReport,
}

impl RunOutcome {
    pub fn losses(&self) -> impl Iterator<Item = &LossReport> {
        self.base_losses.iter().chain(&self.finetune_losses)
    }
}

pub fn run_experiment(cfg: &TrainConfig) -> std::result::Result<RunOutcome, TrainError> {
    cfg.validate()?;
    let gen = EpisodeGenerator::new(cfg.dataset_spec())?;
    let mut model = Model::init(cfg)?;
    let base_losses = train_stage(&gen, cfg, Stage::Base, &mut model)?;
    let finetune_losses = train_stage(&gen, cfg, Stage::FineTune, &mut model)?;
    let eval = evaluate(&gen, cfg, &model, cfg.eval.episodes)?;
    Ok(RunOutcome {
        model,
        base_losses,
        finetune_losses,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_examples() {
        let parts = LossParts {
            l_cls: 1.0,
            l_meta: 0.5,
            l_drl: 0.2,
        };
        let on = LossToggles {
            use_meta: true,
            use_drl: true,
        };
        let base = compose_loss(Stage::Base, parts, on).unwrap();
        assert!((base.total - 1.7).abs() < 1e-15);
        let ft = compose_loss(Stage::FineTune, parts, on).unwrap();
        assert!((ft.total - 1.2).abs() < 1e-15);
        assert_eq!(ft.l_meta, 0.0);
        let no_drl = compose_loss(
            Stage::Base,
            parts,
            LossToggles {
                use_meta: true,
                use_drl: false,
            },
        )
        .unwrap();
        assert!((no_drl.total - 1.5).abs() < 1e-15);
        assert_eq!(no_drl.l_drl, 0.0);
    }

    #[test]
    fn compose_rejects_nan_and_names_term() {
        let err = compose_loss(
            Stage::Base,
            LossParts {
                l_cls: 1.0,
                l_meta: f64::NAN,
                l_drl: 0.0,
            },
            LossToggles {
                use_meta: false,
                use_drl: false,
            },
        )
        .unwrap_err();
        assert_eq!(err, DrlError::NonFinite("l_meta".into()));
    }

    #[test]
    fn fine_tune_never_includes_meta() {
        for use_meta in [false, true] {
            for use_drl in [false, true] {
                let r = compose_loss(
                    Stage::FineTune,
                    LossParts {
                        l_cls: 0.3,
                        l_meta: 9.0,
                        l_drl: 0.1,
                    },
                    LossToggles { use_meta, use_drl },
                )
                .unwrap();
                assert_eq!(r.l_meta, 0.0);
                assert!(r.total < 1.0);
            }
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = Matrix::filled(2, 2, 3.0);
        let mut v = Matrix::zeros(2, 2);
        sgd_step(&mut p, &Matrix::filled(2, 2, 1.0), &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p, Matrix::filled(2, 2, 2.0));

        let mut p = Matrix::filled(1, 3, 0.7);
        let mut v = Matrix::zeros(1, 3);
        sgd_step(&mut p, &Matrix::zeros(1, 3), &mut v, 0.5, 0.9).unwrap();
        assert_eq!(p, Matrix::filled(1, 3, 0.7));

        // v1 = g, v2 = 0.9 g + g = 1.9 g
        let (lr, g) = (0.1, Matrix::filled(1, 1, 2.0));
        let mut p = Matrix::zeros(1, 1);
        let mut v = Matrix::zeros(1, 1);
        sgd_step(&mut p, &g, &mut v, lr, 0.9).unwrap();
        let after_one = p.get(0, 0);
        sgd_step(&mut p, &g, &mut v, lr, 0.9).unwrap();
        assert!(((after_one - p.get(0, 0)) - lr * 1.9 * 2.0).abs() < 1e-15);
    }
}
