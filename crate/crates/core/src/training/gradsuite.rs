//! Finite-difference verification of the complete training loss.

use serde::Serialize;

use crate::episodes::{EpisodeGenerator, Stage};
use crate::error::Result;
use crate::numkernel::{gradient_check, GradCheckReport, Rng};

use super::{episode_loss, LossToggles, Model, TrainConfig};

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteCase {
    pub structure: String,
    pub depth: usize,
    pub metric: String,
    pub report: GradCheckReport,
}

impl GradSuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Config for a tiny episode: `classes` base classes, `K = shots`, and
/// `n_roi` RoIs embedded in `feat_dim` dimensions.
pub fn tiny_config(classes: usize, shots: usize, n_roi: usize, feat_dim: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.data.base_classes = classes;
    cfg.data.novel_classes = 0;
    cfg.data.raw_dim = 6;
    cfg.data.base_shots = shots.max(1);
    cfg.data.novel_shots = Some(shots.max(1));
    cfg.model.hidden_dim = 8;
    cfg.model.feat_dim = feat_dim;
    cfg.model.mlp_hidden = 6;
    cfg.train.shots = shots;
    cfg.train.n_roi = n_roi;
    cfg.train.use_meta = true;
    cfg.relevance.use_drl = true;
    cfg
}

/// Checks `L_cls + L_meta + L_drl` on one base-stage episode of `cfg`.
pub fn check_full_loss(cfg: &TrainConfig, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let gen = EpisodeGenerator::new(cfg.dataset_spec())?;
    let episode = gen.sample_episode(Stage::Base, cfg.train.shots, cfg.train.n_roi, &mut Rng::stream(cfg.seed, 77))?;
    let model = Model::init(cfg)?;
    let toggles = LossToggles {
        use_meta: true,
        use_drl: true,
    };
    gradient_check(
        |tape, store| {
            let fwd = episode_loss(
                tape,
                &model.net,
                model.metric.as_ref(),
                model.propagator.as_ref(),
                store,
                &episode,
                Stage::Base,
                toggles,
            )?;
            Ok(fwd.total)
        },
        &model.store,
        step,
        tolerance,
    )
}

/// Both structures at depth 1 and 3, with Pearson and learned similarity,
/// on a `C=3, K=2, n_roi=5, feat_dim=8` episode.
pub fn gradient_suite() -> Result<Vec<GradSuiteCase>> {
    let mut cases = Vec::new();
    for structure in ["normal", "residual"] {
        for depth in [1, 3] {
            for metric in ["pearson", "learned"] {
                let mut cfg = tiny_config(3, 2, 5, 8, 2024);
                cfg.relevance.structure = structure.into();
                cfg.relevance.depth = depth;
                cfg.relevance.metric = metric.into();
                let report = check_full_loss(&cfg, SUITE_STEP, SUITE_TOLERANCE)?;
                cases.push(GradSuiteCase {
                    structure: structure.into(),
                    depth,
                    metric: metric.into(),
                    report,
                });
            }
        }
    }
    Ok(cases)
}
