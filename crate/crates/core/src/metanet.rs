//! Surrogate meta-detector head.
//!
//! A shared two-layer extractor embeds support samples and query RoIs.
//! Class-attentive vectors are the sigmoid of each class's mean support
//! feature. Every RoI is aggregated with every class vector as
//! `[r * a, r - a, r]`, pushed through a shared affine head, and the
//! class-c row contributes the logit at that class's slot. The background
//! logit (slot 0) is read from the head applied to the mean aggregated row.

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{DrlError, Result};
use crate::numkernel::{xavier_uniform, Matrix, ParamId, ParamStore, Rng, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaNetConfig {
    pub raw_dim: usize,
    pub hidden_dim: usize,
    pub feat_dim: usize,
    /// Largest class count any episode will present.
    pub max_classes: usize,
    pub include_background: bool,
}

impl MetaNetConfig {
    pub fn max_width(&self) -> usize {
        self.max_classes + usize::from(self.include_background)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Affine map `3 * feat_dim -> max_width`.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// Affine map `feat_dim -> max_classes` for the support classification loss.
#[derive(Debug, Clone, Copy)]
pub struct MetaClassifierParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct MetaNet {
    pub config: MetaNetConfig,
    pub extractor: ExtractorParams,
    pub head: HeadParams,
    pub meta: MetaClassifierParams,
}

/// Forward products of one episode.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBundle {
    /// `C*K x feat_dim`, class-major.
    pub support_features: Var,
    /// `C x feat_dim`, entries in (0, 1).
    pub class_attentive: Var,
    /// `n_roi x feat_dim`.
    pub roi_features: Var,
    /// `n_roi*C x 3*feat_dim`; row `j*C + c` pairs RoI `j` with class `c`.
    pub aggregated: Var,
    /// `n_roi x D`.
    pub probs: Var,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.expect_id(name)
}

impl MetaNet {
    /// Registers freshly initialised parameters in `store`: Xavier-uniform
    /// weights and zero biases.
    pub fn init(config: MetaNetConfig, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let (r, h, f, d) = (config.raw_dim, config.hidden_dim, config.feat_dim, config.max_width());
        let extractor = ExtractorParams {
            w1: store.insert("extractor.w1", xavier_uniform(r, h, rng)),
            b1: store.insert("extractor.b1", Matrix::zeros(1, h)),
            w2: store.insert("extractor.w2", xavier_uniform(h, f, rng)),
            b2: store.insert("extractor.b2", Matrix::zeros(1, f)),
        };
        let head = HeadParams {
            w: store.insert("head.w", xavier_uniform(3 * f, d, rng)),
            b: store.insert("head.b", Matrix::zeros(1, d)),
        };
        let meta = MetaClassifierParams {
            w: store.insert("meta.w", xavier_uniform(f, config.max_classes, rng)),
            b: store.insert("meta.b", Matrix::zeros(1, config.max_classes)),
        };
        Self {
            config,
            extractor,
            head,
            meta,
        }
    }

    /// Re-binds to parameters already present in `store` (e.g. a checkpoint).
    pub fn bind(config: MetaNetConfig, store: &ParamStore) -> Result<Self> {
        let net = Self {
            extractor: ExtractorParams {
                w1: lookup(store, "extractor.w1")?,
                b1: lookup(store, "extractor.b1")?,
                w2: lookup(store, "extractor.w2")?,
                b2: lookup(store, "extractor.b2")?,
            },
            head: HeadParams {
                w: lookup(store, "head.w")?,
                b: lookup(store, "head.b")?,
            },
            meta: MetaClassifierParams {
                w: lookup(store, "meta.w")?,
                b: lookup(store, "meta.b")?,
            },
            config,
        };
        let expect = |id: ParamId, shape: (usize, usize)| -> Result<()> {
            if store.get(id).shape() != shape {
                return Err(DrlError::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    store.name(id),
                    store.get(id).shape(),
                    shape
                )));
            }
            Ok(())
        };
        let c = &net.config;
        expect(net.extractor.w1, (c.raw_dim, c.hidden_dim))?;
        expect(net.extractor.w2, (c.hidden_dim, c.feat_dim))?;
        expect(net.head.w, (3 * c.feat_dim, c.max_width()))?;
        expect(net.meta.w, (c.feat_dim, c.max_classes))?;
        Ok(net)
    }

    /// `relu(x W1 + b1) W2 + b2`, applied row-wise.
    pub fn extract(&self, tape: &mut Tape, store: &ParamStore, raws: Var) -> Result<Var> {
        extract_with(tape, store, &self.extractor, raws)
    }

    /// Runs the surrogate detector on one episode.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, episode: &Episode) -> Result<FeatureBundle> {
        if episode.num_classes() > self.config.max_classes {
            return Err(DrlError::Config(format!(
                "episode has {} classes, model supports {}",
                episode.num_classes(),
                self.config.max_classes
            )));
        }
        if episode.include_background != self.config.include_background {
            return Err(DrlError::Config("episode and model disagree on background".into()));
        }
        let c = episode.num_classes();
        let support_raw = tape.constant(episode.support_raws());
        let query_raw = tape.constant(episode.query_raws());
        let support_features = self.extract(tape, store, support_raw)?;
        let roi_features = self.extract(tape, store, query_raw)?;
        let class_attentive = class_attentive(tape, support_features, c, episode.shots)?;
        let aggregated = aggregate_all(tape, roi_features, class_attentive)?;
        let probs = self.classify(tape, store, aggregated, episode.queries.len(), c)?;
        Ok(FeatureBundle {
            support_features,
            class_attentive,
            roi_features,
            aggregated,
            probs,
        })
    }

    /// Probability rows from aggregated RoI-class rows (`n_roi*C` rows).
    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, aggregated: Var, n_roi: usize, classes: usize) -> Result<Var> {
        classify_with(
            tape,
            store,
            &self.head,
            aggregated,
            n_roi,
            classes,
            self.config.include_background,
        )
    }

    /// Mean cross-entropy of the support classifier; `class_ids` are 1-based.
    pub fn meta_loss(&self, tape: &mut Tape, store: &ParamStore, support: Var, class_ids: &[usize], classes: usize) -> Result<Var> {
        meta_loss_with(tape, store, &self.meta, support, class_ids, classes)
    }
}

pub fn extract_with(tape: &mut Tape, store: &ParamStore, p: &ExtractorParams, raws: Var) -> Result<Var> {
    let w1 = tape.param(store, p.w1);
    let b1 = tape.param(store, p.b1);
    let w2 = tape.param(store, p.w2);
    let b2 = tape.param(store, p.b2);
    let h = tape.matmul(raws, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let f = tape.matmul(h, w2)?;
    tape.add_row(f, b2)
}

/// `sigmoid(mean of each class's K rows)`; `support` is class-major.
pub fn class_attentive(tape: &mut Tape, support: Var, classes: usize, shots: usize) -> Result<Var> {
    if tape.value(support).rows() != classes * shots {
        return Err(DrlError::Shape {
            op: "class_attentive",
            left: tape.value(support).shape(),
            right: (classes, shots),
        });
    }
    let mean = tape.group_mean_rows(support, shots)?;
    Ok(tape.sigmoid(mean))
}

/// `[r * a, r - a, r]` for row-aligned `r` and `a`.
pub fn aggregate(tape: &mut Tape, r: Var, a: Var) -> Result<Var> {
    let prod = tape.mul(r, a)?;
    let diff = tape.sub(r, a)?;
    tape.concat_cols(&[prod, diff, r])
}

/// Pairs every RoI with every class vector: row `j*C + c` aggregates RoI `j` with class `c`.
pub fn aggregate_all(tape: &mut Tape, rois: Var, attentive: Var) -> Result<Var> {
    let n = tape.value(rois).rows();
    let c = tape.value(attentive).rows();
    let roi_idx: Vec<usize> = (0..n * c).map(|k| k / c).collect();
    let cls_idx: Vec<usize> = (0..n * c).map(|k| k % c).collect();
    let r = tape.select_rows(rois, &roi_idx)?;
    let a = tape.select_rows(attentive, &cls_idx)?;
    aggregate(tape, r, a)
}

pub fn classify_with(
    tape: &mut Tape,
    store: &ParamStore,
    head: &HeadParams,
    aggregated: Var,
    n_roi: usize,
    classes: usize,
    include_background: bool,
) -> Result<Var> {
    let rows = tape.value(aggregated).rows();
    if rows != n_roi * classes {
        return Err(DrlError::Shape {
            op: "classify",
            left: tape.value(aggregated).shape(),
            right: (n_roi, classes),
        });
    }
    let offset = usize::from(include_background);
    let width = classes + offset;
    let w_full = tape.param(store, head.w);
    let b_full = tape.param(store, head.b);
    let in_dim = tape.value(w_full).rows();
    let w = tape.slice(w_full, 0, in_dim, 0, width)?;
    let b = tape.slice(b_full, 0, 1, 0, width)?;
    let out = tape.matmul(aggregated, w)?;
    let out = tape.add_row(out, b)?;
    let picks: Vec<(usize, usize)> = (0..n_roi * classes)
        .map(|k| (k, k % classes + offset))
        .collect();
    let class_logits = tape.gather(out, &picks, n_roi, classes)?;
    let logits = if include_background {
        let mean = tape.group_mean_rows(aggregated, classes)?;
        let bg = tape.matmul(mean, w)?;
        let bg = tape.add_row(bg, b)?;
        let bg = tape.slice(bg, 0, n_roi, 0, 1)?;
        tape.concat_cols(&[bg, class_logits])?
    } else {
        class_logits
    };
    Ok(tape.row_softmax(logits))
}

pub fn meta_loss_with(
    tape: &mut Tape,
    store: &ParamStore,
    mc: &MetaClassifierParams,
    support: Var,
    class_ids: &[usize],
    classes: usize,
) -> Result<Var> {
    if let Some(&bad) = class_ids.iter().find(|&&c| c == 0 || c > classes) {
        return Err(DrlError::Label {
            label: bad,
            width: classes,
        });
    }
    let w_full = tape.param(store, mc.w);
    let b_full = tape.param(store, mc.b);
    let in_dim = tape.value(w_full).rows();
    let w = tape.slice(w_full, 0, in_dim, 0, classes)?;
    let b = tape.slice(b_full, 0, 1, 0, classes)?;
    let logits = tape.matmul(support, w)?;
    let logits = tape.add_row(logits, b)?;
    let probs = tape.row_softmax(logits);
    let labels: Vec<usize> = class_ids.iter().map(|c| c - 1).collect();
    tape.nll_mean(probs, &labels)
}

/// Mean cross-entropy `-(1/n) Σ ln p[label]` over probability rows.
pub fn cls_loss(tape: &mut Tape, probs: Var, slots: &[usize]) -> Result<Var> {
    tape.nll_mean(probs, slots)
}
