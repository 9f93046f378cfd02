use drl::episodes::{DatasetSpec, EpisodeGenerator, Stage};
use drl::numkernel::{Matrix, Rng};
use drl::training::{evaluate, run_experiment, train_stage, Model, TrainConfig, TrainError};
use drl::DrlError;

fn easy(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.data.class_mean_radius = 10.0;
    cfg.data.within_class_std = 0.5;
    cfg
}

#[test]
fn nearest_mean_separates_tight_clusters() {
    let spec = DatasetSpec {
        within_class_std: 1e-6,
        class_mean_radius: 50.0,
        include_background: false,
        ..DatasetSpec::default()
    };
    let gen = EpisodeGenerator::new(spec).unwrap();
    let ep = gen.sample_episode(Stage::FineTune, 3, 200, &mut Rng::new(4)).unwrap();
    let means = gen.class_means();
    for q in &ep.queries {
        let nearest = (0..ep.class_ids.len())
            .min_by(|&a, &b| {
                let d = |c: usize| -> f64 {
                    means[ep.class_ids[c]].iter().zip(&q.raw).map(|(m, x)| (m - x).powi(2)).sum()
                };
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        assert_eq!(nearest + 1, q.label);
    }
}

#[test]
fn zero_episodes_leave_params_unchanged() {
    let mut cfg = TrainConfig::default();
    cfg.train.base_episodes = 0;
    cfg.train.finetune_episodes = 0;
    let gen = EpisodeGenerator::new(cfg.dataset_spec()).unwrap();
    let mut model = Model::init(&cfg).unwrap();
    let before = model.store.clone();
    assert!(train_stage(&gen, &cfg, Stage::Base, &mut model).unwrap().is_empty());
    assert!(train_stage(&gen, &cfg, Stage::FineTune, &mut model).unwrap().is_empty());
    assert_eq!(model.store, before);
}

#[test]
fn base_training_lowers_classification_loss() {
    for seed in 0..5 {
        let mut cfg = easy(seed);
        cfg.train.base_episodes = 50;
        let gen = EpisodeGenerator::new(cfg.dataset_spec()).unwrap();
        let mut model = Model::init(&cfg).unwrap();
        let losses = train_stage(&gen, &cfg, Stage::Base, &mut model).unwrap();
        let head: f64 = losses[..5].iter().map(|r| r.l_cls).sum();
        let tail: f64 = losses[45..].iter().map(|r| r.l_cls).sum();
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn fine_tune_needs_base_or_explicit_flag() {
    let mut cfg = TrainConfig::default();
    cfg.train.finetune_episodes = 2;
    let gen = EpisodeGenerator::new(cfg.dataset_spec()).unwrap();
    let mut model = Model::init(&cfg).unwrap();
    let err = train_stage(&gen, &cfg, Stage::FineTune, &mut model).unwrap_err();
    assert!(matches!(err, TrainError::Other(DrlError::Precondition(_))));
    cfg.train.allow_scratch_finetune = true;
    let reports = train_stage(&gen, &cfg, Stage::FineTune, &mut model).unwrap();
    assert!(reports.iter().all(|r| r.l_meta == 0.0));
}

#[test]
fn same_seed_gives_identical_runs() {
    let mut cfg = TrainConfig::default();
    cfg.train.base_episodes = 20;
    cfg.train.finetune_episodes = 10;
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let bits = |o: &drl::training::RunOutcome| -> Vec<u64> { o.losses().map(|r| r.total.to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.model.checkpoint().to_json(), b.model.checkpoint().to_json());
    assert_eq!(a.eval, b.eval);
}

#[test]
fn uniform_logits_score_at_chance() {
    let cfg = TrainConfig::default();
    let gen = EpisodeGenerator::new(cfg.dataset_spec()).unwrap();
    let mut model = Model::init(&cfg).unwrap();
    for name in ["head.w", "head.b"] {
        let id = model.store.expect_id(name).unwrap();
        let (r, c) = model.store.get(id).shape();
        *model.store.get_mut(id) = Matrix::zeros(r, c);
    }
    let report = evaluate(&gen, &cfg, &model, 20).unwrap();
    let chance = 1.0 / 11.0;
    assert!((report.query_accuracy - chance).abs() <= 0.1, "{}", report.query_accuracy);
}

#[test]
fn easy_spec_is_learned_almost_perfectly() {
    for seed in 0..5 {
        let mut cfg = easy(seed);
        cfg.data.within_class_std = 0.05;
        cfg.train.base_episodes = 200;
        cfg.train.finetune_episodes = 100;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.eval.query_accuracy >= 0.95, "seed {seed}: {}", out.eval.query_accuracy);
    }
}

#[test]
fn evaluation_reads_params_only() {
    let mut cfg = TrainConfig::default();
    cfg.train.base_episodes = 5;
    cfg.train.finetune_episodes = 0;
    let out = run_experiment(&cfg).unwrap();
    let before = out.model.checkpoint().to_json();
    let gen = EpisodeGenerator::new(cfg.dataset_spec()).unwrap();
    let first = evaluate(&gen, &cfg, &out.model, 3).unwrap();
    assert_eq!(out.model.checkpoint().to_json(), before);
    assert_eq!(evaluate(&gen, &cfg, &out.model, 3).unwrap(), first);
}

#[test]
fn reinit_flag_replaces_gcn_weights() {
    let mut cfg = TrainConfig::default();
    cfg.train.base_episodes = 3;
    cfg.train.finetune_episodes = 1;
    cfg.train.lr = 0.0;
    let gen = EpisodeGenerator::new(cfg.dataset_spec()).unwrap();
    let mut model = Model::init(&cfg).unwrap();
    train_stage(&gen, &cfg, Stage::Base, &mut model).unwrap();
    let w = model.store.by_name("gcn.w1").unwrap().clone();
    let mut carried = Model::from_checkpoint(&cfg, model.checkpoint()).unwrap();
    train_stage(&gen, &cfg, Stage::FineTune, &mut carried).unwrap();
    assert_eq!(carried.store.by_name("gcn.w1").unwrap(), &w);
    cfg.relevance.reinit_for_finetune = true;
    train_stage(&gen, &cfg, Stage::FineTune, &mut model).unwrap();
    assert_ne!(model.store.by_name("gcn.w1").unwrap(), &w);
}

#[test]
fn single_group_iteration_matches_equivalent_gcn_on_frozen_params() {
    use drl::relevance::{
        build_graph, drl_loss, gcn_weight_name, Activation, GroupLoss, PropagatorOptions, PropagatorRegistry, Propagator,
    };
    let mut cfg = TrainConfig::default();
    cfg.train.base_episodes = 10;
    cfg.train.finetune_episodes = 0;
    let out = run_experiment(&cfg).unwrap();
    let gen = EpisodeGenerator::new(cfg.dataset_spec()).unwrap();
    let width = Model::meta_config(&cfg).max_width();
    let opts = PropagatorOptions {
        depth: 1,
        activation: Activation::Identity,
        shift_attention: true,
        max_width: width,
        ..PropagatorOptions::default()
    };
    let mut store = out.model.store.clone();
    store.insert(gcn_weight_name(1), Matrix::identity(width));
    let gcn = PropagatorRegistry::with_builtins().build("normal", &opts, &mut store, &mut Rng::new(0)).unwrap();
    let group = GroupLoss { iterations: 1 };
    let mut rng = Rng::new(3);
    for _ in 0..5 {
        let episode = gen.sample_episode(Stage::FineTune, 3, 16, &mut rng).unwrap();
        let mut losses = Vec::new();
        for prop in [gcn.as_ref(), &group as &dyn Propagator] {
            let mut tape = drl::numkernel::Tape::new();
            let bundle = out.model.net.forward(&mut tape, &store, &episode).unwrap();
            let graph = build_graph(&mut tape, &store, &bundle, &episode, out.model.metric.as_ref()).unwrap();
            let p = prop.propagate(&mut tape, &store, &graph).unwrap();
            let loss = drl_loss(&mut tape, &graph, p.output, &episode.query_slots()).unwrap();
            losses.push(tape.scalar(loss));
        }
        assert!((losses[0] - losses[1]).abs() <= 1e-10, "{losses:?}");
    }
}
