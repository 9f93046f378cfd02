use drl::episodes::{DatasetSpec, EpisodeGenerator, Stage};
use drl::numkernel::{row_softmax, Matrix, Rng};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..7,
        scale in 0.0f64..500.0,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let x = Matrix::from_fn(rows, cols, |_, _| scale * rng.normal());
        let p = row_softmax(&x);
        for r in 0..rows {
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            let total: f64 = p.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert_eq!(p.row_argmax(r), x.row_argmax(r));
        }
    }

    #[test]
    fn episodes_are_full_way(
        base in 1usize..6,
        novel in 0usize..4,
        shots in 1usize..4,
        n_roi in 1usize..12,
        background in any::<bool>(),
        fine_tune in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let spec = DatasetSpec {
            base_class_count: base,
            novel_class_count: novel,
            base_shots: 50,
            novel_shots: shots,
            raw_dim: 3,
            include_background: background,
            seed,
            ..DatasetSpec::default()
        };
        let gen = EpisodeGenerator::new(spec).unwrap();
        let stage = if fine_tune { Stage::FineTune } else { Stage::Base };
        let ep = gen.sample_episode(stage, shots, n_roi, &mut Rng::new(seed ^ 1)).unwrap();
        ep.validate().unwrap();
        let c = if fine_tune { base + novel } else { base };
        prop_assert_eq!(ep.num_classes(), c);
        prop_assert_eq!(ep.support.len(), c * shots);
        prop_assert_eq!(ep.queries.len(), n_roi);
        prop_assert_eq!(ep.node_count(), c * shots + n_roi);
        for (i, s) in ep.support.iter().enumerate() {
            prop_assert_eq!(s.class_id, i / shots + 1);
            prop_assert_eq!(s.raw.len(), 3);
        }
        let lowest = if background { 0 } else { 1 };
        prop_assert!(ep.queries.iter().all(|q| q.label >= lowest && q.label <= c));
        prop_assert!(ep.query_slots().iter().all(|&s| s < ep.width()));
    }
}
