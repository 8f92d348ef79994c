use distmix::choice::{mnl_prob, nl_prob, NestSpec};
use distmix::data::{make_split, ChoiceDataset, Observation, Role, SegmentScheme, DEFAULT_LOG_DELTA};
use distmix::seed;
use proptest::prelude::*;

fn utilities_and_avail() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..8).prop_flat_map(|j| {
        (
            prop::collection::vec(-50.0f64..50.0, j),
            prop::collection::vec(any::<bool>(), j),
            0..j,
        )
            .prop_map(|(v, mut a, k)| {
                a[k] = true;
                (v, a)
            })
    })
}

fn dataset(distances: &[f64]) -> ChoiceDataset {
    let obs = distances
        .iter()
        .enumerate()
        .map(|(i, &d)| Observation {
            obs_id: i as u64,
            person_id: i as u64 / 2,
            chosen: i % 2,
            distance: d,
            avail: vec![true, true],
            attrs: vec![1.0, 2.0],
            socio: vec![],
        })
        .collect();
    ChoiceDataset::new(
        vec!["a".into(), "b".into()],
        vec!["x".into()],
        vec![],
        DEFAULT_LOG_DELTA,
        obs,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn mnl_is_a_distribution_over_available((v, avail) in utilities_and_avail()) {
        let p = mnl_prob(&v, &avail);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pi, &a) in p.iter().zip(&avail) {
            prop_assert!(pi.is_finite() && *pi >= 0.0);
            if !a { prop_assert_eq!(*pi, 0.0); }
        }
    }

    #[test]
    fn nl_is_a_distribution_over_available(
        (v, avail) in utilities_and_avail(),
        lambda in 0.05f64..=1.0,
        cut in any::<prop::sample::Index>(),
    ) {
        let j = v.len();
        let k = 1 + cut.index(j - 1);
        let nests = NestSpec::new(vec![(0..k).collect(), (k..j).collect()], vec![lambda, 1.0], j).unwrap();
        let p = nl_prob(&v, &nests, &avail).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for (pi, &a) in p.iter().zip(&avail) {
            if !a { prop_assert_eq!(*pi, 0.0); }
        }
    }

    #[test]
    fn mnl_is_shift_invariant((v, avail) in utilities_and_avail(), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let (p, q) = (mnl_prob(&v, &avail), mnl_prob(&shifted, &avail));
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn split_roles_follow_segments(
        distances in prop::collection::vec(0.01f64..100.0, 50..400),
        frac in 0.0f64..0.5,
        s in any::<u64>(),
    ) {
        let ds = dataset(&distances);
        let scheme = SegmentScheme::compute(&ds.distances(), 10).unwrap();
        let split = make_split(&ds, &scheme, frac, s).unwrap();
        let n = distances.len();
        prop_assert_eq!(split.count(Role::Validation), (frac * n as f64).round() as usize);
        prop_assert_eq!(Role::ALL.iter().map(|&r| split.count(r)).sum::<usize>(), n);
        for (&seg, &role) in split.segment_of.iter().zip(&split.role_of) {
            prop_assert!((1..=10).contains(&seg));
            match role {
                Role::SubTrain => prop_assert!((3..=8).contains(&seg)),
                Role::MaOnly => prop_assert!(seg == 2 || seg == 9),
                Role::Excluded => prop_assert!(seg == 1 || seg == 10),
                Role::Validation => {}
            }
        }
        let again = make_split(&ds, &scheme, frac, s).unwrap();
        prop_assert_eq!(again.role_of, split.role_of);
    }

    #[test]
    fn segments_are_monotone_in_distance(distances in prop::collection::vec(0.01f64..100.0, 20..200)) {
        let scheme = SegmentScheme::compute(&distances, 10).unwrap();
        let mut sorted = distances.clone();
        sorted.sort_by(f64::total_cmp);
        let segs: Vec<usize> = sorted.iter().map(|&d| scheme.segment_of(d)).collect();
        prop_assert!(segs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn derived_seeds_separate_streams(root in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(seed::derive(root, "mlp", i), seed::derive(root, "mlp", i));
        prop_assert_ne!(seed::derive(root, "mlp", i), seed::derive(root, "mlp", i + 1));
        prop_assert_ne!(seed::derive(root, "mlp", i), seed::derive(root, "gbt", i));
    }
}
