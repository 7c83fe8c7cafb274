use fsml_core::episode::Episode;
use fsml_core::transductive::{QueryAggregate, TransductiveConfig, TransductiveState};
use proptest::prelude::*;

/// One refinement round written from scratch: rates from the current
/// prototype, CDF weights on each assigned query, aggregate, blend, re-assign.
fn reference_step(
    protos: &[Vec<f64>],
    assignments: &[usize],
    queries: &[Vec<f64>],
    config: TransductiveConfig,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let rate = |m: f64| {
        if m > 0.0 {
            (1.0 / m).min(config.lambda_max)
        } else {
            config.lambda_max
        }
    };
    let dim = protos[0].len();
    let mut next = protos.to_vec();
    for c in 0..protos.len() {
        let mine: Vec<&Vec<f64>> = queries
            .iter()
            .zip(assignments)
            .filter(|(_, &a)| a == c)
            .map(|(q, _)| q)
            .collect();
        if mine.is_empty() {
            continue;
        }
        for i in 0..dim {
            let l = rate(protos[c][i]);
            let mut num = 0.0;
            let mut den = 0.0;
            for q in &mine {
                let w = 1.0 - (-l * q[i]).exp();
                num += w * q[i];
                den += w;
            }
            let g = match config.aggregate {
                QueryAggregate::RawSum => num,
                QueryAggregate::WeightedAverage if den > 0.0 => num / den,
                QueryAggregate::WeightedAverage => mine.iter().map(|q| q[i]).sum::<f64>() / mine.len() as f64,
            };
            next[c][i] = (1.0 - config.eta) * protos[c][i] + config.eta * g;
        }
    }
    let labels = queries
        .iter()
        .map(|q| {
            let scores: Vec<f64> = next
                .iter()
                .map(|p| (0..dim).map(|i| rate(p[i]).ln() - rate(p[i]) * q[i]).sum())
                .collect();
            // first maximum; way order equals class-id order here
            let mut best = 0;
            for c in 1..scores.len() {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    (next, labels)
}

fn episode_strategy() -> impl Strategy<Value = Episode> {
    (1usize..5, 1usize..4, 1usize..12, 1usize..6).prop_flat_map(|(n, k, m, dim)| {
        let row = prop::collection::vec(prop_oneof![9 => 0.01f64..4.0, 1 => Just(0.0)], dim);
        (
            prop::collection::vec(prop::collection::vec(row.clone(), k), n),
            prop::collection::vec(row, m),
            prop::collection::vec(0..n, m),
        )
            .prop_map(move |(support, queries, labels)| {
                Episode::from_features((0..n as u32).collect(), support, queries, labels).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn one_round_matches_reference(
        ep in episode_strategy(),
        eta in 0.0f64..=1.0,
        raw in any::<bool>(),
        lambda_max in prop::sample::select(vec![5.0, 40.0]),
    ) {
        let config = TransductiveConfig {
            eta,
            lambda_max,
            aggregate: if raw { QueryAggregate::RawSum } else { QueryAggregate::WeightedAverage },
            ..Default::default()
        };
        let task = ep.task();
        let mut state = TransductiveState::new(&task, config).unwrap();
        for _ in 0..3 {
            let (protos, labels) = reference_step(&state.prototypes, &state.assignments, task.queries, config);
            state.step(task.queries).unwrap();
            for (a, b) in state.prototypes.iter().flatten().zip(protos.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{} vs {}", a, b);
            }
            prop_assert_eq!(&state.assignments, &labels);
        }
    }

    #[test]
    fn weighted_updates_stay_bounded(ep in episode_strategy(), eta in 0.0f64..=1.0) {
        let task = ep.task();
        let config = TransductiveConfig { eta, ..Default::default() };
        let mut state = TransductiveState::new(&task, config).unwrap();
        for _ in 0..5 {
            let before = state.prototypes.clone();
            let assignments = state.assignments.clone();
            state.step(task.queries).unwrap();
            for (c, proto) in state.prototypes.iter().enumerate() {
                for (i, &p) in proto.iter().enumerate() {
                    let assigned = task.queries.iter().zip(&assignments).filter(|(_, &a)| a == c).map(|(q, _)| q[i]);
                    let (lo, hi) = assigned.fold((before[c][i], before[c][i]), |(lo, hi), v| (lo.min(v), hi.max(v)));
                    prop_assert!(p.is_finite());
                    prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
                    prop_assert!(state.lambdas[c][i] > 0.0 && state.lambdas[c][i] <= config.lambda_max);
                }
            }
        }
    }
}
