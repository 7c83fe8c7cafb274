use fsml_core::episode::Episode;
use fsml_core::metrics::{
    classify_inductive, cosine_score, episode_loss, estimate_lambda, euclidean_score, loss_feature_gradient,
    softmax_posterior, Metric, DEFAULT_LAMBDA_MAX_LOSS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_episode(rng: &mut ChaCha8Rng, n: usize, k: usize, m: usize, dim: usize, lo: f64, hi: f64) -> Episode {
    let mut draw = || (0..dim).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    let support = (0..n).map(|_| (0..k).map(|_| draw()).collect()).collect();
    let queries = (0..m).map(|_| draw()).collect();
    let labels = (0..m).map(|q| q % n).collect();
    Episode::from_features((0..n as u32).collect(), support, queries, labels).unwrap()
}

/// Loss computed from first principles: rates from feature sums, per-class
/// log-likelihood, log-sum-exp normaliser, averaged with the 1/(N M) constant.
#[allow(clippy::needless_range_loop)]
fn loss_from_scratch(ep: &Episode, lambda_max: f64) -> f64 {
    let n = ep.n_way();
    let k = ep.k_shot() as f64;
    let dim = ep.dim();
    let mut rates = vec![vec![0.0; dim]; n];
    for c in 0..n {
        for i in 0..dim {
            let sum: f64 = ep.support()[c].iter().map(|v| v[i]).sum();
            rates[c][i] = if sum == 0.0 {
                lambda_max
            } else {
                (k / sum).min(lambda_max)
            };
        }
    }
    let mut total = 0.0;
    for (q, &y) in ep.queries().iter().zip(ep.hidden_labels()) {
        let scores: Vec<f64> = rates
            .iter()
            .map(|l| (0..dim).map(|i| l[i].ln() - l[i] * q[i]).sum())
            .collect();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += scores[y] - lse;
    }
    -total / (n * ep.num_queries()) as f64
}

#[test]
fn loss_matches_independent_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..50 {
        let ep = random_episode(&mut rng, 4, 3, 9, 6, 0.0, 2.0);
        for lambda_max in [5.0, DEFAULT_LAMBDA_MAX_LOSS] {
            let a = episode_loss(&ep, lambda_max).unwrap();
            let b = loss_from_scratch(&ep, lambda_max);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let h = 1e-5;
    let lambda_max = DEFAULT_LAMBDA_MAX_LOSS;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        // support means stay above 1/lambda_max, so no rate is clipped
        let ep = random_episode(&mut rng, 3, 2, 6, 8, 0.2, 3.0);
        let grad = loss_feature_gradient(&ep, lambda_max).unwrap();
        let fd = |perturb: &dyn Fn(&mut Episode, f64)| {
            let mut up = ep.clone();
            perturb(&mut up, h);
            let mut down = ep.clone();
            perturb(&mut down, -h);
            (episode_loss(&up, lambda_max).unwrap() - episode_loss(&down, lambda_max).unwrap()) / (2.0 * h)
        };
        for c in 0..3 {
            for s in 0..2 {
                for i in 0..8 {
                    let num = fd(&|e: &mut Episode, d| e.support_mut()[c][s][i] += d);
                    let err =
                        (grad.support[c][s][i] - num).abs() / num.abs().max(grad.support[c][s][i].abs()).max(1e-8);
                    worst = worst.max(err);
                }
            }
        }
        for q in 0..6 {
            for i in 0..8 {
                let num = fd(&|e: &mut Episode, d| e.queries_mut()[q][i] += d);
                let err = (grad.queries[q][i] - num).abs() / num.abs().max(grad.queries[q][i].abs()).max(1e-8);
                worst = worst.max(err);
            }
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn clipped_rates_block_support_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut ep = random_episode(&mut rng, 3, 2, 6, 4, 0.2, 3.0);
    // feature 1 of way 0 is far below 1/lambda_max
    for shot in ep.support_mut()[0].iter_mut() {
        shot[1] = 1e-4;
    }
    let grad = loss_feature_gradient(&ep, 40.0).unwrap();
    assert!(grad.support[0].iter().all(|g| g[1] == 0.0));
    assert!(grad.support[1].iter().any(|g| g[1] != 0.0));
}

fn positive_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..10.0, dim)
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        scores in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -1e3f64..1e3,
    ) {
        let p = softmax_posterior(&scores);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = softmax_posterior(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_ignores_query_scale(
        (p, q) in (1usize..16).prop_flat_map(|d| (positive_vec(d), positive_vec(d))),
        s in 1e-3f64..1e3,
    ) {
        let scaled: Vec<f64> = q.iter().map(|v| v * s).collect();
        let a = cosine_score(&p, &q).unwrap();
        let b = cosine_score(&p, &scaled).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn euclid_ignores_common_translation(
        (p, q, t) in (1usize..16).prop_flat_map(|d| (positive_vec(d), positive_vec(d), prop::collection::vec(-100.0f64..100.0, d))),
    ) {
        let pt: Vec<f64> = p.iter().zip(&t).map(|(a, b)| a + b).collect();
        let qt: Vec<f64> = q.iter().zip(&t).map(|(a, b)| a + b).collect();
        let a = euclidean_score(&p, &q).unwrap();
        let b = euclidean_score(&pt, &qt).unwrap();
        prop_assert!(a <= 0.0);
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn larger_support_values_never_raise_lambda(
        support in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), 1..6),
        row in 0usize..6,
        col in 0usize..4,
        bump in 0.0f64..3.0,
        lambda_max in 0.5f64..100.0,
    ) {
        let row = row % support.len();
        let before = estimate_lambda(&support, lambda_max).unwrap();
        let mut bumped = support.clone();
        bumped[row][col] += bump;
        let after = estimate_lambda(&bumped, lambda_max).unwrap();
        prop_assert!(after[col] <= before[col]);
        prop_assert!(after.iter().chain(&before).all(|&l| l > 0.0 && l <= lambda_max));
        for i in (0..4).filter(|&i| i != col) {
            prop_assert_eq!(after[i], before[i]);
        }
    }

    #[test]
    fn unclipped_rates_invert_the_mean(
        support in prop::collection::vec(prop::collection::vec(0.1f64..5.0, 6), 1..8),
    ) {
        let lambda = estimate_lambda(&support, 1e6).unwrap();
        for (i, l) in lambda.iter().enumerate() {
            let mean = support.iter().map(|v| v[i]).sum::<f64>() / support.len() as f64;
            prop_assert!((l * mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mll_predictions_survive_global_scaling(seed in any::<u64>(), s in prop::sample::select(vec![0.1, 1.0, 10.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = random_episode(&mut rng, 5, 1, 20, 10, 0.05, 5.0);
        let scaled = ep.map_features(|v| v * s);
        let lambda_max = 1e9;
        prop_assert_eq!(
            classify_inductive(&ep.task(), Metric::Mll, lambda_max).unwrap(),
            classify_inductive(&scaled.task(), Metric::Mll, lambda_max).unwrap()
        );
    }
}
