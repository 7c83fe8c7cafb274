use std::collections::HashSet;

use fsml_core::episode::{
    episode_dirichlet_counts, sample_balanced_episode, sample_imbalanced_episode, sample_plan, QueryCounts,
};
use fsml_core::store::EmbeddingStore;
use fsml_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn store_with_sizes(sizes: &[usize]) -> EmbeddingStore {
    let labels: Vec<u32> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u32, n))
        .collect();
    let features = (0..labels.len()).map(|i| i as f32).collect();
    EmbeddingStore::new(1, labels, features, true).unwrap()
}

/// Hamilton apportionment written out independently of the library.
fn apportion(p: &[f64], total: usize) -> Vec<usize> {
    let mut counts = Vec::new();
    let mut rema = Vec::new();
    for (i, &x) in p.iter().enumerate() {
        let exact = x * total as f64;
        counts.push(exact.floor() as usize);
        rema.push((exact - exact.floor(), i));
    }
    let missing = total - counts.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Two-sample chi-squared homogeneity statistic over pooled histograms,
/// merging sparse tail bins until each has at least 10 expected entries.
fn two_sample_chi2(a: &[usize], b: &[usize], max: usize) -> (f64, usize) {
    let mut ha = vec![0f64; max + 1];
    let mut hb = vec![0f64; max + 1];
    a.iter().for_each(|&v| ha[v] += 1.0);
    b.iter().for_each(|&v| hb[v] += 1.0);
    let mut bins = Vec::new();
    let (mut acc_a, mut acc_b) = (0.0, 0.0);
    for v in 0..=max {
        acc_a += ha[v];
        acc_b += hb[v];
        if acc_a + acc_b >= 20.0 {
            bins.push((acc_a, acc_b));
            acc_a = 0.0;
            acc_b = 0.0;
        }
    }
    if let Some(last) = bins.last_mut() {
        last.0 += acc_a;
        last.1 += acc_b;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let stat = bins
        .iter()
        .map(|&(x, y)| {
            let d = x * (nb / na).sqrt() - y * (na / nb).sqrt();
            d * d / (x + y)
        })
        .sum();
    (stat, bins.len() - 1)
}

#[test]
fn dirichlet_counts_match_direct_simulation() {
    let episodes = 10_000;
    let (n, total, a) = (5, 75, 2.0);
    let ours: Vec<Vec<usize>> = (0..episodes)
        .map(|i| episode_dirichlet_counts(n, total, a, 99, i).unwrap().counts().to_vec())
        .collect();

    let dirichlet = Dirichlet::new([a; 5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1C7);
    let oracle: Vec<Vec<usize>> = (0..episodes)
        .map(|_| apportion(&dirichlet.sample(&mut rng), total))
        .collect();

    for counts in &ours {
        assert_eq!(counts.iter().sum::<usize>(), total);
    }
    let critical = |df: usize| ChiSquared::new(df as f64).unwrap().inverse_cdf(0.999);

    // per-class marginals are exchangeable; pool them
    let pooled_ours: Vec<usize> = ours.iter().flatten().copied().collect();
    let pooled_oracle: Vec<usize> = oracle.iter().flatten().copied().collect();
    let (stat, df) = two_sample_chi2(&pooled_ours, &pooled_oracle, total);
    assert!(stat < critical(df), "marginal chi2 {stat} on {df} df");

    // the largest count per episode probes the joint shape
    let max_ours: Vec<usize> = ours.iter().map(|c| *c.iter().max().unwrap()).collect();
    let max_oracle: Vec<usize> = oracle.iter().map(|c| *c.iter().max().unwrap()).collect();
    let (stat, df) = two_sample_chi2(&max_ours, &max_oracle, total);
    assert!(stat < critical(df), "max-count chi2 {stat} on {df} df");

    let mean0 = ours.iter().map(|c| c[0] as f64).sum::<f64>() / episodes as f64;
    assert!((mean0 - 15.0).abs() < 0.5, "{mean0}");
}

#[test]
fn huge_concentration_is_quasi_balanced() {
    for i in 0..2000 {
        let counts = episode_dirichlet_counts(5, 75, 1e9, 3, i).unwrap();
        assert!(counts.counts().iter().all(|&m| (14..=16).contains(&m)), "{counts:?}");
    }
}

#[test]
fn single_way_takes_everything() {
    for a in [1e-3, 2.0, 1e6] {
        assert_eq!(episode_dirichlet_counts(1, 75, a, 0, 0).unwrap().counts(), &[75]);
    }
    assert!(episode_dirichlet_counts(5, 75, 0.0, 0, 0).is_err());
    assert!(episode_dirichlet_counts(5, 75, -1.0, 0, 0).is_err());
}

#[test]
fn tiny_concentration_still_sums() {
    for i in 0..500 {
        let counts = episode_dirichlet_counts(5, 75, 1e-4, 1, i).unwrap();
        assert_eq!(counts.total(), 75);
    }
}

#[test]
fn small_classes_are_never_drawn() {
    let mut sizes = vec![30; 8];
    sizes[2] = 10;
    sizes[5] = 15;
    let store = store_with_sizes(&sizes);
    for i in 0..300 {
        let ep = sample_balanced_episode(&store, 5, 1, 15, 4, i).unwrap();
        assert!(!ep.class_ids().contains(&2) && !ep.class_ids().contains(&5));
    }
    // six eligible classes cannot host a 7-way draw
    let ep = sample_balanced_episode(&store, 7, 1, 15, 4, 0);
    assert!(matches!(ep, Err(Error::InsufficientSamples { .. })));
    let tiny = store_with_sizes(&[100; 3]);
    assert!(matches!(
        sample_balanced_episode(&tiny, 5, 1, 1, 0, 0),
        Err(Error::InsufficientClasses { .. })
    ));
}

#[test]
fn class_choice_is_uniform() {
    let store = store_with_sizes(&[20; 10]);
    let mut hits = [0usize; 10];
    let draws = 4000;
    for i in 0..draws {
        for &c in sample_balanced_episode(&store, 5, 1, 1, 12, i).unwrap().class_ids() {
            hits[c as usize] += 1;
        }
    }
    // each class is chosen with probability 1/2
    let expected = draws as f64 / 2.0;
    let stat: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    assert!(stat < ChiSquared::new(9.0).unwrap().inverse_cdf(0.999), "{hits:?}");
}

#[test]
fn evaluation_order_does_not_matter() {
    let store = store_with_sizes(&[40; 12]);
    let counts = QueryCounts::new(vec![3, 0, 7, 1, 4]);
    let forward: Vec<_> = (0..50)
        .map(|i| sample_plan(&store, 5, 2, &counts, 8, i).unwrap())
        .collect();
    let backward: Vec<_> = (0..50)
        .rev()
        .map(|i| sample_plan(&store, 5, 2, &counts, 8, i).unwrap())
        .collect();
    for (f, b) in forward.iter().zip(backward.iter().rev()) {
        assert_eq!(f, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_are_well_formed(
        seed in any::<u64>(),
        index in any::<u64>(),
        n_way in 1usize..6,
        k_shot in 1usize..4,
        raw_counts in prop::collection::vec(0usize..6, 5),
    ) {
        let store = store_with_sizes(&[12; 7]);
        let counts = QueryCounts::new(raw_counts[..n_way].to_vec());
        let ep = sample_imbalanced_episode(&store, n_way, k_shot, &counts, seed, index).unwrap();
        let distinct: HashSet<u32> = ep.class_ids().iter().copied().collect();
        prop_assert_eq!(distinct.len(), n_way);
        prop_assert!(ep.support().iter().all(|s| s.len() == k_shot));
        prop_assert_eq!(ep.query_counts(), counts);
        let mut seen = HashSet::new();
        for idx in ep.support_indices().iter().flatten().chain(ep.query_indices()) {
            prop_assert!(seen.insert(*idx), "sample {} drawn twice", idx);
        }
        for (way, class) in ep.class_ids().iter().enumerate() {
            for &i in &ep.support_indices()[way] {
                prop_assert_eq!(store.label(i), *class);
            }
        }
        for (q, &way) in ep.query_indices().iter().zip(ep.hidden_labels()) {
            prop_assert_eq!(store.label(*q), ep.class_ids()[way]);
        }
    }
}
