//! Reproducible N-way K-shot episodes.
//!
//! Every episode is a pure function of `(master_seed, episode_index)`: the
//! pair is hashed into a private ChaCha stream, so episodes can be drawn in
//! any order and on any number of workers.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::store::EmbeddingStore;

/// Stream used for support/query sample selection.
pub const STREAM_SAMPLES: u64 = 0;
/// Stream used for per-episode Dirichlet query proportions.
pub const STREAM_COUNTS: u64 = 1;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn episode_seed(master_seed: u64, episode_index: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ episode_index)
}

/// Independent RNG for one episode; `stream` separates uses within an episode.
pub fn episode_rng(master_seed: u64, episode_index: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(master_seed, episode_index));
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryCounts {
    counts: Vec<usize>,
}

impl QueryCounts {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn balanced(n_way: usize, per_class: usize) -> Self {
        Self {
            counts: vec![per_class; n_way],
        }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn max(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Draws `p ~ Dirichlet(a, ..., a)` and rounds `total * p` to integers by
/// largest remainder, so the counts always sum to `total`.
pub fn dirichlet_query_counts<R: Rng + ?Sized>(
    n_way: usize,
    total: usize,
    concentration: f64,
    rng: &mut R,
) -> Result<QueryCounts> {
    if !concentration.is_finite() || concentration <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "Dirichlet concentration must be positive and finite, got {concentration}"
        )));
    }
    if n_way == 0 {
        return Err(Error::InvalidParameter("n_way must be at least 1".into()));
    }
    if n_way == 1 {
        return Ok(QueryCounts::new(vec![total]));
    }
    let gamma =
        Gamma::new(concentration, 1.0).map_err(|e| Error::InvalidParameter(format!("gamma({concentration}): {e}")))?;
    let mut draws: Vec<f64> = (0..n_way).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        // every gamma draw underflowed (tiny concentration): all mass on one class
        let winner = rng.random_range(0..n_way);
        draws
            .iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = (i == winner) as u8 as f64);
    } else {
        draws.iter_mut().for_each(|d| *d /= sum);
    }
    Ok(QueryCounts::new(largest_remainder(&draws, total)))
}

/// Apportions `total` proportionally to `proportions` (which sum to one).
/// Ties among remainders go to the lower index.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Which samples make up an episode, without their features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodePlan {
    pub episode_id: u64,
    pub k_shot: usize,
    /// Class id of each way, in sampled order.
    pub classes: Vec<u32>,
    pub support: Vec<Vec<usize>>,
    pub queries: Vec<usize>,
    /// Way index of each query.
    pub query_ways: Vec<usize>,
}

impl EpisodePlan {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Fills in features from `store`. Any store sharing the sample order of
    /// the one the plan was drawn from is valid.
    pub fn materialize(&self, store: &EmbeddingStore) -> Episode {
        let support = self
            .support
            .iter()
            .map(|idx| idx.iter().map(|&i| store.features_f64(i)).collect())
            .collect();
        let queries = self.queries.iter().map(|&i| store.features_f64(i)).collect();
        Episode {
            episode_id: self.episode_id,
            class_ids: self.classes.clone(),
            support,
            queries,
            hidden_labels: self.query_ways.clone(),
            support_indices: self.support.clone(),
            query_indices: self.queries.clone(),
        }
    }
}

/// One N-way K-shot task with features widened to `f64`.
///
/// Labels are way indices `0..n_way`; `class_ids()[way]` maps back to the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    episode_id: u64,
    class_ids: Vec<u32>,
    support: Vec<Vec<Vec<f64>>>,
    queries: Vec<Vec<f64>>,
    hidden_labels: Vec<usize>,
    support_indices: Vec<Vec<usize>>,
    query_indices: Vec<usize>,
}

/// What a classifier may see of an episode: no query labels.
#[derive(Debug, Clone, Copy)]
pub struct Task<'a> {
    pub class_ids: &'a [u32],
    pub support: &'a [Vec<Vec<f64>>],
    pub queries: &'a [Vec<f64>],
}

impl Task<'_> {
    pub fn n_way(&self) -> usize {
        self.support.len()
    }
}

impl Episode {
    /// Builds an episode from explicit features (no backing store).
    pub fn from_features(
        class_ids: Vec<u32>,
        support: Vec<Vec<Vec<f64>>>,
        queries: Vec<Vec<f64>>,
        hidden_labels: Vec<usize>,
    ) -> Result<Self> {
        if class_ids.len() != support.len() {
            return Err(Error::InvalidParameter(format!(
                "{} class ids for {} support sets",
                class_ids.len(),
                support.len()
            )));
        }
        if support.is_empty() {
            return Err(Error::Empty("support sets"));
        }
        let k = support[0].len();
        if k == 0 || support.iter().any(|s| s.len() != k) {
            return Err(Error::InvalidParameter(
                "every way needs the same positive number of shots".into(),
            ));
        }
        let dim = support[0][0].len();
        for v in support.iter().flatten().chain(queries.iter()) {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        if hidden_labels.len() != queries.len() || hidden_labels.iter().any(|&l| l >= support.len()) {
            return Err(Error::InvalidParameter(
                "query labels must be way indices, one per query".into(),
            ));
        }
        Ok(Self {
            episode_id: 0,
            class_ids,
            support,
            queries,
            hidden_labels,
            support_indices: Vec::new(),
            query_indices: Vec::new(),
        })
    }

    pub fn episode_id(&self) -> u64 {
        self.episode_id
    }

    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support[0].len()
    }

    pub fn dim(&self) -> usize {
        self.support[0][0].len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn support(&self) -> &[Vec<Vec<f64>>] {
        &self.support
    }

    pub fn queries(&self) -> &[Vec<f64>] {
        &self.queries
    }

    pub fn support_mut(&mut self) -> &mut [Vec<Vec<f64>>] {
        &mut self.support
    }

    pub fn queries_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.queries
    }

    /// True way of each query; for scoring only.
    pub fn hidden_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    pub fn support_indices(&self) -> &[Vec<usize>] {
        &self.support_indices
    }

    pub fn query_indices(&self) -> &[usize] {
        &self.query_indices
    }

    pub fn task(&self) -> Task<'_> {
        Task {
            class_ids: &self.class_ids,
            support: &self.support,
            queries: &self.queries,
        }
    }

    /// Per-way query counts of this episode.
    pub fn query_counts(&self) -> QueryCounts {
        let mut counts = vec![0; self.n_way()];
        for &l in &self.hidden_labels {
            counts[l] += 1;
        }
        QueryCounts::new(counts)
    }

    /// Fraction of queries whose prediction matches the hidden label.
    pub fn accuracy(&self, predictions: &[usize]) -> f64 {
        if self.hidden_labels.is_empty() {
            return 0.0;
        }
        let correct = predictions
            .iter()
            .zip(&self.hidden_labels)
            .filter(|(p, t)| p == t)
            .count();
        correct as f64 / self.hidden_labels.len() as f64
    }

    /// Applies `f` to every support and query feature.
    pub fn map_features(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.support
            .iter_mut()
            .flatten()
            .chain(out.queries.iter_mut())
            .flat_map(|v| v.iter_mut())
            .for_each(|x| *x = f(*x));
        out
    }
}

/// Classes with at least `needed` samples, in ascending id order.
pub fn eligible_classes(store: &EmbeddingStore, needed: usize) -> Vec<u32> {
    store
        .class_index()
        .iter()
        .filter(|(_, idx)| idx.len() >= needed)
        .map(|(&c, _)| c)
        .collect()
}

/// Logs a warning when some classes cannot host `k_shot + max_queries` samples.
pub fn warn_ineligible(store: &EmbeddingStore, k_shot: usize, max_queries: usize) -> usize {
    let eligible = eligible_classes(store, k_shot + max_queries).len();
    let excluded = store.num_classes() - eligible;
    if excluded > 0 {
        log::warn!(
            "{excluded} of {} classes have fewer than {} samples and are excluded from sampling",
            store.num_classes(),
            k_shot + max_queries
        );
    }
    eligible
}

/// Draws the sample indices of one episode with `counts[way]` queries per way.
pub fn sample_plan(
    store: &EmbeddingStore,
    n_way: usize,
    k_shot: usize,
    counts: &QueryCounts,
    master_seed: u64,
    episode_index: u64,
) -> Result<EpisodePlan> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidParameter("n_way and k_shot must be positive".into()));
    }
    if counts.counts().len() != n_way {
        return Err(Error::InvalidParameter(format!(
            "{} query counts for {n_way} ways",
            counts.counts().len()
        )));
    }
    let needed = k_shot + counts.max();
    let eligible = eligible_classes(store, needed);
    if eligible.len() < n_way {
        if store.num_classes() >= n_way {
            // enough classes exist, but the chosen ones could not host the draw
            let (&class, idx) = store
                .class_index()
                .iter()
                .find(|(_, idx)| idx.len() < needed)
                .expect("some class is ineligible");
            return Err(Error::InsufficientSamples {
                class,
                needed,
                available: idx.len(),
            });
        }
        return Err(Error::InsufficientClasses {
            needed: n_way,
            available: eligible.len(),
        });
    }

    let mut rng = episode_rng(master_seed, episode_index, STREAM_SAMPLES);
    let chosen = index::sample(&mut rng, eligible.len(), n_way);
    let mut classes = Vec::with_capacity(n_way);
    let mut support = Vec::with_capacity(n_way);
    let mut queries = Vec::with_capacity(counts.total());
    let mut query_ways = Vec::with_capacity(counts.total());
    for (way, pick) in chosen.iter().enumerate() {
        let class = eligible[pick];
        let bucket = store.samples_of(class).expect("eligible class exists");
        let m = counts.counts()[way];
        let drawn = index::sample(&mut rng, bucket.len(), k_shot + m);
        let mut drawn = drawn.iter().map(|j| bucket[j]);
        classes.push(class);
        support.push(drawn.by_ref().take(k_shot).collect());
        for q in drawn {
            queries.push(q);
            query_ways.push(way);
        }
    }
    Ok(EpisodePlan {
        episode_id: episode_index,
        k_shot,
        classes,
        support,
        queries,
        query_ways,
    })
}

pub fn sample_balanced_episode(
    store: &EmbeddingStore,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    master_seed: u64,
    episode_index: u64,
) -> Result<Episode> {
    let counts = QueryCounts::balanced(n_way, queries_per_class);
    sample_imbalanced_episode(store, n_way, k_shot, &counts, master_seed, episode_index)
}

pub fn sample_imbalanced_episode(
    store: &EmbeddingStore,
    n_way: usize,
    k_shot: usize,
    counts: &QueryCounts,
    master_seed: u64,
    episode_index: u64,
) -> Result<Episode> {
    Ok(sample_plan(store, n_way, k_shot, counts, master_seed, episode_index)?.materialize(store))
}

/// Draws this episode's Dirichlet counts from its dedicated stream.
pub fn episode_dirichlet_counts(
    n_way: usize,
    total: usize,
    concentration: f64,
    master_seed: u64,
    episode_index: u64,
) -> Result<QueryCounts> {
    let mut rng = episode_rng(master_seed, episode_index, STREAM_COUNTS);
    dirichlet_query_counts(n_way, total, concentration, &mut rng)
}
