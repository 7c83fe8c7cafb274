//! Multi-episode evaluation runs.
//!
//! Episodes fan out over the ambient rayon pool; per-episode results are
//! collected in episode order and reduced sequentially, so every figure is
//! independent of the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{episode_dirichlet_counts, sample_plan, QueryCounts};
use crate::error::{Error, Result};
use crate::fusion::{classify_combined, EpisodeTriple, FusionClassifier, MetricStores};
use crate::metrics::{classify_inductive, Metric};
use crate::store::EmbeddingStore;
use crate::transductive::{transductive_classify, TransductiveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl EpisodeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::InvalidParameter("episode count must be positive".into()));
        }
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::InvalidParameter("n_way and k_shot must be positive".into()));
        }
        Ok(())
    }
}

/// Mean accuracy with a normal-approximation 95% interval over episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub mean_accuracy: f64,
    pub ci95_half_width: f64,
    pub std_dev: f64,
    pub episodes: usize,
}

impl AccuracySummary {
    pub fn from_episodes(accuracies: &[f64]) -> Self {
        let n = accuracies.len();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for &a in accuracies {
            sum += a;
            sum_sq += a * a;
        }
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        let var = if n > 1 {
            ((sum_sq - n as f64 * mean * mean) / (n as f64 - 1.0)).max(0.0)
        } else {
            0.0
        };
        let std_dev = var.sqrt();
        let se = if n > 0 { std_dev / (n as f64).sqrt() } else { 0.0 };
        Self {
            mean_accuracy: mean,
            ci95_half_width: 1.96 * se,
            std_dev,
            episodes: n,
        }
    }

    pub fn standard_error(&self) -> f64 {
        self.ci95_half_width / 1.96
    }
}

/// Mean and standard error of per-episode differences `a - b`.
pub fn paired_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = AccuracySummary::from_episodes(&diffs);
    (s.mean_accuracy, s.standard_error())
}

#[derive(Debug, Clone, Copy)]
pub enum Classifier<'a> {
    Single(Metric),
    Combined(&'a FusionClassifier),
}

/// Per-episode accuracy of an inductive classifier on balanced episodes.
pub fn eval_inductive(
    stores: &MetricStores<'_>,
    classifier: Classifier<'_>,
    settings: &EpisodeSettings,
    queries_per_class: usize,
    lambda_max: f64,
) -> Result<Vec<f64>> {
    settings.validate()?;
    stores.validate()?;
    let counts = QueryCounts::balanced(settings.n_way, queries_per_class);
    (0..settings.episodes as u64)
        .into_par_iter()
        .map(|i| match classifier {
            Classifier::Single(metric) => {
                let store = stores.get(metric);
                let plan = sample_plan(stores.mll, settings.n_way, settings.k_shot, &counts, settings.seed, i)?;
                let episode = plan.materialize(store);
                let predictions = classify_inductive(&episode.task(), metric, lambda_max)?;
                Ok(episode.accuracy(&predictions))
            }
            Classifier::Combined(fusion) => {
                let triple = EpisodeTriple::sample(stores, settings.n_way, settings.k_shot, &counts, settings.seed, i)?;
                let scores = triple.score_triples(lambda_max)?;
                let ids = triple.mll.class_ids();
                let predictions = scores
                    .iter()
                    .map(|row| classify_combined(row, ids, fusion))
                    .collect::<Result<Vec<_>>>()?;
                Ok(triple.mll.accuracy(&predictions))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSettings {
    pub query_total: usize,
    pub dirichlet_a: f64,
}

/// Paired inductive-MLL and transductive accuracies on the same episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TransductiveOutcome {
    pub inductive: Vec<f64>,
    pub transductive: Vec<f64>,
    /// Largest `|m_c - M / N|` over all episodes and ways.
    pub max_count_deviation: f64,
}

pub fn eval_transductive(
    store: &EmbeddingStore,
    settings: &EpisodeSettings,
    imbalance: &ImbalanceSettings,
    config: TransductiveConfig,
) -> Result<TransductiveOutcome> {
    settings.validate()?;
    let per_episode: Vec<(f64, f64, f64)> = (0..settings.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let counts = episode_dirichlet_counts(
                settings.n_way,
                imbalance.query_total,
                imbalance.dirichlet_a,
                settings.seed,
                i,
            )?;
            let balanced = imbalance.query_total as f64 / settings.n_way as f64;
            let deviation = counts
                .counts()
                .iter()
                .map(|&m| (m as f64 - balanced).abs())
                .fold(0.0, f64::max);
            let episode =
                sample_plan(store, settings.n_way, settings.k_shot, &counts, settings.seed, i)?.materialize(store);
            let task = episode.task();
            let inductive = classify_inductive(&task, Metric::Mll, config.lambda_max)?;
            let refined = transductive_classify(&task, config)?;
            Ok((episode.accuracy(&inductive), episode.accuracy(&refined), deviation))
        })
        .collect::<Result<_>>()?;
    Ok(TransductiveOutcome {
        inductive: per_episode.iter().map(|r| r.0).collect(),
        transductive: per_episode.iter().map(|r| r.1).collect(),
        max_count_deviation: per_episode.iter().map(|r| r.2).fold(0.0, f64::max),
    })
}
