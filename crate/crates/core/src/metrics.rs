//! Prototypes, exponential rate estimates and the three similarity scores.
//!
//! All scores are "higher is more similar":
//!
//! * Euclidean: `-||q - p||^2`
//! * cosine: `q . p / (||q|| ||p||)`
//! * MLL: `sum_i ln(lambda_i) - lambda . q`, the log-likelihood of `q` under
//!   independent exponential features with rates `lambda`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episode::{Episode, Task};
use crate::error::{Error, Result};

/// Clip value used when classifying.
pub const DEFAULT_LAMBDA_MAX_EVAL: f64 = 40.0;
/// Clip value used for the episode loss.
pub const DEFAULT_LAMBDA_MAX_LOSS: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclid,
    Cosine,
    Mll,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Euclid, Metric::Cosine, Metric::Mll];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclid => "euclid",
            Metric::Cosine => "cosine",
            Metric::Mll => "mll",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclid" | "euclidean" => Ok(Metric::Euclid),
            "cosine" | "cos" => Ok(Metric::Cosine),
            "mll" => Ok(Metric::Mll),
            other => Err(Error::InvalidParameter(format!("unknown metric `{other}`"))),
        }
    }
}

/// Scores of one query against one class under the three metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub alpha_euc: f64,
    pub alpha_cos: f64,
    pub alpha_mll: f64,
}

impl ScoreTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha_euc, self.alpha_cos, self.alpha_mll]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            alpha_euc: a[0],
            alpha_cos: a[1],
            alpha_mll: a[2],
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Euclid => self.alpha_euc,
            Metric::Cosine => self.alpha_cos,
            Metric::Mll => self.alpha_mll,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Coordinate-wise mean of the support features.
pub fn prototype(support: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = support.first().ok_or(Error::Empty("support set"))?;
    let mut sum = vec![0.0; first.len()];
    for v in support {
        check_dims(first.len(), v.len())?;
        sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    let k = support.len() as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    Ok(sum)
}

/// Rates `min(1 / mean, lambda_max)`; a zero mean maps to `lambda_max`.
pub fn lambda_from_prototype(prototype: &[f64], lambda_max: f64) -> Vec<f64> {
    prototype
        .iter()
        .map(|&m| if m > 0.0 { (1.0 / m).min(lambda_max) } else { lambda_max })
        .collect()
}

/// Maximum-likelihood exponential rates of the support features, clipped at `lambda_max`.
pub fn estimate_lambda(support: &[Vec<f64>], lambda_max: f64) -> Result<Vec<f64>> {
    if lambda_max.is_nan() || lambda_max <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "lambda_max must be positive, got {lambda_max}"
        )));
    }
    if let Some(&neg) = support.iter().flatten().find(|&&x| x < 0.0) {
        return Err(Error::NegativeValue(neg));
    }
    Ok(lambda_from_prototype(&prototype(support)?, lambda_max))
}

/// A class's prototype and clipped exponential rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub class_id: u32,
    pub prototype: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_max: f64,
    log_lambda_sum: f64,
}

impl ClassModel {
    pub fn fit(class_id: u32, support: &[Vec<f64>], lambda_max: f64) -> Result<Self> {
        let lambda = estimate_lambda(support, lambda_max)?;
        Ok(Self::with_parts(class_id, prototype(support)?, lambda, lambda_max))
    }

    /// A model with externally supplied rates, e.g. the true rates of a synthetic class.
    pub fn from_lambda(class_id: u32, lambda: Vec<f64>, lambda_max: f64) -> Result<Self> {
        if let Some(bad) = lambda.iter().find(|&&l| !(l > 0.0 && l <= lambda_max)) {
            return Err(Error::InvalidParameter(format!("rate {bad} outside (0, {lambda_max}]")));
        }
        let prototype = lambda.iter().map(|l| 1.0 / l).collect();
        Ok(Self::with_parts(class_id, prototype, lambda, lambda_max))
    }

    pub(crate) fn with_parts(class_id: u32, prototype: Vec<f64>, lambda: Vec<f64>, lambda_max: f64) -> Self {
        let log_lambda_sum = lambda.iter().map(|l| l.ln()).sum();
        Self {
            class_id,
            prototype,
            lambda,
            lambda_max,
            log_lambda_sum,
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn mll_score(&self, query: &[f64]) -> Result<f64> {
        mll_score(self, query)
    }
}

/// `sum_i ln(lambda_i) - lambda . query`.
pub fn mll_score(model: &ClassModel, query: &[f64]) -> Result<f64> {
    check_dims(model.dim(), query.len())?;
    let mut dot = 0.0;
    for (l, &f) in model.lambda.iter().zip(query) {
        if f < 0.0 {
            return Err(Error::NegativeValue(f));
        }
        dot += l * f;
    }
    Ok(model.log_lambda_sum - dot)
}

/// Negative squared Euclidean distance.
pub fn euclidean_score(prototype: &[f64], query: &[f64]) -> Result<f64> {
    check_dims(prototype.len(), query.len())?;
    Ok(-prototype.iter().zip(query).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
}

pub fn cosine_score(prototype: &[f64], query: &[f64]) -> Result<f64> {
    check_dims(prototype.len(), query.len())?;
    let (mut dot, mut pp, mut qq) = (0.0, 0.0, 0.0);
    for (p, q) in prototype.iter().zip(query) {
        dot += p * q;
        pp += p * p;
        qq += q * q;
    }
    if pp == 0.0 || qq == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (pp.sqrt() * qq.sqrt())).clamp(-1.0, 1.0))
}

/// Index of the largest score; ties go to the way with the lowest class id.
pub fn argmax_lowest_id(scores: &[f64], class_ids: &[u32]) -> usize {
    let mut best = 0;
    for c in 1..scores.len() {
        if scores[c] > scores[best] || (scores[c] == scores[best] && class_ids[c] < class_ids[best]) {
            best = c;
        }
    }
    best
}

/// Per-way scoring state for one metric.
enum Scorer {
    Euclid(Vec<Vec<f64>>),
    Cosine(Vec<Vec<f64>>),
    Mll(Vec<ClassModel>),
}

impl Scorer {
    fn new(task: &Task<'_>, metric: Metric, lambda_max: f64) -> Result<Self> {
        Ok(match metric {
            Metric::Euclid => Scorer::Euclid(task.support.iter().map(|s| prototype(s)).collect::<Result<_>>()?),
            Metric::Cosine => Scorer::Cosine(task.support.iter().map(|s| prototype(s)).collect::<Result<_>>()?),
            Metric::Mll => Scorer::Mll(
                task.support
                    .iter()
                    .zip(task.class_ids)
                    .map(|(s, &id)| ClassModel::fit(id, s, lambda_max))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        match self {
            Scorer::Euclid(protos) => protos.iter().map(|p| euclidean_score(p, query)).collect(),
            Scorer::Cosine(protos) => protos.iter().map(|p| cosine_score(p, query)).collect(),
            Scorer::Mll(models) => models.iter().map(|m| mll_score(m, query)).collect(),
        }
    }
}

/// Score of every query (rows) against every way (columns).
pub fn score_matrix(task: &Task<'_>, metric: Metric, lambda_max: f64) -> Result<Vec<Vec<f64>>> {
    let scorer = Scorer::new(task, metric, lambda_max)?;
    task.queries.iter().map(|q| scorer.scores(q)).collect()
}

/// Nearest-class prediction (way index) for each query.
pub fn classify_inductive(task: &Task<'_>, metric: Metric, lambda_max: f64) -> Result<Vec<usize>> {
    let scores = score_matrix(task, metric, lambda_max)?;
    Ok(scores.iter().map(|s| argmax_lowest_id(s, task.class_ids)).collect())
}

/// MLL prediction with fixed class models (one per way).
pub fn classify_with_models(models: &[ClassModel], queries: &[Vec<f64>]) -> Result<Vec<usize>> {
    let ids: Vec<u32> = models.iter().map(|m| m.class_id).collect();
    queries
        .iter()
        .map(|q| {
            let scores = models.iter().map(|m| mll_score(m, q)).collect::<Result<Vec<_>>>()?;
            Ok(argmax_lowest_id(&scores, &ids))
        })
        .collect()
}

/// Max-shifted softmax.
pub fn softmax_posterior(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Log of the max-shifted softmax, stable for very negative scores.
fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - max - log_total).collect()
}

/// Episode loss `J = -1/(N M) sum_q ln p(y_q | x_q)` under MLL scores.
pub fn episode_loss(episode: &Episode, lambda_max: f64) -> Result<f64> {
    let scores = score_matrix(&episode.task(), Metric::Mll, lambda_max)?;
    let n = episode.n_way() as f64;
    let m = episode.num_queries() as f64;
    let total: f64 = scores
        .iter()
        .zip(episode.hidden_labels())
        .map(|(s, &y)| log_softmax(s)[y])
        .sum();
    Ok(-total / (n * m))
}

/// Derivatives of [`episode_loss`] with respect to every feature value.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeGradient {
    /// `[way][shot][feature]`
    pub support: Vec<Vec<Vec<f64>>>,
    /// `[query][feature]`
    pub queries: Vec<Vec<f64>>,
}

/// Analytic gradient of [`episode_loss`]. Clipped rates are a stop-gradient:
/// support features reach the loss only through unclipped rate coordinates.
pub fn loss_feature_gradient(episode: &Episode, lambda_max: f64) -> Result<EpisodeGradient> {
    let task = episode.task();
    let n = episode.n_way();
    let k = episode.k_shot() as f64;
    let dim = episode.dim();
    let models: Vec<ClassModel> = task
        .support
        .iter()
        .zip(task.class_ids)
        .map(|(s, &id)| ClassModel::fit(id, s, lambda_max))
        .collect::<Result<_>>()?;
    let norm = (n * episode.num_queries()) as f64;

    let mut grad_queries = vec![vec![0.0; dim]; episode.num_queries()];
    // dJ/d(lambda_c,i), accumulated over queries
    let mut grad_lambda = vec![vec![0.0; dim]; n];
    for (qi, (query, &label)) in task.queries.iter().zip(episode.hidden_labels()).enumerate() {
        let scores = models.iter().map(|m| mll_score(m, query)).collect::<Result<Vec<_>>>()?;
        let post = softmax_posterior(&scores);
        for (c, model) in models.iter().enumerate() {
            let g = (post[c] - if c == label { 1.0 } else { 0.0 }) / norm;
            for i in 0..dim {
                grad_queries[qi][i] -= g * model.lambda[i];
                grad_lambda[c][i] += g * (1.0 / model.lambda[i] - query[i]);
            }
        }
    }

    let grad_support = models
        .iter()
        .enumerate()
        .map(|(c, model)| {
            let mean = &model.prototype;
            let dlambda_df: Vec<f64> = (0..dim)
                .map(|i| {
                    let clipped = mean[i].is_nan() || mean[i] <= 0.0 || 1.0 / mean[i] > lambda_max;
                    if clipped {
                        0.0
                    } else {
                        // lambda = K / sum  =>  d lambda / d f_k = -lambda^2 / K
                        -model.lambda[i] * model.lambda[i] / k
                    }
                })
                .collect();
            let row: Vec<f64> = (0..dim).map(|i| grad_lambda[c][i] * dlambda_df[i]).collect();
            vec![row; task.support[c].len()]
        })
        .collect();

    Ok(EpisodeGradient {
        support: grad_support,
        queries: grad_queries,
    })
}
