//! Probability-weighted transductive refinement of MLL prototypes.
//!
//! Starting from the inductive MLL assignment, each round weights every
//! assigned query's features by their exponential CDF under the class's
//! current rates, pulls the class prototype towards the weighted query
//! prototype by a step `eta`, recomputes clipped rates and re-assigns.

use crate::episode::Task;
use crate::error::{Error, Result};
use crate::metrics::{argmax_lowest_id, lambda_from_prototype, mll_score, ClassModel};

pub const DEFAULT_ITERS: usize = 10;
pub const DEFAULT_ETA: f64 = 0.5;

/// How assigned queries are combined into the update target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryAggregate {
    /// Per-coordinate weighted average.
    #[default]
    WeightedAverage,
    /// Unnormalised weighted sum.
    RawSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransductiveConfig {
    pub lambda_max: f64,
    pub iters: usize,
    pub eta: f64,
    pub aggregate: QueryAggregate,
}

impl Default for TransductiveConfig {
    fn default() -> Self {
        Self {
            lambda_max: crate::metrics::DEFAULT_LAMBDA_MAX_EVAL,
            iters: DEFAULT_ITERS,
            eta: DEFAULT_ETA,
            aggregate: QueryAggregate::WeightedAverage,
        }
    }
}

/// Elementwise exponential CDF `1 - exp(-lambda_i f_i)`.
pub fn cdf_weight(lambda: &[f64], query: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != query.len() {
        return Err(Error::DimensionMismatch {
            expected: lambda.len(),
            got: query.len(),
        });
    }
    Ok(lambda.iter().zip(query).map(|(l, f)| -(-l * f).exp_m1()).collect())
}

/// Per-coordinate `sum_m w_mi f_mi / sum_m w_mi`. A coordinate whose weights
/// sum to zero falls back to the plain mean of that coordinate.
pub fn weighted_prototype(queries: &[&[f64]], weights: &[Vec<f64>]) -> Result<Vec<f64>> {
    aggregate(queries, weights, QueryAggregate::WeightedAverage)
}

fn aggregate(queries: &[&[f64]], weights: &[Vec<f64>], mode: QueryAggregate) -> Result<Vec<f64>> {
    let first = queries.first().ok_or(Error::Empty("assigned queries"))?;
    if weights.len() != queries.len() {
        return Err(Error::InvalidParameter(format!(
            "{} weight vectors for {} queries",
            weights.len(),
            queries.len()
        )));
    }
    let dim = first.len();
    let mut num = vec![0.0; dim];
    let mut den = vec![0.0; dim];
    let mut plain = vec![0.0; dim];
    for (q, w) in queries.iter().zip(weights) {
        if q.len() != dim || w.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: if q.len() != dim { q.len() } else { w.len() },
            });
        }
        for i in 0..dim {
            num[i] += w[i] * q[i];
            den[i] += w[i];
            plain[i] += q[i];
        }
    }
    if mode == QueryAggregate::RawSum {
        return Ok(num);
    }
    let n = queries.len() as f64;
    Ok((0..dim)
        .map(|i| if den[i] > 0.0 { num[i] / den[i] } else { plain[i] / n })
        .collect())
}

/// Mutable per-episode refinement state.
#[derive(Debug, Clone)]
pub struct TransductiveState {
    pub prototypes: Vec<Vec<f64>>,
    pub lambdas: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iteration: usize,
    config: TransductiveConfig,
    class_ids: Vec<u32>,
}

impl TransductiveState {
    /// Inductive MLL start: support means, clipped rates, argmax assignments.
    pub fn new(task: &Task<'_>, config: TransductiveConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.eta) {
            return Err(Error::InvalidParameter(format!(
                "eta must lie in [0, 1], got {}",
                config.eta
            )));
        }
        let models = task
            .support
            .iter()
            .zip(task.class_ids)
            .map(|(s, &id)| ClassModel::fit(id, s, config.lambda_max))
            .collect::<Result<Vec<_>>>()?;
        let mut state = Self {
            prototypes: models.iter().map(|m| m.prototype.clone()).collect(),
            lambdas: models.iter().map(|m| m.lambda.clone()).collect(),
            assignments: Vec::new(),
            iteration: 0,
            config,
            class_ids: task.class_ids.to_vec(),
        };
        state.assignments = state.assign(task.queries, &models)?;
        Ok(state)
    }

    fn models(&self) -> Vec<ClassModel> {
        self.prototypes
            .iter()
            .zip(&self.lambdas)
            .zip(&self.class_ids)
            .map(|((p, l), &id)| ClassModel::with_parts(id, p.clone(), l.clone(), self.config.lambda_max))
            .collect()
    }

    fn assign(&self, queries: &[Vec<f64>], models: &[ClassModel]) -> Result<Vec<usize>> {
        queries
            .iter()
            .map(|q| {
                let scores = models.iter().map(|m| mll_score(m, q)).collect::<Result<Vec<_>>>()?;
                Ok(argmax_lowest_id(&scores, &self.class_ids))
            })
            .collect()
    }

    /// One weighting/update/re-assignment round.
    pub fn step(&mut self, queries: &[Vec<f64>]) -> Result<()> {
        let eta = self.config.eta;
        let mut updated = self.prototypes.clone();
        for (c, proto) in updated.iter_mut().enumerate() {
            let assigned: Vec<&[f64]> = queries
                .iter()
                .zip(&self.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(q, _)| q.as_slice())
                .collect();
            if assigned.is_empty() {
                continue;
            }
            // weights use the rates from before this round's update
            let weights = assigned
                .iter()
                .map(|q| cdf_weight(&self.lambdas[c], q))
                .collect::<Result<Vec<_>>>()?;
            let target = aggregate(&assigned, &weights, self.config.aggregate)?;
            for (p, g) in proto.iter_mut().zip(target) {
                *p = (1.0 - eta) * *p + eta * g;
            }
        }
        self.lambdas = updated
            .iter()
            .map(|p| lambda_from_prototype(p, self.config.lambda_max))
            .collect();
        self.prototypes = updated;
        let models = self.models();
        self.assignments = self.assign(queries, &models)?;
        self.iteration += 1;
        Ok(())
    }
}

/// Predicted way of every query after `config.iters` refinement rounds.
pub fn transductive_classify(task: &Task<'_>, config: TransductiveConfig) -> Result<Vec<usize>> {
    let mut state = TransductiveState::new(task, config)?;
    for _ in 0..config.iters {
        state.step(task.queries)?;
    }
    Ok(state.assignments)
}
