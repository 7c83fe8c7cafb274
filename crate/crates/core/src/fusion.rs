//! Gaussian fusion of the three metric scores.
//!
//! Score triples `(euclid, cosine, mll)` collected on validation episodes are
//! split into intra-class (query belongs to the scored class) and
//! cross-class populations, each fitted with a 3-d Gaussian. A query goes to
//! the class maximising Youden's index
//! `Phi_intra(alpha) - (1 - Phi_cross(alpha))`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{sample_plan, Episode, QueryCounts};
use crate::error::{Error, Result};
use crate::metrics::{argmax_lowest_id, classify_inductive, Metric, ScoreTriple};
use crate::metrics::{cosine_score, euclidean_score, prototype, ClassModel};
use crate::mvn::MvnCdf;
use crate::store::EmbeddingStore;

pub const MIN_FIT_SAMPLES: usize = 10;
pub const RIDGE_EPS: f64 = 1e-6;
const MAX_RIDGE_DOUBLINGS: usize = 60;

/// The embedding store each metric is computed on.
#[derive(Debug, Clone, Copy)]
pub struct MetricStores<'a> {
    pub euclid: &'a EmbeddingStore,
    pub cosine: &'a EmbeddingStore,
    pub mll: &'a EmbeddingStore,
}

impl<'a> MetricStores<'a> {
    /// Degraded mode: all three metrics on one embedding.
    pub fn single(store: &'a EmbeddingStore) -> Self {
        Self {
            euclid: store,
            cosine: store,
            mll: store,
        }
    }

    pub fn is_degraded(&self) -> bool {
        std::ptr::eq(self.euclid, self.cosine) && std::ptr::eq(self.cosine, self.mll)
    }

    pub fn get(&self, metric: Metric) -> &'a EmbeddingStore {
        match metric {
            Metric::Euclid => self.euclid,
            Metric::Cosine => self.cosine,
            Metric::Mll => self.mll,
        }
    }

    /// The three stores must embed the same samples in the same order.
    pub fn validate(&self) -> Result<()> {
        for other in [self.euclid, self.cosine] {
            if other.len() != self.mll.len() {
                return Err(Error::InvalidStore(format!(
                    "metric stores hold {} and {} samples",
                    other.len(),
                    self.mll.len()
                )));
            }
            if other.labels() != self.mll.labels() {
                return Err(Error::InvalidStore("metric stores disagree on labels".into()));
            }
        }
        Ok(())
    }
}

/// Episodes materialised on each metric's store.
#[derive(Debug, Clone)]
pub struct EpisodeTriple {
    pub euclid: Episode,
    pub cosine: Episode,
    pub mll: Episode,
}

impl EpisodeTriple {
    pub fn sample(
        stores: &MetricStores<'_>,
        n_way: usize,
        k_shot: usize,
        counts: &QueryCounts,
        seed: u64,
        index: u64,
    ) -> Result<Self> {
        let plan = sample_plan(stores.mll, n_way, k_shot, counts, seed, index)?;
        Ok(Self {
            euclid: plan.materialize(stores.euclid),
            cosine: plan.materialize(stores.cosine),
            mll: plan.materialize(stores.mll),
        })
    }

    pub fn get(&self, metric: Metric) -> &Episode {
        match metric {
            Metric::Euclid => &self.euclid,
            Metric::Cosine => &self.cosine,
            Metric::Mll => &self.mll,
        }
    }

    /// `[query][way]` score triples, each metric on its own embedding.
    pub fn score_triples(&self, lambda_max: f64) -> Result<Vec<Vec<ScoreTriple>>> {
        let euc_protos: Vec<Vec<f64>> = self
            .euclid
            .support()
            .iter()
            .map(|s| prototype(s))
            .collect::<Result<_>>()?;
        let cos_protos: Vec<Vec<f64>> = self
            .cosine
            .support()
            .iter()
            .map(|s| prototype(s))
            .collect::<Result<_>>()?;
        let models: Vec<ClassModel> = self
            .mll
            .support()
            .iter()
            .zip(self.mll.class_ids())
            .map(|(s, &id)| ClassModel::fit(id, s, lambda_max))
            .collect::<Result<_>>()?;
        (0..self.mll.num_queries())
            .map(|q| {
                (0..self.mll.n_way())
                    .map(|c| {
                        Ok(ScoreTriple {
                            alpha_euc: euclidean_score(&euc_protos[c], &self.euclid.queries()[q])?,
                            alpha_cos: cosine_score(&cos_protos[c], &self.cosine.queries()[q])?,
                            alpha_mll: models[c].mll_score(&self.mll.queries()[q])?,
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSampleSet {
    pub intra: Vec<ScoreTriple>,
    pub cross: Vec<ScoreTriple>,
}

impl ScoreSampleSet {
    pub fn push_episode(&mut self, triples: &[Vec<ScoreTriple>], labels: &[usize]) {
        for (row, &label) in triples.iter().zip(labels) {
            for (c, t) in row.iter().enumerate() {
                if c == label {
                    self.intra.push(*t);
                } else {
                    self.cross.push(*t);
                }
            }
        }
    }

    pub fn extend(&mut self, other: ScoreSampleSet) {
        self.intra.extend(other.intra);
        self.cross.extend(other.cross);
    }
}

/// Validation scores plus the single-metric predictions made along the way.
#[derive(Debug, Clone, Default)]
pub struct ScoreCollection {
    pub samples: ScoreSampleSet,
    /// Predictions in [`Metric::ALL`] order, concatenated over episodes.
    pub predictions: [Vec<usize>; 3],
    pub truth: Vec<usize>,
}

/// Samples `episodes` balanced episodes and records every query/class score triple.
/// Episodes are evaluated on the ambient rayon pool; results are merged in episode order.
#[allow(clippy::too_many_arguments)]
pub fn collect_scores(
    stores: &MetricStores<'_>,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    episodes: usize,
    lambda_max: f64,
    seed: u64,
) -> Result<ScoreCollection> {
    stores.validate()?;
    let counts = QueryCounts::balanced(n_way, queries_per_class);
    let per_episode: Vec<ScoreCollection> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let triple = EpisodeTriple::sample(stores, n_way, k_shot, &counts, seed, i)?;
            let scores = triple.score_triples(lambda_max)?;
            let labels = triple.mll.hidden_labels();
            let mut out = ScoreCollection::default();
            out.samples.push_episode(&scores, labels);
            for (slot, metric) in out.predictions.iter_mut().zip(Metric::ALL) {
                *slot = classify_inductive(&triple.get(metric).task(), metric, lambda_max)?;
            }
            out.truth = labels.to_vec();
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut merged = ScoreCollection::default();
    for ep in per_episode {
        merged.samples.extend(ep.samples);
        for (dst, src) in merged.predictions.iter_mut().zip(ep.predictions) {
            dst.extend(src);
        }
        merged.truth.extend(ep.truth);
    }
    Ok(merged)
}

/// Intra- and cross-class Gaussian score models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub mu_intra: [f64; 3],
    pub sigma_intra: [[f64; 3]; 3],
    pub mu_cross: [f64; 3],
    pub sigma_cross: [[f64; 3]; 3],
    pub n_intra: usize,
    pub n_cross: usize,
    pub ridge_applied: bool,
    #[serde(default)]
    pub degraded: bool,
}

struct GaussianFit {
    mean: [f64; 3],
    cov: [[f64; 3]; 3],
    ridged: bool,
}

fn fit_gaussian(samples: &[ScoreTriple], population: &'static str) -> Result<GaussianFit> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::TooFewSamples {
            population,
            count: samples.len(),
            minimum: MIN_FIT_SAMPLES,
        });
    }
    if let Some(bad) = samples.iter().find(|t| !t.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite score triple {bad:?}")));
    }
    let n = samples.len() as f64;
    let mut mean = [0.0; 3];
    for t in samples {
        for (m, v) in mean.iter_mut().zip(t.as_array()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = [[0.0; 3]; 3];
    for t in samples {
        let d: Vec<f64> = t.as_array().iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for row in cov.iter_mut() {
        row.iter_mut().for_each(|c| *c /= n - 1.0);
    }
    let (cov, ridged) = regularize(cov)?;
    Ok(GaussianFit { mean, cov, ridged })
}

fn min_eigenvalue(cov: &[[f64; 3]; 3]) -> f64 {
    let m = Matrix3::from_fn(|i, j| cov[i][j]);
    SymmetricEigen::new(m).eigenvalues.min()
}

/// Adds `eps * trace / 3` to the diagonal (doubling as needed) when the
/// smallest eigenvalue does not clear that same level.
fn regularize(mut cov: [[f64; 3]; 3]) -> Result<([[f64; 3]; 3], bool)> {
    let trace = cov[0][0] + cov[1][1] + cov[2][2];
    let mut ridge = if trace > 0.0 {
        RIDGE_EPS * trace / 3.0
    } else {
        RIDGE_EPS
    };
    let threshold = ridge;
    if min_eigenvalue(&cov) > threshold {
        return Ok((cov, false));
    }
    let base = cov;
    for _ in 0..MAX_RIDGE_DOUBLINGS {
        for i in 0..3 {
            cov[i][i] = base[i][i] + ridge;
        }
        if min_eigenvalue(&cov) > 0.0 && Matrix3::from_fn(|i, j| cov[i][j]).cholesky().is_some() {
            return Ok((cov, true));
        }
        ridge *= 2.0;
    }
    Err(Error::NotPositiveDefinite(
        "covariance stays singular after ridge regularization".into(),
    ))
}

/// Sample means and unbiased covariances of both populations.
pub fn fit_fusion(samples: &ScoreSampleSet) -> Result<FusionModel> {
    let intra = fit_gaussian(&samples.intra, "intra")?;
    let cross = fit_gaussian(&samples.cross, "cross")?;
    Ok(FusionModel {
        mu_intra: intra.mean,
        sigma_intra: intra.cov,
        mu_cross: cross.mean,
        sigma_cross: cross.cov,
        n_intra: samples.intra.len(),
        n_cross: samples.cross.len(),
        ridge_applied: intra.ridged || cross.ridged,
        degraded: false,
    })
}

impl FusionModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.classifier()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn classifier(&self) -> Result<FusionClassifier> {
        FusionClassifier::new(self)
    }
}

fn rows(m: &[[f64; 3]; 3]) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.to_vec()).collect()
}

/// A fitted model with its two CDF evaluators ready.
#[derive(Debug, Clone)]
pub struct FusionClassifier {
    intra: MvnCdf,
    cross: MvnCdf,
}

impl FusionClassifier {
    pub fn new(model: &FusionModel) -> Result<Self> {
        Ok(Self {
            intra: MvnCdf::new(&model.mu_intra, &rows(&model.sigma_intra))?,
            cross: MvnCdf::new(&model.mu_cross, &rows(&model.sigma_cross))?,
        })
    }

    pub fn phi_intra(&self, t: &ScoreTriple) -> Result<f64> {
        self.intra.cdf(&t.as_array())
    }

    pub fn phi_cross(&self, t: &ScoreTriple) -> Result<f64> {
        self.cross.cdf(&t.as_array())
    }

    /// Youden's index of classifying this triple as intra-class; in `[-1, 1]`.
    pub fn youden(&self, t: &ScoreTriple) -> Result<f64> {
        Ok(self.phi_intra(t)? - (1.0 - self.phi_cross(t)?))
    }
}

/// Way index maximising Youden's index; ties go to the lowest class id.
pub fn classify_combined(triples: &[ScoreTriple], class_ids: &[u32], classifier: &FusionClassifier) -> Result<usize> {
    if triples.is_empty() {
        return Err(Error::Empty("score triples"));
    }
    if triples.len() == 1 {
        return Ok(0);
    }
    let stats = triples
        .iter()
        .map(|t| classifier.youden(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax_lowest_id(&stats, class_ids))
}
