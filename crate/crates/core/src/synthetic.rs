//! Synthetic stores with exactly exponential class-conditional features and
//! the Bayes-optimal classifier for them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::argmax_lowest_id;
use crate::store::EmbeddingStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            dim: 64,
            samples_per_class: 200,
            lambda_lo: 0.5,
            lambda_hi: 5.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidParameter(
                "class, dim and sample counts must be positive".into(),
            ));
        }
        if !self.lambda_lo.is_finite()
            || self.lambda_lo <= 0.0
            || !self.lambda_hi.is_finite()
            || self.lambda_hi < self.lambda_lo
        {
            return Err(Error::InvalidParameter(format!(
                "rate range [{}, {}] must satisfy 0 < lo <= hi < inf",
                self.lambda_lo, self.lambda_hi
            )));
        }
        Ok(())
    }
}

/// True per-class rates, one row per class id `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub lambda: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn rates(&self, class: u32) -> Result<&[f64]> {
        self.lambda
            .get(class as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClass(class))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Draws log-uniform rates per (class, feature), then iid exponential
/// features for each sample. Samples are grouped by class in id order.
pub fn generate(spec: &SyntheticSpec) -> Result<(EmbeddingStore, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = (spec.lambda_lo.ln(), spec.lambda_hi.ln());
    let lambda: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| {
                    if hi > lo {
                        rng.random_range(lo..hi).exp().clamp(spec.lambda_lo, spec.lambda_hi)
                    } else {
                        spec.lambda_lo
                    }
                })
                .collect()
        })
        .collect();

    let n = spec.num_classes * spec.samples_per_class;
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * spec.dim);
    for (class, rates) in lambda.iter().enumerate() {
        let dists: Vec<Exp<f64>> = rates
            .iter()
            .map(|&l| Exp::new(l).map_err(|e| Error::InvalidParameter(e.to_string())))
            .collect::<Result<_>>()?;
        for _ in 0..spec.samples_per_class {
            labels.push(class as u32);
            features.extend(dists.iter().map(|d| d.sample(&mut rng) as f32));
        }
    }
    let store = EmbeddingStore::new(spec.dim, labels, features, true)?;
    let truth = GroundTruth {
        lambda_lo: spec.lambda_lo,
        lambda_hi: spec.lambda_hi,
        lambda,
    };
    Ok((store, truth))
}

/// Bayes-optimal class among `candidates` under the true rates (no clipping);
/// ties go to the lowest class id. Returns the index into `candidates`.
pub fn bayes_oracle_classify(truth: &GroundTruth, query: &[f64], candidates: &[u32]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate classes"));
    }
    if let Some(&neg) = query.iter().find(|&&v| v < 0.0) {
        return Err(Error::NegativeValue(neg));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let rates = truth.rates(c)?;
        if rates.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: rates.len(),
                got: query.len(),
            });
        }
        let mut log_lik = 0.0;
        for (l, f) in rates.iter().zip(query) {
            log_lik += l.ln() - l * f;
        }
        scores.push(log_lik);
    }
    Ok(argmax_lowest_id(&scores, candidates))
}
