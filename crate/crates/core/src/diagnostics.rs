//! Distribution analyses: feature histograms with exponential fits, Gaussian
//! fits of score populations, and cross-metric agreement. Output is CSV.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ScoreSampleSet;
use crate::metrics::Metric;
use crate::store::{EmbeddingStore, SplitManifest};

pub const DEFAULT_BINS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramDensity {
    pub bin_size: f64,
    pub bin_centers: Vec<f64>,
    pub densities: Vec<f64>,
    pub sample_count: usize,
}

impl HistogramDensity {
    /// `sum density * bin_size`; one when every sample falls in a bin.
    pub fn total_mass(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.bin_size
    }
}

/// How histogram bins are laid out from the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Binning {
    /// Fixed width; as many half-open bins as the largest value needs.
    Width(f64),
    /// This many equal bins up to the largest value, the last one closed.
    /// Collapses to a single unit bin when every value sits on the origin.
    Count(usize),
}

impl Default for Binning {
    fn default() -> Self {
        Binning::Count(DEFAULT_BINS)
    }
}

/// Density histogram with bins `[origin + kB, origin + (k+1)B)`.
fn histogram_from(values: &[f64], origin: f64, binning: Binning) -> Result<HistogramDensity> {
    if values.is_empty() {
        return Err(Error::Empty("histogram values"));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite histogram value {bad}")));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (bin_size, fixed) = match binning {
        Binning::Width(b) => (b, None),
        Binning::Count(0) => return Err(Error::InvalidParameter("bin count must be positive".into())),
        Binning::Count(n) => {
            let width = (max - origin) / n as f64;
            // no spread: one unit bin holds everything
            if width > 0.0 {
                (width, Some(n))
            } else {
                (1.0, Some(1))
            }
        }
    };
    if !bin_size.is_finite() || bin_size <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "bin size must be positive, got {bin_size}"
        )));
    }
    let raw_bin = |v: f64| ((v - origin) / bin_size).floor().max(0.0) as usize;
    let bins = fixed.unwrap_or_else(|| raw_bin(max) + 1);
    let mut counts = vec![0usize; bins];
    for &v in values {
        counts[raw_bin(v).min(bins - 1)] += 1;
    }
    let norm = values.len() as f64 * bin_size;
    Ok(HistogramDensity {
        bin_size,
        bin_centers: (0..bins).map(|k| origin + (k as f64 + 0.5) * bin_size).collect(),
        densities: counts.iter().map(|&c| c as f64 / norm).collect(),
        sample_count: values.len(),
    })
}

/// `p(z) = 1/(L B) * #{ z - B/2 <= f < z + B/2 }` at bin centres `B/2, 3B/2, ...`.
pub fn histogram_density(values: &[f64], bin_size: f64) -> Result<HistogramDensity> {
    if let Some(&neg) = values.iter().find(|&&v| v < 0.0) {
        return Err(Error::NegativeValue(neg));
    }
    histogram_from(values, 0.0, Binning::Width(bin_size))
}

/// Non-negative values binned from zero under any layout.
pub fn histogram_binned(values: &[f64], binning: Binning) -> Result<HistogramDensity> {
    if let Some(&neg) = values.iter().find(|&&v| v < 0.0) {
        return Err(Error::NegativeValue(neg));
    }
    histogram_from(values, 0.0, binning)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFitReport {
    pub class_id: Option<u32>,
    pub feature: Option<usize>,
    pub lambda: f64,
    pub sample_count: usize,
    pub mean: f64,
}

impl ExponentialFitReport {
    pub fn density(&self, z: f64) -> f64 {
        self.lambda * (-self.lambda * z).exp()
    }
}

/// Maximum-likelihood rate `L / sum f`.
pub fn fit_exponential(values: &[f64]) -> Result<ExponentialFitReport> {
    if values.is_empty() {
        return Err(Error::Empty("exponential fit values"));
    }
    if let Some(&neg) = values.iter().find(|&&v| v < 0.0) {
        return Err(Error::NegativeValue(neg));
    }
    let sum: f64 = values.iter().sum();
    if sum.is_nan() || sum <= 0.0 {
        return Err(Error::InvalidParameter("all values are zero; rate is unbounded".into()));
    }
    let n = values.len() as f64;
    Ok(ExponentialFitReport {
        class_id: None,
        feature: None,
        lambda: n / sum,
        sample_count: values.len(),
        mean: sum / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureReport {
    pub histogram: HistogramDensity,
    pub fit: ExponentialFitReport,
}

impl FeatureReport {
    /// `z,empirical_density,fitted_density`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("z,empirical_density,fitted_density\n");
        for (z, d) in self.histogram.bin_centers.iter().zip(&self.histogram.densities) {
            writeln!(out, "{z},{d},{}", self.fit.density(*z)).unwrap();
        }
        out
    }
}

/// Histogram and exponential fit of one feature of one class. `split` of
/// `None` means the whole store.
pub fn class_feature_report(
    store: &EmbeddingStore,
    split: Option<(&SplitManifest, &str)>,
    class_id: u32,
    feature: usize,
    binning: Binning,
) -> Result<FeatureReport> {
    if let Some((manifest, name)) = split {
        manifest.validate_against(store)?;
        if !manifest.split(name)?.contains(&class_id) {
            return Err(Error::UnknownClass(class_id));
        }
    }
    if feature >= store.dim() {
        return Err(Error::InvalidParameter(format!(
            "feature {feature} out of range for dim {}",
            store.dim()
        )));
    }
    let samples = store.samples_of(class_id).ok_or(Error::UnknownClass(class_id))?;
    let values: Vec<f64> = samples.iter().map(|&i| f64::from(store.features(i)[feature])).collect();
    let histogram = histogram_binned(&values, binning)?;
    let mut fit = fit_exponential(&values)?;
    fit.class_id = Some(class_id);
    fit.feature = Some(feature);
    Ok(FeatureReport { histogram, fit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub metric: Metric,
    pub population: String,
    pub mean: f64,
    /// Maximum-likelihood (1/n) variance.
    pub variance: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub fits: Vec<GaussianFit>,
    pub histograms: Vec<HistogramDensity>,
}

impl ScoreReport {
    pub fn fit(&self, metric: Metric, population: &str) -> Option<&GaussianFit> {
        self.fits
            .iter()
            .find(|f| f.metric == metric && f.population == population)
    }

    /// `metric,population,bin_center,density,gauss_mean,gauss_var`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,population,bin_center,density,gauss_mean,gauss_var\n");
        for (fit, hist) in self.fits.iter().zip(&self.histograms) {
            for (z, d) in hist.bin_centers.iter().zip(&hist.densities) {
                writeln!(
                    out,
                    "{},{},{z},{d},{},{}",
                    fit.metric, fit.population, fit.mean, fit.variance
                )
                .unwrap();
            }
        }
        out
    }
}

/// Univariate Gaussian fit and histogram per metric and population.
pub fn score_distribution_report(samples: &ScoreSampleSet) -> Result<ScoreReport> {
    let mut fits = Vec::new();
    let mut histograms = Vec::new();
    for metric in Metric::ALL {
        for (population, set) in [("intra", &samples.intra), ("cross", &samples.cross)] {
            if set.is_empty() {
                return Err(Error::Empty("score population"));
            }
            let values: Vec<f64> = set.iter().map(|t| t.get(metric)).collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            histograms.push(histogram_from(&values, min, Binning::default())?);
            fits.push(GaussianFit {
                metric,
                population: population.to_string(),
                mean,
                variance,
                count: values.len(),
            });
        }
    }
    Ok(ScoreReport { fits, histograms })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub euclid_cosine: f64,
    pub euclid_mll: f64,
    pub cosine_mll: f64,
    pub unanimous: f64,
}

/// Pairwise and three-way agreement fractions of three prediction lists
/// (Euclidean, cosine, MLL order).
pub fn metric_agreement(predictions: [&[usize]; 3]) -> Result<Agreement> {
    let [a, b, c] = predictions;
    if a.len() != b.len() || b.len() != c.len() {
        return Err(Error::InvalidParameter(format!(
            "prediction lists of lengths {}, {}, {}",
            a.len(),
            b.len(),
            c.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("prediction lists"));
    }
    let n = a.len() as f64;
    let frac = |f: &dyn Fn(usize) -> bool| (0..a.len()).filter(|&i| f(i)).count() as f64 / n;
    Ok(Agreement {
        euclid_cosine: frac(&|i| a[i] == b[i]),
        euclid_mll: frac(&|i| a[i] == c[i]),
        cosine_mll: frac(&|i| b[i] == c[i]),
        unanimous: frac(&|i| a[i] == b[i] && b[i] == c[i]),
    })
}
