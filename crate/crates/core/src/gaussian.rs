//! Class-conditional Gaussian statistics with a shared covariance, and the
//! Mahalanobis machinery built on them.
//!
//! Sign conventions: [`GaussianStats::score`] is the parameter-free
//! Mahalanobis *score* `M(x) = max_k -(f - mu_k)^T P (f - mu_k)` (always
//! `<= 0`, higher means more ID-like). [`GaussianStats::distance`] is its
//! negation, the squared distance to the closest class mean. Per-class
//! thresholds are stored as distances: `class_thresholds[k]` is the largest
//! distance any training sample of class `k` has, so a sample "exceeds" the
//! ID region of class `k` when its distance is strictly larger.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TokenizedExample;
use crate::encoder::{features, EncoderParams};
use crate::{Error, Result};

pub const DEFAULT_SHRINKAGE: f64 = 1e-3;
const EPS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub class_means: Vec<Vec<f64>>,
    /// Shared covariance (row-major `d x d`), normalized by N.
    pub covariance: Vec<f64>,
    /// `(covariance + epsilon I)^-1`, row-major.
    pub precision: Vec<f64>,
    pub epsilon: f64,
    pub class_thresholds: Vec<f64>,
    pub class_counts: Vec<usize>,
    /// Checksum of the encoder the features came from (empty if unknown).
    #[serde(default)]
    pub extractor_checksum: String,
}

fn check_finite(features: &[Vec<f64>], d: usize) -> Result<()> {
    for (i, f) in features.iter().enumerate() {
        if f.len() != d {
            return Err(Error::Dimension { expected: d, got: f.len() });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature row {i}")));
        }
    }
    Ok(())
}

/// Fits class means, the shared covariance, its shrinkage-regularized
/// inverse and per-class training thresholds.
///
/// `epsilon = max(shrinkage_scale * trace(cov) / d, 1e-8)`.
pub fn fit_gaussian(features: &[Vec<f64>], labels: &[usize], num_classes: usize, shrinkage_scale: f64) -> Result<GaussianStats> {
    if features.len() != labels.len() {
        return Err(Error::Dimension { expected: features.len(), got: labels.len() });
    }
    let d = features.first().map(Vec::len).ok_or_else(|| Error::EmptyCorpus("no features to fit".into()))?;
    if d == 0 {
        return Err(Error::Invalid("feature dimension must be >= 1".into()));
    }
    if !(shrinkage_scale >= 0.0) {
        return Err(Error::Config(format!("shrinkage_scale must be >= 0, got {shrinkage_scale}")));
    }
    check_finite(features, d)?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Label { label: bad, max: num_classes - 1 });
    }

    let mut counts = vec![0usize; num_classes];
    let mut means = vec![DVector::<f64>::zeros(d); num_classes];
    for (f, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        means[y] += DVector::from_column_slice(f);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        *m /= c as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (f, &y) in features.iter().zip(labels) {
        let diff = DVector::from_column_slice(f) - &means[y];
        cov.ger(1.0, &diff, &diff, 1.0);
    }
    cov /= features.len() as f64;
    // symmetrize away rounding asymmetry
    cov = (&cov + cov.transpose()) * 0.5;

    let epsilon = (shrinkage_scale * cov.trace() / d as f64).max(EPS_FLOOR);
    let mut stats = GaussianStats::from_parts(means.iter().map(|m| m.as_slice().to_vec()).collect(), cov.as_slice().to_vec(), epsilon)?;
    stats.class_counts = counts;
    let mut thresholds = vec![0.0f64; num_classes];
    for (f, &y) in features.iter().zip(labels) {
        thresholds[y] = thresholds[y].max(stats.distance_unchecked(f));
    }
    stats.class_thresholds = thresholds;
    Ok(stats)
}

/// Fits on the `[CLS]` features `params` produces for `train`, and records
/// the encoder checksum.
pub fn fit_from_encoder(params: &EncoderParams, train: &[TokenizedExample], shrinkage_scale: f64) -> Result<GaussianStats> {
    let feats = features(params, train)?;
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    let mut stats = fit_gaussian(&feats, &labels, params.config.num_classes, shrinkage_scale)?;
    stats.extractor_checksum = params.checksum();
    Ok(stats)
}

impl GaussianStats {
    /// Builds stats from given means and covariance; thresholds start at 0.
    pub fn from_parts(class_means: Vec<Vec<f64>>, covariance: Vec<f64>, epsilon: f64) -> Result<Self> {
        let d = class_means.first().map(Vec::len).unwrap_or(0);
        if d == 0 || covariance.len() != d * d {
            return Err(Error::Dimension { expected: d * d, got: covariance.len() });
        }
        let k = class_means.len();
        // nalgebra is column-major; the covariance is symmetric so either order works
        let reg = DMatrix::from_row_slice(d, d, &covariance) + DMatrix::identity(d, d) * epsilon;
        let chol = reg.cholesky().ok_or_else(|| Error::Invalid("regularized covariance is not positive definite".into()))?;
        let prec = chol.inverse();
        let prec = (&prec + prec.transpose()) * 0.5;
        let mut precision = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                precision[i * d + j] = prec[(i, j)];
            }
        }
        Ok(GaussianStats {
            class_means,
            covariance,
            precision,
            epsilon,
            class_thresholds: vec![0.0; k],
            class_counts: vec![0; k],
            extractor_checksum: String::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.class_means[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    fn quad(&self, feature: &[f64], mean: &[f64]) -> f64 {
        let d = self.dim();
        let diff: Vec<f64> = feature.iter().zip(mean).map(|(a, b)| a - b).collect();
        let mut s = 0.0;
        for i in 0..d {
            let row = &self.precision[i * d..(i + 1) * d];
            let r: f64 = row.iter().zip(&diff).map(|(p, x)| p * x).sum();
            s += diff[i] * r;
        }
        s.max(0.0)
    }

    fn check_dim(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: feature.len() });
        }
        Ok(())
    }

    /// Squared Mahalanobis distance to each class mean.
    pub fn class_distances(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(feature)?;
        Ok(self.class_means.iter().map(|m| self.quad(feature, m)).collect())
    }

    fn distance_unchecked(&self, feature: &[f64]) -> f64 {
        self.class_means.iter().map(|m| self.quad(feature, m)).fold(f64::INFINITY, f64::min)
    }

    /// Squared Mahalanobis distance to the closest class mean (`-M(x)`).
    pub fn distance(&self, feature: &[f64]) -> Result<f64> {
        self.check_dim(feature)?;
        Ok(self.distance_unchecked(feature))
    }

    /// `M(x)`: negated distance to the closest class-conditional Gaussian.
    pub fn score(&self, feature: &[f64]) -> Result<f64> {
        Ok(-self.distance(feature)?)
    }

    /// Class whose mean is closest under the shared metric.
    pub fn nearest_class(&self, feature: &[f64]) -> Result<usize> {
        let ds = self.class_distances(feature)?;
        Ok(crate::scoring::argmax(&ds.iter().map(|v| -v).collect::<Vec<_>>()))
    }

    pub fn max_threshold(&self) -> f64 {
        self.class_thresholds.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn mahalanobis_score(stats: &GaussianStats, feature: &[f64]) -> Result<f64> {
    stats.score(feature)
}
