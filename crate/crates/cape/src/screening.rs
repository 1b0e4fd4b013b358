//! Routing-score screening: uncertainty, OOD distance, weather mutation,
//! branch disagreement, the logistic routing score, and the per-node
//! streaming score CDF.
//!
//! Everything here is computable before any branch escalation: the expert
//! prediction, the small model's cheap forward pass, the retrieval query key,
//! and recent weather records. The scalar routing score is a logistic of the
//! (z-scored) screening features; the calibrated score `α·r` is the axis on
//! which gain curves, CDFs, and thresholds live.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::core::HorizonVector;
use crate::data::{ObservationWindow, Sample};
use crate::error::{CapeError, Result};

/// Pre-decision screening signals, all finite and nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningFeatures {
    /// Ensemble predictive variance, averaged over the horizon.
    pub u: f64,
    /// Mahalanobis OOD distance of the query key to the training reference.
    pub o: f64,
    /// Weather mutation intensity: normalized short-window std of covariates.
    pub mu: f64,
    /// Expert / small-model disagreement (MAE).
    pub d: f64,
}

impl ScreeningFeatures {
    pub fn as_array(&self) -> [f64; 4] {
        [self.u, self.o, self.mu, self.d]
    }
}

/// Mean and jittered covariance of training-split query keys, stored with the
/// lower Cholesky factor so Mahalanobis distances need only a forward solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodReference {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub chol_lower: Vec<Vec<f64>>,
    pub jitter: f64,
}

impl OodReference {
    /// Fits the reference from training query keys. A singular covariance is
    /// never an error: diagonal jitter escalates until factorization succeeds.
    pub fn fit(keys: &[Vec<f64>]) -> Result<Self> {
        if keys.is_empty() {
            return Err(CapeError::Data("OOD reference needs training keys".into()));
        }
        let d = keys[0].len();
        let n = keys.len() as f64;
        let mut mean = vec![0.0; d];
        for k in keys {
            for (m, v) in mean.iter_mut().zip(k) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![vec![0.0; d]; d];
        for k in keys {
            for i in 0..d {
                let xi = k[i] - mean[i];
                for j in i..d {
                    cov[i][j] += xi * (k[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i][j] /= n;
                cov[j][i] = cov[i][j];
            }
        }
        Self::from_moments(mean, cov)
    }

    /// Builds the reference from explicit moments, applying diagonal jitter.
    pub fn from_moments(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        let mut jitter = 1e-9;
        loop {
            let mut m = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] = covariance[i][j];
                }
                m[(i, i)] += jitter;
            }
            if let Some(chol) = nalgebra::Cholesky::new(m) {
                let l = chol.l();
                let chol_lower = (0..d)
                    .map(|i| (0..d).map(|j| l[(i, j)]).collect())
                    .collect();
                return Ok(Self {
                    mean,
                    covariance,
                    chol_lower,
                    jitter,
                });
            }
            jitter *= 10.0;
            if jitter > 1e9 {
                return Err(CapeError::Data(
                    "OOD covariance failed to factorize even with jitter".into(),
                ));
            }
        }
    }

    /// `sqrt((q−μ)ᵀ Σ⁻¹ (q−μ))` via forward substitution on the stored factor.
    pub fn mahalanobis(&self, query: &[f64]) -> Result<f64> {
        let d = self.mean.len();
        if query.len() != d {
            return Err(CapeError::Dimension {
                context: "OodReference::mahalanobis",
                expected: d,
                got: query.len(),
            });
        }
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut acc = query[i] - self.mean[i];
            for j in 0..i {
                acc -= self.chol_lower[i][j] * y[j];
            }
            y[i] = acc / self.chol_lower[i][i];
        }
        Ok(y.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

/// Per-covariate stds of the training split, used to normalize the weather
/// mutation feature.
pub fn fit_weather_stats(train: &[&Sample]) -> Vec<f64> {
    let n_cov = train
        .iter()
        .find_map(|s| s.window.weather_recent.first().map(|r| r.len()))
        .unwrap_or(0);
    if n_cov == 0 {
        return Vec::new();
    }
    let mut count: f64 = 0.0;
    let mut mean = vec![0.0; n_cov];
    for s in train {
        for row in &s.window.weather_recent {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            count += 1.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count.max(1.0));
    let mut var = vec![0.0; n_cov];
    for s in train {
        for row in &s.window.weather_recent {
            for (v, (x, m)) in var.iter_mut().zip(row.iter().zip(&mean)) {
                *v += (x - m) * (x - m);
            }
        }
    }
    var.into_iter()
        .map(|v| {
            let s = (v / count.max(1.0)).sqrt();
            if s < 1e-9 {
                1.0
            } else {
                s
            }
        })
        .collect()
}

/// Computes the screening feature vector for one window.
///
/// Only pre-decision information enters: the expert output, the small model's
/// member predictions, the retrieval query key, and past weather records.
pub fn compute_features(
    window: &ObservationWindow,
    expert_pred: &HorizonVector,
    small_members: &[HorizonVector],
    query_key: &[f64],
    ood_ref: &OodReference,
    weather_stds: &[f64],
) -> Result<ScreeningFeatures> {
    let h = expert_pred.len();
    let b = small_members.len() as f64;

    // ensemble mean and variance per horizon step
    let mut mean = vec![0.0; h];
    for m in small_members {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= b);
    let mut u = 0.0;
    for hh in 0..h {
        let var: f64 = small_members
            .iter()
            .map(|m| {
                let d = m.values()[hh] - mean[hh];
                d * d
            })
            .sum::<f64>()
            / b;
        u += var;
    }
    u /= h as f64;

    let o = ood_ref.mahalanobis(query_key)?;

    // normalized short-window std of each covariate over the recent records
    let mu = if window.weather_recent.is_empty() || weather_stds.is_empty() {
        0.0
    } else {
        let rows = &window.weather_recent;
        let n = rows.len() as f64;
        let n_cov = weather_stds.len();
        let mut acc = 0.0;
        for c in 0..n_cov {
            let m: f64 = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var: f64 = rows.iter().map(|r| (r[c] - m) * (r[c] - m)).sum::<f64>() / n;
            acc += var.sqrt() / weather_stds[c];
        }
        acc / n_cov as f64
    };

    let d = expert_pred
        .values()
        .iter()
        .zip(&mean)
        .map(|(e, s)| (e - s).abs())
        .sum::<f64>()
        / h as f64;

    Ok(ScreeningFeatures { u, o, mu, d })
}

/// Logistic score parameters plus the feature normalization and the
/// calibration scalar `α`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreeningWeights {
    pub beta: [f64; 4],
    pub bias: f64,
    /// Calibration scalar; the calibrated score is `α·r`.
    pub alpha: f64,
    pub feature_means: [f64; 4],
    pub feature_stds: [f64; 4],
    /// Set when the fit degenerated (single-class labels).
    pub degenerate: bool,
}

impl ScreeningWeights {
    /// Neutral weights (score 0.5 everywhere).
    pub fn neutral(alpha: f64) -> Self {
        Self {
            beta: [0.0; 4],
            bias: 0.0,
            alpha,
            feature_means: [0.0; 4],
            feature_stds: [1.0; 4],
            degenerate: false,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // keep scores strictly inside (0, 1) even under floating-point saturation
    s.clamp(1e-15, 1.0 - 1e-15)
}

/// Routing score `r = σ(βᵀ φ_z + bias)`, strictly inside `(0, 1)`.
pub fn routing_score(features: &ScreeningFeatures, weights: &ScreeningWeights) -> f64 {
    let phi = features.as_array();
    let mut z = weights.bias;
    for i in 0..4 {
        z += weights.beta[i] * (phi[i] - weights.feature_means[i]) / weights.feature_stds[i];
    }
    sigmoid(z)
}

/// Calibrated score `α·r`.
pub fn calibrated_score(features: &ScreeningFeatures, weights: &ScreeningWeights) -> f64 {
    weights.alpha * routing_score(features, weights)
}

/// Fits the logistic screening weights on replay features and oracle labels
/// by full-batch gradient descent with an L2 penalty on `β` (bias free).
/// Deterministic: zero init, fixed iteration budget.
pub fn fit_screening_weights(
    features: &[ScreeningFeatures],
    labels: &[bool],
    alpha: f64,
) -> Result<ScreeningWeights> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(CapeError::Data(format!(
            "screening fit needs matched features/labels, got {}/{}",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len() as f64;
    let mut means = [0.0; 4];
    for f in features {
        for (m, v) in means.iter_mut().zip(f.as_array()) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut stds = [0.0; 4];
    for f in features {
        for (s, (v, m)) in stds.iter_mut().zip(f.as_array().iter().zip(&means)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in stds.iter_mut() {
        *s = (*s / n).sqrt();
        if *s < 1e-9 {
            *s = 1.0;
        }
    }

    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 || positives == labels.len() {
        let prior = (positives as f64 / n).clamp(1e-6, 1.0 - 1e-6);
        return Ok(ScreeningWeights {
            beta: [0.0; 4],
            bias: (prior / (1.0 - prior)).ln(),
            alpha,
            feature_means: means,
            feature_stds: stds,
            degenerate: true,
        });
    }

    let rows: Vec<[f64; 4]> = features
        .iter()
        .map(|f| {
            let phi = f.as_array();
            [
                (phi[0] - means[0]) / stds[0],
                (phi[1] - means[1]) / stds[1],
                (phi[2] - means[2]) / stds[2],
                (phi[3] - means[3]) / stds[3],
            ]
        })
        .collect();

    let l2 = 1e-4;
    let lr = 1.0;
    let iters = 800;
    let mut beta = [0.0; 4];
    let mut bias = 0.0;
    for _ in 0..iters {
        let mut grad_b = [0.0; 4];
        let mut grad_bias = 0.0;
        for (row, label) in rows.iter().zip(labels) {
            let z = bias + beta.iter().zip(row).map(|(b, x)| b * x).sum::<f64>();
            let err = sigmoid(z) - if *label { 1.0 } else { 0.0 };
            for (g, x) in grad_b.iter_mut().zip(row) {
                *g += err * x;
            }
            grad_bias += err;
        }
        for i in 0..4 {
            beta[i] -= lr * (grad_b[i] / n + l2 * beta[i]);
        }
        bias -= lr * grad_bias / n;
    }

    Ok(ScreeningWeights {
        beta,
        bias,
        alpha,
        feature_means: means,
        feature_stds: stds,
        degenerate: false,
    })
}

/// Exponentially weighted empirical CDF of recent calibrated scores.
///
/// Each update decays all existing weights by `γ`, appends the new score with
/// weight 1, and evicts the oldest entry beyond capacity. An empty CDF
/// evaluates to the uninformative prior 0.5.
#[derive(Debug, Clone)]
pub struct ScoreCdf {
    entries: VecDeque<(f64, u64)>,
    updates: u64,
    gamma: f64,
    capacity: usize,
}

impl ScoreCdf {
    pub fn new(gamma: f64, capacity: usize) -> Result<Self> {
        if !(0.0 < gamma && gamma <= 1.0) {
            return Err(CapeError::Config(format!(
                "CDF decay must be in (0, 1], got {gamma}"
            )));
        }
        if capacity == 0 {
            return Err(CapeError::Config("CDF capacity must be positive".into()));
        }
        Ok(Self {
            entries: VecDeque::new(),
            updates: 0,
            gamma,
            capacity,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Records one calibrated score.
    pub fn update(&mut self, score: f64) {
        debug_assert!(score.is_finite() && score >= 0.0);
        self.updates += 1;
        self.entries.push_back((score, self.updates));
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Weighted fraction of recorded scores at or below `threshold`.
    pub fn eval(&self, threshold: f64) -> f64 {
        if self.entries.is_empty() {
            return 0.5;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (score, birth) in &self.entries {
            let w = self.gamma.powi((self.updates - birth) as i32);
            den += w;
            if *score <= threshold {
                num += w;
            }
        }
        num / den
    }
}
