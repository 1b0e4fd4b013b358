//! The three forecast branches: site expert, pooled small ensemble, and the
//! factorized cloud branch (query → retrieval → context → conditional
//! regressor).
//!
//! Branches are deterministic ridge regressors — lightweight stand-ins whose
//! job is to produce a realistic accuracy ordering for the control layer, not
//! state-of-the-art forecasts. Everything is immutable after training;
//! prediction is pure. All outputs live in `[0, 1]^H`.

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::HorizonVector;
use crate::data::{CaseBase, ObservationWindow, Sample};
use crate::error::{CapeError, Result};
use crate::seeds::derive_seed;

/// Multi-output ridge regressor with intercepts.
///
/// When trained on an empty set the model degrades to persistence (repeat the
/// most recent lag), flagged via `fallback`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `weights[h]` is the coefficient vector of output `h`.
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub n_features: usize,
    pub fallback: bool,
}

impl RidgeModel {
    /// Closed-form ridge fit `(XᵀX + λI) W = XᵀY` on centered data; the
    /// intercept absorbs the means and is not penalized.
    pub fn fit(rows: &[&[f64]], targets: &[&[f64]], horizon: usize, lambda: f64) -> Result<Self> {
        if rows.is_empty() {
            return Ok(Self::persistence(horizon));
        }
        let d = rows[0].len();
        let n = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(CapeError::Dimension {
                context: "RidgeModel::fit rows",
                expected: d,
                got: rows.iter().find(|r| r.len() != d).unwrap().len(),
            });
        }
        if targets.len() != n {
            return Err(CapeError::Dimension {
                context: "RidgeModel::fit targets",
                expected: n,
                got: targets.len(),
            });
        }

        let mut x_mean = vec![0.0; d];
        for r in rows {
            for (m, v) in x_mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        x_mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut y_mean = vec![0.0; horizon];
        for t in targets {
            for (m, v) in y_mean.iter_mut().zip(*t) {
                *m += v;
            }
        }
        y_mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut gram = DMatrix::zeros(d, d);
        let mut rhs = DMatrix::zeros(d, horizon);
        for (r, t) in rows.iter().zip(targets) {
            for i in 0..d {
                let xi = r[i] - x_mean[i];
                for j in i..d {
                    gram[(i, j)] += xi * (r[j] - x_mean[j]);
                }
                for h in 0..horizon {
                    rhs[(i, h)] += xi * (t[h] - y_mean[h]);
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }

        // escalate jitter until the (PSD) Gram factorizes
        let mut jitter = lambda.max(0.0);
        let solved = loop {
            let mut m = gram.clone();
            for i in 0..d {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                break chol.solve(&rhs);
            }
            jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
            if jitter > 1e6 {
                return Err(CapeError::Data("ridge system failed to factorize".into()));
            }
        };

        let weights: Vec<Vec<f64>> = (0..horizon)
            .map(|h| (0..d).map(|i| solved[(i, h)]).collect())
            .collect();
        let intercepts: Vec<f64> = (0..horizon)
            .map(|h| y_mean[h] - weights[h].iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>())
            .collect();
        Ok(Self {
            weights,
            intercepts,
            n_features: d,
            fallback: false,
        })
    }

    pub fn persistence(horizon: usize) -> Self {
        Self {
            weights: vec![Vec::new(); horizon],
            intercepts: vec![0.0; horizon],
            n_features: 0,
            fallback: true,
        }
    }

    pub fn horizon(&self) -> usize {
        self.intercepts.len()
    }

    /// Raw (unclamped) linear prediction; persistence models repeat
    /// `last_lag`.
    fn predict_raw(&self, features: &[f64], last_lag: f64) -> Result<Vec<f64>> {
        if self.fallback {
            return Ok(vec![last_lag; self.horizon()]);
        }
        if features.len() != self.n_features {
            return Err(CapeError::Dimension {
                context: "RidgeModel::predict",
                expected: self.n_features,
                got: features.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.intercepts)
            .map(|(w, b)| b + w.iter().zip(features).map(|(wi, x)| wi * x).sum::<f64>())
            .collect())
    }

    pub fn predict(&self, window: &ObservationWindow) -> Result<HorizonVector> {
        let last_lag = window.features[window.n_lags - 1];
        HorizonVector::new(self.predict_raw(&window.features, last_lag)?)
    }
}

fn sample_matrix<'a>(samples: &'a [&Sample]) -> (Vec<&'a [f64]>, Vec<&'a [f64]>) {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.window.features.as_slice()).collect();
    let targets: Vec<&[f64]> = samples.iter().map(|s| s.target.values()).collect();
    (rows, targets)
}

/// Site-specific expert, trained only on that node's training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertModel {
    pub node_id: String,
    pub model: RidgeModel,
}

pub fn train_expert(
    node_id: &str,
    train: &[&Sample],
    horizon: usize,
    lambda: f64,
) -> Result<ExpertModel> {
    debug_assert!(train.iter().all(|s| s.window.node_id == node_id));
    let (rows, targets) = sample_matrix(train);
    Ok(ExpertModel {
        node_id: node_id.to_string(),
        model: RidgeModel::fit(&rows, &targets, horizon, lambda)?,
    })
}

pub fn predict_expert(model: &ExpertModel, window: &ObservationWindow) -> Result<HorizonVector> {
    model.model.predict(window)
}

/// Shared small model: a bootstrap ensemble of ridge replicas trained on the
/// pooled training split. The point prediction is the ensemble mean; the
/// replica spread is the uncertainty source used by screening.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmallModel {
    pub replicas: Vec<RidgeModel>,
}

pub fn train_small(
    pooled_train: &[&Sample],
    replicas: usize,
    horizon: usize,
    lambda: f64,
    seed: u64,
) -> Result<SmallModel> {
    if replicas < 2 {
        return Err(CapeError::Config(format!(
            "small model needs at least 2 bootstrap replicas, got {replicas}"
        )));
    }
    let n = pooled_train.len();
    let mut out = Vec::with_capacity(replicas);
    for b in 0..replicas {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("small-replica-{b}")));
        let resampled: Vec<&Sample> = if n == 0 {
            Vec::new()
        } else {
            (0..n).map(|_| pooled_train[rng.gen_range(0..n)]).collect()
        };
        let (rows, targets) = sample_matrix(&resampled);
        out.push(RidgeModel::fit(&rows, &targets, horizon, lambda)?);
    }
    Ok(SmallModel { replicas: out })
}

/// Per-replica predictions (each clamped to the box).
pub fn predict_small_members(
    model: &SmallModel,
    window: &ObservationWindow,
) -> Result<Vec<HorizonVector>> {
    model.replicas.iter().map(|r| r.predict(window)).collect()
}

/// Ensemble-mean point prediction.
pub fn predict_small(model: &SmallModel, window: &ObservationWindow) -> Result<HorizonVector> {
    let members = predict_small_members(model, window)?;
    let h = members[0].len();
    let mut mean = vec![0.0; h];
    for m in &members {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= members.len() as f64);
    HorizonVector::new(mean)
}

/// Frozen training-split statistics that z-score the lag block of a window
/// into a retrieval query key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryEncoder {
    pub lag_means: Vec<f64>,
    pub lag_stds: Vec<f64>,
}

impl QueryEncoder {
    pub fn fit(train_windows: &[&ObservationWindow]) -> Result<Self> {
        if train_windows.is_empty() {
            return Err(CapeError::Data("query encoder needs training windows".into()));
        }
        let n_lags = train_windows[0].n_lags;
        let n = train_windows.len() as f64;
        let mut means = vec![0.0; n_lags];
        for w in train_windows {
            for (m, v) in means.iter_mut().zip(&w.features[..n_lags]) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = vec![0.0; n_lags];
        for w in train_windows {
            for (s, (v, m)) in vars.iter_mut().zip(w.features[..n_lags].iter().zip(&means)) {
                *s += (v - m) * (v - m);
            }
        }
        let stds = vars
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < 1e-9 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self {
            lag_means: means,
            lag_stds: stds,
        })
    }

    /// Fixed-dimension query key: z-scored lags, then calendar encodings.
    pub fn form_query(&self, window: &ObservationWindow) -> Vec<f64> {
        let n_lags = self.lag_means.len();
        let mut key = Vec::with_capacity(n_lags + 2);
        for ((v, m), s) in window.features[..n_lags]
            .iter()
            .zip(&self.lag_means)
            .zip(&self.lag_stds)
        {
            key.push((v - m) / s);
        }
        // sin/cos of time-of-day sit at the tail of the feature vector
        let n = window.features.len();
        key.push(window.features[n - 2]);
        key.push(window.features[n - 1]);
        key
    }
}

/// One retrieved case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportEntry {
    pub trajectory: HorizonVector,
    pub distance: f64,
    pub end_slot: i64,
    pub node_id: String,
}

/// Up to `K` nearest eligible cases, distances nondecreasing; every entry's
/// trajectory was fully observable before `current_slot`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SupportSet {
    pub entries: Vec<SupportEntry>,
}

impl SupportSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Exact K-nearest retrieval with the leakage filter `end_slot < current_slot`.
pub fn retrieve_support(
    case_base: &CaseBase,
    query: &[f64],
    k: usize,
    current_slot: i64,
) -> SupportSet {
    let hits = case_base.knn(query, k, current_slot);
    SupportSet {
        entries: hits
            .into_iter()
            .map(|(idx, distance)| {
                let case = &case_base.cases()[idx];
                debug_assert!(case.end_slot < current_slot);
                SupportEntry {
                    trajectory: case.trajectory.clone(),
                    distance,
                    end_slot: case.end_slot,
                    node_id: case.node_id.clone(),
                }
            })
            .collect(),
    }
}

/// Distance-weighted summary of a support set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudContext {
    /// Softmax(−distance/temperature)-weighted mean trajectory, in `[0,1]^H`.
    pub context_vector: Vec<f64>,
    /// Weighted trajectory spread averaged over the horizon.
    pub dispersion: f64,
}

/// Builds the context `ψ(S)`; errors on an empty support set (callers fall
/// back to the small branch instead).
pub fn build_context(support: &SupportSet, temperature: f64) -> Result<CloudContext> {
    if support.is_empty() {
        return Err(CapeError::Data("build_context on empty support set".into()));
    }
    let temp = if temperature > 0.0 { temperature } else { 1.0 };
    let d_min = support
        .entries
        .iter()
        .map(|e| e.distance)
        .fold(f64::INFINITY, f64::min);
    // max-subtracted softmax over -d/T
    let raw: Vec<f64> = support
        .entries
        .iter()
        .map(|e| (-(e.distance - d_min) / temp).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.into_iter().map(|w| w / z).collect();

    let h = support.entries[0].trajectory.len();
    let mut ctx = vec![0.0; h];
    for (e, w) in support.entries.iter().zip(&weights) {
        for (c, v) in ctx.iter_mut().zip(e.trajectory.values()) {
            *c += w * v;
        }
    }
    let mut disp = 0.0;
    for hh in 0..h {
        let var: f64 = support
            .entries
            .iter()
            .zip(&weights)
            .map(|(e, w)| {
                let d = e.trajectory.values()[hh] - ctx[hh];
                w * d * d
            })
            .sum();
        disp += var.max(0.0).sqrt();
    }
    Ok(CloudContext {
        context_vector: ctx,
        dispersion: disp / h as f64,
    })
}

/// Compact conditional regressor mapping `(window features, context)` to the
/// cloud-assisted candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalRegressor {
    pub model: RidgeModel,
    pub n_window_features: usize,
}

fn conditional_row(window: &ObservationWindow, context: &CloudContext) -> Vec<f64> {
    let mut row = window.features.clone();
    row.extend_from_slice(&context.context_vector);
    row.push(context.dispersion);
    row
}

/// Trains the conditional regressor on training samples with leakage-filtered
/// retrieval (retrieval at slot `t` only sees cases ending before `t`, which
/// also excludes each sample's own case). Samples with empty support are
/// skipped. `max_samples` thins the input by a deterministic stride.
#[allow(clippy::too_many_arguments)]
pub fn train_conditional(
    train: &[&Sample],
    case_base: &CaseBase,
    encoder: &QueryEncoder,
    k: usize,
    temperature: f64,
    horizon: usize,
    lambda: f64,
    max_samples: Option<usize>,
) -> Result<ConditionalRegressor> {
    let stride = match max_samples {
        Some(cap) if cap > 0 && train.len() > cap => train.len().div_ceil(cap),
        _ => 1,
    };
    let picked: Vec<&Sample> = train.iter().step_by(stride).copied().collect();
    let built: Vec<Option<Vec<f64>>> = crate::parallel::pmap(&picked, |s| {
        let query = encoder.form_query(&s.window);
        let support = retrieve_support(case_base, &query, k, s.window.slot);
        if support.is_empty() {
            return None;
        }
        let ctx = build_context(&support, temperature).ok()?;
        Some(conditional_row(&s.window, &ctx))
    });
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut targets: Vec<&[f64]> = Vec::new();
    for (row, s) in built.iter().zip(&picked) {
        if let Some(r) = row {
            rows.push(r.as_slice());
            targets.push(s.target.values());
        }
    }
    let n_window_features = train.first().map(|s| s.window.features.len()).unwrap_or(0);
    Ok(ConditionalRegressor {
        model: RidgeModel::fit(&rows, &targets, horizon, lambda)?,
        n_window_features,
    })
}

/// Cloud-assisted candidate `f^c(X, z)`, clamped to the box.
pub fn predict_cloud(
    regressor: &ConditionalRegressor,
    window: &ObservationWindow,
    context: &CloudContext,
) -> Result<HorizonVector> {
    let row = conditional_row(window, context);
    let last_lag = window.features[window.n_lags - 1];
    HorizonVector::new(regressor.model.predict_raw(&row, last_lag)?)
}

/// All trained branch models plus the retrieval parameters, as consumed by
/// replay building and the simulation loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchSet {
    pub experts: std::collections::BTreeMap<String, ExpertModel>,
    pub small: SmallModel,
    pub conditional: ConditionalRegressor,
    pub encoder: QueryEncoder,
    /// Retrieval support-set size.
    pub k: usize,
    /// Context softmax temperature.
    pub temperature: f64,
}

impl BranchSet {
    pub fn expert(&self, node_id: &str) -> Result<&ExpertModel> {
        self.experts
            .get(node_id)
            .ok_or_else(|| CapeError::Config(format!("no expert model for node '{node_id}'")))
    }

    /// Runs the cloud pipeline against `case_base` at `current_slot`.
    pub fn run_cloud(
        &self,
        window: &ObservationWindow,
        case_base: &CaseBase,
        current_slot: i64,
        small_prediction: &HorizonVector,
    ) -> Result<CloudBranchOutput> {
        cloud_branch(
            window,
            case_base,
            &self.encoder,
            &self.conditional,
            self.k,
            self.temperature,
            current_slot,
            small_prediction,
        )
    }
}

/// Output of the full cloud pipeline for one window.
#[derive(Debug, Clone)]
pub struct CloudBranchOutput {
    pub prediction: HorizonVector,
    /// True when retrieval came back empty and the small-branch output was
    /// used instead.
    pub fallback: bool,
    pub support_size: usize,
}

/// Runs query → retrieval → context → conditional prediction, falling back to
/// the small-branch output when no case is eligible.
#[allow(clippy::too_many_arguments)]
pub fn cloud_branch(
    window: &ObservationWindow,
    case_base: &CaseBase,
    encoder: &QueryEncoder,
    regressor: &ConditionalRegressor,
    k: usize,
    temperature: f64,
    current_slot: i64,
    small_prediction: &HorizonVector,
) -> Result<CloudBranchOutput> {
    let query = encoder.form_query(window);
    let support = retrieve_support(case_base, &query, k, current_slot);
    if support.is_empty() {
        return Ok(CloudBranchOutput {
            prediction: small_prediction.clone(),
            fallback: true,
            support_size: 0,
        });
    }
    let context = build_context(&support, temperature)?;
    Ok(CloudBranchOutput {
        prediction: predict_cloud(regressor, window, &context)?,
        fallback: false,
        support_size: support.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_case_base, Case};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(node: &str, slot: i64, lags: Vec<f64>, tail: Vec<f64>) -> ObservationWindow {
        let n_lags = lags.len();
        let mut features = lags;
        features.extend(tail);
        ObservationWindow {
            node_id: node.into(),
            slot,
            features,
            n_lags,
            weather_recent: Vec::new(),
        }
    }

    fn sample(node: &str, slot: i64, lags: Vec<f64>, target: Vec<f64>) -> Sample {
        let h = target.len();
        Sample {
            window: window(node, slot, lags, vec![0.0, 1.0]),
            target: HorizonVector::new(target).unwrap(),
            reveal_slot: slot + h as i64,
        }
    }

    #[test]
    fn constant_target_fits_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Sample> = (0..50)
            .map(|t| sample("a", t, vec![rng.gen(), rng.gen()], vec![0.5, 0.5]))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let expert = train_expert("a", &refs, 2, 1e-3).unwrap();
        let pred = predict_expert(&expert, &samples[7].window).unwrap();
        assert!(pred.values().iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn exact_linear_data_recovers_slope_at_zero_lambda() {
        // y = 0.3 x + 0.1 on a single live feature; the other column constant.
        let samples: Vec<Sample> = (0..40)
            .map(|t| {
                let x = t as f64 / 40.0;
                sample("a", t as i64, vec![x, 0.5], vec![0.3 * x + 0.1])
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let expert = train_expert("a", &refs, 1, 0.0).unwrap();
        // normal-equations oracle: slope = cov(x, y)/var(x) = 0.3 exactly
        assert!((expert.model.weights[0][0] - 0.3).abs() < 1e-8);
        assert!((expert.model.intercepts[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn empty_training_set_falls_back_to_persistence() {
        let expert = train_expert("a", &[], 3, 1e-3).unwrap();
        assert!(expert.model.fallback);
        let w = window("a", 10, vec![0.1, 0.8], vec![0.0, 1.0]);
        let pred = predict_expert(&expert, &w).unwrap();
        assert_eq!(pred.values(), &[0.8, 0.8, 0.8]);
    }

    #[test]
    fn zero_coefficients_predict_intercept() {
        let model = RidgeModel {
            weights: vec![vec![0.0, 0.0]; 4],
            intercepts: vec![0.3; 4],
            n_features: 2,
            fallback: false,
        };
        let w = window("a", 0, vec![0.9, 0.1], vec![]);
        assert_eq!(model.predict(&w).unwrap().values(), &[0.3; 4]);
    }

    #[test]
    fn predictions_clamp_to_box() {
        let model = RidgeModel {
            weights: vec![vec![0.0]],
            intercepts: vec![1.7],
            n_features: 1,
            fallback: false,
        };
        let w = window("a", 0, vec![0.5], vec![]);
        assert_eq!(model.predict(&w).unwrap().values(), &[1.0]);
    }

    #[test]
    fn feature_length_mismatch_errors() {
        let model = RidgeModel {
            weights: vec![vec![0.1, 0.2]],
            intercepts: vec![0.0],
            n_features: 2,
            fallback: false,
        };
        let w = window("a", 0, vec![0.5], vec![]);
        assert!(matches!(model.predict(&w), Err(CapeError::Dimension { .. })));
    }

    #[test]
    fn bootstrap_ensemble_deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Sample> = (0..30)
            .map(|t| {
                let x: f64 = rng.gen();
                sample("a", t, vec![x, x * x], vec![0.2 + 0.5 * x])
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let m1 = train_small(&refs, 3, 1, 1e-3, 42).unwrap();
        let m2 = train_small(&refs, 3, 1, 1e-3, 42).unwrap();
        assert_eq!(m1.replicas, m2.replicas);
        let m3 = train_small(&refs, 3, 1, 1e-3, 43).unwrap();
        assert_ne!(m1.replicas, m3.replicas);
    }

    #[test]
    fn identical_replicas_mean_equals_replica() {
        let replica = RidgeModel {
            weights: vec![vec![0.0]],
            intercepts: vec![0.4],
            n_features: 1,
            fallback: false,
        };
        let small = SmallModel {
            replicas: vec![replica.clone(), replica.clone(), replica],
        };
        let w = window("a", 0, vec![0.5], vec![]);
        let mean = predict_small(&small, &w).unwrap();
        assert!((mean.values()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn small_model_requires_two_replicas() {
        assert!(train_small(&[], 1, 2, 1e-3, 0).is_err());
    }

    #[test]
    fn query_encoder_centers_training_mean() {
        let samples: Vec<Sample> = (0..20)
            .map(|t| sample("a", t, vec![0.2 + 0.01 * t as f64, 0.5], vec![0.4]))
            .collect();
        let windows: Vec<&ObservationWindow> = samples.iter().map(|s| &s.window).collect();
        let enc = QueryEncoder::fit(&windows).unwrap();
        let mean_window = window(
            "a",
            99,
            vec![enc.lag_means[0], enc.lag_means[1]],
            vec![0.3, 0.7],
        );
        let key = enc.form_query(&mean_window);
        assert!(key[0].abs() < 1e-12 && key[1].abs() < 1e-12);
        // calendar block passes through
        assert_eq!(&key[2..], &[0.3, 0.7]);
        // deterministic
        assert_eq!(key, enc.form_query(&mean_window));
    }

    #[test]
    fn query_differs_only_in_perturbed_lag() {
        let samples: Vec<Sample> = (0..20)
            .map(|t| {
                sample(
                    "a",
                    t,
                    vec![0.1 * (t % 7) as f64, 0.05 * (t % 5) as f64],
                    vec![0.4],
                )
            })
            .collect();
        let windows: Vec<&ObservationWindow> = samples.iter().map(|s| &s.window).collect();
        let enc = QueryEncoder::fit(&windows).unwrap();
        let w1 = window("a", 50, vec![0.3, 0.2], vec![0.1, 0.9]);
        let w2 = window("a", 50, vec![0.3, 0.25], vec![0.1, 0.9]);
        let k1 = enc.form_query(&w1);
        let k2 = enc.form_query(&w2);
        assert_eq!(k1[0], k2[0]);
        assert_ne!(k1[1], k2[1]);
        assert_eq!(&k1[2..], &k2[2..]);
    }

    fn toy_case(key: Vec<f64>, traj: Vec<f64>, end_slot: i64) -> Case {
        Case {
            key,
            trajectory: HorizonVector::new(traj).unwrap(),
            end_slot,
            node_id: "x".into(),
        }
    }

    fn base_from(cases: Vec<Case>) -> CaseBase {
        let mut cb = CaseBase::default();
        for c in cases {
            cb.insert(c);
        }
        cb
    }

    #[test]
    fn retrieve_single_eligible_case() {
        let cb = base_from(vec![toy_case(vec![0.0], vec![0.7], 5)]);
        let s = retrieve_support(&cb, &[1.0], 4, 10);
        assert_eq!(s.len(), 1);
        assert_eq!(s.entries[0].trajectory.values(), &[0.7]);
    }

    #[test]
    fn retrieve_matches_brute_force() {
        let keys = [
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 2.0],
            vec![0.5, 0.5],
            vec![3.0, 0.1],
        ];
        let cb = base_from(
            keys.iter()
                .enumerate()
                .map(|(i, k)| toy_case(k.clone(), vec![0.5], i as i64))
                .collect(),
        );
        let q = [0.4, 0.4];
        let got = retrieve_support(&cb, &q, 2, 100);
        let mut brute: Vec<(f64, usize)> = keys
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let d2: f64 = k.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2.sqrt(), i)
            })
            .collect();
        brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got.entries[0].end_slot, brute[0].1 as i64);
        assert_eq!(got.entries[1].end_slot, brute[1].1 as i64);
        assert!(got.entries[0].distance <= got.entries[1].distance);
    }

    #[test]
    fn retrieve_all_future_cases_yields_empty() {
        let cb = base_from(vec![
            toy_case(vec![0.0], vec![0.5], 10),
            toy_case(vec![1.0], vec![0.5], 12),
        ]);
        assert!(retrieve_support(&cb, &[0.0], 2, 10).is_empty());
    }

    /// Leakage filter fuzz: retrieval never returns a case ending at or after
    /// the current slot.
    #[test]
    fn retrieve_temporal_filter_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cb = base_from(
            (0..200)
                .map(|i| toy_case(vec![rng.gen(), rng.gen()], vec![rng.gen()], i % 97))
                .collect(),
        );
        for _ in 0..10_000 {
            let q = [rng.gen::<f64>(), rng.gen::<f64>()];
            let slot = rng.gen_range(0..120);
            let s = retrieve_support(&cb, &q, 8, slot);
            assert!(s.entries.iter().all(|e| e.end_slot < slot));
        }
    }

    #[test]
    fn context_single_case_is_trajectory_with_zero_dispersion() {
        let mut s = SupportSet::default();
        s.entries.push(SupportEntry {
            trajectory: HorizonVector::new(vec![0.2, 0.6]).unwrap(),
            distance: 1.3,
            end_slot: 0,
            node_id: "x".into(),
        });
        let ctx = build_context(&s, 1.0).unwrap();
        assert_eq!(ctx.context_vector, vec![0.2, 0.6]);
        assert_eq!(ctx.dispersion, 0.0);
    }

    #[test]
    fn context_equidistant_cases_average() {
        let mut s = SupportSet::default();
        for traj in [[0.2, 0.4], [0.6, 0.8]] {
            s.entries.push(SupportEntry {
                trajectory: HorizonVector::new(traj.to_vec()).unwrap(),
                distance: 0.5,
                end_slot: 0,
                node_id: "x".into(),
            });
        }
        let ctx = build_context(&s, 1.0).unwrap();
        assert!((ctx.context_vector[0] - 0.4).abs() < 1e-12);
        assert!((ctx.context_vector[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn context_softmax_limit_prefers_near_case() {
        let mut s = SupportSet::default();
        s.entries.push(SupportEntry {
            trajectory: HorizonVector::new(vec![0.9]).unwrap(),
            distance: 0.0,
            end_slot: 0,
            node_id: "x".into(),
        });
        s.entries.push(SupportEntry {
            trajectory: HorizonVector::new(vec![0.1]).unwrap(),
            distance: 30.0,
            end_slot: 0,
            node_id: "x".into(),
        });
        let ctx = build_context(&s, 1.0).unwrap();
        assert!((ctx.context_vector[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn conditional_regressor_learns_identity_on_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 3;
        // training rows whose target equals the context exactly
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut targets: Vec<Vec<f64>> = Vec::new();
        for _ in 0..300 {
            let w = window("a", 0, vec![rng.gen(), rng.gen()], vec![rng.gen(), rng.gen()]);
            let ctx = CloudContext {
                context_vector: (0..h).map(|_| rng.gen::<f64>()).collect(),
                dispersion: rng.gen::<f64>() * 0.1,
            };
            rows.push(conditional_row(&w, &ctx));
            targets.push(ctx.context_vector.clone());
        }
        let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let target_refs: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
        let reg = ConditionalRegressor {
            model: RidgeModel::fit(&row_refs, &target_refs, h, 1e-8).unwrap(),
            n_window_features: 4,
        };
        let w = window("a", 0, vec![0.3, 0.3], vec![0.5, 0.5]);
        let ctx = CloudContext {
            context_vector: vec![0.4; h],
            dispersion: 0.02,
        };
        let pred = predict_cloud(&reg, &w, &ctx).unwrap();
        assert!(pred.values().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn cloud_branch_empty_support_falls_back_to_small() {
        let cb = CaseBase::default();
        let samples: Vec<Sample> = (0..10)
            .map(|t| sample("a", t, vec![0.1 * t as f64, 0.5], vec![0.4]))
            .collect();
        let windows: Vec<&ObservationWindow> = samples.iter().map(|s| &s.window).collect();
        let enc = QueryEncoder::fit(&windows).unwrap();
        let reg = ConditionalRegressor {
            model: RidgeModel::persistence(1),
            n_window_features: 4,
        };
        let small_pred = HorizonVector::new(vec![0.33]).unwrap();
        let out =
            cloud_branch(&samples[0].window, &cb, &enc, &reg, 4, 1.0, 5, &small_pred).unwrap();
        assert!(out.fallback);
        assert_eq!(out.prediction, small_pred);
        assert_eq!(out.support_size, 0);
    }

    #[test]
    fn conditional_training_skips_empty_support_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples: Vec<Sample> = (0..60)
            .map(|t| {
                let x: f64 = rng.gen();
                sample("a", t, vec![x, 1.0 - x], vec![x])
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let windows: Vec<&ObservationWindow> = samples.iter().map(|s| &s.window).collect();
        let enc = QueryEncoder::fit(&windows).unwrap();
        let cb = build_case_base(&refs, |w| enc.form_query(w), None);
        let r1 = train_conditional(&refs, &cb, &enc, 4, 1.0, 1, 1e-3, None).unwrap();
        let r2 = train_conditional(&refs, &cb, &enc, 4, 1.0, 1, 1e-3, None).unwrap();
        assert_eq!(r1.model, r2.model);
        assert!(!r1.model.fallback);
    }
}
