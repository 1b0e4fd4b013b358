//! Offline full-branch replay, oracle labels, isotonic gain curves, and the
//! executed-mode surrogate-loss calibrator.
//!
//! The replay evaluates all three modes for every sample with equal fusion
//! weights over the active sets, so counterfactual losses exist offline
//! without the online fusion state. Gain curves are monotone step functions
//! over the calibrated score fitted by pool-adjacent-violators on the
//! replayed loss gaps; gains are not clamped to be nonnegative — the
//! surrogates clamp at zero downstream instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::core::{eval_loss, fuse_candidates, HorizonVector, LossSpec, SimplexWeights};
use crate::data::{CaseBase, Sample};
use crate::error::{CapeError, Result};
use crate::parallel::pmap;
use crate::predictors::{predict_expert, predict_small_members, BranchSet};
use crate::screening::{compute_features, OodReference, ScreeningFeatures, ScreeningWeights};

/// One replayed sample with all three counterfactual mode losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub node_id: String,
    pub slot: i64,
    pub features: ScreeningFeatures,
    /// Calibrated score `α·r`; filled by [`assign_scores`] once the screening
    /// weights are fitted on this replay.
    pub calibrated_score: f64,
    pub loss0: f64,
    pub loss1: f64,
    pub loss2: f64,
    /// True iff mode 2 attains the minimum replayed loss (ties inclusive).
    pub oracle_label: bool,
}

/// Evaluates modes 0/1/2 for every sample with equal-weight fusion.
///
/// Retrieval inside the replay honors the temporal filter: a sample at slot
/// `t` only sees cases ending before `t`.
pub fn build_replay_set(
    samples: &[&Sample],
    branches: &BranchSet,
    case_base: &CaseBase,
    ood_ref: &OodReference,
    weather_stds: &[f64],
    loss_spec: &LossSpec,
) -> Result<Vec<ReplayRecord>> {
    let records: Vec<Result<ReplayRecord>> = pmap(samples, |sample| {
        let window = &sample.window;
        let expert = predict_expert(branches.expert(&window.node_id)?, window)?;
        let members = predict_small_members(&branches.small, window)?;
        let small = ensemble_mean(&members)?;
        let cloud = branches
            .run_cloud(window, case_base, window.slot, &small)?
            .prediction;

        let loss0 = eval_loss(&sample.target, &expert, loss_spec)?;
        let fused1 = fuse_candidates(&[&expert, &small], &SimplexWeights::uniform(2))?;
        let loss1 = eval_loss(&sample.target, &fused1, loss_spec)?;
        let fused2 = fuse_candidates(&[&expert, &small, &cloud], &SimplexWeights::uniform(3))?;
        let loss2 = eval_loss(&sample.target, &fused2, loss_spec)?;

        let query = branches.encoder.form_query(window);
        let features =
            compute_features(window, &expert, &members, &query, ood_ref, weather_stds)?;
        Ok(ReplayRecord {
            node_id: window.node_id.clone(),
            slot: window.slot,
            features,
            calibrated_score: 0.0,
            loss0,
            loss1,
            loss2,
            oracle_label: loss2 <= loss0.min(loss1),
        })
    });
    records.into_iter().collect()
}

fn ensemble_mean(members: &[HorizonVector]) -> Result<HorizonVector> {
    let h = members[0].len();
    let mut mean = vec![0.0; h];
    for m in members {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= members.len() as f64);
    HorizonVector::new(mean)
}

/// Fills `calibrated_score` on every record from its stored features.
pub fn assign_scores(records: &mut [ReplayRecord], weights: &ScreeningWeights) {
    for r in records {
        r.calibrated_score = crate::screening::calibrated_score(&r.features, weights);
    }
}

/// Monotone nondecreasing, right-continuous step function given by its
/// breakpoints and fitted values; constant left of the first breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneStep {
    pub xs: Vec<f64>,
    pub vs: Vec<f64>,
}

impl MonotoneStep {
    /// Constant-zero curve (used when a gain has no signal).
    pub fn zero() -> Self {
        Self {
            xs: vec![0.0],
            vs: vec![0.0],
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        // value of the greatest breakpoint <= s; vs[0] left of the domain
        let idx = self.xs.partition_point(|x| *x <= s);
        if idx == 0 {
            self.vs[0]
        } else {
            self.vs[idx - 1]
        }
    }

    /// Smallest breakpoint (or 0) at which the curve reaches `level`;
    /// `None` when it never does.
    pub fn first_reach(&self, level: f64) -> Option<f64> {
        if self.vs[0] >= level {
            return Some(0.0);
        }
        self.xs
            .iter()
            .zip(&self.vs)
            .find(|(_, v)| **v >= level)
            .map(|(x, _)| *x)
    }

    pub fn max_value(&self) -> f64 {
        *self.vs.last().unwrap()
    }
}

/// Weighted least-squares monotone (nondecreasing) fit by
/// pool-adjacent-violators. `xs` must be sorted ascending; ties in `x` are
/// pre-pooled by weighted mean.
pub fn fit_isotonic(xs: &[f64], ys: &[f64], weights: &[f64]) -> Result<MonotoneStep> {
    if xs.is_empty() {
        return Err(CapeError::Data("isotonic fit on empty input".into()));
    }
    if xs.len() != ys.len() || xs.len() != weights.len() {
        return Err(CapeError::Dimension {
            context: "fit_isotonic",
            expected: xs.len(),
            got: ys.len().min(weights.len()),
        });
    }
    if xs.windows(2).any(|w| w[0] > w[1]) {
        return Err(CapeError::Data("isotonic xs must be sorted ascending".into()));
    }
    if weights.iter().any(|w| *w <= 0.0 || !w.is_finite()) {
        return Err(CapeError::Data("isotonic weights must be positive".into()));
    }

    // pre-pool exact ties in x by weighted mean
    let mut px: Vec<f64> = Vec::new();
    let mut py: Vec<f64> = Vec::new();
    let mut pw: Vec<f64> = Vec::new();
    let mut i = 0;
    while i < xs.len() {
        let mut j = i;
        let mut wsum = 0.0;
        let mut ysum = 0.0;
        while j < xs.len() && xs[j] == xs[i] {
            wsum += weights[j];
            ysum += weights[j] * ys[j];
            j += 1;
        }
        px.push(xs[i]);
        py.push(ysum / wsum);
        pw.push(wsum);
        i = j;
    }

    // PAVA over the pooled points: maintain a stack of blocks
    let mut val: Vec<f64> = Vec::with_capacity(py.len()); // block means
    let mut wgt: Vec<f64> = Vec::with_capacity(py.len()); // block weights
    let mut cnt: Vec<usize> = Vec::with_capacity(py.len()); // points per block
    for (y, w) in py.iter().zip(&pw) {
        val.push(*y);
        wgt.push(*w);
        cnt.push(1);
        while val.len() > 1 && val[val.len() - 2] > val[val.len() - 1] {
            let (v2, w2, c2) = (val.pop().unwrap(), wgt.pop().unwrap(), cnt.pop().unwrap());
            let last = val.len() - 1;
            let merged_w = wgt[last] + w2;
            val[last] = (val[last] * wgt[last] + v2 * w2) / merged_w;
            wgt[last] = merged_w;
            cnt[last] += c2;
        }
    }

    let mut vs = Vec::with_capacity(px.len());
    for (v, c) in val.iter().zip(&cnt) {
        for _ in 0..*c {
            vs.push(*v);
        }
    }
    Ok(MonotoneStep { xs: px, vs })
}

/// Gain curves for one node (or pooled): expected loss reduction of mode 1
/// over 0 and of mode 2 over 1, as monotone functions of the calibrated
/// score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCurves {
    pub g1: MonotoneStep,
    pub g2: MonotoneStep,
}

/// Per-node gain curves with a pooled fallback for data-poor nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainModel {
    pub pooled: GainCurves,
    pub per_node: BTreeMap<String, GainCurves>,
}

impl GainModel {
    pub fn curves_for(&self, node_id: &str) -> &GainCurves {
        self.per_node.get(node_id).unwrap_or(&self.pooled)
    }
}

fn fit_pair(records: &[&ReplayRecord]) -> Result<GainCurves> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|a, b| {
        records[*a]
            .calibrated_score
            .partial_cmp(&records[*b].calibrated_score)
            .expect("finite scores")
    });
    let xs: Vec<f64> = order.iter().map(|i| records[*i].calibrated_score).collect();
    let gaps1: Vec<f64> = order.iter().map(|i| records[*i].loss0 - records[*i].loss1).collect();
    let gaps2: Vec<f64> = order.iter().map(|i| records[*i].loss1 - records[*i].loss2).collect();
    let w = vec![1.0; xs.len()];
    Ok(GainCurves {
        g1: fit_isotonic(&xs, &gaps1, &w)?,
        g2: fit_isotonic(&xs, &gaps2, &w)?,
    })
}

/// Fits gain curves from scored replay records: pooled always, per-node when
/// requested and the node has at least `min_node_records` records.
pub fn fit_gain_curves(
    records: &[ReplayRecord],
    per_node: bool,
    min_node_records: usize,
) -> Result<GainModel> {
    if records.is_empty() {
        return Err(CapeError::Data("gain fit needs replay records".into()));
    }
    let all: Vec<&ReplayRecord> = records.iter().collect();
    let pooled = fit_pair(&all)?;
    let mut map = BTreeMap::new();
    if per_node {
        let mut by_node: BTreeMap<&str, Vec<&ReplayRecord>> = BTreeMap::new();
        for r in records {
            by_node.entry(r.node_id.as_str()).or_default().push(r);
        }
        for (node, rs) in by_node {
            if rs.len() >= min_node_records {
                map.insert(node.to_string(), fit_pair(&rs)?);
            }
        }
    }
    Ok(GainModel {
        pooled,
        per_node: map,
    })
}

/// Binned running means of realized loss per (node, mode) over the calibrated
/// score axis, with a per-mode global fallback for empty bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutedModeCalibrator {
    pub n_bins: usize,
    /// Upper end of the calibrated-score axis (`α`, since `r < 1`).
    pub s_max: f64,
    /// `stats[node][mode][bin] = (count, mean)`.
    pub stats: BTreeMap<String, Vec<Vec<(u64, f64)>>>,
    /// `global[mode] = (count, mean)` across nodes and bins.
    pub global: Vec<(u64, f64)>,
}

impl ExecutedModeCalibrator {
    pub fn new(n_bins: usize, s_max: f64) -> Result<Self> {
        if n_bins == 0 {
            return Err(CapeError::Config("calibrator needs at least one bin".into()));
        }
        if s_max <= 0.0 {
            return Err(CapeError::Config(format!(
                "calibrated-score axis must be positive, got {s_max}"
            )));
        }
        Ok(Self {
            n_bins,
            s_max,
            stats: BTreeMap::new(),
            global: vec![(0, 0.0); 3],
        })
    }

    pub fn bin(&self, score: f64) -> usize {
        ((score / self.s_max * self.n_bins as f64).floor() as usize).min(self.n_bins - 1)
    }

    /// Running-mean update for the executed `(node, mode)` at `score`.
    pub fn update(&mut self, node_id: &str, mode: usize, score: f64, realized_loss: f64) {
        debug_assert!(mode < 3);
        let bins = self
            .stats
            .entry(node_id.to_string())
            .or_insert_with(|| vec![vec![(0, 0.0); self.n_bins]; 3]);
        let b = ((score / self.s_max * self.n_bins as f64).floor() as usize).min(self.n_bins - 1);
        let cell = &mut bins[mode][b];
        cell.0 += 1;
        cell.1 += (realized_loss - cell.1) / cell.0 as f64;
        let g = &mut self.global[mode];
        g.0 += 1;
        g.1 += (realized_loss - g.1) / g.0 as f64;
    }

    /// Seeds the calibrator with counterfactual losses from the replay; every
    /// record contributes to all three modes.
    pub fn init_from_replay(&mut self, records: &[ReplayRecord]) {
        for r in records {
            self.update(&r.node_id, 0, r.calibrated_score, r.loss0);
            self.update(&r.node_id, 1, r.calibrated_score, r.loss1);
            self.update(&r.node_id, 2, r.calibrated_score, r.loss2);
        }
    }

    /// Mode-0 surrogate at `score`: the bin mean, falling back to the global
    /// mode mean, then to zero.
    pub fn mode0_surrogate(&self, node_id: &str, score: f64) -> f64 {
        let b = self.bin(score);
        if let Some(bins) = self.stats.get(node_id) {
            let (count, mean) = bins[0][b];
            if count > 0 {
                return mean;
            }
        }
        let (count, mean) = self.global[0];
        if count > 0 {
            mean
        } else {
            0.0
        }
    }
}

/// Conditional surrogate losses `(ℓ̂0, ℓ̂1, ℓ̂2)` at a calibrated score:
/// `ℓ̂1 = [ℓ̂0 − g1]⁺`, `ℓ̂2 = [ℓ̂1 − g2]⁺`.
pub fn surrogate_losses(
    calibrator: &ExecutedModeCalibrator,
    gains: &GainCurves,
    node_id: &str,
    score: f64,
) -> (f64, f64, f64) {
    let l0 = calibrator.mode0_surrogate(node_id, score);
    let l1 = (l0 - gains.g1.eval(score)).max(0.0);
    let l2 = (l1 - gains.g2.eval(score)).max(0.0);
    (l0, l1, l2)
}
