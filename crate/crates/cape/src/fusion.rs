//! Entropic-FTRL fusion of the active branches under delayed labels.
//!
//! Per node and mode, the fusion weight is the closed-form minimizer of
//! `η⟨Γ, w⟩ + KL(w ‖ π̄)` over the simplex, where `Γ` accumulates the
//! subgradients of revealed rounds only. Unresolved slots wait in a reveal
//! buffer until their target matures; reveals update `Γ` (modes 1 and 2) and
//! the executed-mode calibrator (all modes). [`regret_report`] measures
//! cumulative loss against the best fixed weight vector in hindsight.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::ExecutedModeCalibrator;
use crate::core::{
    eval_loss, fuse_candidates, loss_subgradient_weights, HorizonVector, LossKind, LossSpec, Mode,
    SimplexWeights,
};
use crate::error::{CapeError, Result};

/// Learning rate and strictly positive priors for the two fusion modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub eta: f64,
    /// Prior over `{e, s}` for mode 1.
    pub prior1: Vec<f64>,
    /// Prior over `{e, s, c}` for mode 2.
    pub prior2: Vec<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            prior1: vec![0.5, 0.5],
            prior2: vec![1.0 / 3.0; 3],
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || !self.eta.is_finite() {
            return Err(CapeError::Config(format!(
                "fusion eta must be positive, got {}",
                self.eta
            )));
        }
        for (name, prior, len) in [("prior1", &self.prior1, 2), ("prior2", &self.prior2, 3)] {
            if prior.len() != len {
                return Err(CapeError::Config(format!(
                    "{name} must have {len} entries, got {}",
                    prior.len()
                )));
            }
            if prior.iter().any(|p| *p <= 0.0 || !p.is_finite()) {
                return Err(CapeError::Config(format!(
                    "{name} entries must be strictly positive"
                )));
            }
            let sum: f64 = prior.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CapeError::Config(format!(
                    "{name} must sum to 1, got {sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn prior(&self, mode: Mode) -> &[f64] {
        match mode {
            Mode::EdgeFusion => &self.prior1,
            _ => &self.prior2,
        }
    }
}

/// Cumulative revealed subgradients per (node, mode), independent across
/// nodes.
#[derive(Debug, Clone)]
pub struct CumulativeGradient {
    gamma1: Vec<[f64; 2]>,
    gamma2: Vec<[f64; 3]>,
}

impl CumulativeGradient {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            gamma1: vec![[0.0; 2]; n_nodes],
            gamma2: vec![[0.0; 3]; n_nodes],
        }
    }

    pub fn get(&self, node: usize, mode: Mode) -> &[f64] {
        match mode {
            Mode::EdgeFusion => &self.gamma1[node],
            _ => &self.gamma2[node],
        }
    }

    pub fn add(&mut self, node: usize, mode: Mode, grad: &[f64]) {
        match mode {
            Mode::EdgeFusion => {
                for (g, d) in self.gamma1[node].iter_mut().zip(grad) {
                    *g += d;
                }
            }
            Mode::CloudAssisted => {
                for (g, d) in self.gamma2[node].iter_mut().zip(grad) {
                    *g += d;
                }
            }
            Mode::Expert => {}
        }
    }
}

/// Closed-form entropic-FTRL weights
/// `w_m ∝ π̄_m exp(−η Γ_m)`, computed with max-subtraction.
pub fn fusion_weights(
    config: &FusionConfig,
    gamma: &CumulativeGradient,
    node: usize,
    mode: Mode,
) -> Result<SimplexWeights> {
    if mode == Mode::Expert {
        return Ok(SimplexWeights::one_hot(0, 1));
    }
    let prior = config.prior(mode);
    let g = gamma.get(node, mode);
    let logits: Vec<f64> = prior
        .iter()
        .zip(g)
        .map(|(p, gm)| p.ln() - config.eta * gm)
        .collect();
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let raw: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = raw.iter().sum();
    SimplexWeights::new(raw.into_iter().map(|w| w / z).collect())
}

/// Mode-aware emission: mode 0 bypasses fusion and returns the expert
/// candidate verbatim.
pub fn fuse_and_emit(
    mode: Mode,
    candidates: &[&HorizonVector],
    weights: &SimplexWeights,
) -> Result<HorizonVector> {
    match mode {
        Mode::Expert => Ok(candidates[0].clone()),
        _ => fuse_candidates(candidates, weights),
    }
}

/// One unresolved slot awaiting its delayed label.
#[derive(Debug, Clone)]
pub struct PendingRecord {
    pub node_idx: usize,
    pub node_id: String,
    pub slot: i64,
    pub mode: Mode,
    /// Candidates of the active set, in `(e, s, c)` order.
    pub candidates: Vec<HorizonVector>,
    pub weights_used: SimplexWeights,
    pub calibrated_score: f64,
    pub reveal_slot: i64,
}

/// A matured record's realized outcome.
#[derive(Debug, Clone)]
pub struct RevealedLoss {
    pub node_idx: usize,
    pub node_id: String,
    pub slot: i64,
    pub mode: Mode,
    pub loss: f64,
    pub fused: HorizonVector,
    pub target: HorizonVector,
}

/// Delayed-label buffer; records leave exactly once, at their reveal slot.
#[derive(Debug, Clone, Default)]
pub struct RevealBuffer {
    pending: Vec<PendingRecord>,
    /// Matured records whose target was unavailable; they stay buffered.
    pub missing_target_warnings: u64,
}

impl RevealBuffer {
    pub fn push(&mut self, record: PendingRecord) {
        self.pending.push(record);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Processes every record matured by `current_slot` in (slot, node)
    /// order: realized loss with the weights actually used, `Γ` update for
    /// modes 1/2, executed-mode calibrator update for all modes. Records with
    /// a missing target are retained and counted, never dropped.
    pub fn reveal_and_update<L>(
        &mut self,
        gamma: &mut CumulativeGradient,
        calibrator: &mut ExecutedModeCalibrator,
        current_slot: i64,
        lookup: L,
        spec: &LossSpec,
    ) -> Result<Vec<RevealedLoss>>
    where
        L: Fn(usize, i64) -> Option<HorizonVector>,
    {
        let mut revealed = Vec::new();
        let mut kept = Vec::with_capacity(self.pending.len());
        for record in self.pending.drain(..) {
            if record.reveal_slot > current_slot {
                kept.push(record);
                continue;
            }
            let Some(target) = lookup(record.node_idx, record.slot) else {
                self.missing_target_warnings += 1;
                kept.push(record);
                continue;
            };
            let cands: Vec<&HorizonVector> = record.candidates.iter().collect();
            let fused = fuse_and_emit(record.mode, &cands, &record.weights_used)?;
            let loss = eval_loss(&target, &fused, spec)?;
            if record.mode != Mode::Expert {
                let grad = loss_subgradient_weights(&target, &cands, &record.weights_used, spec)?;
                gamma.add(record.node_idx, record.mode, &grad);
            }
            calibrator.update(
                &record.node_id,
                record.mode.index(),
                record.calibrated_score,
                loss,
            );
            revealed.push(RevealedLoss {
                node_idx: record.node_idx,
                node_id: record.node_id,
                slot: record.slot,
                mode: record.mode,
                loss,
                fused,
                target,
            });
        }
        self.pending = kept;
        Ok(revealed)
    }
}

/// One fusion round for regret accounting.
#[derive(Debug, Clone)]
pub struct FusionRound {
    pub candidates: Vec<HorizonVector>,
    pub target: HorizonVector,
    pub weights_used: SimplexWeights,
}

/// Regret of the played weights against the best fixed comparator.
#[derive(Debug, Clone)]
pub struct RegretReport {
    pub rounds: usize,
    pub algorithm_loss: f64,
    pub comparator_loss: f64,
    pub regret: f64,
    pub comparator: Vec<f64>,
    /// Simplex-KKT (Frank-Wolfe) gap at the comparator: an upper bound on its
    /// suboptimality.
    pub kkt_residual: f64,
}

fn objective(rounds: &[FusionRound], spec: &LossSpec, u: &[f64]) -> Result<f64> {
    let w = SimplexWeights::new(u.to_vec())?;
    let mut acc = 0.0;
    for r in rounds {
        let cands: Vec<&HorizonVector> = r.candidates.iter().collect();
        acc += eval_loss(&r.target, &fuse_candidates(&cands, &w)?, spec)?;
    }
    Ok(acc)
}

fn subgradient_sum(rounds: &[FusionRound], spec: &LossSpec, u: &[f64]) -> Result<Vec<f64>> {
    let w = SimplexWeights::new(u.to_vec())?;
    let d = u.len();
    let mut acc = vec![0.0; d];
    for r in rounds {
        let cands: Vec<&HorizonVector> = r.candidates.iter().collect();
        let g = loss_subgradient_weights(&r.target, &cands, &w, spec)?;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    Ok(acc)
}

/// Exact minimizer for the squared-loss case: the objective is a quadratic
/// form, so enumerate simplex faces and solve the equality-constrained KKT
/// system on each.
fn minimize_quadratic(rounds: &[FusionRound], spec: &LossSpec, d: usize) -> Result<Vec<f64>> {
    let h = rounds[0].target.len();
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = vec![0.0; d];
    let uniform = 1.0 / h as f64;
    for r in rounds {
        for hh in 0..h {
            let weight = spec
                .horizon_weights
                .as_ref()
                .map(|w| w[hh])
                .unwrap_or(uniform);
            let c: Vec<f64> = r.candidates.iter().map(|cand| cand.values()[hh]).collect();
            let y = r.target.values()[hh];
            for i in 0..d {
                for j in 0..d {
                    a[(i, j)] += weight * c[i] * c[j];
                }
                b[i] += weight * y * c[i];
            }
        }
    }
    let mut best = (f64::INFINITY, vec![1.0 / d as f64; d]);
    for mask in 1u32..(1 << d) {
        let free: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
        let m = free.len();
        // KKT system: [2A_ff  1; 1ᵀ 0][u; λ] = [2 b_f; 1]
        let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut rhs = DMatrix::<f64>::zeros(m + 1, 1);
        for (ii, &i) in free.iter().enumerate() {
            for (jj, &j) in free.iter().enumerate() {
                kkt[(ii, jj)] = 2.0 * a[(i, j)];
            }
            kkt[(ii, m)] = 1.0;
            kkt[(m, ii)] = 1.0;
            rhs[(ii, 0)] = 2.0 * b[i];
        }
        rhs[(m, 0)] = 1.0;
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let mut u = vec![0.0; d];
        let mut feasible = true;
        for (ii, &i) in free.iter().enumerate() {
            let v = sol[(ii, 0)];
            if v < -1e-10 {
                feasible = false;
                break;
            }
            u[i] = v.max(0.0);
        }
        if !feasible {
            continue;
        }
        let sum: f64 = u.iter().sum();
        u.iter_mut().for_each(|x| *x /= sum);
        let f = objective(rounds, spec, &u)?;
        if f < best.0 {
            best = (f, u);
        }
    }
    Ok(best.1)
}

/// Generic comparator search: projected subgradient descent followed by
/// cyclic golden-section line searches along simplex edge directions.
fn minimize_generic(rounds: &[FusionRound], spec: &LossSpec, d: usize) -> Result<Vec<f64>> {
    let project = |v: &[f64]| -> Vec<f64> {
        // Euclidean projection onto the simplex
        let mut sorted: Vec<f64> = v.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        let mut cum = 0.0;
        let mut theta = 0.0;
        for (i, s) in sorted.iter().enumerate() {
            cum += s;
            let t = (cum - 1.0) / (i + 1) as f64;
            if i + 1 == sorted.len() || sorted[i + 1] <= t {
                theta = t;
                if i + 1 == sorted.len() || sorted[i + 1] <= t {
                    break;
                }
            }
        }
        v.iter().map(|x| (x - theta).max(0.0)).collect()
    };

    let mut starts: Vec<Vec<f64>> = vec![vec![1.0 / d as f64; d]];
    for i in 0..d {
        let mut v = vec![1e-9; d];
        v[i] = 1.0 - 1e-9 * (d - 1) as f64;
        starts.push(v);
    }

    let mut best = (f64::INFINITY, vec![1.0 / d as f64; d]);
    for start in starts {
        let mut u = project(&start);
        let mut f = objective(rounds, spec, &u)?;
        // projected subgradient with diminishing steps
        for t in 1..=400usize {
            let g = subgradient_sum(rounds, spec, &u)?;
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let step = 0.5 / (norm * (t as f64).sqrt());
            let cand: Vec<f64> = u.iter().zip(&g).map(|(x, gi)| x - step * gi).collect();
            let cand = project(&cand);
            let fc = objective(rounds, spec, &cand)?;
            if fc < f {
                f = fc;
                u = cand;
            }
        }
        // cyclic golden-section along edge directions e_i − e_j
        let golden = 0.5 * (3.0 - 5.0_f64.sqrt());
        for _sweep in 0..60 {
            let mut improved = false;
            for i in 0..d {
                for j in 0..d {
                    if i == j {
                        continue;
                    }
                    // u + t (e_i − e_j) stays feasible for t ∈ [−u_i, u_j]
                    let lo = -u[i];
                    let hi = u[j];
                    if hi - lo < 1e-15 {
                        continue;
                    }
                    let eval_t = |t: f64| -> Result<f64> {
                        let mut v = u.clone();
                        v[i] += t;
                        v[j] -= t;
                        v[i] = v[i].max(0.0);
                        v[j] = v[j].max(0.0);
                        let s: f64 = v.iter().sum();
                        v.iter_mut().for_each(|x| *x /= s);
                        objective(rounds, spec, &v)
                    };
                    let (mut a, mut b) = (lo, hi);
                    let mut x1 = a + golden * (b - a);
                    let mut x2 = b - golden * (b - a);
                    let mut f1 = eval_t(x1)?;
                    let mut f2 = eval_t(x2)?;
                    for _ in 0..80 {
                        if f1 < f2 {
                            b = x2;
                            x2 = x1;
                            f2 = f1;
                            x1 = a + golden * (b - a);
                            f1 = eval_t(x1)?;
                        } else {
                            a = x1;
                            x1 = x2;
                            f1 = f2;
                            x2 = b - golden * (b - a);
                            f2 = eval_t(x2)?;
                        }
                    }
                    let t_star = if f1 < f2 { x1 } else { x2 };
                    let f_star = f1.min(f2);
                    if f_star < f - 1e-15 {
                        u[i] = (u[i] + t_star).max(0.0);
                        u[j] = (u[j] - t_star).max(0.0);
                        let s: f64 = u.iter().sum();
                        u.iter_mut().for_each(|x| *x /= s);
                        f = f_star;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        if f < best.0 {
            best = (f, u);
        }
    }
    Ok(best.1)
}

/// Computes cumulative played loss, the best fixed comparator in hindsight,
/// and the regret. The comparator is found by convex optimization over the
/// simplex (exact face enumeration for squared loss); the reported residual
/// certifies its suboptimality.
pub fn regret_report(rounds: &[FusionRound], spec: &LossSpec) -> Result<RegretReport> {
    if rounds.is_empty() {
        return Err(CapeError::Data("regret report needs at least one round".into()));
    }
    let d = rounds[0].candidates.len();
    if rounds
        .iter()
        .any(|r| r.candidates.len() != d || r.weights_used.len() != d)
    {
        return Err(CapeError::Dimension {
            context: "regret_report rounds",
            expected: d,
            got: 0,
        });
    }
    let mut algorithm_loss = 0.0;
    for r in rounds {
        let cands: Vec<&HorizonVector> = r.candidates.iter().collect();
        algorithm_loss += eval_loss(&r.target, &fuse_candidates(&cands, &r.weights_used)?, spec)?;
    }
    let comparator = match spec.kind {
        LossKind::Squared => minimize_quadratic(rounds, spec, d)?,
        _ => minimize_generic(rounds, spec, d)?,
    };
    let comparator_loss = objective(rounds, spec, &comparator)?;
    let g = subgradient_sum(rounds, spec, &comparator)?;
    let inner: f64 = g.iter().zip(&comparator).map(|(gi, ui)| gi * ui).sum();
    let gmin = g.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    Ok(RegretReport {
        rounds: rounds.len(),
        algorithm_loss,
        comparator_loss,
        regret: algorithm_loss - comparator_loss,
        comparator,
        kkt_residual: (inner - gmin).max(0.0),
    })
}
