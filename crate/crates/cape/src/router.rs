//! Queue-priced mode routing: pricing terms, routing indices, node-wise
//! threshold computation, the mean-field cloud-load fixed point, and final
//! action selection.
//!
//! Escalation is priced by the virtual queues: `κ¹` charges the extra latency
//! of the edge-fusion mode, `κ²(ρ)` charges the cloud mode's congestion-
//! dependent latency, communication volume, and cloud-usage budget. The
//! relative indices `J⁰ = 0`, `J¹ = κ¹/V − G₁`, `J² = (κ¹+κ²)/V − G₁ − G₂`
//! are minimized per node; because the gain curves are monotone in the
//! calibrated score, the argmin is a threshold partition of the score axis,
//! and the cloud-activation thresholds close the loop through the mean-field
//! load equation `ρ = (1/N) Σ_i (1 − F_i(θ_c,i(ρ)))`.

use serde::{Deserialize, Serialize};

use crate::calibration::GainCurves;
use crate::core::Mode;
use crate::error::{CapeError, Result};
use crate::queues::QueueState;

/// Deterministic congestion curve φ(ρ): cloud waiting time versus load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CongestionCurve {
    /// `d0 + d1·ρ`
    Affine { d0: f64, d1: f64 },
    /// `d0 + d1·ρ/(1.05 − ρ)`; steepens near saturation, still finite on [0,1]
    Sharp { d0: f64, d1: f64 },
}

impl CongestionCurve {
    pub fn eval(&self, rho: f64) -> f64 {
        let rho = rho.clamp(0.0, 1.0);
        match self {
            CongestionCurve::Affine { d0, d1 } => d0 + d1 * rho,
            CongestionCurve::Sharp { d0, d1 } => d0 + d1 * rho / (1.05 - rho),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d0, d1) = match self {
            CongestionCurve::Affine { d0, d1 } | CongestionCurve::Sharp { d0, d1 } => (*d0, *d1),
        };
        if d0 < 0.0 || d1 < 0.0 || !d0.is_finite() || !d1.is_finite() {
            return Err(CapeError::Config(format!(
                "congestion curve coefficients must be nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-node latency components (ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeLatency {
    /// Always-on expert-side latency (includes screening).
    pub tau_e: f64,
    /// Additional small-branch latency.
    pub tau_s: f64,
    /// Local post-branch processing (fusion, conditional prediction).
    pub tau_f: f64,
    /// Query construction and upload.
    pub tau_up: f64,
    /// Context download.
    pub tau_down: f64,
}

impl NodeLatency {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.tau_e, self.tau_s, self.tau_f, self.tau_up, self.tau_down];
        if vals.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(CapeError::Config(format!(
                "latency components must be nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mode-dependent latency:
/// `τ⁰ = τ_e`, `τ¹ = τ_e + τ_s + τ_f`,
/// `τ² = τ_e + τ_f + max(τ_s, τ_up + φ(ρ) + τ_cld + τ_down)`
/// (the cloud pipeline runs in parallel with the on-demand small branch).
pub fn mode_latency(
    lat: &NodeLatency,
    tau_cld: f64,
    curve: &CongestionCurve,
    mode: Mode,
    rho: f64,
) -> f64 {
    match mode {
        Mode::Expert => lat.tau_e,
        Mode::EdgeFusion => lat.tau_e + lat.tau_s + lat.tau_f,
        Mode::CloudAssisted => {
            let cloud_path = lat.tau_up + curve.eval(rho) + tau_cld + lat.tau_down;
            lat.tau_e + lat.tau_f + lat.tau_s.max(cloud_path)
        }
    }
}

/// Queue-weighted escalation prices for one node at the current queue state.
#[derive(Debug, Clone, Copy)]
pub struct NodePricing {
    /// `Q_τ (τ¹ − τ⁰)`
    pub kappa1: f64,
    q_tau: f64,
    tau1: f64,
    /// `Q_c κ_i + Q_ρ`
    fixed2: f64,
    lat: NodeLatency,
    tau_cld: f64,
    curve: CongestionCurve,
}

impl NodePricing {
    /// `κ²(ρ) = Q_τ (τ²(ρ) − τ¹) + Q_c κ_i + Q_ρ`
    pub fn kappa2_at(&self, rho: f64) -> f64 {
        let tau2 = mode_latency(&self.lat, self.tau_cld, &self.curve, Mode::CloudAssisted, rho);
        self.q_tau * (tau2 - self.tau1) + self.fixed2
    }
}

/// Builds the pricing terms for one node.
pub fn pricing(
    queues: &QueueState,
    lat: &NodeLatency,
    tau_cld: f64,
    curve: &CongestionCurve,
    kappa_comm: f64,
) -> NodePricing {
    let tau0 = mode_latency(lat, tau_cld, curve, Mode::Expert, 0.0);
    let tau1 = mode_latency(lat, tau_cld, curve, Mode::EdgeFusion, 0.0);
    NodePricing {
        kappa1: queues.q_tau * (tau1 - tau0),
        q_tau: queues.q_tau,
        tau1,
        fixed2: queues.q_c * kappa_comm + queues.q_rho,
        lat: *lat,
        tau_cld,
        curve: *curve,
    }
}

/// Relative routing indices `(J⁰, J¹, J²)` at a calibrated score and load
/// estimate.
pub fn routing_indices(
    pricing: &NodePricing,
    gains: &GainCurves,
    score: f64,
    v: f64,
    rho: f64,
) -> (f64, f64, f64) {
    let g1 = gains.g1.eval(score);
    let g2 = gains.g2.eval(score);
    let j1 = pricing.kappa1 / v - g1;
    let j2 = (pricing.kappa1 + pricing.kappa2_at(rho)) / v - g1 - g2;
    (0.0, j1, j2)
}

/// Argmin of the three indices with cheapest-wins tie-breaking (0 < 1 < 2).
pub fn argmin_mode(j0: f64, j1: f64, j2: f64) -> Mode {
    if j2 < j0 && j2 < j1 {
        Mode::CloudAssisted
    } else if j1 < j0 {
        Mode::EdgeFusion
    } else {
        Mode::Expert
    }
}

/// Score thresholds of the pairwise index comparisons; infinite when the gain
/// never reaches the required level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSet {
    /// `inf { s : G₁(s) ≥ κ¹/V }`
    pub theta01: f64,
    /// `inf { s : G₁(s) + G₂(s) ≥ (κ¹ + κ²(ρ))/V }`
    pub theta02: f64,
    /// `inf { s : G₂(s) ≥ κ²(ρ)/V }`
    pub theta12: f64,
    /// Cloud-activation threshold `max(θ₀₂, θ₁₂)`.
    pub theta_c: f64,
}

/// Computes the threshold set by scanning the gain-curve breakpoints.
pub fn thresholds(pricing: &NodePricing, gains: &GainCurves, v: f64, rho: f64) -> ThresholdSet {
    let kappa2 = pricing.kappa2_at(rho);
    let theta01 = gains
        .g1
        .first_reach(pricing.kappa1 / v)
        .unwrap_or(f64::INFINITY);
    let theta12 = gains.g2.first_reach(kappa2 / v).unwrap_or(f64::INFINITY);

    // scan the merged breakpoints of g1 + g2
    let level02 = (pricing.kappa1 + kappa2) / v;
    let mut theta02 = f64::INFINITY;
    if gains.g1.eval(0.0) + gains.g2.eval(0.0) >= level02 {
        theta02 = 0.0;
    } else {
        let mut merged: Vec<f64> = gains
            .g1
            .xs
            .iter()
            .chain(gains.g2.xs.iter())
            .copied()
            .collect();
        merged.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
        merged.dedup();
        for x in merged {
            if gains.g1.eval(x) + gains.g2.eval(x) >= level02 {
                theta02 = x;
                break;
            }
        }
    }
    ThresholdSet {
        theta01,
        theta02,
        theta12,
        theta_c: theta02.max(theta12),
    }
}

/// Fixed-point iteration parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FixedPointConfig {
    /// Iteration budget (no convergence requirement).
    pub n_fp: usize,
    /// Damping λ in `ρ ← (1−λ)ρ + λ T(ρ)`; 1 is the plain iteration.
    pub damping: f64,
    /// Starting load, normally the previous slot's equilibrium.
    pub rho_init: f64,
}

/// Result of the bounded fixed-point iteration.
#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub rho: f64,
    /// `|T(ρ) − ρ|` at the returned point.
    pub residual: f64,
    /// All iterates `ρ₀ … ρ_{N_fp}`.
    pub iterates: Vec<f64>,
}

/// Iterates `ρ ← (1−λ)ρ + λ (1/N) Σ_i (1 − F_i(θ_c,i(ρ)))` for a fixed number
/// of steps. `theta_c(i, ρ)` is node `i`'s cloud-activation threshold;
/// `cdf(i, s)` its score CDF. Every iterate stays in `[0, 1]`.
pub fn fixed_point_rho<F, G>(
    n_nodes: usize,
    theta_c: F,
    cdf: G,
    config: &FixedPointConfig,
) -> FixedPointResult
where
    F: Fn(usize, f64) -> f64,
    G: Fn(usize, f64) -> f64,
{
    let map = |rho: f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..n_nodes {
            acc += 1.0 - cdf(i, theta_c(i, rho));
        }
        (acc / n_nodes.max(1) as f64).clamp(0.0, 1.0)
    };
    let lambda = config.damping.clamp(0.0, 1.0);
    let mut rho = config.rho_init.clamp(0.0, 1.0);
    let mut iterates = Vec::with_capacity(config.n_fp + 1);
    iterates.push(rho);
    for _ in 0..config.n_fp {
        rho = ((1.0 - lambda) * rho + lambda * map(rho)).clamp(0.0, 1.0);
        debug_assert!((0.0..=1.0).contains(&rho));
        iterates.push(rho);
    }
    FixedPointResult {
        rho,
        residual: (map(rho) - rho).abs(),
        iterates,
    }
}

/// Per-node routing outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDecision {
    pub mode: Mode,
    pub j0: f64,
    pub j1: f64,
    pub j2: f64,
    pub calibrated_score: f64,
    pub theta_c: f64,
}

/// Slot-level routing outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub nodes: Vec<NodeDecision>,
    pub rho_star: f64,
    pub fp_residual: f64,
}

/// Final action selection at the equilibrium load estimate: per node the
/// argmin of the routing indices, with the threshold set recorded for the
/// trace.
pub fn select_actions(
    scores: &[f64],
    gains: &[&GainCurves],
    pricings: &[NodePricing],
    rho_star: f64,
    fp_residual: f64,
    v: f64,
) -> RoutingDecision {
    let nodes = scores
        .iter()
        .zip(gains)
        .zip(pricings)
        .map(|((score, g), p)| {
            let (j0, j1, j2) = routing_indices(p, g, *score, v, rho_star);
            let th = thresholds(p, g, v, rho_star);
            NodeDecision {
                mode: argmin_mode(j0, j1, j2),
                j0,
                j1,
                j2,
                calibrated_score: *score,
                theta_c: th.theta_c,
            }
        })
        .collect();
    RoutingDecision {
        nodes,
        rho_star,
        fp_residual,
    }
}
