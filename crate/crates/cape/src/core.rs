//! Shared domain types and the loss machinery used by every other module.
//!
//! Forecasts live on the capacity-normalized box `[0, 1]^H`. Every branch
//! output and target is a [`HorizonVector`]; fused outputs are convex
//! combinations of branch candidates under [`SimplexWeights`], so they stay in
//! the box. Losses are evaluated per horizon step and averaged (optionally
//! with horizon weights), and [`loss_subgradient_weights`] returns one valid
//! subgradient of the fusion objective `w ↦ loss(target, Σ_m w_m ŷ^m)` used by
//! the online fusion updater.

use serde::{Deserialize, Serialize};

use crate::error::{CapeError, Result};

/// Tolerance for simplex membership checks.
const SIMPLEX_TOL: f64 = 1e-12;

/// An `H`-step forecast or target, each entry clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonVector(Vec<f64>);

impl HorizonVector {
    /// Builds a horizon vector, clamping every entry into `[0, 1]`.
    /// Predictors are imperfect; the prediction domain is a hard box.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CapeError::Dimension {
                context: "HorizonVector",
                expected: 1,
                got: 0,
            });
        }
        Ok(Self(
            values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        ))
    }

    /// Constant vector `[v, …, v]` of length `h`.
    pub fn constant(v: f64, h: usize) -> Self {
        Self(vec![v.clamp(0.0, 1.0); h.max(1)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Inference mode selected per node per slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Expert-only: the site expert answers alone.
    Expert = 0,
    /// Edge fusion: expert + shared small model.
    EdgeFusion = 1,
    /// Cloud-assisted fusion: expert + small + retrieval-conditioned branch.
    CloudAssisted = 2,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Expert, Mode::EdgeFusion, Mode::CloudAssisted];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Mode::Expert),
            1 => Ok(Mode::EdgeFusion),
            2 => Ok(Mode::CloudAssisted),
            _ => Err(CapeError::Config(format!("invalid mode index {i}"))),
        }
    }

    /// Active branch set for this mode, in fixed `(e, s, c)` order.
    pub fn active_branches(self) -> &'static [Branch] {
        match self {
            Mode::Expert => &[Branch::Expert],
            Mode::EdgeFusion => &[Branch::Expert, Branch::Small],
            Mode::CloudAssisted => &[Branch::Expert, Branch::Small, Branch::Cloud],
        }
    }
}

/// Forecast branch identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    Expert,
    Small,
    Cloud,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::Expert => "e",
            Branch::Small => "s",
            Branch::Cloud => "c",
        }
    }
}

/// Weights on the probability simplex over a mode's active branch set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    /// Validates nonnegativity and unit sum (within 1e-12).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(CapeError::Config("empty weight vector".into()));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(CapeError::Config(format!(
                "weights must be finite and nonnegative, got {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(CapeError::Config(format!(
                "weights must sum to 1 within {SIMPLEX_TOL}, got sum {sum}"
            )));
        }
        Ok(Self(weights))
    }

    /// Uniform weights over `n` branches.
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n.max(1)])
    }

    /// One-hot weight on position `i` of an `n`-branch set.
    pub fn one_hot(i: usize, n: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Pointwise loss family applied per horizon step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mae,
    WeightedMae,
    Huber,
    Squared,
}

/// Loss specification: pointwise kind, optional horizon weights, Huber delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Optional nonnegative horizon weights; normalized to sum 1 at build.
    pub horizon_weights: Option<Vec<f64>>,
    pub huber_delta: f64,
}

impl Default for LossSpec {
    /// MAE with uniform horizon weights; matches full-scale nMAE reporting.
    fn default() -> Self {
        Self {
            kind: LossKind::Mae,
            horizon_weights: None,
            huber_delta: 0.1,
        }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind, horizon_weights: Option<Vec<f64>>, huber_delta: f64) -> Result<Self> {
        if huber_delta <= 0.0 || !huber_delta.is_finite() {
            return Err(CapeError::Config(format!(
                "huber_delta must be positive, got {huber_delta}"
            )));
        }
        let horizon_weights = match horizon_weights {
            None => None,
            Some(w) => {
                if w.iter().any(|x| *x < 0.0 || !x.is_finite()) {
                    return Err(CapeError::Config(
                        "horizon weights must be finite and nonnegative".into(),
                    ));
                }
                let sum: f64 = w.iter().sum();
                if sum <= 0.0 {
                    return Err(CapeError::Config("horizon weights sum to zero".into()));
                }
                Some(w.into_iter().map(|x| x / sum).collect())
            }
        };
        Ok(Self {
            kind,
            horizon_weights,
            huber_delta,
        })
    }

    /// Upper bound of the loss on `[0, 1]^H` (MAE and squared reach 1).
    pub fn sup_bound(&self) -> f64 {
        match self.kind {
            LossKind::Mae | LossKind::WeightedMae | LossKind::Squared => 1.0,
            LossKind::Huber => {
                let d = self.huber_delta;
                if d >= 1.0 {
                    0.5
                } else {
                    d * (1.0 - 0.5 * d)
                }
            }
        }
    }

    fn pointwise(&self, diff: f64) -> f64 {
        match self.kind {
            LossKind::Mae | LossKind::WeightedMae => diff.abs(),
            LossKind::Squared => diff * diff,
            LossKind::Huber => {
                let d = self.huber_delta;
                if diff.abs() <= d {
                    0.5 * diff * diff
                } else {
                    d * (diff.abs() - 0.5 * d)
                }
            }
        }
    }

    /// Derivative of the pointwise loss with respect to the prediction,
    /// evaluated at `diff = prediction − target`. `sign(0) = 0` for MAE so the
    /// subgradient choice is deterministic.
    fn pointwise_grad(&self, diff: f64) -> f64 {
        match self.kind {
            LossKind::Mae | LossKind::WeightedMae => {
                if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Squared => 2.0 * diff,
            LossKind::Huber => {
                let d = self.huber_delta;
                if diff.abs() <= d {
                    diff
                } else if diff > 0.0 {
                    d
                } else {
                    -d
                }
            }
        }
    }

    fn weight_at(&self, h: usize, len: usize) -> f64 {
        match &self.horizon_weights {
            Some(w) => w[h],
            None => 1.0 / len as f64,
        }
    }

    fn check_weights_len(&self, h: usize) -> Result<()> {
        if let Some(w) = &self.horizon_weights {
            if w.len() != h {
                return Err(CapeError::Dimension {
                    context: "LossSpec horizon weights",
                    expected: h,
                    got: w.len(),
                });
            }
        }
        Ok(())
    }
}

/// Horizon-averaged (or horizon-weighted) forecasting loss.
pub fn eval_loss(target: &HorizonVector, prediction: &HorizonVector, spec: &LossSpec) -> Result<f64> {
    if target.len() != prediction.len() {
        return Err(CapeError::Dimension {
            context: "eval_loss",
            expected: target.len(),
            got: prediction.len(),
        });
    }
    spec.check_weights_len(target.len())?;
    let h = target.len();
    let mut acc = 0.0;
    for i in 0..h {
        let diff = prediction.values()[i] - target.values()[i];
        acc += spec.weight_at(i, h) * spec.pointwise(diff);
    }
    Ok(acc)
}

/// Convex combination of branch candidates; stays in `[0, 1]^H`.
///
/// `candidates` must be aligned with `weights` (one candidate per weight, in
/// the mode's fixed branch order).
pub fn fuse_candidates(candidates: &[&HorizonVector], weights: &SimplexWeights) -> Result<HorizonVector> {
    if candidates.len() != weights.len() {
        return Err(CapeError::Config(format!(
            "fusion weights cover {} branches but {} candidates were given",
            weights.len(),
            candidates.len()
        )));
    }
    let h = candidates[0].len();
    for c in candidates {
        if c.len() != h {
            return Err(CapeError::Dimension {
                context: "fuse_candidates",
                expected: h,
                got: c.len(),
            });
        }
    }
    let mut fused = vec![0.0; h];
    for (c, w) in candidates.iter().zip(weights.values()) {
        for (f, v) in fused.iter_mut().zip(c.values()) {
            *f += w * v;
        }
    }
    HorizonVector::new(fused)
}

/// One subgradient of `w ↦ eval_loss(target, fuse(candidates, w))`.
///
/// Component `m` is `Σ_h ω_h · ψ(fused_h − target_h) · ŷ^m_h` where `ψ` is the
/// pointwise loss derivative in the prediction argument.
pub fn loss_subgradient_weights(
    target: &HorizonVector,
    candidates: &[&HorizonVector],
    weights: &SimplexWeights,
    spec: &LossSpec,
) -> Result<Vec<f64>> {
    let fused = fuse_candidates(candidates, weights)?;
    if target.len() != fused.len() {
        return Err(CapeError::Dimension {
            context: "loss_subgradient_weights",
            expected: target.len(),
            got: fused.len(),
        });
    }
    spec.check_weights_len(target.len())?;
    let h = target.len();
    let mut grad = vec![0.0; candidates.len()];
    for i in 0..h {
        let diff = fused.values()[i] - target.values()[i];
        let g = spec.weight_at(i, h) * spec.pointwise_grad(diff);
        for (gm, c) in grad.iter_mut().zip(candidates) {
            *gm += g * c.values()[i];
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hv(v: &[f64]) -> HorizonVector {
        HorizonVector::new(v.to_vec()).unwrap()
    }

    fn mae() -> LossSpec {
        LossSpec::default()
    }

    fn squared() -> LossSpec {
        LossSpec::new(LossKind::Squared, None, 0.1).unwrap()
    }

    #[test]
    fn horizon_vector_clamps_at_construction() {
        let v = hv(&[-0.5, 0.5, 1.7]);
        assert_eq!(v.values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn eval_loss_identity_case() {
        assert_eq!(eval_loss(&hv(&[0.5]), &hv(&[0.5]), &mae()).unwrap(), 0.0);
    }

    #[test]
    fn eval_loss_mae_hand_arithmetic() {
        // (|0.2| + |−0.2|) / 2 = 0.2
        let got = eval_loss(&hv(&[0.5, 0.5]), &hv(&[0.7, 0.3]), &mae()).unwrap();
        assert!((got - 0.2).abs() < 1e-15);
    }

    #[test]
    fn eval_loss_squared_extreme() {
        assert_eq!(eval_loss(&hv(&[0.0]), &hv(&[1.0]), &squared()).unwrap(), 1.0);
    }

    #[test]
    fn eval_loss_length_mismatch_errors() {
        let err = eval_loss(&hv(&[0.5, 0.5]), &hv(&[0.5]), &mae());
        assert!(matches!(err, Err(CapeError::Dimension { .. })));
    }

    #[test]
    fn fuse_hand_arithmetic() {
        let e = hv(&[0.2, 0.4]);
        let s = hv(&[0.6, 0.8]);
        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let fused = fuse_candidates(&[&e, &s], &w).unwrap();
        assert!((fused.values()[0] - 0.4).abs() < 1e-15);
        assert!((fused.values()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn fuse_one_hot_returns_candidate_verbatim() {
        let e = hv(&[0.11, 0.97]);
        let s = hv(&[0.4, 0.2]);
        let w = SimplexWeights::one_hot(0, 2);
        assert_eq!(fuse_candidates(&[&e, &s], &w).unwrap(), e);
    }

    #[test]
    fn fuse_equal_candidates_any_weights() {
        let x = hv(&[0.37]);
        let w = SimplexWeights::new(vec![0.3, 0.7]).unwrap();
        let fused = fuse_candidates(&[&x, &x], &w).unwrap();
        assert!((fused.values()[0] - 0.37).abs() < 1e-15);
    }

    #[test]
    fn fuse_key_mismatch_errors() {
        let e = hv(&[0.2]);
        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        assert!(fuse_candidates(&[&e], &w).is_err());
    }

    #[test]
    fn subgradient_zero_residual_is_zero() {
        let target = hv(&[0.5]);
        let e = hv(&[0.7]);
        let s = hv(&[0.3]);
        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let g = loss_subgradient_weights(&target, &[&e, &s], &w, &mae()).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn subgradient_mae_positive_residual() {
        let target = hv(&[0.5]);
        let e = hv(&[0.7]);
        let s = hv(&[0.3]);
        let w = SimplexWeights::one_hot(0, 2);
        let g = loss_subgradient_weights(&target, &[&e, &s], &w, &mae()).unwrap();
        assert!((g[0] - 0.7).abs() < 1e-15);
        assert!((g[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn subgradient_squared() {
        let target = hv(&[0.0]);
        let e = hv(&[1.0]);
        let s = hv(&[0.0]);
        let w = SimplexWeights::one_hot(0, 2);
        let g = loss_subgradient_weights(&target, &[&e, &s], &w, &squared()).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-15);
        assert!((g[1] - 0.0).abs() < 1e-15);
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| -(rng.gen::<f64>().max(1e-12)).ln()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / sum).collect()
    }

    fn all_specs() -> Vec<LossSpec> {
        vec![
            LossSpec::default(),
            LossSpec::new(LossKind::WeightedMae, Some(vec![0.2, 0.5, 0.3]), 0.1).unwrap(),
            LossSpec::new(LossKind::Huber, None, 0.1).unwrap(),
            LossSpec::new(LossKind::Squared, None, 0.1).unwrap(),
        ]
    }

    /// Fusion objective is convex over the simplex for every loss kind:
    /// f(λw1 + (1−λ)w2) ≤ λ f(w1) + (1−λ) f(w2) on 1000 random triples.
    #[test]
    fn fusion_objective_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 3;
        for spec in all_specs() {
            for _ in 0..1000 {
                let target = hv(&(0..h).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
                let cands: Vec<HorizonVector> = (0..3)
                    .map(|_| hv(&(0..h).map(|_| rng.gen::<f64>()).collect::<Vec<_>>()))
                    .collect();
                let refs: Vec<&HorizonVector> = cands.iter().collect();
                let w1 = random_simplex(&mut rng, 3);
                let w2 = random_simplex(&mut rng, 3);
                let lam: f64 = rng.gen();
                let mix: Vec<f64> = w1
                    .iter()
                    .zip(&w2)
                    .map(|(a, b)| lam * a + (1.0 - lam) * b)
                    .collect();
                let f = |w: &[f64]| {
                    let sw = SimplexWeights::new(w.to_vec()).unwrap();
                    eval_loss(&target, &fuse_candidates(&refs, &sw).unwrap(), &spec).unwrap()
                };
                assert!(f(&mix) <= lam * f(&w1) + (1.0 - lam) * f(&w2) + 1e-9);
            }
        }
    }

    /// Subgradient inequality f(u) ≥ f(w) + ⟨g, u − w⟩ on 1000 random pairs.
    #[test]
    fn subgradient_validity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 4;
        for spec in all_specs() {
            let spec = LossSpec::new(spec.kind, None, spec.huber_delta).unwrap();
            for _ in 0..1000 {
                let target = hv(&(0..h).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
                let cands: Vec<HorizonVector> = (0..3)
                    .map(|_| hv(&(0..h).map(|_| rng.gen::<f64>()).collect::<Vec<_>>()))
                    .collect();
                let refs: Vec<&HorizonVector> = cands.iter().collect();
                let w = SimplexWeights::new(random_simplex(&mut rng, 3)).unwrap();
                let u = random_simplex(&mut rng, 3);
                let g = loss_subgradient_weights(&target, &refs, &w, &spec).unwrap();
                let f = |wv: &[f64]| {
                    let sw = SimplexWeights::new(wv.to_vec()).unwrap();
                    eval_loss(&target, &fuse_candidates(&refs, &sw).unwrap(), &spec).unwrap()
                };
                let inner: f64 = g
                    .iter()
                    .zip(u.iter().zip(w.values()))
                    .map(|(gi, (ui, wi))| gi * (ui - wi))
                    .sum();
                assert!(f(&u) + 1e-9 >= f(w.values()) + inner);
            }
        }
    }

    /// Losses stay within the per-kind supremum on the whole box.
    #[test]
    fn loss_bounded_by_sup() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for spec in all_specs() {
            let spec = LossSpec::new(spec.kind, None, spec.huber_delta).unwrap();
            for _ in 0..500 {
                let h = rng.gen_range(1..6);
                let t = hv(&(0..h).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
                let p = hv(&(0..h).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
                let l = eval_loss(&t, &p, &spec).unwrap();
                assert!(l >= 0.0 && l <= spec.sup_bound() + 1e-12);
            }
        }
    }

    #[test]
    fn weighted_mae_uses_horizon_weights() {
        let spec = LossSpec::new(LossKind::WeightedMae, Some(vec![1.0, 3.0]), 0.1).unwrap();
        // weights normalize to (0.25, 0.75): 0.25·0.2 + 0.75·0.4 = 0.35
        let got = eval_loss(&hv(&[0.5, 0.5]), &hv(&[0.7, 0.9]), &spec).unwrap();
        assert!((got - 0.35).abs() < 1e-15);
    }

    #[test]
    fn simplex_weights_reject_bad_sum() {
        assert!(SimplexWeights::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexWeights::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn active_branch_sets() {
        assert_eq!(Mode::Expert.active_branches(), &[Branch::Expert]);
        assert_eq!(
            Mode::EdgeFusion.active_branches(),
            &[Branch::Expert, Branch::Small]
        );
        assert_eq!(
            Mode::CloudAssisted.active_branches(),
            &[Branch::Expert, Branch::Small, Branch::Cloud]
        );
    }
}
