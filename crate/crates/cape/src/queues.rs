//! Virtual queues for the latency, communication, and cloud-usage constraints.
//!
//! Each queue accumulates per-slot constraint violation through the hinge
//! update `q ← [q + arrival − budget]^+`. Mean-rate stability of a queue
//! certifies its long-term average constraint; [`stability_report`] checks the
//! bridging inequality `time-avg(arrival) ≤ budget + Q(T)/T` directly on a
//! finished trace.

use serde::{Deserialize, Serialize};

use crate::error::{CapeError, Result};

/// Long-term average budgets for the three constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    /// Time-average latency budget (ms).
    pub tau_max: f64,
    /// Time-average communication budget (volume units).
    pub c_max: f64,
    /// Long-term cloud-query budget, in (0, 1].
    pub rho_max: f64,
}

impl Budgets {
    pub fn validate(&self) -> Result<()> {
        if self.tau_max <= 0.0 || self.c_max <= 0.0 || self.rho_max <= 0.0 {
            return Err(CapeError::Config(format!(
                "budgets must be positive: {self:?}"
            )));
        }
        if self.rho_max > 1.0 {
            return Err(CapeError::Config(format!(
                "rho_max must be at most 1, got {}",
                self.rho_max
            )));
        }
        Ok(())
    }
}

/// The three virtual queues. All start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueueState {
    pub q_tau: f64,
    pub q_c: f64,
    pub q_rho: f64,
    pub slot: u64,
}

/// Per-slot arrivals entering the queue updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrivals {
    /// Node-average latency of the slot.
    pub avg_latency: f64,
    /// Node-average communication cost of the slot.
    pub avg_comm: f64,
    /// Realized cloud-request ratio of the slot.
    pub rho: f64,
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// One global queue update: `q ← [q + arrival − budget]^+` per queue.
pub fn update_queues(state: &QueueState, arrivals: &Arrivals, budgets: &Budgets) -> QueueState {
    debug_assert!(arrivals.avg_latency >= 0.0 && arrivals.avg_comm >= 0.0);
    debug_assert!((0.0..=1.0).contains(&arrivals.rho));
    QueueState {
        q_tau: hinge(state.q_tau + arrivals.avg_latency - budgets.tau_max),
        q_c: hinge(state.q_c + arrivals.avg_comm - budgets.c_max),
        q_rho: hinge(state.q_rho + arrivals.rho - budgets.rho_max),
        slot: state.slot + 1,
    }
}

/// Quadratic Lyapunov value `½(Q_τ² + Q_c² + Q_ρ²)`.
pub fn lyapunov_value(state: &QueueState) -> f64 {
    0.5 * (state.q_tau * state.q_tau + state.q_c * state.q_c + state.q_rho * state.q_rho)
}

/// Stability diagnostics for one queue over a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueStability {
    pub name: String,
    pub budget: f64,
    /// Final backlog over horizon, `Q(T)/T`.
    pub final_over_t: f64,
    /// Time-average arrival.
    pub avg_arrival: f64,
    /// Certified bound `budget + Q(T)/T`; `avg_arrival` never exceeds it.
    pub certified_bound: f64,
    /// Time-average backlog `Σ_t Q(t)/T`.
    pub avg_backlog: f64,
    /// Flagged when `Q(T)/T` exceeds `instability_frac · budget`.
    pub unstable: bool,
}

/// Full stability report across the three queues.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub queues: Vec<QueueStability>,
    /// Fraction of budget above which a queue is flagged unstable.
    pub instability_frac: f64,
}

impl StabilityReport {
    pub fn any_unstable(&self) -> bool {
        self.queues.iter().any(|q| q.unstable)
    }
}

/// Compensated (Neumaier) summation; the bridging inequality is checked to
/// 1e-12, which naive summation over long traces cannot guarantee.
fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Builds the stability report from a trace of queue states and arrivals.
///
/// `states[t]` must be the queue state *after* slot `t`'s update, aligned with
/// `arrivals[t]`; queues start from zero.
pub fn stability_report(
    states: &[QueueState],
    arrivals: &[Arrivals],
    budgets: &Budgets,
    instability_frac: f64,
) -> Result<StabilityReport> {
    if states.len() != arrivals.len() {
        return Err(CapeError::Dimension {
            context: "stability_report",
            expected: arrivals.len(),
            got: states.len(),
        });
    }
    if states.is_empty() {
        return Err(CapeError::Data("stability_report on empty trace".into()));
    }
    let t = states.len() as f64;
    let last = states.last().unwrap();
    let per_queue = [
        (
            "tau",
            budgets.tau_max,
            last.q_tau,
            neumaier_sum(arrivals.iter().map(|a| a.avg_latency)),
            neumaier_sum(states.iter().map(|s| s.q_tau)),
        ),
        (
            "c",
            budgets.c_max,
            last.q_c,
            neumaier_sum(arrivals.iter().map(|a| a.avg_comm)),
            neumaier_sum(states.iter().map(|s| s.q_c)),
        ),
        (
            "rho",
            budgets.rho_max,
            last.q_rho,
            neumaier_sum(arrivals.iter().map(|a| a.rho)),
            neumaier_sum(states.iter().map(|s| s.q_rho)),
        ),
    ];
    let queues = per_queue
        .into_iter()
        .map(|(name, budget, q_final, arrival_sum, backlog_sum)| {
            let final_over_t = q_final / t;
            QueueStability {
                name: name.to_string(),
                budget,
                final_over_t,
                avg_arrival: arrival_sum / t,
                certified_bound: budget + final_over_t,
                avg_backlog: backlog_sum / t,
                unstable: final_over_t > instability_frac * budget,
            }
        })
        .collect();
    Ok(StabilityReport {
        queues,
        instability_frac,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn budgets() -> Budgets {
        Budgets {
            tau_max: 120.0,
            c_max: 0.3,
            rho_max: 0.5,
        }
    }

    #[test]
    fn update_slack_case_stays_zero() {
        let s = QueueState::default();
        let a = Arrivals {
            avg_latency: 100.0,
            avg_comm: 0.0,
            rho: 0.0,
        };
        let next = update_queues(&s, &a, &budgets());
        assert_eq!(next.q_tau, 0.0);
        assert_eq!(next.slot, 1);
    }

    #[test]
    fn update_over_budget_hand_arithmetic() {
        let s = QueueState {
            q_tau: 5.0,
            ..Default::default()
        };
        let a = Arrivals {
            avg_latency: 130.0,
            avg_comm: 0.0,
            rho: 0.0,
        };
        let next = update_queues(&s, &a, &budgets());
        assert_eq!(next.q_tau, 15.0);
    }

    #[test]
    fn update_exact_budget_zero_drift() {
        let s = QueueState {
            q_rho: 2.0,
            ..Default::default()
        };
        let a = Arrivals {
            avg_latency: 0.0,
            avg_comm: 0.0,
            rho: 0.5,
        };
        let next = update_queues(&s, &a, &budgets());
        assert_eq!(next.q_rho, 2.0);
    }

    #[test]
    fn lyapunov_values() {
        assert_eq!(lyapunov_value(&QueueState::default()), 0.0);
        let s = QueueState {
            q_tau: 3.0,
            q_c: 4.0,
            q_rho: 0.0,
            slot: 0,
        };
        assert_eq!(lyapunov_value(&s), 12.5);
    }

    #[test]
    fn lyapunov_monotone_in_components() {
        let a = QueueState {
            q_tau: 1.0,
            q_c: 2.0,
            q_rho: 3.0,
            slot: 0,
        };
        let b = QueueState {
            q_tau: 1.5,
            q_c: 2.0,
            q_rho: 3.0,
            slot: 0,
        };
        assert!(lyapunov_value(&b) > lyapunov_value(&a));
    }

    /// Hinge inequality used by the drift argument: ([x]^+)² ≤ x².
    #[test]
    fn hinge_square_inequality_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(-1e3..1e3);
            assert!(hinge(x) * hinge(x) <= x * x);
        }
    }

    /// Queue recursion matches a slow reference on random traces.
    #[test]
    fn update_matches_reference_on_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = budgets();
        for _ in 0..50 {
            let len = rng.gen_range(1..200);
            let arrivals: Vec<Arrivals> = (0..len)
                .map(|_| Arrivals {
                    avg_latency: rng.gen_range(0.0..240.0),
                    avg_comm: rng.gen_range(0.0..1.0),
                    rho: rng.gen_range(0.0..1.0),
                })
                .collect();
            let mut fast = QueueState::default();
            let (mut rt, mut rc, mut rr) = (0.0f64, 0.0f64, 0.0f64);
            for a in &arrivals {
                fast = update_queues(&fast, a, &b);
                rt = (rt + a.avg_latency - b.tau_max).max(0.0);
                rc = (rc + a.avg_comm - b.c_max).max(0.0);
                rr = (rr + a.rho - b.rho_max).max(0.0);
                assert_eq!(fast.q_tau, rt);
                assert_eq!(fast.q_c, rc);
                assert_eq!(fast.q_rho, rr);
                assert!(fast.q_tau >= 0.0 && fast.q_c >= 0.0 && fast.q_rho >= 0.0);
            }
        }
    }

    #[test]
    fn stability_all_under_budget() {
        let b = budgets();
        let arrivals: Vec<Arrivals> = (0..10)
            .map(|_| Arrivals {
                avg_latency: 50.0,
                avg_comm: 0.1,
                rho: 0.2,
            })
            .collect();
        let mut s = QueueState::default();
        let states: Vec<QueueState> = arrivals
            .iter()
            .map(|a| {
                s = update_queues(&s, a, &b);
                s
            })
            .collect();
        let report = stability_report(&states, &arrivals, &b, 0.05).unwrap();
        for q in &report.queues {
            assert_eq!(q.final_over_t, 0.0);
            assert!(q.avg_arrival <= q.certified_bound + 1e-12);
            assert!(!q.unstable);
        }
    }

    /// Constant over-budget arrivals grow linearly: q(T) = T · excess.
    #[test]
    fn stability_flags_linear_growth() {
        let b = budgets();
        let t = 40;
        let arrivals: Vec<Arrivals> = (0..t)
            .map(|_| Arrivals {
                avg_latency: 150.0,
                avg_comm: 0.0,
                rho: 0.0,
            })
            .collect();
        let mut s = QueueState::default();
        let states: Vec<QueueState> = arrivals
            .iter()
            .map(|a| {
                s = update_queues(&s, a, &b);
                s
            })
            .collect();
        assert_eq!(states.last().unwrap().q_tau, t as f64 * 30.0);
        let report = stability_report(&states, &arrivals, &b, 0.05).unwrap();
        assert!(report.queues[0].unstable);
        assert!(report.any_unstable());
    }

    /// Three-slot hand computation of the bridging inequality.
    #[test]
    fn stability_bridging_hand_trace() {
        let b = Budgets {
            tau_max: 10.0,
            c_max: 1.0,
            rho_max: 0.5,
        };
        // arrivals 12, 7, 15 against budget 10: q = 2, 0, 5.
        let arrivals: Vec<Arrivals> = [12.0, 7.0, 15.0]
            .iter()
            .map(|&l| Arrivals {
                avg_latency: l,
                avg_comm: 0.0,
                rho: 0.0,
            })
            .collect();
        let mut s = QueueState::default();
        let states: Vec<QueueState> = arrivals
            .iter()
            .map(|a| {
                s = update_queues(&s, a, &b);
                s
            })
            .collect();
        assert_eq!(states[0].q_tau, 2.0);
        assert_eq!(states[1].q_tau, 0.0);
        assert_eq!(states[2].q_tau, 5.0);
        let report = stability_report(&states, &arrivals, &b, 0.05).unwrap();
        let q = &report.queues[0];
        // avg arrival 34/3 ≈ 11.333; bound 10 + 5/3 ≈ 11.667.
        assert!((q.avg_arrival - 34.0 / 3.0).abs() < 1e-12);
        assert!((q.certified_bound - (10.0 + 5.0 / 3.0)).abs() < 1e-12);
        assert!(q.avg_arrival <= q.certified_bound + 1e-12);
    }

    /// Bridging inequality holds on random traces to 1e-12.
    #[test]
    fn stability_bridging_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b = budgets();
        for _ in 0..20 {
            let len = rng.gen_range(10..2000);
            let arrivals: Vec<Arrivals> = (0..len)
                .map(|_| Arrivals {
                    avg_latency: rng.gen_range(0.0..240.0),
                    avg_comm: rng.gen_range(0.0..1.0),
                    rho: rng.gen_range(0.0..1.0),
                })
                .collect();
            let mut s = QueueState::default();
            let states: Vec<QueueState> = arrivals
                .iter()
                .map(|a| {
                    s = update_queues(&s, a, &b);
                    s
                })
                .collect();
            let report = stability_report(&states, &arrivals, &b, 0.05).unwrap();
            for q in &report.queues {
                assert!(
                    q.avg_arrival <= q.certified_bound + 1e-12,
                    "queue {} violated bridging: {} > {}",
                    q.name,
                    q.avg_arrival,
                    q.certified_bound
                );
            }
        }
    }
}
