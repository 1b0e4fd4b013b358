//! Dataset ingestion, windowing, chronological splitting, synthetic scenario
//! generation, and the retrieval case base.
//!
//! All power values are normalized by site capacity when windows and targets
//! are built, so everything downstream lives on `[0, 1]`. Feature windows use
//! only records at times up to the window slot; weather covariates are aligned
//! to the latest record strictly before the window end. Splits are
//! chronological and contiguous, and samples whose target horizon straddles a
//! split boundary are assigned to neither side.

mod csv_io;
mod synth;

pub use csv_io::{load_capacities, load_csv_dataset, CsvSchema, LoadReport};
pub use synth::{synthesize_scenario, transition_matrix, SynthConfig, SyntheticScenario};

use serde::{Deserialize, Serialize};

use crate::core::HorizonVector;
use crate::error::{CapeError, Result};

/// Raw per-node telemetry: power plus named weather covariates on a shared
/// strictly-increasing timestamp grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSeries {
    pub node_id: String,
    /// Epoch seconds, strictly increasing.
    pub timestamps: Vec<i64>,
    /// Raw power, same units as `capacity`, nonnegative.
    pub power: Vec<f64>,
    /// Covariate columns, each aligned with `timestamps`.
    pub covariate_names: Vec<String>,
    pub covariates: Vec<Vec<f64>>,
    /// Site capacity, `> 0`.
    pub capacity: f64,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity <= 0.0 || !self.capacity.is_finite() {
            return Err(CapeError::Data(format!(
                "node {}: capacity must be positive, got {}",
                self.node_id, self.capacity
            )));
        }
        if self.timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CapeError::Data(format!(
                "node {}: timestamps must be strictly increasing",
                self.node_id
            )));
        }
        if self.power.len() != self.timestamps.len() {
            return Err(CapeError::Dimension {
                context: "RawSeries power column",
                expected: self.timestamps.len(),
                got: self.power.len(),
            });
        }
        for (name, col) in self.covariate_names.iter().zip(&self.covariates) {
            if col.len() != self.timestamps.len() {
                return Err(CapeError::Data(format!(
                    "node {}: covariate {} has {} rows, expected {}",
                    self.node_id,
                    name,
                    col.len(),
                    self.timestamps.len()
                )));
            }
        }
        if self.power.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(CapeError::Data(format!(
                "node {}: power must be finite and nonnegative",
                self.node_id
            )));
        }
        Ok(())
    }
}

/// Model input for one node at one slot: lagged normalized power, the latest
/// past weather record, and calendar encodings; plus the short weather window
/// used by the mutation-intensity screening feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub node_id: String,
    /// Forecast origin: index into the node's slot grid.
    pub slot: i64,
    /// `[lag_1..lag_W | covariates at slot−1 | sin_tod | cos_tod]`.
    pub features: Vec<f64>,
    /// Number of leading lag entries in `features`.
    pub n_lags: usize,
    /// Last `W_mu` covariate rows at times `< slot` end (oldest first).
    pub weather_recent: Vec<Vec<f64>>,
}

/// One supervised example: a window plus its delayed `H`-step target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub window: ObservationWindow,
    pub target: HorizonVector,
    /// Slot at which the full target becomes observable (`slot + H`).
    pub reveal_slot: i64,
}

/// Counters produced while building windows (clamped over-capacity readings).
#[derive(Debug, Clone, Copy, Default)]
pub struct WindowReport {
    pub over_capacity_clamped: u64,
}

/// Builds one sample per valid forecast origin of a series.
///
/// A slot `t` is valid when the `w_lag` lags at `t−w_lag+1..=t` and the `h`
/// future targets at `t+1..=t+h` all exist; boundary samples are trimmed.
/// A too-short series yields an empty list.
pub fn build_samples(
    series: &RawSeries,
    w_lag: usize,
    h: usize,
    w_mu: usize,
) -> Result<(Vec<Sample>, WindowReport)> {
    series.validate()?;
    if w_lag == 0 || h == 0 {
        return Err(CapeError::Config("w_lag and horizon must be positive".into()));
    }
    let mut report = WindowReport::default();
    let n = series.len();
    if n < w_lag + h {
        return Ok((Vec::new(), report));
    }
    let norm: Vec<f64> = series
        .power
        .iter()
        .map(|p| {
            let x = p / series.capacity;
            if x > 1.0 {
                report.over_capacity_clamped += 1;
            }
            x.clamp(0.0, 1.0)
        })
        .collect();
    let mut samples = Vec::with_capacity(n - w_lag - h + 1);
    for t in (w_lag - 1)..(n - h) {
        let mut features = Vec::with_capacity(w_lag + series.covariates.len() + 2);
        features.extend_from_slice(&norm[t + 1 - w_lag..=t]);
        // latest weather record strictly before the window end
        let widx = t.saturating_sub(1);
        for col in &series.covariates {
            features.push(col[widx]);
        }
        let tod = series.timestamps[t].rem_euclid(86_400) as f64 / 86_400.0;
        features.push((2.0 * std::f64::consts::PI * tod).sin());
        features.push((2.0 * std::f64::consts::PI * tod).cos());

        let w_start = t.saturating_sub(w_mu);
        let weather_recent: Vec<Vec<f64>> = (w_start..t)
            .map(|j| series.covariates.iter().map(|c| c[j]).collect())
            .collect();

        let target = HorizonVector::new(norm[t + 1..=t + h].to_vec())?;
        samples.push(Sample {
            window: ObservationWindow {
                node_id: series.node_id.clone(),
                slot: t as i64,
                features,
                n_lags: w_lag,
                weather_recent,
            },
            target,
            reveal_slot: (t + h) as i64,
        });
    }
    Ok((samples, report))
}

/// Chronological split fractions; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| *f < 0.0 || !f.is_finite()) {
            return Err(CapeError::Config(format!(
                "split fractions must be nonnegative: {self:?}"
            )));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CapeError::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Splits one node's samples into contiguous chronological blocks.
///
/// A sample whose `reveal_slot` reaches into the next block belongs to
/// neither side (dropped), so no target information crosses a boundary.
pub fn chronological_split(
    samples: &[Sample],
    spec: &SplitSpec,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let n = samples.len();
    if n == 0 {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    }
    debug_assert!(samples.windows(2).all(|w| w[0].window.slot <= w[1].window.slot));
    let idx1 = ((spec.train_frac * n as f64).round() as usize).min(n);
    let idx2 = (((spec.train_frac + spec.val_frac) * n as f64).round() as usize).clamp(idx1, n);

    let keep_before = |block: &[Sample], boundary: Option<i64>| -> Vec<Sample> {
        match boundary {
            Some(b) => block
                .iter()
                .filter(|s| s.reveal_slot < b)
                .cloned()
                .collect(),
            None => block.to_vec(),
        }
    };
    let b1 = samples.get(idx1).map(|s| s.window.slot);
    let b2 = samples.get(idx2).map(|s| s.window.slot);
    let train = keep_before(&samples[..idx1], b1);
    let val = keep_before(&samples[idx1..idx2], b2);
    let test = samples[idx2..].to_vec();
    Ok((train, val, test))
}

/// One retrievable historical case: query key plus the realized trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Case {
    pub key: Vec<f64>,
    pub trajectory: HorizonVector,
    /// Slot after which this case's full trajectory was observable.
    pub end_slot: i64,
    pub node_id: String,
}

/// The global historical case base with an exact nearest-neighbor index.
///
/// Immutable during a run except for explicit post-reveal insertions.
/// Retrieval at slot `t` only ever sees cases with `end_slot < t`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CaseBase {
    cases: Vec<Case>,
}

impl CaseBase {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    /// Inserts a case (used for post-reveal insertion during evaluation).
    pub fn insert(&mut self, case: Case) {
        self.cases.push(case);
    }

    /// Exact k-nearest-neighbor query under Euclidean distance, restricted to
    /// cases with `end_slot < current_slot`. Returns `(case index, distance)`
    /// sorted by distance (ties broken by insertion index).
    pub fn knn(&self, query: &[f64], k: usize, current_slot: i64) -> Vec<(usize, f64)> {
        let mut hits: Vec<(f64, usize)> = Vec::new();
        for (idx, case) in self.cases.iter().enumerate() {
            if case.end_slot >= current_slot {
                continue;
            }
            let d2: f64 = case
                .key
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            hits.push((d2, idx));
        }
        let k = k.min(hits.len());
        if k == 0 {
            return Vec::new();
        }
        hits.select_nth_unstable_by(k - 1, |a, b| {
            a.partial_cmp(b).expect("finite distances")
        });
        hits.truncate(k);
        hits.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        hits.into_iter().map(|(d2, idx)| (idx, d2.sqrt())).collect()
    }
}

/// Builds the case base from training samples only.
///
/// `query_fn` maps a window to its retrieval key; `end_slot` is the sample's
/// reveal slot so a case only becomes retrievable once its trajectory is
/// observable. When `max_cases` is set, the input is thinned by a
/// deterministic stride.
pub fn build_case_base<F>(train_samples: &[&Sample], query_fn: F, max_cases: Option<usize>) -> CaseBase
where
    F: Fn(&ObservationWindow) -> Vec<f64>,
{
    let n = train_samples.len();
    let stride = match max_cases {
        Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
        _ => 1,
    };
    let cases = train_samples
        .iter()
        .step_by(stride)
        .map(|s| Case {
            key: query_fn(&s.window),
            trajectory: s.target.clone(),
            end_slot: s.reveal_slot,
            node_id: s.window.node_id.clone(),
        })
        .collect();
    CaseBase { cases }
}
