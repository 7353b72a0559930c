//! Evaluation metrics: correlation fidelity, per-feature distribution
//! distance, regret, early frame-rate gain and Q-value stability.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::{regret_oracle, RunLog};
use crate::sim::EnvConfig;

/// Pairwise Pearson correlations. Rows and columns of zero-variance features
/// are NaN (diagonal included) and listed in `zero_variance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Array2<f64>,
    pub zero_variance: Vec<usize>,
}

pub fn pearson_matrix(data: ArrayView2<f64>, labels: &[&str]) -> Result<CorrelationMatrix> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: n,
        });
    }
    if labels.len() != d {
        return Err(Error::Domain(format!("{} labels for {d} columns", labels.len())));
    }
    let mean = data.mean_axis(Axis(0)).unwrap();
    let centered = &data - &mean;
    let cross = centered.t().dot(&centered);
    let norms: Vec<f64> = (0..d).map(|i| cross[[i, i]].sqrt()).collect();
    let zero_variance: Vec<usize> = (0..d).filter(|&i| norms[i] == 0.0).collect();

    let mut values = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            values[[i, j]] = if norms[i] == 0.0 || norms[j] == 0.0 {
                f64::NAN
            } else if i == j {
                1.0
            } else {
                (cross[[i, j]] / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(CorrelationMatrix {
        labels: labels.iter().map(|s| s.to_string()).collect(),
        values,
        zero_variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrGap {
    /// Mean absolute off-diagonal difference over comparable pairs.
    pub gap: f64,
    pub compared: usize,
    /// Off-diagonal pairs skipped because either side is NaN.
    pub excluded: usize,
}

pub fn corr_gap(real: &CorrelationMatrix, synth: &CorrelationMatrix) -> Result<CorrGap> {
    if real.labels != synth.labels {
        return Err(Error::Domain("correlation matrices have different labels".into()));
    }
    let d = real.labels.len();
    let (mut total, mut compared, mut excluded) = (0.0, 0, 0);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let (a, b) = (real.values[[i, j]], synth.values[[i, j]]);
            if a.is_nan() || b.is_nan() {
                excluded += 1;
            } else {
                total += (a - b).abs();
                compared += 1;
            }
        }
    }
    Ok(CorrGap {
        gap: if compared == 0 { 0.0 } else { total / compared as f64 },
        compared,
        excluded,
    })
}

/// One-dimensional earth mover's distance between two empirical samples,
/// `integral |F_a(x) - F_b(x)| dx`. For equal sizes this is the mean absolute
/// difference of the sorted samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
    all.sort_by(f64::total_cmp);

    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut total = 0.0;
    for w in all.windows(2) {
        let x = w[0];
        while ia < a.len() && a[ia] <= x {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= x {
            ib += 1;
        }
        total += (ia as f64 / na - ib as f64 / nb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Population standard deviation of each column.
pub fn column_stds(data: ArrayView2<f64>) -> Vec<f64> {
    data.std_axis(Axis(0), 0.0).to_vec()
}

pub fn feature_wasserstein(real: ArrayView2<f64>, synth: ArrayView2<f64>) -> Result<Vec<f64>> {
    if real.ncols() != synth.ncols() {
        return Err(Error::Domain("column counts differ".into()));
    }
    (0..real.ncols())
        .map(|j| wasserstein1(&real.column(j).to_vec(), &synth.column(j).to_vec()))
        .collect()
}

/// Cumulative regret `sum_{t <= T'} (mu*(s_t) - r_t)` for every prefix.
pub fn empirical_regret(log: &RunLog, env: &EnvConfig) -> Result<Vec<f64>> {
    let mut total = 0.0;
    log.records
        .iter()
        .map(|r| {
            if r.action >= env.num_actions {
                return Err(Error::Domain(format!(
                    "log action {} does not exist in an environment with {} actions",
                    r.action, env.num_actions
                )));
            }
            total += regret_oracle(env, &r.state)? - r.reward;
            Ok(total)
        })
        .collect()
}

/// Mean fps of `a` over its first `window` steps divided by that of `b`.
pub fn early_fps_gain(a: &RunLog, b: &RunLog, window: usize) -> Result<f64> {
    let shortest = a.records.len().min(b.records.len());
    if window == 0 || shortest < window {
        return Err(Error::InsufficientData {
            needed: window.max(1),
            available: shortest,
        });
    }
    let mean = |log: &RunLog| log.records[..window].iter().map(|r| r.state.fps).sum::<f64>() / window as f64;
    let denom = mean(b);
    if denom <= 0.0 {
        return Err(Error::Numeric("reference log has zero mean fps".into()));
    }
    Ok(mean(a) / denom)
}

/// Population standard deviation of the per-step max-Q over the final
/// `last_fraction` of the log.
pub fn qvalue_stability(log: &RunLog, last_fraction: f64) -> Result<f64> {
    let n = log.records.len();
    if n < 8 {
        return Err(Error::InsufficientData {
            needed: 8,
            available: n,
        });
    }
    if !(last_fraction > 0.0 && last_fraction <= 1.0) {
        return Err(Error::Domain("last_fraction must lie in (0, 1]".into()));
    }
    let tail = ((n as f64 * last_fraction).round() as usize).max(1);
    let values: Vec<f64> = log.records[n - tail..].iter().map(|r| r.max_q).collect();
    let mean = values.iter().sum::<f64>() / tail as f64;
    Ok((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tail as f64).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
