//! Aggregation rules shared by the main server (top-model gradients) and the
//! fed server (bottom models).
//!
//! All rules reduce in input order with left-to-right summation; callers sort
//! inputs by client id first so results do not depend on arrival order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SflError};
use crate::tensor::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationRule {
    FedAvg,
    /// Single Krum with `assumed` Byzantine clients.
    Krum { assumed: usize },
    /// Coordinate-wise trimmed mean dropping `floor(beta * n)` per side.
    TrimmedMean { beta: f64 },
    Median,
}

impl AggregationRule {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationRule::FedAvg => "fedavg",
            AggregationRule::Krum { .. } => "krum",
            AggregationRule::TrimmedMean { .. } => "trmean",
            AggregationRule::Median => "median",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregationRule::TrimmedMean { beta } if !(0.0..0.5).contains(&beta) => Err(
                SflError::InvalidArgument(format!("trim fraction {beta} outside [0, 0.5)")),
            ),
            _ => Ok(()),
        }
    }

    pub fn aggregate(&self, updates: &[ParamVector]) -> Result<Aggregate> {
        match *self {
            AggregationRule::FedAvg => Ok(Aggregate::plain(fed_avg(updates, None)?)),
            AggregationRule::Krum { assumed } => {
                let (vector, index) = krum(updates, assumed)?;
                Ok(Aggregate {
                    vector,
                    selected: Some(index),
                })
            }
            AggregationRule::TrimmedMean { beta } => Ok(Aggregate::plain(trimmed_mean(updates, beta)?)),
            AggregationRule::Median => Ok(Aggregate::plain(coordinate_median(updates)?)),
        }
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationRule::Krum { assumed } => write!(f, "krum:{assumed}"),
            AggregationRule::TrimmedMean { beta } => write!(f, "trmean:{beta}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for AggregationRule {
    type Err = SflError;

    /// Accepts `fedavg`, `median`, `krum[:m]`, `trmean[:beta]`. Omitted
    /// parameters are filled in by the caller via [`AggregationRule::with_defaults`].
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n.to_string(), Some(a.to_string())),
            None => (lower.clone(), None),
        };
        let bad = || SflError::InvalidArgument(format!("bad aggregation rule `{s}`"));
        match name.as_str() {
            "fedavg" | "mean" => Ok(AggregationRule::FedAvg),
            "median" => Ok(AggregationRule::Median),
            "krum" => Ok(AggregationRule::Krum {
                assumed: arg.map_or(Ok(usize::MAX), |a| a.parse().map_err(|_| bad()))?,
            }),
            "trmean" | "trimmed_mean" | "trimmedmean" => Ok(AggregationRule::TrimmedMean {
                beta: arg.map_or(Ok(f64::NAN), |a| a.parse().map_err(|_| bad()))?,
            }),
            _ => Err(bad()),
        }
    }
}

impl AggregationRule {
    /// Fills parameters left unspecified by parsing: Krum assumes
    /// `ceil(0.2 K)` attackers, TrMean trims 20%.
    pub fn with_defaults(self, clients: usize) -> Self {
        match self {
            AggregationRule::Krum { assumed } if assumed == usize::MAX => AggregationRule::Krum {
                assumed: (clients as f64 * 0.2).ceil() as usize,
            },
            AggregationRule::TrimmedMean { beta } if beta.is_nan() => {
                AggregationRule::TrimmedMean { beta: 0.2 }
            }
            other => other,
        }
    }
}

/// Aggregated vector, plus the chosen input for selection rules.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub vector: ParamVector,
    pub selected: Option<usize>,
}

impl Aggregate {
    fn plain(vector: ParamVector) -> Self {
        Self {
            vector,
            selected: None,
        }
    }
}

fn check_lengths(updates: &[ParamVector]) -> Result<usize> {
    let first = updates.first().ok_or(SflError::Empty("no updates to aggregate"))?;
    let len = first.len();
    if let Some(bad) = updates.iter().find(|u| u.len() != len) {
        return Err(SflError::LengthMismatch {
            expected: len,
            actual: bad.len(),
        });
    }
    Ok(len)
}

/// Weighted elementwise mean; `None` means uniform weights.
pub fn fed_avg(updates: &[ParamVector], weights: Option<&[f64]>) -> Result<ParamVector> {
    let len = check_lengths(updates)?;
    match weights {
        None => {
            let mut acc = vec![0.0; len];
            for u in updates {
                for (a, v) in acc.iter_mut().zip(&u.0) {
                    *a += v;
                }
            }
            let n = updates.len() as f64;
            Ok(ParamVector(acc.into_iter().map(|a| a / n).collect()))
        }
        Some(w) => {
            if w.len() != updates.len() {
                return Err(SflError::LengthMismatch {
                    expected: updates.len(),
                    actual: w.len(),
                });
            }
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(SflError::InvalidArgument("weights must be finite and nonnegative".into()));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(SflError::InvalidArgument("weights sum to zero".into()));
            }
            let mut acc = vec![0.0; len];
            for (u, &wi) in updates.iter().zip(w) {
                for (a, v) in acc.iter_mut().zip(&u.0) {
                    *a += wi * v;
                }
            }
            Ok(ParamVector(acc.into_iter().map(|a| a / total).collect()))
        }
    }
}

fn column(updates: &[ParamVector], j: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(updates.iter().map(|u| u.0[j]));
    buf.sort_by(f64::total_cmp);
}

/// Coordinate-wise median; even counts average the two central values.
pub fn coordinate_median(updates: &[ParamVector]) -> Result<ParamVector> {
    let len = check_lengths(updates)?;
    let n = updates.len();
    let mut buf = Vec::with_capacity(n);
    let out = (0..len)
        .map(|j| {
            column(updates, j, &mut buf);
            if n % 2 == 1 {
                buf[n / 2]
            } else {
                (buf[n / 2 - 1] + buf[n / 2]) / 2.0
            }
        })
        .collect();
    Ok(ParamVector(out))
}

/// Coordinate-wise trimmed mean: drop the `floor(beta * n)` largest and
/// smallest values per coordinate and average the rest.
pub fn trimmed_mean(updates: &[ParamVector], beta: f64) -> Result<ParamVector> {
    let len = check_lengths(updates)?;
    if !(0.0..0.5).contains(&beta) {
        return Err(SflError::InvalidArgument(format!("trim fraction {beta} outside [0, 0.5)")));
    }
    let n = updates.len();
    let trim = (beta * n as f64).floor() as usize;
    if n < 2 * trim + 1 {
        return Err(SflError::InvalidArgument(format!(
            "trimming {trim} per side leaves nothing of {n} updates"
        )));
    }
    if trim == 0 {
        return fed_avg(updates, None);
    }
    let kept = (n - 2 * trim) as f64;
    let mut buf = Vec::with_capacity(n);
    let out = (0..len)
        .map(|j| {
            column(updates, j, &mut buf);
            buf[trim..n - trim].iter().sum::<f64>() / kept
        })
        .collect();
    Ok(ParamVector(out))
}

/// Single Krum. Score of `i` is the sum of squared distances to its
/// `n - m - 2` nearest other updates; lowest score wins, ties to the lowest
/// index. Returns the selected vector and its index.
pub fn krum(updates: &[ParamVector], assumed: usize) -> Result<(ParamVector, usize)> {
    check_lengths(updates)?;
    let n = updates.len();
    if n < assumed + 3 {
        return Err(SflError::InvalidArgument(format!(
            "krum needs n >= m + 3, got n={n}, m={assumed}"
        )));
    }
    let neighbors = n - assumed - 2;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = updates[i].squared_distance(&updates[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut best = (f64::INFINITY, 0);
    let mut row = Vec::with_capacity(n - 1);
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| dist[i * n + j]));
        row.sort_by(f64::total_cmp);
        let score: f64 = row[..neighbors].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    Ok((updates[best.1].clone(), best.1))
}
