//! Min-Sum crafting of a malicious bottom model.
//!
//! The crafted model is `mean + gamma * direction`. It is admissible when its
//! summed squared distance to the reference models does not exceed the
//! largest summed squared distance of any reference model to the others.
//! The reference set is the attackers' own honestly computed updates.

use log::warn;

use crate::error::{Result, SflError};
use crate::tensor::ParamVector;

use super::bandit::Arm;

/// Attacker-side stand-in for the benign updates of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxySet {
    updates: Vec<ParamVector>,
    mean: ParamVector,
    std: ParamVector,
    bound: f64,
}

impl ProxySet {
    pub fn new(updates: Vec<ParamVector>) -> Result<Self> {
        let first = updates.first().ok_or(SflError::Empty("proxy set"))?;
        let len = first.len();
        if let Some(bad) = updates.iter().find(|u| u.len() != len) {
            return Err(SflError::LengthMismatch {
                expected: len,
                actual: bad.len(),
            });
        }
        let n = updates.len() as f64;
        let mut mean = vec![0.0; len];
        for u in &updates {
            for (m, v) in mean.iter_mut().zip(&u.0) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; len];
        for u in &updates {
            for ((s, v), m) in var.iter_mut().zip(&u.0).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        let bound = updates
            .iter()
            .map(|wi| updates.iter().map(|wj| wi.squared_distance(wj)).sum::<f64>())
            .fold(0.0, f64::max);
        Ok(Self {
            updates,
            mean: ParamVector(mean),
            std: ParamVector(std),
            bound,
        })
    }

    pub fn updates(&self) -> &[ParamVector] {
        &self.updates
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    /// FedAvg of the proxies.
    pub fn mean(&self) -> &ParamVector {
        &self.mean
    }

    /// Population standard deviation per coordinate.
    pub fn std(&self) -> &ParamVector {
        &self.std
    }

    /// `max_i sum_j ||w_i - w_j||^2`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `sum_i ||candidate - w_i||^2`.
    pub fn spread_of(&self, candidate: &ParamVector) -> f64 {
        self.updates.iter().map(|w| candidate.squared_distance(w)).sum()
    }
}

fn inverse_sign(v: &ParamVector) -> ParamVector {
    ParamVector(
        v.0.iter()
            .map(|&x| {
                if x > 0.0 {
                    -1.0
                } else if x < 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// Perturbation direction derived from `reference` (the proxy mean) and
/// the proxy spread.
pub fn perturbation_direction(arm: Arm, proxy: &ProxySet) -> ParamVector {
    direction_from(arm, proxy.mean(), proxy.std())
}

/// Same arms computed from the benign step `mean(proxy) - broadcast`
/// instead of the proxy mean itself.
pub fn update_direction(arm: Arm, proxy: &ProxySet, broadcast: &ParamVector) -> ParamVector {
    direction_from(arm, &proxy.mean().sub(broadcast), proxy.std())
}

pub(crate) fn direction_from(arm: Arm, reference: &ParamVector, std: &ParamVector) -> ParamVector {
    match arm {
        Arm::InverseUnit => {
            let norm = reference.norm();
            if norm == 0.0 || !norm.is_finite() {
                warn!("zero-norm reference for inverse unit direction, using inverse sign");
                return inverse_sign(reference);
            }
            ParamVector(reference.0.iter().map(|&x| -x / norm).collect())
        }
        Arm::InverseStd => ParamVector(std.0.iter().map(|&s| -s).collect()),
        Arm::InverseSign => inverse_sign(reference),
    }
}

pub fn minsum_feasible(candidate: &ParamVector, proxy: &ProxySet) -> bool {
    proxy.spread_of(candidate) <= proxy.bound()
}

/// `mean(proxy) + gamma * direction`.
pub fn craft_bottom_model(proxy: &ProxySet, direction: &ParamVector, gamma: f64) -> ParamVector {
    proxy.mean().add_scaled(direction, gamma)
}

pub const DEFAULT_TAU: f64 = 0.01;
const DOUBLING_CAP: f64 = (1u64 << 60) as f64;
const COARSE_REL_WIDTH: f64 = 0.125;
const COARSE_MAX_HALVINGS: usize = 1100;
pub const FINE_MAX_STEPS: usize = 20;

/// Search-and-locate for the largest admissible `gamma`.
///
/// Coarse phase: double from 1 until infeasible (capped at 2^60), then bisect
/// the bracket down to 1/8 relative width. Fine phase: oscillate around the
/// coarse estimate with halving steps (up on feasible, down on infeasible)
/// until the step drops below `tau * gamma`, for at most 20 steps. Returns the
/// largest feasible value visited.
pub fn snl_gamma(proxy: &ProxySet, direction: &ParamVector, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(SflError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if direction.len() != proxy.mean().len() {
        return Err(SflError::LengthMismatch {
            expected: proxy.mean().len(),
            actual: direction.len(),
        });
    }
    if direction.0.iter().all(|&v| v == 0.0) {
        return Err(SflError::InvalidArgument("perturbation direction is zero".into()));
    }
    let feasible = |g: f64| minsum_feasible(&craft_bottom_model(proxy, direction, g), proxy);
    if proxy.bound() == 0.0 {
        // every proxy coincides, only the mean itself is admissible
        return Ok(0.0);
    }

    let (mut lo, mut hi) = if feasible(1.0) {
        let mut g = 1.0;
        loop {
            let next = g * 2.0;
            if next > DOUBLING_CAP {
                return Ok(g);
            }
            if !feasible(next) {
                break (g, next);
            }
            g = next;
        }
    } else {
        (0.0, 1.0)
    };

    let mut halvings = 0;
    while hi - lo > COARSE_REL_WIDTH * hi && halvings < COARSE_MAX_HALVINGS {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        halvings += 1;
    }
    if lo == 0.0 {
        return Ok(0.0);
    }

    let mut gamma = lo;
    let mut step = hi - lo;
    for _ in 0..FINE_MAX_STEPS {
        if step < tau * lo {
            break;
        }
        step *= 0.5;
        if feasible(gamma) {
            lo = lo.max(gamma);
            gamma += step;
        } else {
            gamma -= step;
        }
    }
    if gamma > lo && feasible(gamma) {
        lo = gamma;
    }
    Ok(lo)
}
