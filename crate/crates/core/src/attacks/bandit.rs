//! Thompson sampling over the three perturbation directions.

use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::error::SflError;
use crate::rng::CounterRng;
use crate::tensor::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    InverseUnit,
    InverseStd,
    InverseSign,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::InverseUnit, Arm::InverseStd, Arm::InverseSign];

    pub fn index(self) -> usize {
        match self {
            Arm::InverseUnit => 0,
            Arm::InverseStd => 1,
            Arm::InverseSign => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::InverseUnit => "inv-unit",
            Arm::InverseStd => "inv-std",
            Arm::InverseSign => "inv-sign",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = SflError;

    fn from_str(s: &str) -> Result<Self, SflError> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SflError::InvalidArgument(format!("unknown arm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPosterior {
    pub a: f64,
    pub b: f64,
}

impl Default for BetaPosterior {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0 }
    }
}

impl BetaPosterior {
    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn is_valid(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.a > 0.0 && self.b > 0.0
    }
}

/// Beta posteriors indexed by [`Arm::index`], all starting at Beta(1, 1).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BanditState {
    pub arms: [BetaPosterior; 3],
}

impl BanditState {
    pub fn with_priors(arms: [BetaPosterior; 3]) -> Self {
        Self { arms }
    }

    pub fn posterior(&self, arm: Arm) -> BetaPosterior {
        self.arms[arm.index()]
    }

    /// Fractional Bernoulli update: `a += r`, `b += 1 - r` with `r` clamped to `[0, 1]`.
    pub fn update(&mut self, arm: Arm, reward: f64) {
        let r = if reward.is_nan() { 0.0 } else { reward.clamp(0.0, 1.0) };
        let p = &mut self.arms[arm.index()];
        p.a += r;
        p.b += 1.0 - r;
    }
}

/// Draws `theta ~ Beta(a, b)` for each arm in order and plays the argmax
/// (lowest index on ties).
pub fn thompson_select(bandit: &BanditState, rng: &mut CounterRng) -> Arm {
    let mut best = (f64::NEG_INFINITY, Arm::InverseUnit);
    for arm in Arm::ALL {
        let p = bandit.posterior(arm);
        let theta = rng.beta(p.a, p.b);
        if theta > best.0 {
            best = (theta, arm);
        }
    }
    best.1
}

/// `(1 - cos(observed, expected)) / 2`, clamped to `[0, 1]`; `None` when
/// either delta has zero norm.
pub fn direction_reward(observed: &ParamVector, expected: &ParamVector) -> Option<f64> {
    observed
        .cosine(expected)
        .map(|c| ((1.0 - c) / 2.0).clamp(0.0, 1.0))
}

/// Rewards `arm` for how far the observed global step deviates from the
/// benign step the attackers predicted. Zero-norm deltas skip the update.
pub fn bandit_reward_and_update(
    bandit: &BanditState,
    arm: Arm,
    observed_global_delta: &ParamVector,
    benign_proxy_delta: &ParamVector,
) -> BanditState {
    let mut next = *bandit;
    match direction_reward(observed_global_delta, benign_proxy_delta) {
        Some(r) => next.update(arm, r),
        None => warn!("zero-norm model delta, bandit update skipped"),
    }
    next
}
