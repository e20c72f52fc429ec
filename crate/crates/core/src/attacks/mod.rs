//! Poisoning attacks driven through the round hooks of [`crate::sfl`].
//!
//! MISA poisons both halves of the model: malicious clients rewrite their
//! smashed data (hurting the top model trained by the main server) and upload
//! a Min-Sum crafted bottom model whose direction is chosen by Thompson
//! sampling and whose magnitude comes from search-and-locate.

pub mod bandit;
pub mod baselines;
pub mod minsum;
pub mod smashed;

use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::error::SflError;
use crate::rng::{domain, CounterRng};
use crate::sfl::{BottomUpdate, RoundHooks, SmashedBatch};
use crate::tensor::ParamVector;

pub use bandit::{bandit_reward_and_update, thompson_select, Arm, BanditState, BetaPosterior};
pub use baselines::{gaussian_update, ipm_update, label_flip};
pub use minsum::{
    craft_bottom_model, minsum_feasible, perturbation_direction, snl_gamma, update_direction, ProxySet,
};
pub use smashed::{poison_smashed, SmashedStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    None,
    Misa,
    MisaTopOnly,
    MisaBottomOnly,
    LabelFlip,
    Gaussian,
    Ipm,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::None,
        AttackKind::Misa,
        AttackKind::MisaTopOnly,
        AttackKind::MisaBottomOnly,
        AttackKind::LabelFlip,
        AttackKind::Gaussian,
        AttackKind::Ipm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Misa => "misa",
            AttackKind::MisaTopOnly => "misa-top",
            AttackKind::MisaBottomOnly => "misa-bottom",
            AttackKind::LabelFlip => "lf",
            AttackKind::Gaussian => "gaussian",
            AttackKind::Ipm => "ipm",
        }
    }

    pub fn poisons_smashed(self) -> bool {
        matches!(self, AttackKind::Misa | AttackKind::MisaTopOnly)
    }

    pub fn crafts_bottom(self) -> bool {
        matches!(self, AttackKind::Misa | AttackKind::MisaBottomOnly)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = SflError;

    fn from_str(s: &str) -> Result<Self, SflError> {
        let lower = s.trim().to_ascii_lowercase();
        let alias = match lower.as_str() {
            "clean" => "none",
            "top" | "misa-toponly" | "misa_top" => "misa-top",
            "bottom" | "misa-bottomonly" | "misa_bottom" => "misa-bottom",
            "label-flip" | "labelflip" => "lf",
            other => other,
        };
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| SflError::InvalidArgument(format!("unknown attack `{s}`")))
    }
}

/// What the Min-Sum directions are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionBasis {
    /// The proxy mean model.
    Model,
    /// The proxy mean step away from the broadcast model.
    Update,
}

impl DirectionBasis {
    pub fn name(self) -> &'static str {
        match self {
            DirectionBasis::Model => "model",
            DirectionBasis::Update => "update",
        }
    }
}

impl fmt::Display for DirectionBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DirectionBasis {
    type Err = SflError;

    fn from_str(s: &str) -> Result<Self, SflError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "model" => Ok(DirectionBasis::Model),
            "update" | "delta" => Ok(DirectionBasis::Update),
            other => Err(SflError::InvalidArgument(format!("unknown direction basis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub basis: DirectionBasis,
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub classes: usize,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, classes: usize) -> Self {
        Self {
            kind,
            basis: DirectionBasis::Update,
            lambda: smashed::DEFAULT_LAMBDA,
            tau: minsum::DEFAULT_TAU,
            epsilon: baselines::DEFAULT_IPM_EPSILON,
            classes,
        }
    }
}

/// What the adversary did in one round.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundAttackInfo {
    pub arm: Option<Arm>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone)]
struct PendingReward {
    arm: Arm,
    benign_delta: ParamVector,
}

/// Coordinator for all malicious clients. Owns the bandit state.
#[derive(Debug, Clone)]
pub struct Adversary {
    config: AttackConfig,
    bandit: BanditState,
    bandit_rng: CounterRng,
    noise_rng: CounterRng,
    pending: Option<PendingReward>,
    last: RoundAttackInfo,
}

impl Adversary {
    pub fn new(config: AttackConfig, seed: u64) -> Self {
        Self {
            config,
            bandit: BanditState::default(),
            bandit_rng: CounterRng::for_domain(seed, domain::BANDIT, 0),
            noise_rng: CounterRng::for_domain(seed, domain::GAUSSIAN, 0),
            pending: None,
            last: RoundAttackInfo::default(),
        }
    }

    pub fn config(&self) -> &AttackConfig {
        &self.config
    }

    pub fn bandit(&self) -> &BanditState {
        &self.bandit
    }

    /// Information about the most recent round, reset on retrieval.
    pub fn take_round_info(&mut self) -> RoundAttackInfo {
        std::mem::take(&mut self.last)
    }

    fn craft_minsum(&mut self, proxy: &ProxySet, broadcast: &ParamVector) -> Option<ParamVector> {
        let arm = thompson_select(&self.bandit, &mut self.bandit_rng);
        let direction = match self.config.basis {
            DirectionBasis::Model => perturbation_direction(arm, proxy),
            DirectionBasis::Update => update_direction(arm, proxy, broadcast),
        };
        let gamma = match snl_gamma(proxy, &direction, self.config.tau) {
            Ok(g) => g,
            Err(e) => {
                warn!("magnitude search failed ({e}); uploading proxy mean");
                0.0
            }
        };
        self.last.arm = Some(arm);
        self.last.gamma = Some(gamma);
        self.pending = Some(PendingReward {
            arm,
            benign_delta: proxy.mean().sub(broadcast),
        });
        Some(craft_bottom_model(proxy, &direction, gamma))
    }
}

impl RoundHooks for Adversary {
    fn on_smashed(&mut self, _round: usize, batches: &mut [SmashedBatch]) {
        match self.config.kind {
            kind if kind.poisons_smashed() => {
                let stats = SmashedStats::from_batches(batches);
                for b in batches.iter_mut() {
                    *b = poison_smashed(b, &stats, self.config.lambda);
                }
            }
            AttackKind::LabelFlip => {
                for b in batches.iter_mut() {
                    b.labels = label_flip(&b.labels, self.config.classes);
                }
            }
            _ => {}
        }
    }

    fn on_bottom_uploads(&mut self, _round: usize, broadcast: &ParamVector, uploads: &mut [BottomUpdate]) {
        let kind = self.config.kind;
        if !(kind.crafts_bottom() || matches!(kind, AttackKind::Gaussian | AttackKind::Ipm)) {
            return;
        }
        let proxy = match ProxySet::new(uploads.iter().map(|u| u.params.clone()).collect()) {
            Ok(p) => p,
            Err(e) => {
                warn!("cannot build proxy set: {e}");
                return;
            }
        };
        match kind {
            AttackKind::Gaussian => {
                for u in uploads.iter_mut() {
                    u.params = gaussian_update(&proxy, &mut self.noise_rng);
                }
            }
            AttackKind::Ipm => {
                let crafted = ipm_update(&proxy, broadcast, self.config.epsilon);
                for u in uploads.iter_mut() {
                    u.params = crafted.clone();
                }
            }
            _ => {
                if let Some(crafted) = self.craft_minsum(&proxy, broadcast) {
                    for u in uploads.iter_mut() {
                        u.params = crafted.clone();
                    }
                }
            }
        }
    }

    fn on_broadcast(&mut self, _round: usize, previous: &ParamVector, next: &ParamVector) {
        if let Some(p) = self.pending.take() {
            let observed = next.sub(previous);
            self.bandit = bandit_reward_and_update(&self.bandit, p.arm, &observed, &p.benign_delta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn batch(client: usize, values: &[f64], labels: &[usize]) -> SmashedBatch {
        SmashedBatch {
            client,
            activations: Tensor::new(vec![labels.len(), 2], values.to_vec()).unwrap(),
            labels: labels.to_vec(),
        }
    }

    fn uploads() -> Vec<BottomUpdate> {
        vec![
            BottomUpdate { client: 1, params: ParamVector(vec![1.0, 0.0, 2.0]) },
            BottomUpdate { client: 4, params: ParamVector(vec![1.5, -0.5, 2.0]) },
            BottomUpdate { client: 6, params: ParamVector(vec![0.5, 0.5, 3.0]) },
        ]
    }

    #[test]
    fn parse_names() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
        assert_eq!("LF".parse::<AttackKind>().unwrap(), AttackKind::LabelFlip);
        assert!("agrt".parse::<AttackKind>().is_err());
    }

    #[test]
    fn top_only_touches_only_smashed() {
        let mut adv = Adversary::new(AttackConfig::new(AttackKind::MisaTopOnly, 3), 1);
        let mut b = vec![batch(0, &[1.0, 2.0, 3.0, 5.0], &[0, 0])];
        let before = b.clone();
        adv.on_smashed(0, &mut b);
        assert_ne!(b, before);
        assert_eq!(b[0].labels, before[0].labels);
        let mut ups = uploads();
        adv.on_bottom_uploads(0, &ParamVector(vec![1.0, 0.0, 2.0]), &mut ups);
        assert_eq!(ups, uploads());
    }

    #[test]
    fn bottom_only_crafts_identical_uploads() {
        let mut adv = Adversary::new(AttackConfig::new(AttackKind::MisaBottomOnly, 3), 1);
        let mut b = vec![batch(0, &[1.0, 2.0, 3.0, 5.0], &[0, 0])];
        let before = b.clone();
        adv.on_smashed(0, &mut b);
        assert_eq!(b, before);
        let mut ups = uploads();
        let broadcast = ParamVector(vec![1.0, 0.0, 2.0]);
        adv.on_bottom_uploads(0, &broadcast, &mut ups);
        assert!(ups.windows(2).all(|w| w[0].params == w[1].params));
        let proxy = ProxySet::new(uploads().into_iter().map(|u| u.params).collect()).unwrap();
        assert!(minsum_feasible(&ups[0].params, &proxy));
        let info = adv.take_round_info();
        assert!(info.arm.is_some() && info.gamma.unwrap() > 0.0);
        adv.on_broadcast(0, &broadcast, &ParamVector(vec![0.0, 0.0, 0.0]));
        let total: f64 = adv.bandit().arms.iter().map(|p| p.a + p.b).sum();
        assert!((total - 7.0).abs() < 1e-12);
    }

    #[test]
    fn label_flip_hook() {
        let mut adv = Adversary::new(AttackConfig::new(AttackKind::LabelFlip, 3), 1);
        let mut b = vec![batch(2, &[1.0, 2.0, 3.0, 5.0], &[0, 2])];
        adv.on_smashed(0, &mut b);
        assert_eq!(b[0].labels, vec![2, 0]);
    }
}
