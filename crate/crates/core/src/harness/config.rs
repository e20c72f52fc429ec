//! Experiment configuration: flat `key = value` files, overrides, validation
//! and a stable fingerprint.
//!
//! Recognized keys (defaults are the desk profile):
//!
//! | key            | default   | meaning                                          |
//! |----------------|-----------|--------------------------------------------------|
//! | `seed`         | 1         | master seed for data, partition, init, attacks    |
//! | `clients`      | 20        | K                                                |
//! | `attackers`    | 4         | M (overridden by `ratio`)                        |
//! | `ratio`        | -         | M = round(ratio * K)                             |
//! | `rounds`       | 100       | training rounds                                  |
//! | `eta`          | 0.05      | learning rate for both sub-models                |
//! | `batch`        | 32        | minibatch per client per round                   |
//! | `model`        | mlp       | `mlp` or `cnn-mini`                              |
//! | `split`        | V1        | cut after the i-th conv (or hidden dense) block   |
//! | `dataset`      | blobs     | `blobs` or a path to an `SFLD` file              |
//! | `samples`      | 4000      | blobs: sample count                              |
//! | `features`     | 64        | blobs: feature dimension                         |
//! | `classes`      | 10        | blobs: class count                               |
//! | `spread`       | 1.5       | blobs: per-coordinate noise scale                |
//! | `test_fraction`| 0.2       | stratified hold-out share                        |
//! | `alpha`        | 1.0       | Dirichlet concentration                          |
//! | `agr`          | median    | `fedavg`, `median`, `krum[:m]`, `trmean[:beta]`  |
//! | `attack`       | none      | `none misa misa-top misa-bottom lf gaussian ipm` |
//! | `lambda`       | 0.05      | smashed-data mixing weight                       |
//! | `tau`          | 0.01      | magnitude-search resolution                      |
//! | `epsilon`      | 0.5       | IPM scale                                        |
//! | `basis`        | update    | Min-Sum directions from `update` or `model`      |
//! | `workers`      | 1         | threads (never affects results)                  |
//! | `out`          | -         | metrics CSV path                                 |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::AggregationRule;
use crate::attacks::{AttackConfig, AttackKind, DirectionBasis};
use crate::error::{Result, SflError};
use crate::nn::{ModelKind, SplitPosition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    Blobs {
        samples: usize,
        features: usize,
        classes: usize,
        spread: f64,
    },
    ImageSet(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub attackers: usize,
    pub rounds: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub model: ModelKind,
    pub split: SplitPosition,
    pub dataset: DatasetSpec,
    pub test_fraction: f64,
    pub alpha: f64,
    pub rule: AggregationRule,
    pub attack: AttackKind,
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub basis: DirectionBasis,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// K=20, M=4, 100 rounds, synthetic blobs, Median.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            clients: 20,
            attackers: 4,
            rounds: 100,
            eta: 0.05,
            batch_size: 32,
            model: ModelKind::Mlp,
            split: SplitPosition(1),
            dataset: DatasetSpec::Blobs {
                samples: 4000,
                features: 64,
                classes: 10,
                spread: 1.5,
            },
            test_fraction: 0.2,
            alpha: 1.0,
            rule: AggregationRule::Median,
            attack: AttackKind::None,
            lambda: crate::attacks::smashed::DEFAULT_LAMBDA,
            tau: crate::attacks::minsum::DEFAULT_TAU,
            epsilon: crate::attacks::baselines::DEFAULT_IPM_EPSILON,
            basis: DirectionBasis::Update,
            workers: 1,
            out: None,
        }
    }

    /// K=100, M=20, 200 rounds.
    pub fn full_scale() -> Self {
        Self {
            clients: 100,
            attackers: 20,
            rounds: 200,
            ..Self::desk()
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSpec::Blobs { classes, .. } => Some(*classes),
            DatasetSpec::ImageSet(_) => None,
        }
    }

    pub fn attack_config(&self, classes: usize) -> AttackConfig {
        AttackConfig {
            kind: self.attack,
            basis: self.basis,
            lambda: self.lambda,
            tau: self.tau,
            epsilon: self.epsilon,
            classes,
        }
    }

    /// Parses a flat key-value file on top of the desk defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::desk();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pending_ratio = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SflError::config(&format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "ratio" {
                pending_ratio = Some(value.to_string());
            } else {
                self.set(key, value)?;
            }
        }
        if let Some(r) = pending_ratio {
            self.set("ratio", &r)?;
        }
        Ok(())
    }

    /// Sets a single field by its key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| SflError::config(key, format!("cannot parse `{value}`")))
        }
        let blobs = |cfg: &mut Self| -> Result<(usize, usize, usize, f64)> {
            match &cfg.dataset {
                DatasetSpec::Blobs {
                    samples,
                    features,
                    classes,
                    spread,
                } => Ok((*samples, *features, *classes, *spread)),
                DatasetSpec::ImageSet(_) => Err(SflError::config(key, "only valid with `dataset = blobs`")),
            }
        };
        match key {
            "seed" => self.seed = num(key, value)?,
            "clients" | "k" => self.clients = num(key, value)?,
            "attackers" | "m" => self.attackers = num(key, value)?,
            "ratio" => {
                let r: f64 = num(key, value)?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(SflError::config(key, format!("{r} outside [0, 1]")));
                }
                self.attackers = (r * self.clients as f64).round() as usize;
            }
            "rounds" => self.rounds = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "batch" | "batch_size" => self.batch_size = num(key, value)?,
            "model" => self.model = value.parse().map_err(|e: SflError| SflError::config(key, e.to_string()))?,
            "split" => self.split = value.parse().map_err(|e: SflError| SflError::config(key, e.to_string()))?,
            "dataset" => {
                self.dataset = if value == "blobs" {
                    match self.dataset {
                        DatasetSpec::Blobs { .. } => self.dataset.clone(),
                        DatasetSpec::ImageSet(_) => Self::desk().dataset,
                    }
                } else {
                    DatasetSpec::ImageSet(PathBuf::from(value))
                }
            }
            "samples" | "features" | "classes" | "spread" => {
                let (mut samples, mut features, mut classes, mut spread) = blobs(self)?;
                match key {
                    "samples" => samples = num(key, value)?,
                    "features" => features = num(key, value)?,
                    "classes" => classes = num(key, value)?,
                    _ => spread = num(key, value)?,
                }
                self.dataset = DatasetSpec::Blobs {
                    samples,
                    features,
                    classes,
                    spread,
                };
            }
            "test_fraction" => self.test_fraction = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "agr" | "rule" => {
                self.rule = value
                    .parse::<AggregationRule>()
                    .map_err(|e| SflError::config(key, e.to_string()))?
            }
            "attack" => self.attack = value.parse().map_err(|e: SflError| SflError::config(key, e.to_string()))?,
            "lambda" => self.lambda = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "basis" => self.basis = value.parse().map_err(|e: SflError| SflError::config(key, e.to_string()))?,
            "workers" => self.workers = num(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "profile" => match value {
                "desk" => *self = Self { out: self.out.take(), ..Self::desk() },
                "full" => {
                    self.clients = 100;
                    self.attackers = 20;
                    self.rounds = 200;
                }
                other => return Err(SflError::config(key, format!("unknown profile `{other}`"))),
            },
            other => return Err(SflError::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Aggregation rule with Krum/TrMean parameters resolved against K.
    pub fn resolved_rule(&self) -> AggregationRule {
        self.rule.with_defaults(self.clients)
    }

    /// Field-level checks run before any computation.
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(SflError::config(field, msg));
        if self.clients == 0 {
            return err("clients", "must be >= 1".into());
        }
        if self.attackers > self.clients {
            return err("attackers", format!("{} exceeds clients {}", self.attackers, self.clients));
        }
        if self.rounds == 0 {
            return err("rounds", "must be >= 1".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return err("eta", format!("{} is not a finite nonnegative rate", self.eta));
        }
        if self.batch_size == 0 {
            return err("batch", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return err("test_fraction", format!("{} outside (0, 1)", self.test_fraction));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return err("alpha", format!("{} must be > 0", self.alpha));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return err("lambda", format!("{} outside (0, 1]", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return err("tau", format!("{} must be > 0", self.tau));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return err("epsilon", format!("{} must be >= 0", self.epsilon));
        }
        if self.workers == 0 {
            return err("workers", "must be >= 1".into());
        }
        let positions = self.model.split_positions();
        if self.split.0 == 0 || self.split.0 > positions {
            return err("split", format!("{} not in V1..V{positions} for {}", self.split, self.model));
        }
        if let DatasetSpec::Blobs {
            samples,
            features,
            classes,
            spread,
        } = self.dataset
        {
            if classes < 2 {
                return err("classes", "need at least 2 classes".into());
            }
            if samples < classes {
                return err("samples", format!("{samples} < classes {classes}"));
            }
            if features == 0 {
                return err("features", "must be >= 1".into());
            }
            if !(spread >= 0.0 && spread.is_finite()) {
                return err("spread", format!("{spread} must be >= 0"));
            }
            if self.model == ModelKind::CnnMini {
                let side = (features as f64).sqrt().round() as usize;
                if side * side != features {
                    return err("features", format!("cnn-mini needs a square feature count, got {features}"));
                }
            }
        }
        let rule = self.resolved_rule();
        if let Err(e) = rule.validate() {
            return err("agr", e.to_string());
        }
        if let AggregationRule::Krum { assumed } = rule {
            if self.clients < assumed + 3 {
                return err("agr", format!("krum needs clients >= m + 3 (m = {assumed})"));
            }
        }
        if let AggregationRule::TrimmedMean { beta } = rule {
            let trim = (beta * self.clients as f64).floor() as usize;
            if self.clients < 2 * trim + 1 {
                return err("agr", format!("trimmed mean with beta {beta} over-trims {} clients", self.clients));
            }
        }
        if self.attack != AttackKind::None && self.attackers == 0 {
            return err("attackers", format!("attack `{}` needs at least one attacker", self.attack));
        }
        Ok(())
    }

    /// Canonical key-value map of everything that affects results.
    pub fn canonical(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        m.insert("clients", self.clients.to_string());
        m.insert("attackers", self.attackers.to_string());
        m.insert("rounds", self.rounds.to_string());
        m.insert("eta", format!("{:?}", self.eta));
        m.insert("batch", self.batch_size.to_string());
        m.insert("model", self.model.to_string());
        m.insert("split", self.split.to_string());
        match &self.dataset {
            DatasetSpec::Blobs {
                samples,
                features,
                classes,
                spread,
            } => {
                m.insert("dataset", "blobs".to_string());
                m.insert("samples", samples.to_string());
                m.insert("features", features.to_string());
                m.insert("classes", classes.to_string());
                m.insert("spread", format!("{spread:?}"));
            }
            DatasetSpec::ImageSet(p) => {
                m.insert("dataset", p.display().to_string());
            }
        }
        m.insert("test_fraction", format!("{:?}", self.test_fraction));
        m.insert("alpha", format!("{:?}", self.alpha));
        m.insert("agr", self.resolved_rule().to_string());
        m.insert("attack", self.attack.to_string());
        m.insert("lambda", format!("{:?}", self.lambda));
        m.insert("tau", format!("{:?}", self.tau));
        m.insert("epsilon", format!("{:?}", self.epsilon));
        m.insert("basis", self.basis.to_string());
        m
    }

    /// The canonical map rendered as a config file that reproduces this run.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.canonical() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of SHA-256 over the canonical `key=value` lines.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.canonical() {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same configuration without adversaries.
    pub fn clean_counterpart(&self) -> Self {
        Self {
            attack: AttackKind::None,
            attackers: 0,
            lambda: Self::desk().lambda,
            tau: Self::desk().tau,
            epsilon: Self::desk().epsilon,
            basis: Self::desk().basis,
            ..self.clone()
        }
    }

    /// Fingerprint ignoring attack-related fields; two runs are comparable
    /// for accuracy drop iff these match.
    pub fn comparison_fingerprint(&self) -> String {
        self.clean_counterpart().fingerprint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let mut cfg = ExperimentConfig::desk();
        cfg.apply_text("seed = 9\nagr = krum # comment\nratio = 0.25\nattack = misa\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.attackers, 5);
        assert_eq!(cfg.resolved_rule(), AggregationRule::Krum { assumed: 4 });
        let mut again = ExperimentConfig::desk();
        again.apply_text(&cfg.to_config_text()).unwrap();
        assert_eq!(again.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn ratio_applies_after_clients_regardless_of_order() {
        let mut cfg = ExperimentConfig::desk();
        cfg.apply_text("ratio = 0.1\nclients = 50").unwrap();
        assert_eq!(cfg.attackers, 5);
    }

    #[test]
    fn fingerprint_ignores_output_and_workers() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.out = Some("x.csv".into());
        b.workers = 4;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 2;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = ExperimentConfig::desk();
        cfg.attackers = 30;
        assert!(matches!(cfg.validate(), Err(SflError::Config { field, .. }) if field == "attackers"));
        let mut cfg = ExperimentConfig::desk();
        cfg.rounds = 0;
        assert!(matches!(cfg.validate(), Err(SflError::Config { field, .. }) if field == "rounds"));
        let mut cfg = ExperimentConfig::desk();
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("alpha", "abc").is_err());
        cfg.model = ModelKind::CnnMini;
        cfg.set("features", "60").unwrap();
        assert!(matches!(cfg.validate(), Err(SflError::Config { field, .. }) if field == "features"));
    }

    #[test]
    fn comparison_ignores_attack_fields() {
        let clean = ExperimentConfig::desk();
        let mut attacked = clean.clone();
        attacked.attack = AttackKind::Misa;
        attacked.lambda = 0.1;
        assert_eq!(clean.comparison_fingerprint(), attacked.comparison_fingerprint());
        attacked.alpha = 0.5;
        assert_ne!(clean.comparison_fingerprint(), attacked.comparison_fingerprint());
    }
}
