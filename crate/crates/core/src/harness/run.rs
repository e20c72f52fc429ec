//! Running one experiment end to end.

use log::info;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationRule;
use crate::attacks::Adversary;
use crate::data::{dirichlet_partition, load_image_set, synth_blobs, train_test_split, Dataset, TrainTest};
use crate::error::{Result, SflError};
use crate::nn::{Model, ModelKind};
use crate::rng::{domain, CounterRng};
use crate::sfl::{RoundReport, Simulation, TrainingParams};

use super::config::{DatasetSpec, ExperimentConfig};
use super::metrics::{MetricsWriter, RoundMetrics};

/// Number of trailing rounds averaged into the final accuracy.
pub const FINAL_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub fingerprint: String,
    pub comparison_fingerprint: String,
    pub metrics: Vec<RoundMetrics>,
    pub final_accuracy: f64,
}

impl RunResult {
    pub fn from_metrics(config: &ExperimentConfig, metrics: Vec<RoundMetrics>) -> Self {
        let final_accuracy = final_accuracy(&metrics);
        Self {
            fingerprint: config.fingerprint(),
            comparison_fingerprint: config.comparison_fingerprint(),
            metrics,
            final_accuracy,
        }
    }
}

/// Mean accuracy over the last [`FINAL_WINDOW`] rounds (all rounds if fewer).
pub fn final_accuracy(metrics: &[RoundMetrics]) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(FINAL_WINDOW)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|m| m.accuracy).sum::<f64>() / tail.len() as f64
}

/// `Acc - Acc_attack`. Rejects runs whose configurations differ in anything
/// other than the attack settings.
pub fn acc_drop(clean: &RunResult, attacked: &RunResult) -> Result<f64> {
    if clean.comparison_fingerprint != attacked.comparison_fingerprint {
        return Err(SflError::InvalidArgument(format!(
            "runs are not comparable: {} vs {}",
            clean.comparison_fingerprint, attacked.comparison_fingerprint
        )));
    }
    Ok(clean.final_accuracy - attacked.final_accuracy)
}

/// Loads the dataset and shapes samples for the configured model.
pub fn prepare_data(config: &ExperimentConfig) -> Result<TrainTest> {
    let data = match &config.dataset {
        DatasetSpec::Blobs {
            samples,
            features,
            classes,
            spread,
        } => synth_blobs(config.seed, *samples, *features, *classes, *spread)?,
        DatasetSpec::ImageSet(path) => load_image_set(path)?,
    };
    let data = shape_for(config.model, data)?;
    train_test_split(&data, config.test_fraction, config.seed)
}

fn shape_for(model: ModelKind, data: Dataset) -> Result<Dataset> {
    let shape = data.sample_shape().to_vec();
    let len: usize = shape.iter().product();
    match (model, shape.len()) {
        (ModelKind::Mlp, 1) | (ModelKind::CnnMini, 3) => Ok(data),
        (ModelKind::Mlp, _) => data.reshape_samples(&[len]),
        (ModelKind::CnnMini, 1) => {
            let side = (len as f64).sqrt().round() as usize;
            if side * side != len {
                return Err(SflError::config("features", format!("{len} is not a square")));
            }
            data.reshape_samples(&[1, side, side])
        }
        (ModelKind::CnnMini, _) => Err(SflError::InvalidDataset(format!(
            "cnn-mini cannot use samples of shape {shape:?}"
        ))),
    }
}

/// Picks `attackers` distinct client ids from the role stream.
pub fn malicious_roles(seed: u64, clients: usize, attackers: usize) -> Vec<bool> {
    let mut rng = CounterRng::for_domain(seed, domain::ROLES, 0);
    let ids: Vec<usize> = (0..clients).collect();
    let mut flags = vec![false; clients];
    for id in rng.sample_without_replacement(&ids, attackers) {
        flags[id] = true;
    }
    flags
}

fn rule_label(rule: &AggregationRule, report: &RoundReport) -> String {
    match rule {
        AggregationRule::Krum { .. } => {
            let id = |s: Option<usize>| s.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            format!("krum[top={};bottom={}]", id(report.top_selected), id(report.bottom_selected))
        }
        other => other.name().to_string(),
    }
}

/// Runs `config` on a thread pool of `config.workers` threads.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| SflError::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| run_in_current_pool(config))
}

/// Runs `config` on whatever rayon pool is current.
pub fn run_in_current_pool(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let fingerprint = config.fingerprint();
    let TrainTest { train, test } = prepare_data(config)?;
    let classes = train.classes();
    let partition = dirichlet_partition(train.labels(), config.clients, config.alpha, config.seed)?;
    let mut init = CounterRng::for_domain(config.seed, domain::INIT, 0);
    let model = Model::build(config.model, train.sample_shape(), classes, &mut init)?;
    let split = model.split_at(config.split)?;
    let malicious = malicious_roles(config.seed, config.clients, config.attackers);
    let rule = config.resolved_rule();
    let mut sim = Simulation::new(
        split,
        train,
        &partition,
        &malicious,
        TrainingParams {
            rule,
            eta: config.eta,
            batch_size: config.batch_size,
            seed: config.seed,
        },
    )?;
    let mut adversary = Adversary::new(config.attack_config(classes), config.seed);
    let mut writer = config
        .out
        .as_ref()
        .map(|p| MetricsWriter::create(p, &fingerprint))
        .transpose()?;

    let mut metrics = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let report = sim.step(&mut adversary)?;
        let attack = adversary.take_round_info();
        let eval = sim.evaluate(&test)?;
        let row = RoundMetrics {
            round: report.round,
            accuracy: eval.accuracy,
            loss: eval.loss,
            arm: attack.arm.map(|a| a.name().to_string()),
            gamma: attack.gamma,
            rule: rule_label(&rule, &report),
        };
        if let Some(w) = writer.as_mut() {
            w.write(&row)?;
        }
        metrics.push(row);
    }
    let result = RunResult::from_metrics(config, metrics);
    info!(
        "run {fingerprint}: attack={} final accuracy {:.4}",
        config.attack, result.final_accuracy
    );
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackKind;

    fn result(acc: &[f64], config: &ExperimentConfig) -> RunResult {
        let metrics = acc
            .iter()
            .enumerate()
            .map(|(round, &accuracy)| RoundMetrics {
                round,
                accuracy,
                loss: 0.0,
                arm: None,
                gamma: None,
                rule: "median".into(),
            })
            .collect();
        RunResult::from_metrics(config, metrics)
    }

    #[test]
    fn final_accuracy_averages_last_five() {
        let cfg = ExperimentConfig::desk();
        let r = result(&[0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 1.0], &cfg);
        assert!((r.final_accuracy - 0.6).abs() < 1e-15);
        assert_eq!(result(&[0.25, 0.75], &cfg).final_accuracy, 0.5);
    }

    #[test]
    fn acc_drop_examples() {
        let clean_cfg = ExperimentConfig::desk();
        let mut attacked_cfg = clean_cfg.clone();
        attacked_cfg.attack = AttackKind::Misa;
        let clean = result(&[0.7279], &clean_cfg);
        let attacked = result(&[0.3493], &attacked_cfg);
        assert!((acc_drop(&clean, &attacked).unwrap() - 0.3786).abs() < 1e-12);
        assert_eq!(acc_drop(&clean, &clean).unwrap(), 0.0);
        assert_eq!(
            acc_drop(&clean, &attacked).unwrap(),
            -acc_drop(&attacked, &clean).unwrap()
        );
        let mut other = clean_cfg.clone();
        other.alpha = 100.0;
        assert!(acc_drop(&clean, &result(&[0.5], &other)).is_err());
    }

    #[test]
    fn roles_are_seeded_and_counted() {
        let a = malicious_roles(3, 20, 4);
        assert_eq!(a.iter().filter(|&&m| m).count(), 4);
        assert_eq!(a, malicious_roles(3, 20, 4));
        assert!(malicious_roles(3, 20, 0).iter().all(|&m| !m));
    }

    #[test]
    fn cnn_reshape() {
        let data = synth_blobs(1, 20, 64, 2, 0.1).unwrap();
        assert_eq!(shape_for(ModelKind::CnnMini, data.clone()).unwrap().sample_shape(), &[1, 8, 8]);
        assert_eq!(shape_for(ModelKind::Mlp, data).unwrap().sample_shape(), &[64]);
    }
}
