use splitfed::attacks::AttackKind;
use splitfed::harness::{acc_drop, read_metrics, run_experiment, sweep, ExperimentConfig, SweepAxis, SweepSpec};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.apply_text("rounds = 5\nsamples = 600\nclients = 6\nattackers = 2").unwrap();
    cfg
}

#[test]
fn identical_configs_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.attack = AttackKind::Misa;
    let mut outputs = Vec::new();
    for (i, workers) in [1, 1, 4].into_iter().enumerate() {
        cfg.workers = workers;
        cfg.out = Some(dir.path().join(format!("run{i}.csv")));
        run_experiment(&cfg).unwrap();
        outputs.push(std::fs::read(cfg.out.as_ref().unwrap()).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn one_round_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.rounds = 1;
    cfg.out = Some(dir.path().join("one.csv"));
    let result = run_experiment(&cfg).unwrap();
    assert_eq!(result.metrics.len(), 1);
    assert_eq!(read_metrics(cfg.out.as_ref().unwrap()).unwrap(), result.metrics);
}

#[test]
fn metrics_respect_their_invariants() {
    let mut cfg = small();
    cfg.attack = AttackKind::Misa;
    let result = run_experiment(&cfg).unwrap();
    assert_eq!(result.metrics.len(), cfg.rounds);
    for m in &result.metrics {
        assert!((0.0..=1.0).contains(&m.accuracy));
        assert!(m.gamma.unwrap() >= 0.0);
        assert!(m.arm().is_some());
        assert_eq!(m.rule, "median");
    }
}

#[test]
fn krum_rows_record_selections() {
    let mut cfg = small();
    cfg.set("agr", "krum:1").unwrap();
    let result = run_experiment(&cfg).unwrap();
    assert!(result.metrics[0].rule.starts_with("krum[top="));
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.attackers = 7;
    cfg.out = Some(dir.path().join("never.csv"));
    let err = run_experiment(&cfg).unwrap_err().to_string();
    assert!(err.contains("attackers"), "{err}");
    assert!(!cfg.out.unwrap().exists());
}

#[test]
fn acc_drop_of_real_runs() {
    let clean = run_experiment(&small()).unwrap();
    let mut attacked_cfg = small();
    attacked_cfg.attack = AttackKind::Ipm;
    let attacked = run_experiment(&attacked_cfg).unwrap();
    assert_eq!(acc_drop(&clean, &clean).unwrap(), 0.0);
    let d = acc_drop(&clean, &attacked).unwrap();
    assert_eq!(d, clean.final_accuracy - attacked.final_accuracy);
}

#[test]
fn single_value_sweep_is_a_run_pair() {
    let dir = tempfile::tempdir().unwrap();
    let template = small();
    let spec = SweepSpec {
        axis: SweepAxis::Alpha,
        values: vec!["1".into()],
        attacks: vec![AttackKind::Misa],
        replicates: 1,
    };
    let table = sweep(&template, &spec, Some(dir.path())).unwrap();
    assert_eq!(table.cells.len(), 1);

    let clean = run_experiment(&template.clean_counterpart()).unwrap();
    let mut attacked_cfg = template.clone();
    attacked_cfg.attack = AttackKind::Misa;
    let attacked = run_experiment(&attacked_cfg).unwrap();
    assert_eq!(table.cells[0].acc_drop, Some(acc_drop(&clean, &attacked).unwrap()));
    assert_eq!(table.cells[0].attacked_fingerprint.as_deref(), Some(attacked.fingerprint.as_str()));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cells"][0]["attack"], "misa");
    assert!(dir.path().join("table.csv").exists());
    let run_file = dir.path().join("runs").join(format!("{}.csv", attacked.fingerprint));
    assert_eq!(read_metrics(run_file).unwrap(), attacked.metrics);
}

#[test]
fn recorded_cell_config_reproduces_the_run() {
    let template = small();
    let spec = SweepSpec {
        axis: SweepAxis::Ratio,
        values: vec!["0.5".into()],
        attacks: vec![AttackKind::Gaussian],
        replicates: 2,
    };
    let table = sweep(&template, &spec, None).unwrap();
    let cell = &table.cells[1];
    let mut cfg = ExperimentConfig::desk();
    cfg.apply_text(cell.config.as_ref().unwrap()).unwrap();
    let rerun = run_experiment(&cfg).unwrap();
    assert_eq!(Some(rerun.fingerprint.as_str()), cell.attacked_fingerprint.as_deref());
    assert_eq!(Some(rerun.final_accuracy), cell.attacked_accuracy);
}

#[test]
fn honest_training_reaches_target_accuracy() {
    for seed in 1..=3 {
        let mut cfg = ExperimentConfig::desk();
        cfg.seed = seed;
        cfg.attackers = 0;
        let acc = run_experiment(&cfg).unwrap().final_accuracy;
        assert!(acc >= 0.85, "seed {seed}: {acc}");
    }
}
