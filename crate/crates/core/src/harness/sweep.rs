//! Sweeps over one configuration axis, and the ablation table.
//!
//! Every cell pairs a clean run with an attacked run that differs only in the
//! attack settings. Replicate `r` of a cell uses seed `template.seed + r`, so
//! any cell can be rerun alone from its recorded configuration. Clean runs
//! are shared between cells with the same clean fingerprint.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::AggregationRule;
use crate::attacks::AttackKind;
use crate::error::{Result, SflError};

use super::config::ExperimentConfig;
use super::run::{run_in_current_pool, RunResult};

pub const RATIO_VALUES: [&str; 5] = ["0.05", "0.10", "0.15", "0.20", "0.25"];
pub const ALPHA_VALUES: [&str; 4] = ["0.5", "1", "10", "100"];
pub const SPLIT_VALUES: [&str; 4] = ["V1", "V2", "V3", "V4"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepAxis {
    Split,
    Ratio,
    Alpha,
    Rule,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Split => "split",
            SweepAxis::Ratio => "ratio",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Rule => "agr",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Split => &SPLIT_VALUES,
            SweepAxis::Ratio => &RATIO_VALUES,
            SweepAxis::Alpha => &ALPHA_VALUES,
            SweepAxis::Rule => &["krum", "trmean", "median"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    pub fn apply(self, template: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = template.clone();
        cfg.set(self.name(), value)?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = SflError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "split" => Ok(SweepAxis::Split),
            "ratio" => Ok(SweepAxis::Ratio),
            "alpha" => Ok(SweepAxis::Alpha),
            "agr" | "rule" => Ok(SweepAxis::Rule),
            other => Err(SflError::InvalidArgument(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub attacks: Vec<AttackKind>,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub value: String,
    pub attack: String,
    pub replicate: usize,
    pub seed: u64,
    pub clean_fingerprint: Option<String>,
    pub attacked_fingerprint: Option<String>,
    pub clean_accuracy: Option<f64>,
    pub attacked_accuracy: Option<f64>,
    pub acc_drop: Option<f64>,
    pub error: Option<String>,
    /// Reproduces the attacked run via `--config`.
    pub config: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: String,
    pub template_fingerprint: String,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// Mean accuracy drop over the replicates that completed.
    pub fn mean_drop(&self, value: &str, attack: AttackKind) -> Option<f64> {
        let drops: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.value == value && c.attack == attack.name())
            .filter_map(|c| c.acc_drop)
            .collect();
        (!drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64)
    }

    pub fn mean_clean_accuracy(&self, value: &str) -> Option<f64> {
        let mut seen = BTreeMap::new();
        for c in self.cells.iter().filter(|c| c.value == value) {
            if let (Some(fp), Some(acc)) = (&c.clean_fingerprint, c.clean_accuracy) {
                seen.insert(fp.clone(), acc);
            }
        }
        (!seen.is_empty()).then(|| seen.values().sum::<f64>() / seen.len() as f64)
    }

    pub fn missing(&self) -> usize {
        self.cells.iter().filter(|c| c.acc_drop.is_none()).count()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!(
            "{},attack,replicate,seed,clean_accuracy,attacked_accuracy,acc_drop,clean_fingerprint,attacked_fingerprint,status\n",
            self.axis
        );
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                c.value,
                c.attack,
                c.replicate,
                c.seed,
                opt(c.clean_accuracy),
                opt(c.attacked_accuracy),
                opt(c.acc_drop),
                c.clean_fingerprint.as_deref().unwrap_or(""),
                c.attacked_fingerprint.as_deref().unwrap_or(""),
                if c.error.is_some() { "missing" } else { "ok" }
            ));
        }
        s
    }

    /// Writes `table.csv` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("table.csv"), self.to_csv())?;
        let manifest = serde_json::json!({
            "schema": "sfl-sweep v1",
            "axis": self.axis,
            "template_fingerprint": self.template_fingerprint,
            "cells": self.cells,
        });
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| SflError::InvalidArgument(format!("manifest: {e}")))?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn replicate(config: &ExperimentConfig, r: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed: config.seed.wrapping_add(r as u64),
        out: None,
        ..config.clone()
    }
}

struct Planned {
    value: String,
    attack: AttackKind,
    replicate: usize,
    seed: u64,
    attacked: Result<ExperimentConfig>,
}

fn run_all(
    configs: Vec<(String, ExperimentConfig)>,
    runs_dir: Option<&Path>,
) -> BTreeMap<String, std::result::Result<RunResult, String>> {
    configs
        .into_par_iter()
        .map(|(fp, mut cfg)| {
            cfg.out = runs_dir.map(|d| d.join(format!("{fp}.csv")));
            let outcome = run_in_current_pool(&cfg).map_err(|e| {
                warn!("run {fp} failed: {e}");
                e.to_string()
            });
            (fp, outcome)
        })
        .collect()
}

/// One clean and one attacked run per (value, attack, replicate). Failed
/// cells are kept with `acc_drop = None`.
pub fn sweep(template: &ExperimentConfig, spec: &SweepSpec, out_dir: Option<&Path>) -> Result<SweepTable> {
    if spec.values.is_empty() || spec.attacks.is_empty() || spec.replicates == 0 {
        return Err(SflError::InvalidArgument(
            "sweep needs at least one value, one attack and one replicate".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(template.workers.max(1))
        .build()
        .map_err(|e| SflError::InvalidArgument(format!("thread pool: {e}")))?;
    let runs_dir = out_dir.map(|d| d.join("runs"));

    let mut planned = Vec::new();
    for value in &spec.values {
        for &attack in &spec.attacks {
            for r in 0..spec.replicates {
                let base = replicate(template, r);
                let attacked = spec.axis.apply(&base, value).and_then(|mut cfg| {
                    cfg.attack = attack;
                    cfg.validate()?;
                    Ok(cfg)
                });
                planned.push(Planned {
                    value: value.clone(),
                    attack,
                    replicate: r,
                    seed: base.seed,
                    attacked,
                });
            }
        }
    }

    let mut unique: BTreeMap<String, ExperimentConfig> = BTreeMap::new();
    for p in &planned {
        if let Ok(cfg) = &p.attacked {
            let clean = cfg.clean_counterpart();
            unique.entry(clean.fingerprint()).or_insert(clean);
            unique.entry(cfg.fingerprint()).or_insert_with(|| cfg.clone());
        }
    }
    let results = pool.install(|| run_all(unique.into_iter().collect(), runs_dir.as_deref()));

    let cells = planned
        .into_iter()
        .map(|p| {
            let mut cell = SweepCell {
                value: p.value,
                attack: p.attack.name().to_string(),
                replicate: p.replicate,
                seed: p.seed,
                clean_fingerprint: None,
                attacked_fingerprint: None,
                clean_accuracy: None,
                attacked_accuracy: None,
                acc_drop: None,
                error: None,
                config: None,
            };
            let cfg = match p.attacked {
                Ok(cfg) => cfg,
                Err(e) => {
                    cell.error = Some(e.to_string());
                    return cell;
                }
            };
            let clean_fp = cfg.clean_counterpart().fingerprint();
            let attacked_fp = cfg.fingerprint();
            cell.config = Some(cfg.to_config_text());
            let clean = &results[&clean_fp];
            let attacked = &results[&attacked_fp];
            cell.clean_accuracy = clean.as_ref().ok().map(|r| r.final_accuracy);
            cell.attacked_accuracy = attacked.as_ref().ok().map(|r| r.final_accuracy);
            cell.clean_fingerprint = Some(clean_fp);
            cell.attacked_fingerprint = Some(attacked_fp);
            match (clean, attacked) {
                (Ok(c), Ok(a)) => match super::run::acc_drop(c, a) {
                    Ok(d) => cell.acc_drop = Some(d),
                    Err(e) => cell.error = Some(e.to_string()),
                },
                (Err(e), _) | (_, Err(e)) => cell.error = Some(e.clone()),
            }
            cell
        })
        .collect();

    let table = SweepTable {
        axis: spec.axis.name().to_string(),
        template_fingerprint: template.fingerprint(),
        cells,
    };
    if let Some(dir) = out_dir {
        table.write(dir)?;
    }
    Ok(table)
}

/// Accuracy drop of MISA, top-only and bottom-only under each rule.
pub fn ablation(
    template: &ExperimentConfig,
    rules: &[AggregationRule],
    replicates: usize,
    out_dir: Option<&Path>,
) -> Result<SweepTable> {
    let spec = SweepSpec {
        axis: SweepAxis::Rule,
        values: rules.iter().map(|r| r.with_defaults(template.clients).to_string()).collect(),
        attacks: vec![AttackKind::Misa, AttackKind::MisaTopOnly, AttackKind::MisaBottomOnly],
        replicates,
    };
    sweep(template, &spec, out_dir)
}
