use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splitfed::aggregation::AggregationRule;
use splitfed::attacks::AttackKind;
use splitfed::harness::{self, ExperimentConfig, SweepAxis, SweepSpec, SweepTable};
use splitfed::selftest;

#[derive(Parser)]
#[command(name = "splitfed", version, about = "Split federated learning poisoning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write per-round metrics.
    Run(Common),
    /// Clean vs attacked runs over one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `split`, `ratio`, `alpha` or `agr`.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated attacks.
        #[arg(long, value_delimiter = ',', default_value = "misa")]
        attacks: Vec<AttackKind>,
        #[arg(long, default_value_t = 3)]
        replicates: usize,
    },
    /// MISA, top-only and bottom-only under each rule.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "krum,trmean,median")]
        rules: Vec<AggregationRule>,
        #[arg(long, default_value_t = 3)]
        replicates: usize,
    },
    /// Runs the built-in oracle checks.
    Selftest,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `desk` (K=20, M=4, 100 rounds) or `full` (K=100, M=20, 200 rounds).
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    agr: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    split: Option<String>,
    /// Attacker share of clients; sets M = round(ratio * K).
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    /// Metrics CSV for `run`, output directory for sweeps.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<String>,
    /// Any other config key, e.g. `--set model=cnn-mini --set spread=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::desk(),
        };
        if let Some(p) = &self.profile {
            cfg.set("profile", p)?;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            if k.trim() != "ratio" {
                cfg.set(k.trim(), v.trim())?;
            }
        }
        let flags = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("attack", self.attack.clone()),
            ("agr", self.agr.clone()),
            ("alpha", self.alpha.clone()),
            ("split", self.split.clone()),
            ("rounds", self.rounds.clone()),
            ("workers", self.workers.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        let set_ratio = self
            .overrides
            .iter()
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| k.trim() == "ratio")
            .map(|(_, v)| v.trim().to_string());
        if let Some(r) = self.ratio.clone().or(set_ratio) {
            cfg.set("ratio", &r)?;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_table(table: &SweepTable, attacks: &[AttackKind]) {
    let mut values: Vec<&str> = Vec::new();
    for c in &table.cells {
        if !values.contains(&c.value.as_str()) {
            values.push(&c.value);
        }
    }
    println!("{:>12} {:>10} {:>12}", table.axis, "attack", "mean drop");
    for v in values {
        for &a in attacks {
            match table.mean_drop(v, a) {
                Some(d) => println!("{v:>12} {:>10} {:>12.4}", a.name(), d),
                None => println!("{v:>12} {:>10} {:>12}", a.name(), "missing"),
            }
        }
    }
    if table.missing() > 0 {
        eprintln!("{} cell(s) failed, see the manifest for errors", table.missing());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.build()?;
            let result = harness::run_experiment(&cfg)?;
            println!("fingerprint {}", result.fingerprint);
            println!("final accuracy {:.4}", result.final_accuracy);
            if let Some(out) = &cfg.out {
                println!("metrics written to {}", out.display());
            }
        }
        Command::Sweep {
            common,
            axis,
            values,
            attacks,
            replicates,
        } => {
            let cfg = common.build()?;
            let spec = SweepSpec {
                axis,
                values: match (values.is_empty(), axis) {
                    (false, _) => values,
                    (true, SweepAxis::Split) => (1..=cfg.model.split_positions()).map(|v| format!("V{v}")).collect(),
                    (true, _) => axis.default_values(),
                },
                attacks: attacks.clone(),
                replicates,
            };
            let table = harness::sweep(&cfg, &spec, cfg.out.as_deref())?;
            print_table(&table, &attacks);
        }
        Command::Ablation {
            common,
            rules,
            replicates,
        } => {
            let cfg = common.build()?;
            let table = harness::ablation(&cfg, &rules, replicates, cfg.out.as_deref())?;
            print_table(
                &table,
                &[AttackKind::Misa, AttackKind::MisaTopOnly, AttackKind::MisaBottomOnly],
            );
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            let mut failed = 0;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
