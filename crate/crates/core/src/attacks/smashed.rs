//! Smashed-data poisoning of the top model.

use std::collections::BTreeMap;

use log::warn;

use crate::sfl::SmashedBatch;

/// Multiplier on the per-label standard deviation.
pub const STD_SHIFT: f64 = 1.5;
pub const DEFAULT_LAMBDA: f64 = 0.05;

/// Per-label mean and population standard deviation of every smashed sample
/// the attackers hold this round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SmashedStats {
    per_label: BTreeMap<usize, LabelStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

impl SmashedStats {
    pub fn from_batches(batches: &[SmashedBatch]) -> Self {
        let mut sums: BTreeMap<usize, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for b in batches {
            let len = b.activations.sample_len();
            for (i, &y) in b.labels.iter().enumerate() {
                let entry = sums
                    .entry(y)
                    .or_insert_with(|| (vec![0.0; len], vec![0.0; len], 0));
                for (acc, &v) in entry.0.iter_mut().zip(b.activations.sample(i)) {
                    *acc += v;
                }
                entry.2 += 1;
            }
        }
        for (y, entry) in sums.iter_mut() {
            let n = entry.2 as f64;
            entry.0.iter_mut().for_each(|m| *m /= n);
            for b in batches {
                for (i, _) in b.labels.iter().enumerate().filter(|(_, l)| *l == y) {
                    for ((acc, &v), &m) in entry.1.iter_mut().zip(b.activations.sample(i)).zip(&entry.0) {
                        *acc += (v - m) * (v - m);
                    }
                }
            }
            entry.1.iter_mut().for_each(|s| *s = (*s / n).sqrt());
        }
        Self {
            per_label: sums
                .into_iter()
                .map(|(y, (mean, std, count))| (y, LabelStats { mean, std, count }))
                .collect(),
        }
    }

    pub fn insert(&mut self, label: usize, stats: LabelStats) {
        self.per_label.insert(label, stats);
    }

    pub fn get(&self, label: usize) -> Option<&LabelStats> {
        self.per_label.get(&label)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_label.keys().copied()
    }
}

/// `x -> lambda * x + (1 - lambda) * mean_y - 1.5 * std_y`, per coordinate.
/// Samples whose label has no statistics pass through unchanged.
pub fn poison_smashed(batch: &SmashedBatch, stats: &SmashedStats, lambda: f64) -> SmashedBatch {
    let mut out = batch.clone();
    let len = batch.activations.sample_len();
    for (i, &y) in batch.labels.iter().enumerate() {
        let Some(s) = stats.get(y).filter(|s| s.mean.len() == len) else {
            warn!("client {}: no smashed statistics for label {y}, sample left unpoisoned", batch.client);
            continue;
        };
        let row = out.activations.sample_mut(i);
        for ((x, &m), &d) in row.iter_mut().zip(&s.mean).zip(&s.std) {
            *x = lambda * *x + (1.0 - lambda) * m - STD_SHIFT * d;
        }
    }
    out
}
