//! Oracle suites that can run inside a release binary.
//!
//! Each check recomputes a library result by an independent route (brute
//! force, finite differences, closed form, the unsplit model) and reports
//! the worst discrepancy it saw.

use std::time::Instant;

use crate::aggregation::{coordinate_median, fed_avg, krum, trimmed_mean};
use crate::attacks::{
    craft_bottom_model, minsum_feasible, perturbation_direction, snl_gamma, thompson_select, Arm, BanditState,
    ProxySet,
};
use crate::error::Result;
use crate::nn::{self, Layer, Model, SplitModel, SplitPosition};
use crate::rng::CounterRng;
use crate::tensor::{ParamVector, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Worst observed discrepancy (or the statistic the check gates on).
    pub metric: f64,
    pub seconds: f64,
}

impl Check {
    fn new(name: &'static str, passed: bool, metric: f64, detail: String, started: Instant) -> Self {
        Self {
            name,
            passed,
            detail,
            metric,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Rank of `x[j]` with ties broken by index.
fn rank(x: &[f64], j: usize) -> usize {
    (0..x.len())
        .filter(|&i| x[i] < x[j] || (x[i] == x[j] && i < j))
        .count()
}

fn column(updates: &[ParamVector], c: usize) -> Vec<f64> {
    updates.iter().map(|u| u.0[c]).collect()
}

fn value_at_rank(x: &[f64], r: usize) -> f64 {
    x[(0..x.len()).find(|&j| rank(x, j) == r).expect("ranks are a permutation")]
}

pub fn brute_median(updates: &[ParamVector]) -> ParamVector {
    let n = updates.len();
    ParamVector(
        (0..updates[0].len())
            .map(|c| {
                let x = column(updates, c);
                if n % 2 == 1 {
                    value_at_rank(&x, n / 2)
                } else {
                    0.5 * (value_at_rank(&x, n / 2 - 1) + value_at_rank(&x, n / 2))
                }
            })
            .collect(),
    )
}

pub fn brute_trimmed_mean(updates: &[ParamVector], beta: f64) -> ParamVector {
    let n = updates.len();
    let trim = (beta * n as f64).floor() as usize;
    ParamVector(
        (0..updates[0].len())
            .map(|c| {
                let x = column(updates, c);
                let kept: Vec<f64> = (0..n)
                    .filter(|&j| (trim..n - trim).contains(&rank(&x, j)))
                    .map(|j| x[j])
                    .collect();
                kept.iter().sum::<f64>() / kept.len() as f64
            })
            .collect(),
    )
}

pub fn brute_mean(updates: &[ParamVector]) -> ParamVector {
    let n = updates.len() as f64;
    ParamVector(
        (0..updates[0].len())
            .map(|c| updates.iter().map(|u| u.0[c] / n).sum())
            .collect(),
    )
}

/// Krum by enumerating every neighbor subset of size `n - m - 2`.
pub fn brute_krum(updates: &[ParamVector], m: usize) -> usize {
    let n = updates.len();
    let k = n - m - 2;
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut score = f64::INFINITY;
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let s: f64 = others
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, &j)| {
                    updates[i]
                        .0
                        .iter()
                        .zip(&updates[j].0)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum();
            score = score.min(s);
        }
        if score < best.0 {
            best = (score, i);
        }
    }
    best.1
}

fn random_updates(rng: &mut CounterRng, n: usize, dim: usize) -> Vec<ParamVector> {
    // a coarse grid half of the time so ties are exercised
    let grid = rng.uniform() < 0.5;
    (0..n)
        .map(|_| {
            ParamVector(
                (0..dim)
                    .map(|_| {
                        let v = 3.0 * rng.normal();
                        if grid {
                            v.round()
                        } else {
                            v
                        }
                    })
                    .collect(),
            )
        })
        .collect()
}

/// FedAvg, Median, TrMean and Krum against brute force on `instances`
/// random inputs with `n <= 7`, `dim <= 5`.
pub fn aggregator_oracle(instances: usize, seed: u64) -> Check {
    let started = Instant::now();
    let mut rng = CounterRng::new(seed, 0xA66);
    let mut worst = 0.0f64;
    let mut krum_mismatch = 0;
    let vec_err = |a: &ParamVector, b: &ParamVector| {
        a.0.iter().zip(&b.0).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
    };
    for _ in 0..instances {
        let n = 1 + rng.below(7);
        let dim = 1 + rng.below(5);
        let ups = random_updates(&mut rng, n, dim);
        worst = worst.max(vec_err(&fed_avg(&ups, None).unwrap(), &brute_mean(&ups)));
        worst = worst.max(vec_err(&coordinate_median(&ups).unwrap(), &brute_median(&ups)));
        let beta = 0.49 * rng.uniform();
        worst = worst.max(vec_err(&trimmed_mean(&ups, beta).unwrap(), &brute_trimmed_mean(&ups, beta)));
        if n >= 3 {
            let m = rng.below(n - 2);
            let (v, idx) = krum(&ups, m).unwrap();
            let want = brute_krum(&ups, m);
            if idx != want || v != ups[want] {
                krum_mismatch += 1;
            }
        }
    }
    let passed = worst <= 1e-12 && krum_mismatch == 0;
    Check::new(
        "aggregator oracle",
        passed,
        worst,
        format!("{instances} instances, max rel err {worst:.2e}, krum mismatches {krum_mismatch}"),
        started,
    )
}

fn dense(rng: &mut CounterRng, out: usize, inp: usize) -> Layer {
    let w = (0..out * inp).map(|_| 0.5 * rng.normal()).collect();
    let b = (0..out).map(|_| 0.1 * rng.normal()).collect();
    Layer::dense(Tensor::new(vec![out, inp], w).unwrap(), Tensor::new(vec![out], b).unwrap()).unwrap()
}

fn conv(rng: &mut CounterRng, out: usize, inp: usize) -> Layer {
    let w = (0..out * inp * 9).map(|_| 0.4 * rng.normal()).collect();
    let b = (0..out).map(|_| 0.1 * rng.normal()).collect();
    Layer::conv2d(Tensor::new(vec![out, inp, 3, 3], w).unwrap(), Tensor::new(vec![out], b).unwrap()).unwrap()
}

/// The mlp layout at reduced width: `6 -> 12 -> 8 -> 3`.
pub fn small_mlp(seed: u64) -> Model {
    let mut rng = CounterRng::new(seed, 0x317);
    let layers = vec![
        dense(&mut rng, 12, 6),
        Layer::Relu,
        dense(&mut rng, 8, 12),
        Layer::Relu,
        dense(&mut rng, 3, 8),
    ];
    Model::from_layers(layers, vec![6]).unwrap()
}

/// The cnn-mini layout (four conv+ReLU blocks, GAP, dense) at reduced
/// channel counts on 1x5x5 inputs.
pub fn small_cnn(seed: u64) -> Model {
    let mut rng = CounterRng::new(seed, 0xC44);
    let mut layers = Vec::new();
    let mut inp = 1;
    for out in [3, 4, 4, 5] {
        layers.push(conv(&mut rng, out, inp));
        layers.push(Layer::Relu);
        inp = out;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(dense(&mut rng, 3, inp));
    Model::from_layers(layers, vec![1, 5, 5]).unwrap()
}

fn random_batch(rng: &mut CounterRng, shape: &[usize], batch: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    let len: usize = full.iter().product();
    let x = Tensor::new(full, (0..len).map(|_| rng.normal()).collect()).unwrap();
    let y = (0..batch).map(|_| rng.below(classes)).collect();
    (x, y)
}

fn mean_loss(layers: &[Layer], x: &Tensor, y: &[usize]) -> f64 {
    let logits = nn::predict(layers, x).unwrap();
    nn::softmax_cross_entropy(&logits, y).unwrap().0
}

/// Worst relative error between analytic and central-difference gradients
/// over every top parameter, bottom parameter and smashed coordinate.
pub fn gradient_fd_error(split: &SplitModel, x: &Tensor, y: &[usize], h: f64) -> Result<f64> {
    let bottom = split.bottom().to_vec();
    let top = split.top().to_vec();
    let (smashed, _) = nn::forward(&bottom, x)?;
    let tg = nn::loss_and_grads_top(&top, &smashed, y)?;
    let gb = nn::grads_bottom(&bottom, x, &tg.smashed)?;
    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-7);
    let mut worst = 0.0f64;

    let wt = nn::flatten(&top);
    for i in 0..wt.len() {
        let probe = |d: f64| {
            let mut p = wt.clone();
            p.0[i] += d;
            mean_loss(&nn::with_params(&top, &p).unwrap(), &smashed, y)
        };
        worst = worst.max(rel(tg.params.0[i], (probe(h) - probe(-h)) / (2.0 * h)));
    }
    let wb = nn::flatten(&bottom);
    for i in 0..wb.len() {
        let probe = |d: f64| {
            let mut p = wb.clone();
            p.0[i] += d;
            let s = nn::predict(&nn::with_params(&bottom, &p).unwrap(), x).unwrap();
            mean_loss(&top, &s, y)
        };
        worst = worst.max(rel(gb.0[i], (probe(h) - probe(-h)) / (2.0 * h)));
    }
    // smashed gradient is of the summed loss
    let batch = y.len() as f64;
    for i in 0..smashed.len() {
        let probe = |d: f64| {
            let mut s = smashed.clone();
            s.data_mut()[i] += d;
            batch * mean_loss(&top, &s, y)
        };
        worst = worst.max(rel(tg.smashed.data()[i], (probe(h) - probe(-h)) / (2.0 * h)));
    }
    Ok(worst)
}

/// Finite-difference check on both zoo layouts at every split position.
pub fn gradient_check(seed: u64) -> Check {
    let started = Instant::now();
    let mut rng = CounterRng::new(seed, 0xFD);
    let mut worst = 0.0f64;
    let mut params = Vec::new();
    for model in [small_mlp(seed), small_cnn(seed)] {
        params.push(nn::param_count(model.layers()));
        let (x, y) = random_batch(&mut rng, model.input_shape(), 4, 3);
        for v in 1..=model.split_positions() {
            let split = model.split_at(SplitPosition(v)).unwrap();
            worst = worst.max(gradient_fd_error(&split, &x, &y, 1e-5).unwrap());
        }
    }
    Check::new(
        "gradient finite differences",
        worst <= 1e-4 && params.iter().all(|&p| p <= 2000),
        worst,
        format!("params {params:?}, max rel err {worst:.2e}"),
        started,
    )
}

/// Loss and gradients of the split pipeline against the unsplit model.
pub fn split_invariance_error(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    let (logits, cache) = nn::forward(model.layers(), x)?;
    let (loss, grad_logits) = nn::softmax_cross_entropy(&logits, y)?;
    let full = nn::backward(model.layers(), &cache, &grad_logits, false)?.params;
    let mut worst = 0.0f64;
    for v in 1..=model.split_positions() {
        let split = model.split_at(SplitPosition(v))?;
        let (smashed, bcache) = nn::forward(split.bottom(), x)?;
        let tg = nn::loss_and_grads_top(split.top(), &smashed, y)?;
        let gb = nn::grads_bottom_cached(split.bottom(), &bcache, &tg.smashed)?;
        worst = worst.max(rel_err(loss, tg.loss));
        let joined = gb.0.iter().chain(&tg.params.0);
        for (a, b) in joined.zip(&full.0) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    Ok(worst)
}

pub fn split_check(seed: u64) -> Check {
    let started = Instant::now();
    let mut rng = CounterRng::new(seed, 0x5B1);
    let model = Model::build(nn::ModelKind::CnnMini, &[1, 8, 8], 10, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let (x, y) = random_batch(&mut rng, &[1, 8, 8], 8, 10);
        worst = worst.max(split_invariance_error(&model, &x, &y).unwrap());
    }
    Check::new(
        "split invariance",
        worst <= 1e-12,
        worst,
        format!("cnn-mini V1..V4, max rel err {worst:.2e}"),
        started,
    )
}

/// `sqrt((bound - sum_i |mean - w_i|^2) / (n |dir|^2))`.
pub fn gamma_closed_form(proxy: &ProxySet, direction: &ParamVector) -> f64 {
    let base = proxy.spread_of(proxy.mean());
    let n = proxy.len() as f64;
    ((proxy.bound() - base).max(0.0) / (n * direction.dot(direction))).sqrt()
}

/// SnL against the closed form on random proxy sets.
pub fn snl_check(instances: usize, seed: u64, tau: f64) -> Check {
    let started = Instant::now();
    let mut rng = CounterRng::new(seed, 0x5A1);
    let mut worst_rel = 0.0f64;
    let mut worst_identity = 0.0f64;
    let mut violations = 0;
    for t in 0..instances {
        let n = 2 + rng.below(9);
        let dim = 2 + rng.below(30);
        let scale = (4.0 * rng.normal()).exp();
        let ups: Vec<ParamVector> = (0..n)
            .map(|_| ParamVector((0..dim).map(|_| scale * rng.normal()).collect()))
            .collect();
        let proxy = ProxySet::new(ups).unwrap();
        let dir = perturbation_direction(Arm::ALL[t % 3], &proxy);
        let gamma = snl_gamma(&proxy, &dir, tau).unwrap();
        let star = gamma_closed_form(&proxy, &dir);
        let feasible = minsum_feasible(&craft_bottom_model(&proxy, &dir, gamma), &proxy);
        let over = minsum_feasible(&craft_bottom_model(&proxy, &dir, gamma * (1.0 + 3.0 * tau)), &proxy);
        if !feasible || over {
            violations += 1;
        }
        worst_rel = worst_rel.max((gamma - star).abs() / star);
        let lhs = proxy.spread_of(&craft_bottom_model(&proxy, &dir, gamma));
        let rhs = proxy.spread_of(proxy.mean()) + n as f64 * gamma * gamma * dir.dot(&dir);
        worst_identity = worst_identity.max((lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE));
    }
    let passed = violations == 0 && worst_rel <= 3.0 * tau && worst_identity <= 1e-10;
    Check::new(
        "search-and-locate",
        passed,
        worst_rel,
        format!(
            "{instances} proxy sets, feasibility violations {violations}, max rel gap to closed form {worst_rel:.2e}, identity err {worst_identity:.2e}"
        ),
        started,
    )
}

/// Thompson sampling on Bernoulli arms (0.9 for the first, 0.1 for the
/// rest). Returns the frequency of the best arm over rounds
/// `window.0..window.1`.
pub fn bandit_best_arm_frequency(seed: u64, rounds: usize, window: (usize, usize)) -> f64 {
    let mut bandit = BanditState::default();
    let mut select = CounterRng::new(seed, 0xB1);
    let mut env = CounterRng::new(seed, 0xB2);
    let p = [0.9, 0.1, 0.1];
    let mut hits = 0;
    for t in 0..rounds {
        let arm = thompson_select(&bandit, &mut select);
        let reward = if env.uniform() < p[arm.index()] { 1.0 } else { 0.0 };
        bandit.update(arm, reward);
        if (window.0..window.1).contains(&t) && arm == Arm::InverseUnit {
            hits += 1;
        }
    }
    hits as f64 / (window.1 - window.0) as f64
}

pub fn bandit_check(seed: u64) -> Check {
    let started = Instant::now();
    let f = bandit_best_arm_frequency(seed, 500, (100, 500));
    Check::new(
        "thompson sampling",
        f > 0.8,
        f,
        format!("best arm chosen in {:.1}% of rounds 100-500", 100.0 * f),
        started,
    )
}

/// Every check at the sizes used by `splitfed selftest`.
pub fn run_all() -> Vec<Check> {
    vec![
        aggregator_oracle(1000, 1),
        gradient_check(1),
        split_check(1),
        snl_check(100, 1, crate::attacks::minsum::DEFAULT_TAU),
        bandit_check(1),
    ]
}
