use proptest::prelude::*;

use splitfed::aggregation::{coordinate_median, fed_avg, krum, trimmed_mean, AggregationRule};
use splitfed::attacks::{
    craft_bottom_model, label_flip, minsum_feasible, perturbation_direction, poison_smashed, snl_gamma, Arm,
    BanditState, ProxySet, SmashedStats,
};
use splitfed::harness::ExperimentConfig;
use splitfed::rng::CounterRng;
use splitfed::sfl::SmashedBatch;
use splitfed::tensor::{ParamVector, Tensor};

fn updates(max_n: usize, max_dim: usize) -> impl Strategy<Value = Vec<ParamVector>> {
    (1..=max_n, 1..=max_dim).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(-50.0..50.0f64, d).prop_map(ParamVector), n)
    })
}

fn coordinate_bounds(ups: &[ParamVector], out: &ParamVector) -> bool {
    (0..out.len()).all(|c| {
        let lo = ups.iter().map(|u| u.0[c]).fold(f64::INFINITY, f64::min);
        let hi = ups.iter().map(|u| u.0[c]).fold(f64::NEG_INFINITY, f64::max);
        out.0[c] >= lo - 1e-9 && out.0[c] <= hi + 1e-9
    })
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0))
}

proptest! {
    #[test]
    fn robust_rules_stay_in_the_coordinate_hull(ups in updates(9, 6), beta in 0.0..0.49f64) {
        prop_assert!(coordinate_bounds(&ups, &coordinate_median(&ups).unwrap()));
        prop_assert!(coordinate_bounds(&ups, &trimmed_mean(&ups, beta).unwrap()));
        prop_assert!(coordinate_bounds(&ups, &fed_avg(&ups, None).unwrap()));
    }

    #[test]
    fn median_and_trmean_ignore_order(ups in updates(9, 4), seed in any::<u64>()) {
        let mut shuffled = ups.clone();
        CounterRng::new(seed, 0).shuffle(&mut shuffled);
        prop_assert_eq!(coordinate_median(&ups).unwrap(), coordinate_median(&shuffled).unwrap());
        let (a, b) = (trimmed_mean(&ups, 0.2).unwrap(), trimmed_mean(&shuffled, 0.2).unwrap());
        prop_assert!(close(&a.0, &b.0));
    }

    #[test]
    fn krum_returns_an_input(ups in updates(9, 4)) {
        prop_assume!(ups.len() >= 3);
        let m = (ups.len() - 3).min(2);
        let (v, i) = krum(&ups, m).unwrap();
        prop_assert_eq!(&v, &ups[i]);
    }

    #[test]
    fn unanimous_inputs_are_fixed_points(v in prop::collection::vec(-5.0..5.0f64, 1..6), n in 3usize..8) {
        let ups = vec![ParamVector(v.clone()); n];
        for rule in [
            AggregationRule::FedAvg,
            AggregationRule::Median,
            AggregationRule::TrimmedMean { beta: 0.2 },
            AggregationRule::Krum { assumed: n - 3 },
        ] {
            let out = rule.aggregate(&ups).unwrap().vector;
            match rule {
                AggregationRule::Median | AggregationRule::Krum { .. } => prop_assert_eq!(&out.0, &v),
                _ => prop_assert!(close(&out.0, &v)),
            }
        }
    }

    #[test]
    fn minsum_spread_identity_and_monotonicity(ups in updates(7, 8), g1 in 0.0..5.0f64, g2 in 0.0..5.0f64) {
        prop_assume!(ups.len() >= 2);
        let proxy = ProxySet::new(ups).unwrap();
        let dir = perturbation_direction(Arm::InverseStd, &proxy);
        prop_assume!(dir.norm() > 0.0);
        let base = proxy.spread_of(proxy.mean());
        let n = proxy.len() as f64;
        for g in [g1, g2] {
            let lhs = proxy.spread_of(&craft_bottom_model(&proxy, &dir, g));
            let rhs = base + n * g * g * dir.dot(&dir);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
        }
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        if minsum_feasible(&craft_bottom_model(&proxy, &dir, hi), &proxy) {
            prop_assert!(minsum_feasible(&craft_bottom_model(&proxy, &dir, lo), &proxy));
        }
        prop_assert_eq!(craft_bottom_model(&proxy, &dir, 0.0), proxy.mean().clone());
        let gamma = snl_gamma(&proxy, &dir, 0.01).unwrap();
        prop_assert!(gamma >= 0.0);
        prop_assert!(minsum_feasible(&craft_bottom_model(&proxy, &dir, gamma), &proxy));
    }

    #[test]
    fn poisoning_preserves_shape_and_labels(
        values in prop::collection::vec(0.0..3.0f64, 12),
        labels in prop::collection::vec(0usize..3, 4),
    ) {
        let batch = SmashedBatch {
            client: 0,
            activations: Tensor::new(vec![4, 3], values).unwrap(),
            labels: labels.clone(),
        };
        let stats = SmashedStats::from_batches(std::slice::from_ref(&batch));
        let out = poison_smashed(&batch, &stats, 0.05);
        prop_assert_eq!(out.activations.shape(), batch.activations.shape());
        prop_assert_eq!(&out.labels, &labels);
        for (i, &y) in labels.iter().enumerate() {
            if stats.get(y).unwrap().std.iter().any(|&s| s > 0.0) {
                prop_assert_ne!(out.activations.sample(i), batch.activations.sample(i));
            }
        }
    }

    #[test]
    fn bandit_posteriors_stay_valid(rewards in prop::collection::vec((0usize..3, -2.0..3.0f64), 0..200)) {
        let mut b = BanditState::default();
        for (arm, r) in rewards {
            b.update(Arm::ALL[arm], r);
        }
        prop_assert!(b.arms.iter().all(|p| p.is_valid()));
    }

    #[test]
    fn label_flip_is_an_involution(labels in prop::collection::vec(0usize..10, 0..50)) {
        prop_assert_eq!(label_flip(&label_flip(&labels, 10), 10), labels);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), alpha in 0.01..100.0f64, ratio in 0.0..1.0f64) {
        let mut cfg = ExperimentConfig::desk();
        cfg.seed = seed;
        cfg.alpha = alpha;
        cfg.set("ratio", &ratio.to_string()).unwrap();
        let mut back = ExperimentConfig::desk();
        back.apply_text(&cfg.to_config_text()).unwrap();
        prop_assert_eq!(back.fingerprint(), cfg.fingerprint());
        prop_assert_eq!(back, cfg);
    }
}
