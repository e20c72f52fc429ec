//! Baseline attacks: label flipping, Gaussian bottom models, and inner
//! product manipulation.

use crate::rng::CounterRng;
use crate::tensor::ParamVector;

use super::minsum::ProxySet;

pub const DEFAULT_IPM_EPSILON: f64 = 0.5;

/// `y -> C - 1 - y`.
pub fn label_flip(labels: &[usize], classes: usize) -> Vec<usize> {
    labels.iter().map(|&y| classes - 1 - y).collect()
}

/// One draw of `N(mean_i, std_i^2)` per coordinate from the proxy statistics.
pub fn gaussian_update(proxy: &ProxySet, rng: &mut CounterRng) -> ParamVector {
    ParamVector(
        proxy
            .mean()
            .0
            .iter()
            .zip(&proxy.std().0)
            .map(|(&m, &s)| if s == 0.0 { m } else { m + s * rng.normal() })
            .collect(),
    )
}

/// `w_broadcast - epsilon * (mean(proxy) - w_broadcast)`.
pub fn ipm_update(proxy: &ProxySet, w_broadcast: &ParamVector, epsilon: f64) -> ParamVector {
    let progress = proxy.mean().sub(w_broadcast);
    w_broadcast.add_scaled(&progress, -epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector(v.to_vec())
    }

    #[test]
    fn flips() {
        assert_eq!(label_flip(&[0, 9, 3], 10), vec![9, 0, 6]);
        let ys: Vec<usize> = (0..10).collect();
        assert_eq!(label_flip(&label_flip(&ys, 10), 10), ys);
    }

    #[test]
    fn gaussian_degenerate_and_seeded() {
        let same = ProxySet::new(vec![pv(&[1.0, -2.0]); 3]).unwrap();
        let mut rng = CounterRng::new(1, 1);
        assert_eq!(gaussian_update(&same, &mut rng), pv(&[1.0, -2.0]));
        let p = ProxySet::new(vec![pv(&[0.0, 1.0]), pv(&[2.0, 3.0])]).unwrap();
        let a = gaussian_update(&p, &mut CounterRng::new(5, 0));
        let b = gaussian_update(&p, &mut CounterRng::new(5, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_mean_within_three_standard_errors() {
        let p = ProxySet::new(vec![pv(&[0.0, 10.0]), pv(&[2.0, 14.0])]).unwrap();
        let mut rng = CounterRng::new(17, 3);
        let n = 10_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let d = gaussian_update(&p, &mut rng);
            sum[0] += d.0[0];
            sum[1] += d.0[1];
        }
        for j in 0..2 {
            let se = p.std().0[j] / (n as f64).sqrt();
            assert!((sum[j] / n as f64 - p.mean().0[j]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn ipm_arithmetic() {
        let p = ProxySet::new(vec![pv(&[1.0, 4.0]), pv(&[3.0, 0.0])]).unwrap();
        let w = pv(&[1.0, 1.0]);
        assert_eq!(ipm_update(&p, &w, 0.0), w);
        assert_eq!(ipm_update(&p, &w, 1.0), pv(&[0.0, 0.0]));
        let up = ipm_update(&p, &w, 0.5);
        let progress = p.mean().sub(&w);
        let ip = up.sub(&w).dot(&progress);
        assert!((ip + 0.5 * progress.dot(&progress)).abs() < 1e-12);
    }
}
