//! Kernel two-sample criticism: unbiased MMD² with a Gaussian RKHS kernel
//! and a permutation-test rejection threshold.

use rand::seq::SliceRandom;

use crate::error::{invalid, Result};
use crate::rng;

/// Outcome of one two-sample test.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdReport {
    pub mmd2: f64,
    pub threshold: f64,
    pub reject: bool,
    pub bandwidth: f64,
    /// Samples per side.
    pub m: usize,
    pub n_permutations: usize,
    pub seed: u64,
}

/// `exp(−‖x − y‖² / (2 h²))`.
pub fn gaussian_rkhs_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> Result<f64> {
    if x.len() != y.len() {
        return invalid(format!("kernel arguments differ in length: {} vs {}", x.len(), y.len()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return invalid(format!("bandwidth must be positive, got {bandwidth}"));
    }
    Ok(rbf(x, y, bandwidth))
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn rbf(x: &[f64], y: &[f64], bandwidth: f64) -> f64 {
    (-sq_dist(x, y) / (2.0 * bandwidth * bandwidth)).exp()
}

fn check_dims(samples: &[&[f64]]) -> Result<()> {
    if let Some(first) = samples.first() {
        if samples.iter().any(|s| s.len() != first.len()) {
            return invalid("all sample vectors must have the same length");
        }
    }
    Ok(())
}

/// Median pairwise Euclidean distance of the pooled sample. Falls back to the
/// mean distance when the median is zero, and to 1 when that is zero too.
pub fn median_bandwidth(pooled: &[Vec<f64>]) -> Result<f64> {
    if pooled.len() < 2 {
        return invalid("median bandwidth needs at least 2 vectors");
    }
    check_dims(&pooled.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(sq_dist(&pooled[i], &pooled[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if median > 0.0 {
        return Ok(median);
    }
    let mean = dists.iter().sum::<f64>() / n as f64;
    Ok(if mean > 0.0 { mean } else { 1.0 })
}

/// Unbiased MMD² between equal-size samples:
/// `1/(m(m−1)) Σ_{i≠j} [k(xᵢ,xⱼ) + k(yᵢ,yⱼ) − k(xᵢ,yⱼ) − k(xⱼ,yᵢ)]`.
/// Can be negative.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    if x.len() != y.len() {
        return invalid(format!(
            "samples must be the same size, got {} and {}",
            x.len(),
            y.len()
        ));
    }
    if x.len() < 2 {
        return invalid("MMD² needs at least 2 samples per side");
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return invalid(format!("bandwidth must be positive, got {bandwidth}"));
    }
    let pooled: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
    check_dims(&pooled.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let gram = PooledGram::new(&pooled, bandwidth);
    let m = x.len();
    let xs: Vec<usize> = (0..m).collect();
    let ys: Vec<usize> = (m..2 * m).collect();
    Ok(gram.mmd2(&xs, &ys))
}

/// Kernel matrix over the pooled sample, reused across permutations.
struct PooledGram {
    n: usize,
    k: Vec<f64>,
}

impl PooledGram {
    fn new(pooled: &[Vec<f64>], bandwidth: f64) -> Self {
        let n = pooled.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rbf(&pooled[i], &pooled[j], bandwidth);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        PooledGram { n, k }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }

    fn mmd2(&self, xs: &[usize], ys: &[usize]) -> f64 {
        let m = xs.len();
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    total += (self.at(xs[i], xs[j]) + self.at(ys[i], ys[j]))
                        - (self.at(xs[i], ys[j]) + self.at(xs[j], ys[i]));
                }
            }
        }
        total / (m * (m - 1)) as f64
    }
}

/// Order statistic used as the `(1 − alpha)` quantile of `n` sorted values:
/// index `⌊(1 − alpha) n⌋`, clamped to the largest.
pub fn quantile_index(n: usize, alpha: f64) -> usize {
    (((1.0 - alpha) * n as f64 + 1e-9).floor() as usize).min(n - 1)
}

fn permuted_statistics(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64, n_permutations: usize, seed: u64) -> Vec<f64> {
    let m = x.len();
    let pooled: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
    let gram = PooledGram::new(&pooled, bandwidth);
    (0..n_permutations)
        .map(|p| {
            let mut idx: Vec<usize> = (0..2 * m).collect();
            idx.shuffle(&mut rng::stream(seed, p as u64));
            gram.mmd2(&idx[..m], &idx[m..])
        })
        .collect()
}

fn check_test_args(x: &[Vec<f64>], y: &[Vec<f64>], n_permutations: usize, alpha: f64) -> Result<()> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid("permutation test needs equal sample sizes m >= 2");
    }
    if n_permutations < 100 {
        return invalid(format!("need at least 100 permutations, got {n_permutations}"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let all: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    check_dims(&all)
}

/// `(1 − alpha)` quantile of MMD² under random relabelings of the pooled
/// sample. Permutation `p` shuffles with ChaCha stream `p` of `seed`.
pub fn permutation_threshold(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    bandwidth: f64,
    n_permutations: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    check_test_args(x, y, n_permutations, alpha)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return invalid(format!("bandwidth must be positive, got {bandwidth}"));
    }
    let mut stats = permuted_statistics(x, y, bandwidth, n_permutations, seed);
    stats.sort_by(f64::total_cmp);
    Ok(stats[quantile_index(stats.len(), alpha)])
}

/// Full test: median-heuristic bandwidth on the pooled sample, statistic,
/// permutation threshold, and the verdict `mmd2 > threshold`.
pub fn mmd_test(x: &[Vec<f64>], y: &[Vec<f64>], n_permutations: usize, alpha: f64, seed: u64) -> Result<MmdReport> {
    check_test_args(x, y, n_permutations, alpha)?;
    let pooled: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
    let bandwidth = median_bandwidth(&pooled)?;
    let mmd2 = mmd2_unbiased(x, y, bandwidth)?;
    let threshold = permutation_threshold(x, y, bandwidth, n_permutations, alpha, seed)?;
    Ok(MmdReport {
        mmd2,
        threshold,
        reject: mmd2 > threshold,
        bandwidth,
        m: x.len(),
        n_permutations,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_sample(seed: u64, stream: u64, m: usize, dim: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, stream);
        (0..m)
            .map(|_| (0..dim).map(|_| shift + r.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    /// Plain double loop straight from the estimator's definition.
    fn naive_mmd2(x: &[Vec<f64>], y: &[Vec<f64>], h: f64) -> f64 {
        let k = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
            (-d / (2.0 * h * h)).exp()
        };
        let m = x.len();
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                s += k(&x[i], &x[j]) + k(&y[i], &y[j]) - k(&x[i], &y[j]) - k(&x[j], &y[i]);
            }
        }
        s / (m * (m - 1)) as f64
    }

    #[test]
    fn kernel_values() {
        assert_eq!(gaussian_rkhs_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(), 1.0);
        // ‖x − y‖² = 2h² with h = 1.5
        let h: f64 = 1.5;
        let d = (2.0 * h * h).sqrt();
        let v = gaussian_rkhs_kernel(&[0.0], &[d], h).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
        assert!(gaussian_rkhs_kernel(&[0.0], &[0.0, 1.0], 1.0).is_err());
        assert!(gaussian_rkhs_kernel(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn bandwidth_cases() {
        assert_eq!(median_bandwidth(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(), 1.0);
        assert_eq!(median_bandwidth(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap(), 1.0);
        assert!(median_bandwidth(&[vec![0.0]]).is_err());
        // median zero, mean positive
        let pool = [vec![0.0], vec![0.0], vec![0.0], vec![3.0]];
        assert_eq!(median_bandwidth(&pool).unwrap(), 1.5);
    }

    #[test]
    fn bandwidth_matches_brute_force_sort() {
        let pool = gaussian_sample(3, 0, 20, 4, 0.0);
        let mut all = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                if i < j {
                    let d: f64 = pool[i].iter().zip(&pool[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    all.push(d.sqrt());
                }
            }
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected = (all[94] + all[95]) / 2.0; // 190 distances
        assert_eq!(median_bandwidth(&pool).unwrap(), expected);
    }

    #[test]
    fn statistic_matches_naive_loop() {
        let x = gaussian_sample(1, 0, 10, 20, 0.0);
        let y = gaussian_sample(1, 1, 10, 20, 0.3);
        let h = 3.7;
        assert!((mmd2_unbiased(&x, &y, h).unwrap() - naive_mmd2(&x, &y, h)).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_give_exact_zero() {
        let x = gaussian_sample(2, 0, 12, 6, 0.0);
        assert_eq!(mmd2_unbiased(&x, &x, 1.3).unwrap(), 0.0);
    }

    #[test]
    fn shifted_samples_separate() {
        let x = gaussian_sample(4, 0, 30, 30, 0.0);
        let y: Vec<Vec<f64>> = x.iter().map(|v| v.iter().map(|a| a + 50.0).collect()).collect();
        let pooled: Vec<Vec<f64>> = x.iter().chain(&y).cloned().collect();
        let h = median_bandwidth(&pooled).unwrap();
        assert!(mmd2_unbiased(&x, &y, h).unwrap() > 0.5);
    }

    #[test]
    fn argument_errors() {
        let x = gaussian_sample(1, 0, 3, 2, 0.0);
        assert!(mmd2_unbiased(&x, &x[..2], 1.0).is_err());
        assert!(mmd2_unbiased(&x[..1], &x[..1], 1.0).is_err());
        assert!(permutation_threshold(&x, &x, 1.0, 50, 0.05, 0).is_err());
        assert!(permutation_threshold(&x, &x, 1.0, 100, 1.0, 0).is_err());
    }

    #[test]
    fn quantile_extremes() {
        let x = gaussian_sample(5, 0, 8, 3, 0.0);
        let y = gaussian_sample(5, 1, 8, 3, 0.0);
        let n = 200;
        let mut stats = permuted_statistics(&x, &y, 1.0, n, 9);
        stats.sort_by(f64::total_cmp);
        let top = permutation_threshold(&x, &y, 1.0, n, 1.0 / n as f64, 9).unwrap();
        assert_eq!(top, stats[n - 1]);
        assert_eq!(quantile_index(1000, 0.05), 950);
        assert_eq!(quantile_index(1000, 0.001), 999);
    }

    #[test]
    fn threshold_is_seed_deterministic_and_monotone() {
        let x = gaussian_sample(6, 0, 10, 4, 0.0);
        let y = gaussian_sample(6, 1, 10, 4, 0.0);
        let a = permutation_threshold(&x, &y, 2.0, 300, 0.05, 1).unwrap();
        assert_eq!(a, permutation_threshold(&x, &y, 2.0, 300, 0.05, 1).unwrap());
        let mut last = f64::NEG_INFINITY;
        for alpha in [0.5, 0.3, 0.1, 0.05, 0.01] {
            let t = permutation_threshold(&x, &y, 2.0, 300, alpha, 1).unwrap();
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn same_distribution_rarely_rejects() {
        let rejections = (0..20)
            .filter(|&rep| {
                let x = gaussian_sample(100 + rep, 0, 30, 5, 0.0);
                let y = gaussian_sample(100 + rep, 1, 30, 5, 0.0);
                mmd_test(&x, &y, 300, 0.05, rep).unwrap().reject
            })
            .count();
        assert!(rejections <= 2, "{rejections} of 20 rejected");
    }

    #[test]
    fn unbiased_under_the_null() {
        let stats: Vec<f64> = (0..200)
            .map(|rep| {
                let x = gaussian_sample(7, 2 * rep, 30, 5, 0.0);
                let y = gaussian_sample(7, 2 * rep + 1, 30, 5, 0.0);
                mmd2_unbiased(&x, &y, 3.0).unwrap()
            })
            .collect();
        let n = stats.len() as f64;
        let mean = stats.iter().sum::<f64>() / n;
        let sd = (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}, se {}", sd / n.sqrt());
    }

    proptest! {
        #[test]
        fn statistic_symmetries(seed in 0u64..1000, m in 2usize..8, h in 0.5f64..4.0) {
            let x = gaussian_sample(seed, 0, m, 3, 0.0);
            let y = gaussian_sample(seed, 1, m, 3, 0.5);
            let a = mmd2_unbiased(&x, &y, h).unwrap();
            prop_assert_eq!(a, mmd2_unbiased(&y, &x, h).unwrap());
            // the paired estimator is invariant to reordering both samples jointly
            let mut xr = x.clone();
            xr.reverse();
            let mut yr = y.clone();
            yr.reverse();
            prop_assert!((a - mmd2_unbiased(&xr, &yr, h).unwrap()).abs() < 1e-12);
        }
    }
}
