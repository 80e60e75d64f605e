//! Energy-distance permutation tests.
//!
//! The two-sample statistic is `nm/(n+m) · (2E|X−Y| − E|X−X'| − E|Y−Y'|)`
//! with V-statistic means. p-values are `(1 + #{perm ≥ obs}) / (1 + B)`.
//! The reported threshold is the permutation critical value at the test
//! level, chosen so that `statistic ≤ threshold` exactly when
//! `p ≥ level` (up to the granularity of `B`).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::probability_space::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub threshold: f64,
    pub p_value: f64,
}

/// Points of one stratum with group labels `0..k`.
#[derive(Debug, Clone)]
pub struct Stratum {
    pub dim: usize,
    pub points: Vec<f64>,
    pub labels: Vec<u8>,
}

struct Packed {
    n: usize,
    dist: Vec<f64>,
    /// `Σ_{j>i} d(i, j)` for each `i`.
    row_sums: Vec<f64>,
}

/// Dot product with independent accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

impl Packed {
    fn new(s: &Stratum) -> Packed {
        let n = s.labels.len();
        let d = s.dim;
        let mut dist = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        let mut row_sums = Vec::with_capacity(n);
        for i in 0..n {
            let a = &s.points[i * d..(i + 1) * d];
            let mut r = 0.0;
            for j in (i + 1)..n {
                let b = &s.points[j * d..(j + 1) * d];
                let v = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                r += v;
                dist.push(v);
            }
            row_sums.push(r);
        }
        Packed { n, dist, row_sums }
    }

    fn statistic(&self, labels: &[u8], k: usize) -> f64 {
        // indicator columns turn the pair loop into dot products; the last
        // group's share is what remains of the row sum
        let ind: Vec<Vec<f64>> =
            (0..k - 1).map(|g| labels.iter().map(|&l| (l as usize == g) as u8 as f64).collect()).collect();
        let mut sums = vec![0.0; k * k];
        let mut start = 0;
        for i in 0..self.n {
            let len = self.n - i - 1;
            let row = &self.dist[start..start + len];
            start += len;
            let li = labels[i] as usize;
            let mut rest = self.row_sums[i];
            for (g, col) in ind.iter().enumerate() {
                let v = dot(row, &col[i + 1..]);
                rest -= v;
                let (a, b) = if li <= g { (li, g) } else { (g, li) };
                sums[a * k + b] += v;
            }
            let g = k - 1;
            sums[li.min(g) * k + li.max(g)] += rest;
        }
        k_sample(&sums, labels, k)
    }
}

fn k_sample(sums: &[f64], labels: &[u8], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let mut stat = 0.0;
    for g in 0..k {
        for h in (g + 1)..k {
            let (ng, nh) = (counts[g] as f64, counts[h] as f64);
            if ng == 0.0 || nh == 0.0 {
                continue;
            }
            let e = 2.0 * sums[g * k + h] / (ng * nh)
                - 2.0 * sums[g * k + g] / (ng * ng)
                - 2.0 * sums[h * k + h] / (nh * nh);
            stat += ng * nh / (ng + nh) * e;
        }
    }
    stat
}

/// Raw (unscaled) energy distance between two samples.
pub fn energy_distance(x: &[f64], y: &[f64], dim: usize) -> f64 {
    let mean_dist = |a: &[f64], b: &[f64]| {
        let (na, nb) = (a.len() / dim, b.len() / dim);
        let mut s = 0.0;
        for p in a.chunks_exact(dim) {
            for q in b.chunks_exact(dim) {
                s += p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            }
        }
        s / (na * nb) as f64
    };
    2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)
}

fn finish(obs: f64, mut perms: Vec<f64>, level: f64) -> TestResult {
    let b = perms.len();
    let tol = 1e-12 * obs.abs().max(1e-300);
    let ge = perms.iter().filter(|s| **s >= obs - tol).count();
    let p_value = (1 + ge) as f64 / (1 + b) as f64;
    perms.sort_by(|a, b| b.total_cmp(a));
    let k = (level * (b + 1) as f64 - 1.0 - 1e-9).ceil();
    let threshold = if k <= 0.0 {
        f64::INFINITY
    } else if k as usize > b {
        f64::NEG_INFINITY
    } else {
        perms[k as usize - 1]
    };
    TestResult { statistic: obs, threshold, p_value }
}

/// Stratified k-sample permutation test: labels are shuffled within
/// strata, and the statistic is the sum of per-stratum statistics.
pub fn stratified_energy_test(strata: &[Stratum], k: usize, permutations: usize, level: f64, seed: u64) -> TestResult {
    let packed: Vec<Packed> = strata.iter().map(Packed::new).collect();
    let obs: f64 = packed.iter().zip(strata).map(|(p, s)| p.statistic(&s.labels, k)).sum();
    let mut rng = stream_rng(seed, 0x5e57);
    let mut labels: Vec<Vec<u8>> = strata.iter().map(|s| s.labels.clone()).collect();
    let perms = (0..permutations)
        .map(|_| {
            packed
                .iter()
                .zip(labels.iter_mut())
                .map(|(p, l)| {
                    l.shuffle(&mut rng);
                    p.statistic(l, k)
                })
                .sum()
        })
        .collect();
    finish(obs, perms, level)
}

/// Two-sample test on row-major samples of dimension `dim`.
pub fn energy_test(x: &[f64], y: &[f64], dim: usize, permutations: usize, level: f64, seed: u64) -> TestResult {
    let nx = x.len() / dim;
    let ny = y.len() / dim;
    let mut points = Vec::with_capacity(x.len() + y.len());
    points.extend_from_slice(x);
    points.extend_from_slice(y);
    let labels = std::iter::repeat_n(0u8, nx).chain(std::iter::repeat_n(1u8, ny)).collect();
    stratified_energy_test(&[Stratum { dim, points, labels }], 2, permutations, level, seed)
}

/// Exact one-dimensional two-sample test using all points: the pooled
/// sample is sorted once and each permutation costs `O(n + m)`.
pub fn energy_test_1d(x: &[f64], y: &[f64], permutations: usize, level: f64, seed: u64) -> TestResult {
    let mut pooled: Vec<(f64, u8)> = x.iter().map(|v| (*v, 0)).chain(y.iter().map(|v| (*v, 1))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let values: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    let mut labels: Vec<u8> = pooled.iter().map(|p| p.1).collect();
    let mut total = 0.0;
    let mut prefix = 0.0;
    for (j, v) in values.iter().enumerate() {
        total += j as f64 * v - prefix;
        prefix += v;
    }
    let stat = |labels: &[u8]| {
        let mut cnt = [0.0f64; 2];
        let mut sum = [0.0f64; 2];
        let mut within = [0.0f64; 2];
        for (v, &l) in values.iter().zip(labels) {
            let g = l as usize;
            within[g] += cnt[g] * v - sum[g];
            cnt[g] += 1.0;
            sum[g] += v;
        }
        let cross = total - within[0] - within[1];
        let sums = [within[0], cross, 0.0, within[1]];
        k_sample(&sums, labels, 2)
    };
    let obs = stat(&labels);
    let mut rng = stream_rng(seed, 0x1d);
    let perms = (0..permutations)
        .map(|_| {
            labels.shuffle(&mut rng);
            stat(&labels)
        })
        .collect();
    finish(obs, perms, level)
}

/// Equal-mass bin edges (interior cut points) for `values`.
pub fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    (1..bins).map(|k| v[(k * v.len() / bins).min(v.len() - 1)]).collect()
}

pub fn bin_of(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|e| *e <= v)
}

/// Empirical quantile by nearest rank.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probability_space::{sample_noise, NoiseSpace, NoiseSpec};

    fn normals(mean: f64, seed: u64, n: usize) -> Vec<f64> {
        let s = NoiseSpace::new(vec![NoiseSpec::gaussian("Z", mean, 1.0).unwrap()]).unwrap();
        sample_noise(&s, seed, n).column(0)
    }

    #[test]
    fn energy_distance_is_zero_on_identical_samples() {
        let x = normals(0.0, 1, 200);
        assert!(energy_distance(&x, &x, 1).abs() < 1e-12);
    }

    #[test]
    fn one_d_fast_statistic_matches_pairwise() {
        let x = normals(0.0, 1, 150);
        let y = normals(0.3, 2, 120);
        let fast = energy_test_1d(&x, &y, 10, 0.01, 0);
        let slow = energy_test(&x, &y, 1, 10, 0.01, 0);
        assert!((fast.statistic - slow.statistic).abs() < 1e-9 * slow.statistic.abs().max(1.0));
        let raw = energy_distance(&x, &y, 1) * (150.0 * 120.0) / 270.0;
        assert!((raw - slow.statistic).abs() < 1e-9);
    }

    #[test]
    fn k_sample_statistic_sums_pairwise_energy_distances() {
        let pts = normals(0.0, 5, 2 * 90);
        let labels: Vec<u8> = (0..90).map(|i| (i % 3) as u8).collect();
        let group = |g: u8| -> Vec<f64> {
            (0..90).filter(|i| labels[*i] == g).flat_map(|i| pts[2 * i..2 * i + 2].to_vec()).collect()
        };
        let mut want = 0.0;
        for (g, h) in [(0, 1), (0, 2), (1, 2)] {
            let (a, b) = (group(g), group(h));
            let (na, nb) = ((a.len() / 2) as f64, (b.len() / 2) as f64);
            want += na * nb / (na + nb) * energy_distance(&a, &b, 2);
        }
        let s = Stratum { dim: 2, points: pts, labels };
        let got = stratified_energy_test(&[s], 3, 5, 0.01, 0).statistic;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn shifted_gaussians_are_detected() {
        let x = normals(0.0, 3, 10_000);
        let y = normals(0.5, 4, 10_000);
        let r = energy_test_1d(&x, &y, 200, 0.01, 9);
        assert!(r.p_value < 0.01, "{r:?}");
        assert!(r.statistic > r.threshold);
    }

    #[test]
    fn threshold_agrees_with_p_value() {
        for seed in 0..20 {
            let x = normals(0.0, seed, 60);
            let y = normals(0.2, seed + 100, 60);
            let r = energy_test(&x, &y, 1, 200, 0.05, seed);
            assert_eq!(r.statistic <= r.threshold, r.p_value >= 0.05, "{r:?}");
        }
    }

    #[test]
    fn quantile_edges_split_evenly() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        let e = quantile_edges(&v, 4);
        assert_eq!(e, vec![25.0, 50.0, 75.0]);
        assert_eq!(bin_of(&e, 10.0), 0);
        assert_eq!(bin_of(&e, 25.0), 1);
        assert_eq!(bin_of(&e, 99.0), 3);
    }
}
