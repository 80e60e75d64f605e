//! Represented probability laws.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probability_space::stream_rng;

/// Tolerance used when deciding that two analytic quantities coincide.
pub const ANALYTIC_TOL: f64 = 1e-9;

/// One Gaussian component of a mixture. `tag` records where the component
/// came from (a discrete-noise atom index) and is informational only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub tag: usize,
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
}

impl Component {
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawRepr {
    /// Support points with probabilities, sorted and merged.
    ExactTable {
        atoms: Vec<(Vec<f64>, f64)>,
    },
    GaussianMixture {
        components: Vec<Component>,
    },
    /// Row-major samples with provenance.
    Empirical {
        values: Vec<f64>,
        n: usize,
        seed: u64,
        generator: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Law {
    pub labels: Vec<String>,
    pub repr: LawRepr,
}

fn canon(v: f64) -> f64 {
    v + 0.0
}

fn cmp_vec(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

impl Law {
    /// Builds a table, merging repeated support points and dropping zeros.
    pub fn table(labels: Vec<String>, atoms: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Law {
        let mut merged: BTreeMap<Vec<u64>, (Vec<f64>, f64)> = BTreeMap::new();
        for (v, p) in atoms {
            if p <= 0.0 {
                continue;
            }
            let v: Vec<f64> = v.into_iter().map(canon).collect();
            let key = v.iter().map(|x| x.to_bits()).collect();
            merged.entry(key).or_insert((v, 0.0)).1 += p;
        }
        let mut atoms: Vec<(Vec<f64>, f64)> = merged.into_values().collect();
        atoms.sort_by(|a, b| cmp_vec(&a.0, &b.0));
        Law { labels, repr: LawRepr::ExactTable { atoms } }
    }

    pub fn mixture(labels: Vec<String>, components: Vec<Component>) -> Law {
        Law { labels, repr: LawRepr::GaussianMixture { components } }
    }

    pub fn empirical(labels: Vec<String>, values: Vec<f64>, seed: u64, generator: impl Into<String>) -> Law {
        let d = labels.len().max(1);
        let n = values.len() / d;
        Law { labels, repr: LawRepr::Empirical { values, n, seed, generator: generator.into() } }
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empirical(&self) -> bool {
        matches!(self.repr, LawRepr::Empirical { .. })
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        match &self.repr {
            LawRepr::ExactTable { atoms } => {
                for (v, p) in atoms {
                    for k in 0..d {
                        m[k] += p * v[k];
                    }
                }
            }
            LawRepr::GaussianMixture { components } => {
                for c in components {
                    for (mk, ck) in m.iter_mut().zip(&c.mean) {
                        *mk += c.weight * ck;
                    }
                }
            }
            LawRepr::Empirical { values, n, .. } => {
                for row in values.chunks_exact(d) {
                    for k in 0..d {
                        m[k] += row[k];
                    }
                }
                m.iter_mut().for_each(|x| *x /= *n as f64);
            }
        }
        m
    }

    /// Standard errors of the coordinate means; `None` for analytic laws.
    pub fn mean_se(&self) -> Option<Vec<f64>> {
        let LawRepr::Empirical { values, n, .. } = &self.repr else {
            return None;
        };
        let d = self.dim();
        let m = self.mean();
        let mut ss = vec![0.0; d];
        for row in values.chunks_exact(d) {
            for k in 0..d {
                ss[k] += (row[k] - m[k]).powi(2);
            }
        }
        let n = *n as f64;
        Some(ss.iter().map(|s| (s / (n - 1.0).max(1.0) / n).sqrt()).collect())
    }

    /// Law of `Σ_k w_k V_k`, one output coordinate per weight vector.
    pub fn linear_map(&self, weights: &[Vec<f64>], labels: Vec<String>) -> Result<Law> {
        let d = self.dim();
        if let Some(w) = weights.iter().find(|w| w.len() != d) {
            return Err(Error::DimensionMismatch(w.len(), d));
        }
        let apply =
            |v: &[f64]| -> Vec<f64> { weights.iter().map(|w| w.iter().zip(v).map(|(a, b)| a * b).sum()).collect() };
        Ok(match &self.repr {
            LawRepr::ExactTable { atoms } => Law::table(labels, atoms.iter().map(|(v, p)| (apply(v), *p))),
            LawRepr::GaussianMixture { components } => {
                let w = DMatrix::from_fn(weights.len(), d, |i, j| weights[i][j]);
                let comps = components
                    .iter()
                    .map(|c| {
                        let cov = &w * c.cov_matrix() * w.transpose();
                        Component { tag: c.tag, weight: c.weight, mean: apply(&c.mean), cov: row_major(&cov) }
                    })
                    .collect();
                Law::mixture(labels, comps)
            }
            LawRepr::Empirical { values, seed, generator, .. } => {
                let vals = values.chunks_exact(d).flat_map(apply).collect();
                Law::empirical(labels, vals, *seed, generator.clone())
            }
        })
    }

    /// Projection onto the listed coordinates.
    pub fn marginal(&self, coords: &[usize]) -> Result<Law> {
        let d = self.dim();
        let weights: Vec<Vec<f64>> =
            coords.iter().map(|&k| (0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect()).collect();
        let labels = coords.iter().map(|&k| self.labels[k].clone()).collect();
        self.linear_map(&weights, labels)
    }

    /// Draws `n` samples (row-major). Empirical laws are resampled with
    /// replacement unless `n` equals their size, in which case the stored
    /// rows are returned unchanged.
    pub fn sample(&self, seed: u64, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut rng = stream_rng(seed, 0);
        match &self.repr {
            LawRepr::Empirical { values, n: m, .. } if *m == n => values.clone(),
            LawRepr::Empirical { values, n: m, .. } => {
                let mut out = Vec::with_capacity(n * d);
                for _ in 0..n {
                    let i = rng.gen_range(0..*m);
                    out.extend_from_slice(&values[i * d..(i + 1) * d]);
                }
                out
            }
            LawRepr::ExactTable { atoms } => {
                let mut out = Vec::with_capacity(n * d);
                for _ in 0..n {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = &atoms[atoms.len() - 1].0;
                    for (v, p) in atoms {
                        acc += p;
                        if u < acc {
                            pick = v;
                            break;
                        }
                    }
                    out.extend_from_slice(pick);
                }
                out
            }
            LawRepr::GaussianMixture { components } => {
                let roots: Vec<DMatrix<f64>> = components.iter().map(|c| psd_sqrt(&c.cov_matrix())).collect();
                let mut out = Vec::with_capacity(n * d);
                for _ in 0..n {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut k = components.len() - 1;
                    for (i, c) in components.iter().enumerate() {
                        acc += c.weight;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                    let x = &roots[k] * z;
                    out.extend((0..d).map(|j| components[k].mean[j] + x[j]));
                }
                out
            }
        }
    }

    /// Canonical form of a mixture: identical components merged, zero
    /// weights dropped, sorted. Finite Gaussian mixtures are identifiable,
    /// so equal laws have equal canonical forms.
    pub fn canonical_components(&self) -> Option<Vec<Component>> {
        let LawRepr::GaussianMixture { components } = &self.repr else {
            return None;
        };
        let mut out: Vec<Component> = Vec::new();
        for c in components.iter().filter(|c| c.weight > 0.0) {
            match out.iter_mut().find(|o| component_gap(o, c) <= ANALYTIC_TOL) {
                Some(o) => o.weight += c.weight,
                None => out.push(Component { tag: 0, ..c.clone() }),
            }
        }
        out.sort_by(|a, b| cmp_vec(&a.mean, &b.mean).then_with(|| cmp_vec(&a.cov, &b.cov)));
        Some(out)
    }
}

fn component_gap(a: &Component, b: &Component) -> f64 {
    let m = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let c = a.cov.iter().zip(&b.cov).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    m.max(c)
}

/// Largest discrepancy between two canonical mixtures: weights, means and
/// covariances after greedy matching. Infinite when component counts differ.
pub fn mixture_discrepancy(a: &Law, b: &Law) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let (Some(ca), Some(cb)) = (a.canonical_components(), b.canonical_components()) else {
        return Err(Error::EngineInapplicable("mixture comparison needs two mixtures".into()));
    };
    if ca.len() != cb.len() {
        return Ok(f64::INFINITY);
    }
    let mut used = vec![false; cb.len()];
    let mut worst: f64 = 0.0;
    for x in &ca {
        let (j, gap) = cb
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, y)| (j, component_gap(x, y).max((x.weight - y.weight).abs())))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .expect("equal counts");
        used[j] = true;
        worst = worst.max(gap);
    }
    Ok(worst)
}

/// Total-variation distance between two exact tables.
pub fn total_variation(a: &Law, b: &Law) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let (LawRepr::ExactTable { atoms: pa }, LawRepr::ExactTable { atoms: pb }) = (&a.repr, &b.repr) else {
        return Err(Error::EngineInapplicable("total variation needs two exact tables".into()));
    };
    let mut diff: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    for (v, p) in pa {
        *diff.entry(v.iter().map(|x| x.to_bits()).collect()).or_default() += p;
    }
    for (v, p) in pb {
        *diff.entry(v.iter().map(|x| x.to_bits()).collect()).or_default() -= p;
    }
    Ok(0.5 * diff.values().map(|d| d.abs()).sum::<f64>())
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Symmetric square root of a positive semidefinite matrix; tiny negative
/// eigenvalues from rounding are clamped to zero.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}
