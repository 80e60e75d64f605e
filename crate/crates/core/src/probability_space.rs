//! Exogenous noise: specifications, seeded sampling and exact enumeration.
//!
//! Every model in the crate is a deterministic map out of a [`NoiseSpace`].
//! Two models evaluated on the same [`NoiseBatch`] therefore see identical
//! exogenous realizations, which is what makes per-draw comparisons between
//! structural counterfactuals and potential outcomes meaningful.
//!
//! Seeds are split with a keyed counter scheme: `(seed, index)` selects the
//! ChaCha20 stream `index` keyed by `seed`, and the first word of that stream
//! becomes the derived seed. Coordinate `j` of a batch is always drawn from
//! derived seed `j`, so adding draws never perturbs existing ones. Gaussian
//! coordinates use the ziggurat sampler of `rand_distr` 0.4 on ChaCha20.

use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_TOLERANCE: f64 = 1e-12;

/// Law of a single exogenous coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Distribution {
    #[serde(rename = "point")]
    PointMass {
        value: f64,
    },
    Bernoulli {
        p: f64,
    },
    /// Finite support; each entry is `[value, probability]`.
    Discrete {
        atoms: Vec<(f64, f64)>,
    },
    Uniform {
        a: f64,
        b: f64,
    },
    Gaussian {
        mean: f64,
        #[serde(rename = "var")]
        variance: f64,
    },
}

impl Distribution {
    /// Support points with positive mass, or `None` for continuous laws.
    pub fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            Distribution::PointMass { value } => Some(vec![(*value, 1.0)]),
            Distribution::Bernoulli { p } => {
                Some([(0.0, 1.0 - p), (1.0, *p)].into_iter().filter(|(_, q)| *q > 0.0).collect())
            }
            Distribution::Discrete { atoms } => Some(atoms.iter().copied().filter(|(_, q)| *q > 0.0).collect()),
            Distribution::Uniform { .. } | Distribution::Gaussian { .. } => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.atoms().is_some()
    }

    pub fn mean(&self) -> f64 {
        match self {
            Distribution::PointMass { value } => *value,
            Distribution::Bernoulli { p } => *p,
            Distribution::Discrete { atoms } => atoms.iter().map(|(v, q)| v * q).sum(),
            Distribution::Uniform { a, b } => 0.5 * (a + b),
            Distribution::Gaussian { mean, .. } => *mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Distribution::PointMass { .. } => 0.0,
            Distribution::Bernoulli { p } => p * (1.0 - p),
            Distribution::Discrete { atoms } => {
                let m = self.mean();
                atoms.iter().map(|(v, q)| q * (v - m) * (v - m)).sum()
            }
            Distribution::Uniform { a, b } => (b - a) * (b - a) / 12.0,
            Distribution::Gaussian { variance, .. } => *variance,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Distribution::PointMass { value } => *value,
            Distribution::Bernoulli { p } => {
                if rng.gen::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            Distribution::Discrete { atoms } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (v, q) in atoms {
                    acc += q;
                    if u < acc {
                        return *v;
                    }
                }
                // rounding left a sliver above the last cumulative value
                atoms.iter().rev().find(|(_, q)| *q > 0.0).map(|(v, _)| *v).unwrap_or(f64::NAN)
            }
            Distribution::Uniform { a, b } => a + (b - a) * rng.gen::<f64>(),
            Distribution::Gaussian { mean, variance } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + variance.sqrt() * z
            }
        }
    }

    // `!(x >= 0.0)` also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate(&self) -> std::result::Result<(), String> {
        match self {
            Distribution::PointMass { value } if !value.is_finite() => Err("point mass must be finite".into()),
            Distribution::Bernoulli { p } if !(0.0..=1.0).contains(p) => Err(format!("Bernoulli p={p} outside [0, 1]")),
            Distribution::Discrete { atoms } => {
                if atoms.is_empty() {
                    return Err("discrete law needs at least one atom".into());
                }
                if atoms.iter().any(|(v, q)| !v.is_finite() || !(*q >= 0.0)) {
                    return Err("atoms need finite values and nonnegative probabilities".into());
                }
                let total: f64 = atoms.iter().map(|(_, q)| q).sum();
                if (total - 1.0).abs() > PROB_TOLERANCE {
                    return Err(format!("probabilities sum to {total}, not 1"));
                }
                let mut seen = HashSet::new();
                if atoms.iter().any(|(v, _)| !seen.insert(v.to_bits())) {
                    return Err("atom values must be distinct".into());
                }
                Ok(())
            }
            Distribution::Uniform { a, b } if !(a < b) || !a.is_finite() || !b.is_finite() => {
                Err(format!("uniform bounds need a < b, got [{a}, {b}]"))
            }
            Distribution::Gaussian { mean, variance }
                if !mean.is_finite() || !(*variance >= 0.0) || !variance.is_finite() =>
            {
                Err(format!("gaussian needs finite mean and variance >= 0, got ({mean}, {variance})"))
            }
            _ => Ok(()),
        }
    }
}

/// A named exogenous coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub name: String,
    #[serde(flatten)]
    pub dist: Distribution,
}

impl NoiseSpec {
    /// Validates the law. A zero-variance Gaussian becomes a point mass.
    pub fn new(name: impl Into<String>, dist: Distribution) -> Result<Self> {
        let name = name.into();
        dist.validate().map_err(|reason| Error::InvalidNoise { name: name.clone(), reason })?;
        let dist = match dist {
            Distribution::Gaussian { mean, variance: 0.0 } => Distribution::PointMass { value: mean },
            d => d,
        };
        Ok(NoiseSpec { name, dist })
    }

    pub fn point(name: &str, value: f64) -> Result<Self> {
        Self::new(name, Distribution::PointMass { value })
    }

    pub fn bernoulli(name: &str, p: f64) -> Result<Self> {
        Self::new(name, Distribution::Bernoulli { p })
    }

    pub fn discrete(name: &str, atoms: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(name, Distribution::Discrete { atoms })
    }

    pub fn uniform(name: &str, a: f64, b: f64) -> Result<Self> {
        Self::new(name, Distribution::Uniform { a, b })
    }

    pub fn gaussian(name: &str, mean: f64, variance: f64) -> Result<Self> {
        Self::new(name, Distribution::Gaussian { mean, variance })
    }
}

/// Ordered collection of mutually independent noises.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSpace {
    specs: Vec<NoiseSpec>,
}

impl NoiseSpace {
    pub fn new(specs: Vec<NoiseSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &specs {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::DuplicateName(s.name.clone()));
            }
            // re-run validation for specs built by struct literal or serde
            s.dist.validate().map_err(|reason| Error::InvalidNoise { name: s.name.clone(), reason })?;
        }
        let specs = specs.into_iter().map(|s| NoiseSpec::new(s.name, s.dist)).collect::<Result<_>>()?;
        Ok(NoiseSpace { specs })
    }

    pub fn specs(&self) -> &[NoiseSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Stable fingerprint of names and laws.
    pub fn id(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for s in &self.specs {
            s.name.hash(&mut h);
            let params: Vec<f64> = match &s.dist {
                Distribution::PointMass { value } => vec![0.0, *value],
                Distribution::Bernoulli { p } => vec![1.0, *p],
                Distribution::Discrete { atoms } => {
                    std::iter::once(2.0).chain(atoms.iter().flat_map(|(v, q)| [*v, *q])).collect()
                }
                Distribution::Uniform { a, b } => vec![3.0, *a, *b],
                Distribution::Gaussian { mean, variance } => vec![4.0, *mean, *variance],
            };
            for p in params {
                p.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Number of atoms of the product measure, or `None` when some
    /// coordinate is continuous.
    pub fn atom_count(&self) -> Option<usize> {
        self.specs.iter().try_fold(1usize, |acc, s| s.dist.atoms().map(|a| acc.saturating_mul(a.len())))
    }
}

impl<'de> Deserialize<'de> for NoiseSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            specs: Vec<NoiseSpec>,
        }
        let raw = Raw::deserialize(d)?;
        NoiseSpace::new(raw.specs).map_err(serde::de::Error::custom)
    }
}

/// `n` draws of every coordinate, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    values: Vec<f64>,
    width: usize,
    pub seed: u64,
    pub space_id: u64,
}

impl NoiseBatch {
    /// Wraps explicit rows, e.g. hand-picked draws in tests.
    pub fn from_rows(space: &NoiseSpace, rows: &[Vec<f64>]) -> Result<Self> {
        let width = space.len();
        let mut values = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::DimensionMismatch(r.len(), width));
            }
            values.extend_from_slice(r);
        }
        Ok(NoiseBatch { values, width, seed: 0, space_id: space.id() })
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.width.max(1))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }
}

/// Derives `k` seeds from `seed` with the keyed counter scheme.
pub fn split_stream(seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64)
        .map(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(i);
            rng.next_u64()
        })
        .collect()
}

/// A generator for stream `index` of `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    ChaCha20Rng::seed_from_u64(rng.next_u64())
}

/// Draws `n` independent realizations of the whole space.
pub fn sample_noise(space: &NoiseSpace, seed: u64, n: usize) -> NoiseBatch {
    let width = space.len();
    let mut values = vec![0.0; n * width];
    for (j, (spec, s)) in space.specs.iter().zip(split_stream(seed, width)).enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        for i in 0..n {
            values[i * width + j] = spec.dist.sample(&mut rng);
        }
    }
    NoiseBatch { values, width, seed, space_id: space.id() }
}

/// One support point of a finite product measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub coords: Vec<f64>,
    pub prob: f64,
}

/// Exact finite representation of a noise law.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomTable {
    pub atoms: Vec<Atom>,
}

impl AtomTable {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.prob).sum()
    }
}

/// Product measure over all coordinates, in lexicographic order of the
/// per-coordinate supports (last coordinate varies fastest).
pub fn enumerate_noise(space: &NoiseSpace) -> Result<AtomTable> {
    let supports = space
        .specs
        .iter()
        .map(|s| s.dist.atoms().ok_or_else(|| Error::NotEnumerable(s.name.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut atoms = vec![Atom { coords: Vec::with_capacity(space.len()), prob: 1.0 }];
    for support in &supports {
        let mut next = Vec::with_capacity(atoms.len() * support.len());
        for a in &atoms {
            for (v, q) in support {
                let mut coords = a.coords.clone();
                coords.push(*v);
                next.push(Atom { coords, prob: a.prob * q });
            }
        }
        atoms = next;
    }
    Ok(AtomTable { atoms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(specs: Vec<NoiseSpec>) -> NoiseSpace {
        NoiseSpace::new(specs).unwrap()
    }

    #[test]
    fn point_mass_is_constant() {
        let s = space(vec![NoiseSpec::point("U", 3.0).unwrap()]);
        let b = sample_noise(&s, 99, 5);
        assert!(b.column(0).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn bernoulli_mean_within_four_sigma() {
        let s = space(vec![NoiseSpec::bernoulli("U", 0.5).unwrap()]);
        let b = sample_noise(&s, 1, 1_000_000);
        let m = b.column(0).iter().sum::<f64>() / 1e6;
        assert!((m - 0.5).abs() <= 0.002, "mean {m}");
    }

    #[test]
    fn gaussian_variance_within_band() {
        let s = space(vec![NoiseSpec::gaussian("U", 0.0, 1.0).unwrap()]);
        let xs = sample_noise(&s, 2, 1_000_000).column(0);
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        assert!((v - 1.0).abs() <= 0.006, "variance {v}");
    }

    #[test]
    fn split_stream_is_deterministic() {
        assert_eq!(split_stream(7, 1), split_stream(7, 1));
        assert_eq!(split_stream(7, 3), split_stream(7, 3));
        let two = split_stream(7, 2);
        assert_ne!(two[0], two[1]);
        assert_eq!(split_stream(7, 1)[0], two[0]);
    }

    #[test]
    fn split_streams_are_uncorrelated() {
        let seeds = split_stream(7, 2);
        let n = 100_000;
        let mut a = ChaCha20Rng::seed_from_u64(seeds[0]);
        let mut b = ChaCha20Rng::seed_from_u64(seeds[1]);
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut a)).collect();
        let ys: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut b)).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!(r.abs() <= 0.013, "correlation {r}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let s = space(vec![
            NoiseSpec::gaussian("A", 1.0, 2.0).unwrap(),
            NoiseSpec::discrete("B", vec![(-1.0, 0.25), (2.0, 0.75)]).unwrap(),
            NoiseSpec::uniform("C", 0.0, 3.0).unwrap(),
        ]);
        assert_eq!(sample_noise(&s, 11, 257), sample_noise(&s, 11, 257));
        assert_ne!(sample_noise(&s, 11, 4), sample_noise(&s, 12, 4));
    }

    #[test]
    fn enumeration_of_two_coins() {
        let s = space(vec![NoiseSpec::bernoulli("A", 0.5).unwrap(), NoiseSpec::bernoulli("B", 0.5).unwrap()]);
        let t = enumerate_noise(&s).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.atoms.iter().all(|a| a.prob == 0.25));
    }

    #[test]
    fn enumeration_of_point_mass_and_gaussian() {
        let t = enumerate_noise(&space(vec![NoiseSpec::point("P", 2.0).unwrap()])).unwrap();
        assert_eq!(t.atoms, vec![Atom { coords: vec![2.0], prob: 1.0 }]);
        let g = space(vec![NoiseSpec::gaussian("G", 0.0, 1.0).unwrap()]);
        assert_eq!(enumerate_noise(&g), Err(Error::NotEnumerable("G".into())));
    }

    #[test]
    fn zero_variance_gaussian_degrades_to_point_mass() {
        let s = NoiseSpec::gaussian("G", 1.5, 0.0).unwrap();
        assert_eq!(s.dist, Distribution::PointMass { value: 1.5 });
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(NoiseSpec::discrete("D", vec![(0.0, 0.5), (1.0, 0.4)]).is_err());
        assert!(NoiseSpec::discrete("D", vec![(0.0, 0.5), (0.0, 0.5)]).is_err());
        assert!(NoiseSpec::uniform("U", 1.0, 1.0).is_err());
        assert!(NoiseSpec::gaussian("G", 0.0, -1.0).is_err());
        assert!(NoiseSpec::bernoulli("B", 1.5).is_err());
        let dup = NoiseSpace::new(vec![NoiseSpec::point("A", 0.0).unwrap(), NoiseSpec::point("A", 1.0).unwrap()]);
        assert_eq!(dup, Err(Error::DuplicateName("A".into())));
    }

    #[test]
    fn enumerated_probabilities_match_frequencies() {
        let s = space(vec![
            NoiseSpec::bernoulli("A", 0.3).unwrap(),
            NoiseSpec::discrete("B", vec![(-1.0, 0.2), (0.0, 0.5), (4.0, 0.3)]).unwrap(),
        ]);
        let table = enumerate_noise(&s).unwrap();
        assert!((table.total_mass() - 1.0).abs() < 1e-12);
        let n = 1_000_000;
        let batch = sample_noise(&s, 5, n);
        for atom in &table.atoms {
            let hits = batch.rows().filter(|r| *r == atom.coords.as_slice()).count();
            let freq = hits as f64 / n as f64;
            let band = 4.0 * (atom.prob * (1.0 - atom.prob) / n as f64).sqrt();
            assert!((freq - atom.prob).abs() <= band, "{atom:?} freq {freq}");
        }
    }

    #[test]
    fn noise_spec_json_shape() {
        let spec: NoiseSpec = serde_json::from_str(r#"{"name":"U_Y","dist":"gaussian","mean":0,"var":1}"#).unwrap();
        assert_eq!(spec, NoiseSpec::gaussian("U_Y", 0.0, 1.0).unwrap());
        let err = serde_json::from_str::<NoiseSpec>(r#"{"name":"U","dist":"bernoulli"}"#).unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
    }
}
