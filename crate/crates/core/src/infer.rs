//! Engine selection and generic law computation over a [`Program`].

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::law::Law;
use crate::linear::LinearEngine;
use crate::probability_space::{enumerate_noise, sample_noise, AtomTable, NoiseBatch};
use crate::program::Program;

/// Computation backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// Enumeration of a finite noise space.
    Exact,
    /// Per-atom Gaussian algebra for affine-Gaussian programs.
    Gaussian,
    /// Seeded simulation.
    #[serde(rename = "mc")]
    MonteCarlo,
}

impl Engine {
    pub const ALL: [Engine; 3] = [Engine::Exact, Engine::Gaussian, Engine::MonteCarlo];

    pub fn name(self) -> &'static str {
        match self {
            Engine::Exact => "exact",
            Engine::Gaussian => "gaussian",
            Engine::MonteCarlo => "mc",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Engine::Exact),
            "gaussian" | "linear" => Ok(Engine::Gaussian),
            "mc" | "montecarlo" => Ok(Engine::MonteCarlo),
            _ => Err(Error::Validation(format!("unknown engine `{s}` (exact, gaussian, mc)"))),
        }
    }
}

/// Knobs for Monte Carlo work and statistical tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Budget {
    pub n: usize,
    pub seed: u64,
    /// Kernel half-width for continuous conditioning; default 0.1·sd.
    pub bandwidth: Option<f64>,
    pub level: f64,
    pub permutations: usize,
    /// Rows per sample fed to multivariate energy tests.
    pub test_cap: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { n: 100_000, seed: 0, bandwidth: None, level: 0.01, permutations: 200, test_cap: 1000 }
    }
}

impl Budget {
    pub fn new(n: usize, seed: u64) -> Self {
        Budget { n, seed, ..Budget::default() }
    }
}

/// A weighted sum of program variables.
pub type Combo = Vec<(usize, f64)>;

pub fn col(i: usize) -> Combo {
    vec![(i, 1.0)]
}

pub(crate) fn eval_combo(row: &[f64], c: &Combo) -> f64 {
    c.iter().map(|(i, w)| if *w == 1.0 { row[*i] } else { w * row[*i] }).sum()
}

pub(crate) fn enumerate(program: &Program) -> Result<AtomTable> {
    enumerate_noise(program.noise()).map_err(|e| match e {
        Error::NotEnumerable(n) => {
            Error::EngineInapplicable(format!("exact engine needs finite noise; `{n}` is continuous"))
        }
        e => e,
    })
}

const SIM_CACHE_SLOTS: usize = 4;

type CacheKey = (u64, u64, usize);

thread_local! {
    // estimands over a covariate grid re-solve the same program on the same draws
    static SIM_CACHE: RefCell<VecDeque<(CacheKey, Arc<Vec<f64>>)>> = const { RefCell::new(VecDeque::new()) };
    // different programs over one space share their draws
    static NOISE_CACHE: RefCell<Option<(CacheKey, Arc<NoiseBatch>)>> = const { RefCell::new(None) };
}

fn noise_batch(program: &Program, budget: &Budget) -> Arc<NoiseBatch> {
    let key = (program.noise().id(), budget.seed, budget.n);
    NOISE_CACHE.with(|c| {
        let mut c = c.borrow_mut();
        match &*c {
            Some((k, b)) if *k == key => b.clone(),
            _ => {
                let b = Arc::new(sample_noise(program.noise(), budget.seed, budget.n));
                *c = Some((key, b.clone()));
                b
            }
        }
    })
}

fn program_key(program: &Program) -> u64 {
    let mut h = DefaultHasher::new();
    program.noise().id().hash(&mut h);
    for (name, e) in program.names().iter().zip(program.exprs()) {
        name.hash(&mut h);
        e.to_string().hash(&mut h);
    }
    h.finish()
}

/// Solved rows for `budget.n` draws from `budget.seed`. Recent results are
/// memoized per thread.
pub(crate) fn simulate(program: &Program, budget: &Budget) -> Result<Arc<Vec<f64>>> {
    let key = (program_key(program), budget.seed, budget.n);
    if let Some(hit) = SIM_CACHE.with(|c| c.borrow().iter().find(|(k, _)| *k == key).map(|(_, v)| v.clone())) {
        return Ok(hit);
    }
    let rows = Arc::new(program.solve(&noise_batch(program, budget))?);
    SIM_CACHE.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() == SIM_CACHE_SLOTS {
            c.pop_front();
        }
        c.push_back((key, rows.clone()));
    });
    Ok(rows)
}

fn matches_exact(row: &[f64], evidence: &[(usize, f64)]) -> bool {
    evidence.iter().all(|(i, v)| row[*i] == *v)
}

/// Per-coordinate rejection windows: exact match for discrete-valued
/// variables, `|V − v| ≤ h` otherwise.
pub(crate) fn windows(program: &Program, rows: &[f64], evidence: &[(usize, f64)], budget: &Budget) -> Vec<Option<f64>> {
    let m = program.len();
    evidence
        .iter()
        .map(|(i, _)| {
            if program.is_discrete(*i) {
                None
            } else {
                Some(budget.bandwidth.unwrap_or_else(|| 0.1 * column_sd(rows, m, *i)))
            }
        })
        .collect()
}

pub(crate) fn column_sd(rows: &[f64], m: usize, i: usize) -> f64 {
    let n = (rows.len() / m) as f64;
    let mean = rows.chunks_exact(m).map(|r| r[i]).sum::<f64>() / n;
    let ss: f64 = rows.chunks_exact(m).map(|r| (r[i] - mean).powi(2)).sum();
    (ss / (n - 1.0).max(1.0)).sqrt()
}

pub(crate) fn in_window(row: &[f64], evidence: &[(usize, f64)], h: &[Option<f64>]) -> bool {
    evidence.iter().zip(h).all(|((i, v), h)| match h {
        None => row[*i] == *v,
        Some(h) => (row[*i] - v).abs() <= *h,
    })
}

/// Law of `targets` given exact (or kernel-windowed) `evidence`.
pub fn conditional_law(
    program: &Program,
    evidence: &[(usize, f64)],
    targets: &[Combo],
    labels: Vec<String>,
    engine: Engine,
    budget: &Budget,
) -> Result<Law> {
    match engine {
        Engine::Exact => {
            let table = enumerate(program)?;
            let mut out = Vec::new();
            let mut row = vec![0.0; program.len()];
            let mut mass = 0.0;
            for a in &table.atoms {
                program.eval_row(&a.coords, &mut row)?;
                if matches_exact(&row, evidence) {
                    mass += a.prob;
                    out.push((targets.iter().map(|c| eval_combo(&row, c)).collect(), a.prob));
                }
            }
            if mass <= 0.0 {
                return Err(Error::ZeroProbabilityEvidence);
            }
            Ok(Law::table(labels, out.into_iter().map(|(v, p)| (v, p / mass))))
        }
        Engine::Gaussian => LinearEngine::new(program)?.query(evidence, targets, labels),
        Engine::MonteCarlo => {
            let rows = simulate(program, budget)?;
            let m = program.len();
            let h = windows(program, &rows, evidence, budget);
            let mut vals = Vec::new();
            for r in rows.chunks_exact(m) {
                if in_window(r, evidence, &h) {
                    vals.extend(targets.iter().map(|c| eval_combo(r, c)));
                }
            }
            if vals.is_empty() {
                return Err(Error::EmptyAcceptance(budget.n));
            }
            Ok(Law::empirical(labels, vals, budget.seed, "kernel-rejection"))
        }
    }
}

/// Unconditional law of `targets`.
pub fn program_law(
    program: &Program,
    targets: &[Combo],
    labels: Vec<String>,
    engine: Engine,
    budget: &Budget,
) -> Result<Law> {
    conditional_law(program, &[], targets, labels, engine, budget)
}

/// Ordinary least squares of `y` on `[1, Z]`, returning the intercept and
/// its standard error. Columns of `Z` that are constant are dropped.
pub(crate) fn local_linear(y: &[f64], z: &[Vec<f64>]) -> Result<(f64, f64)> {
    use nalgebra::{DMatrix, DVector};
    let n = y.len();
    let keep: Vec<&Vec<f64>> = z.iter().filter(|c| c.iter().any(|v| (*v - c[0]).abs() > 0.0)).collect();
    let p = keep.len() + 1;
    if n < p + 2 {
        return Err(Error::EmptyAcceptance(n));
    }
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { keep[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let xtx = design.transpose() * &design;
    let chol = xtx.clone().cholesky().ok_or_else(|| Error::EngineInapplicable("degenerate local regression".into()))?;
    let beta = chol.solve(&(design.transpose() * &yv));
    let resid = &yv - &design * &beta;
    let sigma2 = resid.dot(&resid) / (n - p) as f64;
    let inv = chol.inverse();
    Ok((beta[0], (sigma2 * inv[(0, 0)]).max(0.0).sqrt()))
}
