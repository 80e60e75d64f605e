//! Comparing two RCMs at three strengths: almost-sure equality on the
//! shared noise space, equality of the joint law of `(T, X, (Y_t)_t)`, and
//! equality of every single-outcome law `(T, X, Y_t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{enumerate, simulate, Budget, Engine};
use crate::law::{mixture_discrepancy, total_variation, Law, LawRepr, ANALYTIC_TOL};
use crate::linear::{Form, LinearEngine};
use crate::probability_space::split_stream;
use crate::rcm::FunctionalRcm;
use crate::stats::{energy_test, energy_test_1d, TestResult};

/// p-values above this count as agreement.
pub const EQUAL_ABOVE: f64 = 0.05;
/// p-values below this count as a difference.
pub const DIFFERENT_BELOW: f64 = 0.01;
const TABLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    #[serde(alias = "as")]
    AlmostSure,
    #[serde(alias = "cross")]
    CrossOutcome,
    #[serde(alias = "single")]
    SingleOutcome,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::AlmostSure => "almost_sure",
            Level::CrossOutcome => "cross_outcome",
            Level::SingleOutcome => "single_outcome",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as" | "almost_sure" => Ok(Level::AlmostSure),
            "cross" | "cross_outcome" => Ok(Level::CrossOutcome),
            "single" | "single_outcome" => Ok(Level::SingleOutcome),
            _ => Err(Error::Validation(format!("unknown level `{s}` (as, cross, single)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Equal,
    NotEqual,
    Inconclusive,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Equal => "equal",
            Verdict::NotEqual => "not_equal",
            Verdict::Inconclusive => "inconclusive",
        }
    }

    fn from_p(p: f64) -> Verdict {
        if p > EQUAL_ABOVE {
            Verdict::Equal
        } else if p < DIFFERENT_BELOW {
            Verdict::NotEqual
        } else {
            Verdict::Inconclusive
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub level: Level,
    pub verdict: Verdict,
    pub statistic: f64,
    pub threshold: f64,
    /// Present for Monte Carlo comparisons.
    pub p_value: Option<f64>,
    pub engine: Engine,
    /// `(t, statistic)` for single-outcome comparisons.
    pub per_t: Vec<(f64, f64)>,
    pub witness: Option<String>,
}

impl EquivalenceVerdict {
    fn analytic(level: Level, engine: Engine, statistic: f64, threshold: f64) -> Self {
        EquivalenceVerdict {
            level,
            verdict: if statistic <= threshold { Verdict::Equal } else { Verdict::NotEqual },
            statistic,
            threshold,
            p_value: None,
            engine,
            per_t: Vec::new(),
            witness: None,
        }
    }

    fn tested(level: Level, engine: Engine, r: TestResult) -> Self {
        EquivalenceVerdict {
            level,
            verdict: Verdict::from_p(r.p_value),
            statistic: r.statistic,
            threshold: r.threshold,
            p_value: Some(r.p_value),
            engine,
            per_t: Vec::new(),
            witness: None,
        }
    }
}

fn same_shape(a: &FunctionalRcm, b: &FunctionalRcm) -> Result<()> {
    if a.support() != b.support() {
        return Err(Error::Validation(format!("treatment supports differ: {:?} vs {:?}", a.support(), b.support())));
    }
    if a.covariate_indices().len() != b.covariate_indices().len() {
        return Err(Error::DimensionMismatch(a.covariate_indices().len(), b.covariate_indices().len()));
    }
    if a.outcome_dim() != b.outcome_dim() {
        return Err(Error::DimensionMismatch(a.outcome_dim(), b.outcome_dim()));
    }
    Ok(())
}

fn all_levels(r: &FunctionalRcm) -> Vec<usize> {
    (0..r.support().len()).collect()
}

/// `(T, X, (Y_t)_t)` agree on every draw. Needs both RCMs on one space.
pub fn compare_almost_sure(
    a: &FunctionalRcm,
    b: &FunctionalRcm,
    engine: Engine,
    budget: &Budget,
) -> Result<EquivalenceVerdict> {
    same_shape(a, b)?;
    if a.noise().id() != b.noise().id() {
        return Err(Error::SpaceMismatch);
    }
    let (ta, labels) = a.targets(&all_levels(a));
    let (tb, _) = b.targets(&all_levels(b));
    let (pa, pb) = (a.program(), b.program());
    let mut worst: f64 = 0.0;
    let mut witness = None;
    let mut differing = 0usize;
    let mut total = 0usize;
    let mut note = |label: String, d: f64, coord: usize, worst: &mut f64| {
        if d > ANALYTIC_TOL {
            differing += 1;
            if witness.is_none() {
                witness = Some(format!("{label}: {} differs by {d:.4}", labels[coord]));
            }
        }
        *worst = worst.max(d);
    };
    match engine {
        Engine::Exact => {
            let table = enumerate(pa)?;
            let mut ra = vec![0.0; pa.len()];
            let mut rb = vec![0.0; pb.len()];
            for (k, atom) in table.atoms.iter().enumerate() {
                pa.eval_row(&atom.coords, &mut ra)?;
                pb.eval_row(&atom.coords, &mut rb)?;
                total += 1;
                let (coord, d) = max_gap(&ra, &rb, &ta, &tb);
                note(format!("atom {k}"), d, coord, &mut worst);
            }
        }
        Engine::MonteCarlo => {
            let ra = simulate(pa, budget)?;
            let rb = simulate(pb, budget)?;
            for (i, (x, y)) in ra.chunks_exact(pa.len()).zip(rb.chunks_exact(pb.len())).enumerate() {
                total += 1;
                let (coord, d) = max_gap(x, y, &ta, &tb);
                note(format!("draw {i}"), d, coord, &mut worst);
            }
        }
        Engine::Gaussian => {
            let la = LinearEngine::new(pa)?;
            let lb = LinearEngine::new(pb)?;
            for k in 0..la.atom_count() {
                if la.atom(k).1 <= 0.0 {
                    continue;
                }
                let fa = la.forms(k, &[])?;
                let fb = lb.forms(k, &[])?;
                total += 1;
                for (coord, (x, y)) in ta.iter().zip(&tb).enumerate() {
                    let d = form_gap(&combine(&fa, x)?, &combine(&fb, y)?);
                    note(format!("atom {k}"), d, coord, &mut worst);
                }
            }
        }
    }
    let mut v = EquivalenceVerdict::analytic(Level::AlmostSure, engine, worst, ANALYTIC_TOL);
    v.witness = witness.map(|w| format!("{w} ({differing} of {total} checks differ)"));
    Ok(v)
}

fn max_gap(ra: &[f64], rb: &[f64], ta: &[crate::infer::Combo], tb: &[crate::infer::Combo]) -> (usize, f64) {
    use crate::infer::eval_combo;
    ta.iter()
        .zip(tb)
        .map(|(x, y)| (eval_combo(ra, x) - eval_combo(rb, y)).abs())
        .enumerate()
        .fold((0, 0.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc })
}

fn combine(forms: &[Form], c: &crate::infer::Combo) -> Result<(f64, Vec<f64>)> {
    let mut out: Option<(f64, Vec<f64>)> = None;
    for (i, w) in c {
        let Form::Lin { c, a } = &forms[*i] else {
            return Err(Error::EngineInapplicable("variable is not affine in the Gaussian noise".into()));
        };
        let acc = out.get_or_insert_with(|| (0.0, vec![0.0; a.len()]));
        acc.0 += w * c;
        for (x, y) in acc.1.iter_mut().zip(a) {
            *x += w * y;
        }
    }
    Ok(out.unwrap_or_default())
}

fn form_gap(a: &(f64, Vec<f64>), b: &(f64, Vec<f64>)) -> f64 {
    let coef = a.1.iter().zip(&b.1).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    (a.0 - b.0).abs().max(coef)
}

/// Distance between two laws with the yardstick their representation
/// supports: total variation for tables, canonical-component discrepancy
/// for Gaussian mixtures, and an energy permutation test otherwise.
pub fn law_distance(a: &Law, b: &Law, budget: &Budget) -> Result<(f64, f64, Option<f64>)> {
    match (&a.repr, &b.repr) {
        (LawRepr::ExactTable { .. }, LawRepr::ExactTable { .. }) => Ok((total_variation(a, b)?, TABLE_TOL, None)),
        (LawRepr::GaussianMixture { .. }, LawRepr::GaussianMixture { .. }) => {
            Ok((mixture_discrepancy(a, b)?, ANALYTIC_TOL, None))
        }
        _ => {
            if a.dim() != b.dim() {
                return Err(Error::DimensionMismatch(a.dim(), b.dim()));
            }
            let r = sample_test(a, b, budget);
            Ok((r.statistic, r.threshold, Some(r.p_value)))
        }
    }
}

fn sample_test(a: &Law, b: &Law, budget: &Budget) -> TestResult {
    let d = a.dim();
    let seeds = split_stream(budget.seed, 2);
    let take = |l: &Law, seed: u64| {
        let mut v = l.sample(seed, budget.n.max(budget.test_cap));
        v.truncate(budget.test_cap * d);
        v
    };
    let (x, y) = (take(a, seeds[0]), take(b, seeds[1]));
    if d == 1 {
        energy_test_1d(&x, &y, budget.permutations, budget.level, budget.seed)
    } else {
        energy_test(&x, &y, d, budget.permutations, budget.level, budget.seed)
    }
}

fn law_verdict(level: Level, engine: Engine, a: &Law, b: &Law, budget: &Budget) -> Result<EquivalenceVerdict> {
    let (s, t, p) = law_distance(a, b, budget)?;
    Ok(match p {
        None => EquivalenceVerdict::analytic(level, engine, s, t),
        Some(p) => EquivalenceVerdict::tested(level, engine, TestResult { statistic: s, threshold: t, p_value: p }),
    })
}

/// Monte Carlo laws for `a` and `b` come from independent substreams.
fn budgets(budget: &Budget) -> (Budget, Budget) {
    let s = split_stream(budget.seed, 2);
    (Budget { seed: s[0], ..budget.clone() }, Budget { seed: s[1], ..budget.clone() })
}

/// `ℒ(T, X, (Y_t)_t)` agree.
pub fn compare_cross_outcome(
    a: &FunctionalRcm,
    b: &FunctionalRcm,
    engine: Engine,
    budget: &Budget,
) -> Result<EquivalenceVerdict> {
    same_shape(a, b)?;
    let (ba, bb) = budgets(budget);
    let la = a.joint_law(engine, &ba)?;
    let lb = b.joint_law(engine, &bb)?;
    law_verdict(Level::CrossOutcome, engine, &la, &lb, budget)
}

/// `ℒ(T, X, Y_t)` agree for every `t`. Monte Carlo p-values are
/// Bonferroni-adjusted over the levels.
pub fn compare_single_outcome(
    a: &FunctionalRcm,
    b: &FunctionalRcm,
    engine: Engine,
    budget: &Budget,
) -> Result<EquivalenceVerdict> {
    same_shape(a, b)?;
    let (ba, bb) = budgets(budget);
    let k = a.support().len();
    let mut worst: Option<EquivalenceVerdict> = None;
    let mut per_t = Vec::new();
    for &t in a.support() {
        let la = a.single_law(t, engine, &ba)?;
        let lb = b.single_law(t, engine, &bb)?;
        let mut v = law_verdict(Level::SingleOutcome, engine, &la, &lb, budget)?;
        per_t.push((t, v.statistic));
        if let Some(p) = v.p_value {
            let adj = (p * k as f64).min(1.0);
            v.p_value = Some(adj);
            v.verdict = Verdict::from_p(adj);
        }
        if v.statistic > v.threshold {
            v.witness = Some(format!("t = {t}"));
        }
        let worse = match &worst {
            None => true,
            Some(w) => match (v.p_value, w.p_value) {
                (Some(p), Some(q)) => p < q,
                _ => v.statistic - v.threshold > w.statistic - w.threshold,
            },
        };
        if worse {
            worst = Some(v);
        }
    }
    let mut v = worst.expect("support is non-empty");
    v.per_t = per_t;
    Ok(v)
}

/// One-dimensional check on `Y_{t_max} − Y_{t_min}` (first outcome) using
/// every draw; sharper than the capped multivariate test.
pub fn cross_outcome_witness(a: &FunctionalRcm, b: &FunctionalRcm, budget: &Budget) -> Result<TestResult> {
    same_shape(a, b)?;
    let (ba, bb) = budgets(budget);
    let diff = |r: &FunctionalRcm, bud: &Budget| -> Result<Vec<f64>> {
        let hi = r.potential_indices(r.support().len() - 1)[0];
        let lo = r.potential_indices(0)[0];
        let m = r.program().len();
        Ok(simulate(r.program(), bud)?.chunks_exact(m).map(|row| row[hi] - row[lo]).collect())
    };
    Ok(energy_test_1d(&diff(a, &ba)?, &diff(b, &bb)?, budget.permutations, budget.level, budget.seed))
}
