//! Rubin causal models realized as maps out of a noise space.
//!
//! A [`FunctionalRcm`] evaluates `(T, X, (Y_t)_t)` for every noise draw, so
//! two RCMs on the same space can be compared draw by draw. RCMs are built
//! from an SCM (entailed, outcome-equation, or shifted constructions) or
//! from user expressions.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::infer::{col, conditional_law, enumerate, eval_combo, simulate, Budget, Combo, Engine};
use crate::law::{psd_sqrt, row_major, total_variation, Component, Law, LawRepr, ANALYTIC_TOL};
use crate::linear::{Form, LinearEngine};
use crate::probability_space::{enumerate_noise, stream_rng, NoiseSpace, NoiseSpec};
use crate::program::Program;
use crate::scm::{check_support, parse_equations, Intervention, Roles, ScmModel};
use crate::stats::{bin_of, quantile, quantile_edges, stratified_energy_test, Stratum};

const MIN_STRATUM: usize = 30;
const STRATUM_CAP: usize = 120;
const POSITIVITY_EPS: f64 = 1e-3;
const GRID_DRAWS: usize = 20_000;

/// `(value, probability)` pairs of a finite law.
type Atoms = Vec<(Vec<f64>, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Entailed,
    OutcomeEquation,
    /// The entailed RCM with `Y_t` shifted off the factual arm.
    Shifted,
    UserDefined,
}

/// Roles for a user-defined RCM. `potential[k]` lists the outcome
/// variables for treatment level `support[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcmRoles {
    pub treatment: String,
    pub covariates: Vec<String>,
    pub observed: Option<Vec<String>>,
    pub potential: Vec<Vec<String>>,
    pub support: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FunctionalRcm {
    program: Program,
    t: usize,
    x: Vec<usize>,
    y_t: Vec<Vec<usize>>,
    y_obs: Option<Vec<usize>>,
    support: Vec<f64>,
    outcome_names: Vec<String>,
    provenance: Provenance,
}

/// The `(T, X, Y)` projection of a model.
#[derive(Debug, Clone)]
pub struct ObservationalView {
    pub program: Program,
    pub t: usize,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub support: Vec<f64>,
}

/// Outcome of an assumption check. `holds` is `statistic <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub holds: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub method: Engine,
    pub p_value: Option<f64>,
    pub witnesses: Vec<String>,
    /// Monte Carlo strata dropped for having too few samples.
    pub skipped_strata: usize,
}

impl CheckReport {
    fn new(statistic: f64, threshold: f64, method: Engine) -> Self {
        CheckReport {
            holds: statistic <= threshold,
            statistic,
            threshold,
            method,
            p_value: None,
            witnesses: Vec::new(),
            skipped_strata: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IgnorabilityMode {
    Single,
    Cross,
}

fn level_index(support: &[f64], t: f64) -> Result<usize> {
    support.iter().position(|s| *s == t).ok_or(Error::TreatmentOutOfSupport(t))
}

impl FunctionalRcm {
    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn noise(&self) -> &Arc<NoiseSpace> {
        self.program.noise()
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn treatment_index(&self) -> usize {
        self.t
    }

    pub fn covariate_indices(&self) -> &[usize] {
        &self.x
    }

    /// Program indices of `Y_t` for level index `k`.
    pub fn potential_indices(&self, k: usize) -> &[usize] {
        &self.y_t[k]
    }

    pub fn observed_indices(&self) -> Option<&[usize]> {
        self.y_obs.as_deref()
    }

    pub fn outcome_dim(&self) -> usize {
        self.outcome_names.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.x.iter().map(|&i| self.program.names()[i].clone()).collect()
    }

    pub fn treatment_name(&self) -> &str {
        &self.program.names()[self.t]
    }

    fn potential_label(&self, k: usize, j: usize) -> String {
        format!("{}_{}", self.outcome_names[j], self.support[k])
    }

    /// Targets and labels for `(T, X, Y_t for t in levels)`.
    pub(crate) fn targets(&self, levels: &[usize]) -> (Vec<Combo>, Vec<String>) {
        let mut targets = vec![col(self.t)];
        let mut labels = vec![self.treatment_name().to_string()];
        for &i in &self.x {
            targets.push(col(i));
            labels.push(self.program.names()[i].clone());
        }
        for &k in levels {
            for (j, &i) in self.y_t[k].iter().enumerate() {
                targets.push(col(i));
                labels.push(self.potential_label(k, j));
            }
        }
        (targets, labels)
    }

    /// `ℒ(T, X, (Y_t)_t)`.
    pub fn joint_law(&self, engine: Engine, budget: &Budget) -> Result<Law> {
        let levels: Vec<usize> = (0..self.support.len()).collect();
        let (t, l) = self.targets(&levels);
        conditional_law(&self.program, &[], &t, l, engine, budget)
    }

    /// `ℒ(T, X, Y_t)` for level `t`.
    pub fn single_law(&self, t: f64, engine: Engine, budget: &Budget) -> Result<Law> {
        let k = level_index(&self.support, t)?;
        let (targets, labels) = self.targets(&[k]);
        conditional_law(&self.program, &[], &targets, labels, engine, budget)
    }

    /// Observed outcome, synthesized as `Σ_t 1{T=t} Y_t` when the RCM does
    /// not define one.
    pub fn observational(&self) -> Result<ObservationalView> {
        let (program, y) = match &self.y_obs {
            Some(y) => (self.program.clone(), y.clone()),
            None => {
                let tname = self.treatment_name().to_string();
                let extra: Vec<(String, Expr)> = (0..self.outcome_dim())
                    .map(|j| {
                        let terms = self.support.iter().enumerate().map(|(k, t)| {
                            Expr::mul(
                                Expr::is_level(Expr::var(&tname), *t),
                                Expr::Var(self.program.names()[self.y_t[k][j]].clone()),
                            )
                        });
                        (format!("{}~obs", self.outcome_names[j]), Expr::sum(terms))
                    })
                    .collect();
                let base = self.program.len();
                let program = self.program.extend(extra)?;
                (program, (base..base + self.outcome_dim()).collect())
            }
        };
        Ok(ObservationalView { program, t: self.t, x: self.x.clone(), y, support: self.support.clone() })
    }
}

impl ScmModel {
    pub fn observational(&self) -> ObservationalView {
        ObservationalView {
            program: self.program().clone(),
            t: self.treatment_index(),
            x: self.covariate_indices().to_vec(),
            y: self.outcome_indices().to_vec(),
            support: self.support().to_vec(),
        }
    }
}

/// The RCM entailed by `model`: `Y_t` solves `M_{do(T=t)}` on the same draw.
pub fn entailed_rcm(model: &ScmModel) -> Result<FunctionalRcm> {
    let tname = &model.roles().treatment;
    let ivs: Vec<Intervention> = model.support().iter().map(|t| Intervention::new().set(tname, *t)).collect();
    let (program, maps) = model.worlds(&ivs)?;
    let y = model.outcome_indices();
    Ok(FunctionalRcm {
        program,
        t: model.treatment_index(),
        x: model.covariate_indices().to_vec(),
        y_t: maps.iter().map(|m| y.iter().map(|&i| m[i]).collect()).collect(),
        y_obs: Some(y.to_vec()),
        support: model.support().to_vec(),
        outcome_names: model.roles().outcomes.clone(),
        provenance: Provenance::Entailed,
    })
}

/// `Y_t := f_Y(t, X, U_Y)`: the treatment is fixed only inside the outcome
/// equations, covariates stay factual.
pub fn outcome_equation_rcm(model: &ScmModel) -> Result<FunctionalRcm> {
    let p = model.program();
    let roles = model.roles();
    let mut extra = Vec::new();
    let mut y_t = Vec::new();
    for t in model.support() {
        let mut idx = Vec::new();
        for &i in model.outcome_indices() {
            let e = p.expr(i).map_refs(&|e| match e {
                Expr::Var(n) if *n == roles.treatment => Some(Expr::Const(*t)),
                Expr::Var(n) if roles.outcomes.contains(n) => Some(Expr::Var(format!("{n}@{t}"))),
                _ => None,
            });
            idx.push(p.len() + extra.len());
            extra.push((format!("{}@{}", p.names()[i], t), e));
        }
        y_t.push(idx);
    }
    Ok(FunctionalRcm {
        program: p.extend(extra)?,
        t: model.treatment_index(),
        x: model.covariate_indices().to_vec(),
        y_t,
        y_obs: Some(model.outcome_indices().to_vec()),
        support: model.support().to_vec(),
        outcome_names: roles.outcomes.clone(),
        provenance: Provenance::OutcomeEquation,
    })
}

/// `Y_t := Y_{T=t} + 1{T ≠ t} · shift`: consistent, yet differs from the
/// entailed RCM on every draw with `T ≠ t`.
pub fn shifted_rcm(model: &ScmModel, shift: &[f64]) -> Result<FunctionalRcm> {
    let base = entailed_rcm(model)?;
    if shift.len() != base.outcome_dim() {
        return Err(Error::DimensionMismatch(shift.len(), base.outcome_dim()));
    }
    let tname = base.treatment_name().to_string();
    let p = &base.program;
    let mut extra = Vec::new();
    let mut y_t = Vec::new();
    for (k, t) in base.support.iter().enumerate() {
        let mut idx = Vec::new();
        for (j, &i) in base.y_t[k].iter().enumerate() {
            let off = Expr::sub(Expr::c(1.0), Expr::is_level(Expr::var(&tname), *t));
            let e = Expr::add(Expr::Var(p.names()[i].clone()), Expr::mul(off, Expr::c(shift[j])));
            idx.push(p.len() + extra.len());
            extra.push((format!("{}~{}", base.outcome_names[j], t), e));
        }
        y_t.push(idx);
    }
    Ok(FunctionalRcm { program: p.extend(extra)?, y_t, provenance: Provenance::Shifted, ..base })
}

/// An RCM whose potential outcomes are given directly as expressions.
/// Consistency is not assumed; see [`check_consistency`].
pub fn user_rcm(
    noise: impl Into<Arc<NoiseSpace>>,
    equations: Vec<(String, Expr)>,
    roles: RcmRoles,
) -> Result<FunctionalRcm> {
    check_support(&roles.support)?;
    if roles.potential.len() != roles.support.len() {
        return Err(Error::DimensionMismatch(roles.potential.len(), roles.support.len()));
    }
    let dim = roles.potential[0].len();
    if dim == 0 || roles.potential.iter().any(|p| p.len() != dim) {
        return Err(Error::Validation("every level needs the same number of potential outcomes".into()));
    }
    if let Some(obs) = &roles.observed {
        if obs.len() != dim {
            return Err(Error::DimensionMismatch(obs.len(), dim));
        }
    }
    let program = Program::new(noise.into(), equations)?;
    let t = program.require(&roles.treatment)?;
    let x = roles.covariates.iter().map(|n| program.require(n)).collect::<Result<Vec<_>>>()?;
    let y_t = roles
        .potential
        .iter()
        .map(|ps| ps.iter().map(|n| program.require(n)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let y_obs = match &roles.observed {
        Some(obs) => Some(obs.iter().map(|n| program.require(n)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let outcome_names = match &roles.observed {
        Some(obs) => obs.clone(),
        None if dim == 1 => vec!["Y".to_string()],
        None => (0..dim).map(|j| format!("Y{j}")).collect(),
    };
    Ok(FunctionalRcm {
        program,
        t,
        x,
        y_t,
        y_obs,
        support: roles.support,
        outcome_names,
        provenance: Provenance::UserDefined,
    })
}

/// [`user_rcm`] from `"NAME = expression"` lines.
pub fn parse_rcm(
    noise: impl Into<Arc<NoiseSpace>>,
    lines: &[&str],
    params: &BTreeMap<String, f64>,
    roles: RcmRoles,
) -> Result<FunctionalRcm> {
    let noise = noise.into();
    let eqs = parse_equations(&noise, lines, params)?;
    user_rcm(noise, eqs, roles)
}

fn fmt_row(names: &[String], row: &[f64], idx: &[usize]) -> String {
    idx.iter().map(|&i| format!("{}={}", names[i], row[i])).collect::<Vec<_>>().join(", ")
}

/// `Y = Σ_t 1{T=t} Y_t` on every atom (exact) or every draw (Monte Carlo).
pub fn check_consistency(rcm: &FunctionalRcm, engine: Engine, budget: &Budget) -> Result<CheckReport> {
    let Some(y_obs) = &rcm.y_obs else {
        return Ok(CheckReport::new(0.0, 0.0, engine));
    };
    let p = &rcm.program;
    let deviation = |row: &[f64]| -> f64 {
        match rcm.support.iter().position(|s| *s == row[rcm.t]) {
            None => f64::INFINITY,
            Some(k) => y_obs.iter().zip(&rcm.y_t[k]).map(|(&a, &b)| (row[a] - row[b]).abs()).fold(0.0, f64::max),
        }
    };
    let show: Vec<usize> =
        std::iter::once(rcm.t).chain(y_obs.iter().copied()).chain(rcm.y_t.iter().flatten().copied()).collect();
    let mut worst: f64 = 0.0;
    let mut witnesses = Vec::new();
    let mut note = |label: String, row: &[f64], worst: &mut f64| {
        let d = deviation(row);
        if d > 0.0 && witnesses.len() < 5 {
            witnesses.push(format!("{label}: {}", fmt_row(p.names(), row, &show)));
        }
        *worst = worst.max(d);
    };
    match engine {
        Engine::Exact => {
            let mut row = vec![0.0; p.len()];
            for (a, atom) in enumerate(p)?.atoms.iter().enumerate() {
                p.eval_row(&atom.coords, &mut row)?;
                note(format!("atom {a}"), &row, &mut worst);
            }
        }
        Engine::MonteCarlo => {
            let rows = simulate(p, budget)?;
            for (i, row) in rows.chunks_exact(p.len()).enumerate() {
                note(format!("draw {i}"), row, &mut worst);
            }
        }
        Engine::Gaussian => {
            let lin = LinearEngine::new(p)?;
            for a in 0..lin.atom_count() {
                let f = lin.forms(a, &[])?;
                let t = f[rcm.t]
                    .as_const()
                    .ok_or_else(|| Error::EngineInapplicable("treatment is not fixed by the discrete noise".into()))?;
                let Some(k) = rcm.support.iter().position(|s| *s == t) else {
                    worst = f64::INFINITY;
                    continue;
                };
                for (&o, &q) in y_obs.iter().zip(&rcm.y_t[k]) {
                    let d = match (&f[o], &f[q]) {
                        (Form::Lin { c: c1, a: a1 }, Form::Lin { c: c2, a: a2 }) => {
                            if a1.iter().zip(a2).any(|(u, v)| u != v) {
                                f64::INFINITY
                            } else {
                                (c1 - c2).abs()
                            }
                        }
                        _ => return Err(Error::EngineInapplicable("outcome is not affine".into())),
                    };
                    if d > 0.0 && witnesses.len() < 5 {
                        witnesses.push(format!("atom {a}: {} differs from {}", p.names()[o], p.names()[q]));
                    }
                    worst = worst.max(d);
                }
            }
        }
    }
    let mut r = CheckReport::new(worst, 0.0, engine);
    r.witnesses = witnesses;
    Ok(r)
}

impl ObservationalView {
    pub fn covariate_names(&self) -> Vec<String> {
        self.x.iter().map(|&i| self.program.names()[i].clone()).collect()
    }

    /// Nine points at the 10%, ..., 90% quantiles of each covariate
    /// (taken coordinate-wise), from a seeded sample.
    pub fn covariate_grid(&self, budget: &Budget) -> Result<Vec<Vec<f64>>> {
        if self.x.is_empty() {
            return Ok(vec![vec![]]);
        }
        let b = Budget { n: GRID_DRAWS, ..budget.clone() };
        let rows = simulate(&self.program, &b)?;
        let m = self.program.len();
        let cols: Vec<Vec<f64>> = self.x.iter().map(|&i| rows.chunks_exact(m).map(|r| r[i]).collect()).collect();
        Ok((1..=9).map(|k| cols.iter().map(|c| quantile(c, k as f64 / 10.0)).collect()).collect())
    }

    fn x_evidence(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        if x.len() != self.x.len() {
            return Err(Error::DimensionMismatch(x.len(), self.x.len()));
        }
        Ok(self.x.iter().copied().zip(x.iter().copied()).collect())
    }

    /// `P(T = t | X = x)` for every level.
    pub fn propensity(&self, x: &[f64], engine: Engine, budget: &Budget) -> Result<Vec<f64>> {
        let ev = self.x_evidence(x)?;
        let law = conditional_law(&self.program, &ev, &[col(self.t)], vec!["T".into()], engine, budget)?;
        let mut out = vec![0.0; self.support.len()];
        match &law.repr {
            LawRepr::ExactTable { atoms } => {
                for (v, p) in atoms {
                    out[level_index(&self.support, v[0])?] += p;
                }
            }
            LawRepr::GaussianMixture { components } => {
                for c in components {
                    if c.cov[0].abs() > ANALYTIC_TOL {
                        return Err(Error::EngineInapplicable("treatment is not fixed by the discrete noise".into()));
                    }
                    out[level_index(&self.support, c.mean[0])?] += c.weight;
                }
            }
            LawRepr::Empirical { values, n, .. } => {
                for v in values {
                    out[level_index(&self.support, *v)?] += 1.0 / *n as f64;
                }
            }
        }
        Ok(out)
    }

    /// Observational rows of `(T, X, Y)` for `budget.n` draws.
    fn sample_tx(&self, budget: &Budget) -> Result<(Arc<Vec<f64>>, usize)> {
        Ok((simulate(&self.program, budget)?, self.program.len()))
    }
}

/// Assigns each row a cell of the product of per-covariate equal-mass bins.
fn cells(rows: &[f64], m: usize, x: &[usize]) -> Vec<usize> {
    let n = rows.len() / m;
    let bins = (n as f64).cbrt().ceil() as usize;
    let edges: Vec<Vec<f64>> = x
        .iter()
        .map(|&i| {
            let c: Vec<f64> = rows.chunks_exact(m).map(|r| r[i]).collect();
            let mut e = quantile_edges(&c, bins);
            e.dedup();
            e
        })
        .collect();
    rows.chunks_exact(m)
        .map(|r| x.iter().zip(&edges).fold(0usize, |acc, (&i, e)| acc * (e.len() + 1) + bin_of(e, r[i])))
        .collect()
}

/// `0 < P(T=t | X=x)` for every level and covariate value.
pub fn check_positivity(obs: &ObservationalView, engine: Engine, budget: &Budget) -> Result<CheckReport> {
    let k = obs.support.len();
    match engine {
        Engine::Exact => {
            let mut targets = vec![col(obs.t)];
            targets.extend(obs.x.iter().map(|&i| col(i)));
            let law = conditional_law(&obs.program, &[], &targets, vec![String::new(); targets.len()], engine, budget)?;
            let LawRepr::ExactTable { atoms } = &law.repr else { unreachable!() };
            let mut by_x: BTreeMap<Vec<u64>, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for (v, p) in atoms {
                let key = v[1..].iter().map(|z| z.to_bits()).collect();
                let entry = by_x.entry(key).or_insert_with(|| (v[1..].to_vec(), vec![0.0; k]));
                entry.1[level_index(&obs.support, v[0])?] += p;
            }
            let mut min_p: f64 = 1.0;
            let mut witnesses = Vec::new();
            for (x, probs) in by_x.values() {
                let tot: f64 = probs.iter().sum();
                let m = probs.iter().map(|p| p / tot).fold(1.0, f64::min);
                if m <= 0.0 {
                    witnesses.push(format!(
                        "x = {x:?}: propensities {:?}",
                        probs.iter().map(|p| p / tot).collect::<Vec<_>>()
                    ));
                }
                min_p = min_p.min(m);
            }
            let mut r = CheckReport::new(-min_p, -f64::MIN_POSITIVE, engine);
            r.witnesses = witnesses;
            Ok(r)
        }
        Engine::Gaussian => {
            let mut min_p: f64 = 1.0;
            let mut witnesses = Vec::new();
            for x in obs.covariate_grid(budget)? {
                let probs = match obs.propensity(&x, engine, budget) {
                    Err(Error::ZeroProbabilityEvidence) => continue,
                    r => r?,
                };
                let m = probs.iter().copied().fold(1.0, f64::min);
                if m <= 0.0 {
                    witnesses.push(format!("x = {x:?}: propensities {probs:?}"));
                }
                min_p = min_p.min(m);
            }
            let mut r = CheckReport::new(-min_p, -f64::MIN_POSITIVE, engine);
            r.witnesses = witnesses;
            Ok(r)
        }
        Engine::MonteCarlo => {
            let (rows, m) = obs.sample_tx(budget)?;
            let cell = cells(&rows, m, &obs.x);
            let mut counts: HashMap<usize, Vec<usize>> = HashMap::new();
            for (r, c) in rows.chunks_exact(m).zip(&cell) {
                counts.entry(*c).or_insert_with(|| vec![0; k])[level_index(&obs.support, r[obs.t])?] += 1;
            }
            let mut min_p: f64 = 1.0;
            let mut skipped = 0;
            let mut witnesses = Vec::new();
            let mut keys: Vec<_> = counts.keys().copied().collect();
            keys.sort_unstable();
            for c in keys {
                let v = &counts[&c];
                let tot: usize = v.iter().sum();
                if tot < MIN_STRATUM {
                    skipped += 1;
                    continue;
                }
                let p = v.iter().map(|&q| q as f64 / tot as f64).fold(1.0, f64::min);
                if p <= POSITIVITY_EPS && witnesses.len() < 5 {
                    witnesses.push(format!("cell {c}: counts {v:?}"));
                }
                min_p = min_p.min(p);
            }
            let mut r = CheckReport::new(-min_p, -POSITIVITY_EPS, engine);
            r.witnesses = witnesses;
            r.skipped_strata = skipped;
            Ok(r)
        }
    }
}

/// Tests `Y_t ⫫ T | X` for each `t` (single) or `(Y_t)_t ⫫ T | X` (cross).
pub fn check_ignorability(
    rcm: &FunctionalRcm,
    mode: IgnorabilityMode,
    engine: Engine,
    budget: &Budget,
) -> Result<CheckReport> {
    let levels = rcm.support.len();
    let groups: Vec<Vec<usize>> = match mode {
        IgnorabilityMode::Cross => vec![(0..levels).collect()],
        IgnorabilityMode::Single => (0..levels).map(|k| vec![k]).collect(),
    };
    match engine {
        Engine::Exact => {
            let mut worst: f64 = 0.0;
            let mut witnesses = Vec::new();
            for g in &groups {
                let (targets, labels) = rcm.targets(g);
                let law = conditional_law(&rcm.program, &[], &targets, labels, engine, budget)?;
                let LawRepr::ExactTable { atoms } = &law.repr else { unreachable!() };
                let nx = rcm.x.len();
                // x -> level -> (y -> prob)
                let mut strata: BTreeMap<Vec<u64>, Vec<Atoms>> = BTreeMap::new();
                for (v, p) in atoms {
                    let key = v[1..1 + nx].iter().map(|z| z.to_bits()).collect();
                    let slot = strata.entry(key).or_insert_with(|| vec![Vec::new(); levels]);
                    slot[level_index(&rcm.support, v[0])?].push((v[1 + nx..].to_vec(), *p));
                }
                for (x, per_level) in &strata {
                    let laws: Vec<Law> = per_level
                        .iter()
                        .filter(|l| !l.is_empty())
                        .map(|l| {
                            let tot: f64 = l.iter().map(|(_, p)| p).sum();
                            Law::table(
                                vec![String::new(); targets.len() - 1 - nx],
                                l.iter().map(|(y, p)| (y.clone(), p / tot)),
                            )
                        })
                        .collect();
                    for i in 0..laws.len() {
                        for j in (i + 1)..laws.len() {
                            let tv = total_variation(&laws[i], &laws[j])?;
                            if tv > 1e-12 && witnesses.len() < 5 {
                                let xs: Vec<f64> = x.iter().map(|b| f64::from_bits(*b)).collect();
                                witnesses.push(format!("x = {xs:?}: TV {tv:.3e} between treatment arms"));
                            }
                            worst = worst.max(tv);
                        }
                    }
                }
            }
            let mut r = CheckReport::new(worst, 1e-12, engine);
            r.witnesses = witnesses;
            Ok(r)
        }
        Engine::Gaussian => {
            let obs = rcm.observational()?;
            let mut worst: f64 = 0.0;
            let mut witnesses = Vec::new();
            for x in obs.covariate_grid(budget)? {
                for g in &groups {
                    let targets: Vec<Combo> = g.iter().flat_map(|&k| rcm.y_t[k].iter().map(|&i| col(i))).collect();
                    let mut laws = Vec::new();
                    for t in &rcm.support {
                        let mut ev = vec![(rcm.t, *t)];
                        ev.extend(rcm.x.iter().copied().zip(x.iter().copied()));
                        match conditional_law(
                            &rcm.program,
                            &ev,
                            &targets,
                            vec![String::new(); targets.len()],
                            engine,
                            budget,
                        ) {
                            Ok(l) => laws.push(l),
                            Err(Error::ZeroProbabilityEvidence) => {}
                            Err(e) => return Err(e),
                        }
                    }
                    for i in 0..laws.len() {
                        for j in (i + 1)..laws.len() {
                            let d = crate::law::mixture_discrepancy(&laws[i], &laws[j])?;
                            if d > ANALYTIC_TOL && witnesses.len() < 5 {
                                witnesses.push(format!("x = {x:?}: conditional laws differ by {d:.3e}"));
                            }
                            worst = worst.max(d);
                        }
                    }
                }
            }
            let mut r = CheckReport::new(worst, ANALYTIC_TOL, engine);
            r.witnesses = witnesses;
            Ok(r)
        }
        Engine::MonteCarlo => {
            let p = &rcm.program;
            let m = p.len();
            let rows = simulate(p, budget)?;
            let cell = cells(&rows, m, &rcm.x);
            let mut by_cell: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
            for (i, (r, c)) in rows.chunks_exact(m).zip(&cell).enumerate() {
                let k = level_index(&rcm.support, r[rcm.t])?;
                by_cell.entry(*c).or_insert_with(|| vec![Vec::new(); levels])[k].push(i);
            }
            let adj_level = budget.level / groups.len() as f64;
            let mut worst: Option<crate::stats::TestResult> = None;
            let mut skipped = 0;
            let mut min_p: f64 = 1.0;
            for (gi, g) in groups.iter().enumerate() {
                let cols: Vec<usize> = g.iter().flat_map(|&k| rcm.y_t[k].iter().copied()).collect();
                let mut strata = Vec::new();
                for members in by_cell.values() {
                    if members.iter().any(|v| v.len() < MIN_STRATUM) {
                        if gi == 0 {
                            skipped += 1;
                        }
                        continue;
                    }
                    let mut points = Vec::new();
                    let mut labels = Vec::new();
                    for (k, v) in members.iter().enumerate() {
                        for &i in v.iter().take(STRATUM_CAP) {
                            points.extend(cols.iter().map(|&c| rows[i * m + c]));
                            labels.push(k as u8);
                        }
                    }
                    strata.push(Stratum { dim: cols.len(), points, labels });
                }
                if strata.is_empty() {
                    return Err(Error::PositivityViolation("every covariate stratum is too small".into()));
                }
                let res = stratified_energy_test(
                    &strata,
                    levels,
                    budget.permutations,
                    adj_level,
                    budget.seed.wrapping_add(gi as u64),
                );
                if res.p_value <= min_p {
                    min_p = res.p_value;
                    worst = Some(res);
                }
            }
            let res = worst.expect("at least one group");
            let mut r = CheckReport::new(res.statistic, res.threshold, engine);
            r.holds = groups.len() as f64 * min_p >= budget.level;
            r.p_value = Some((groups.len() as f64 * min_p).min(1.0));
            r.skipped_strata = skipped;
            Ok(r)
        }
    }
}

/// The single-outcome law `ℒ(T, X, Y_t)` forced by positivity and
/// single-outcome ignorability: `Y_t | X=x, T=t'` is drawn from
/// `ℒ(Y | X=x, T=t)`. Depends on `obs` alone.
pub fn identify_single_outcome(obs: &ObservationalView, t: f64, engine: Engine, budget: &Budget) -> Result<Law> {
    level_index(&obs.support, t)?;
    let p = &obs.program;
    let nx = obs.x.len();
    let ny = obs.y.len();
    let mut labels = vec![p.names()[obs.t].clone()];
    labels.extend(obs.covariate_names());
    labels.extend(obs.y.iter().map(|&i| format!("{}_{}", p.names()[i].trim_end_matches("~obs"), t)));
    match engine {
        Engine::Exact => {
            let mut targets = vec![col(obs.t)];
            targets.extend(obs.x.iter().map(|&i| col(i)));
            targets.extend(obs.y.iter().map(|&i| col(i)));
            let joint = conditional_law(p, &[], &targets, labels.clone(), engine, budget)?;
            let LawRepr::ExactTable { atoms } = &joint.repr else { unreachable!() };
            let mut tx: BTreeMap<Vec<u64>, (Vec<f64>, f64)> = BTreeMap::new();
            let mut cond: HashMap<Vec<u64>, Vec<(Vec<f64>, f64)>> = HashMap::new();
            for (v, q) in atoms {
                let key: Vec<u64> = v[..1 + nx].iter().map(|z| z.to_bits()).collect();
                tx.entry(key).or_insert((v[..1 + nx].to_vec(), 0.0)).1 += q;
                if v[0] == t {
                    let xkey: Vec<u64> = v[1..1 + nx].iter().map(|z| z.to_bits()).collect();
                    cond.entry(xkey).or_default().push((v[1 + nx..].to_vec(), *q));
                }
            }
            let mut out = Vec::new();
            for (txv, q) in tx.values() {
                let xkey: Vec<u64> = txv[1..].iter().map(|z| z.to_bits()).collect();
                let ys = cond
                    .get(&xkey)
                    .ok_or_else(|| Error::PositivityViolation(format!("P(T={t}, X={:?}) = 0", &txv[1..])))?;
                let tot: f64 = ys.iter().map(|(_, w)| w).sum();
                for (y, w) in ys {
                    let mut v = txv.clone();
                    v.extend_from_slice(y);
                    out.push((v, q * w / tot));
                }
            }
            Ok(Law::table(labels, out))
        }
        Engine::Gaussian => identify_gaussian(obs, t, labels),
        Engine::MonteCarlo => {
            let (rows, m) = obs.sample_tx(budget)?;
            let n = rows.len() / m;
            let donors: Vec<usize> = (0..n).filter(|&i| rows[i * m + obs.t] == t).collect();
            if donors.is_empty() {
                return Err(Error::PositivityViolation(format!("no draws with T={t}")));
            }
            let matcher = Matcher::new(&rows, m, &obs.x, donors);
            let mut rng = stream_rng(budget.seed, 0x1d3);
            let mut vals = Vec::with_capacity(n * (1 + nx + ny));
            for i in 0..n {
                let r = &rows[i * m..(i + 1) * m];
                let d = matcher.nearest(r, &mut rng);
                vals.push(r[obs.t]);
                vals.extend(obs.x.iter().map(|&j| r[j]));
                vals.extend(obs.y.iter().map(|&j| rows[d * m + j]));
            }
            Ok(Law::empirical(labels, vals, budget.seed, "nearest-neighbour-matching"))
        }
    }
}

/// Nearest donor in covariate space; ties are broken uniformly at random.
struct Matcher<'a> {
    rows: &'a [f64],
    m: usize,
    x: &'a [usize],
    sort_col: usize,
    sorted: Vec<usize>,
    exact: HashMap<Vec<u64>, Vec<usize>>,
}

impl<'a> Matcher<'a> {
    fn new(rows: &'a [f64], m: usize, x: &'a [usize], donors: Vec<usize>) -> Self {
        let distinct = |j: usize| {
            let mut v: Vec<u64> = donors.iter().map(|&d| rows[d * m + j].to_bits()).collect();
            v.sort_unstable();
            v.dedup();
            v.len()
        };
        let sort_col = x.iter().copied().max_by_key(|&j| distinct(j)).unwrap_or(0);
        let mut exact: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
        for &d in &donors {
            exact.entry(x.iter().map(|&j| (rows[d * m + j] + 0.0).to_bits()).collect()).or_default().push(d);
        }
        let mut sorted = donors;
        sorted.sort_by(|a, b| rows[a * m + sort_col].total_cmp(&rows[b * m + sort_col]));
        Matcher { rows, m, x, sort_col, sorted, exact }
    }

    fn dist(&self, r: &[f64], d: usize) -> f64 {
        self.x.iter().map(|&j| (r[j] - self.rows[d * self.m + j]).powi(2)).sum::<f64>()
    }

    fn nearest(&self, r: &[f64], rng: &mut impl Rng) -> usize {
        let key: Vec<u64> = self.x.iter().map(|&j| (r[j] + 0.0).to_bits()).collect();
        if let Some(v) = self.exact.get(&key) {
            return v[rng.gen_range(0..v.len())];
        }
        let key0 = r.get(self.sort_col).copied().unwrap_or(0.0);
        let col = |d: usize| self.rows[d * self.m + self.sort_col];
        let pos = self.sorted.partition_point(|&d| col(d) < key0);
        let mut best = f64::INFINITY;
        let mut ties: Vec<usize> = Vec::new();
        let consider = |d: usize, best: &mut f64, ties: &mut Vec<usize>| {
            let dd = self.dist(r, d);
            if dd < *best {
                *best = dd;
                ties.clear();
                ties.push(d);
            } else if dd == *best {
                ties.push(d);
            }
        };
        let mut lo = pos;
        let mut hi = pos;
        loop {
            let left = if lo > 0 { Some((key0 - col(self.sorted[lo - 1])).powi(2)) } else { None };
            let right = if hi < self.sorted.len() { Some((col(self.sorted[hi]) - key0).powi(2)) } else { None };
            match (left, right) {
                (None, None) => break,
                (Some(l), r) if r.is_none_or(|r| l <= r) => {
                    if l > best {
                        break;
                    }
                    lo -= 1;
                    consider(self.sorted[lo], &mut best, &mut ties);
                }
                (_, Some(rr)) => {
                    if rr > best {
                        break;
                    }
                    consider(self.sorted[hi], &mut best, &mut ties);
                    hi += 1;
                }
                _ => unreachable!(),
            }
        }
        ties[rng.gen_range(0..ties.len())]
    }
}

fn identify_gaussian(obs: &ObservationalView, t: f64, labels: Vec<String>) -> Result<Law> {
    let p = &obs.program;
    let lin = LinearEngine::new(p)?;
    let g = lin.gauss_dim();
    let nx = obs.x.len();
    let ny = obs.y.len();
    let inapplicable = |why: &str| Error::EngineInapplicable(why.to_string());
    let lin_of = |f: &Form| -> Result<(f64, Vec<f64>)> {
        match f {
            Form::Lin { c, a } => Ok((*c, a.clone())),
            Form::NonLin => Err(inapplicable("observational variables are not affine in the Gaussian noise")),
        }
    };
    struct AtomForms {
        prob: f64,
        t: f64,
        x: Vec<(f64, Vec<f64>)>,
        y: Vec<(f64, Vec<f64>)>,
    }
    let mut atoms = Vec::new();
    for a in 0..lin.atom_count() {
        let f = lin.forms(a, &[])?;
        let tv = f[obs.t].as_const().ok_or_else(|| inapplicable("treatment is not fixed by the discrete noise"))?;
        atoms.push(AtomForms {
            prob: lin.atom(a).1,
            t: tv,
            x: obs.x.iter().map(|&i| lin_of(&f[i])).collect::<Result<_>>()?,
            y: obs.y.iter().map(|&i| lin_of(&f[i])).collect::<Result<_>>()?,
        });
    }
    let to_mats = |rows: &[(f64, Vec<f64>)]| {
        (
            DVector::from_iterator(rows.len(), rows.iter().map(|r| r.0)),
            DMatrix::from_fn(rows.len(), g, |i, k| rows[i].1[k]),
        )
    };
    // the T = t arm must be one Gaussian for the identified law to stay a finite mixture
    let arm: Vec<&AtomForms> = atoms.iter().filter(|a| a.t == t).collect();
    let first = arm.first().ok_or_else(|| Error::PositivityViolation(format!("P(T={t}) = 0")))?;
    let joint = |a: &AtomForms| {
        let mut rows = a.x.clone();
        rows.extend(a.y.iter().cloned());
        let (c, l) = to_mats(&rows);
        let cov = &l * l.transpose();
        (c, cov)
    };
    let (c0, s0) = joint(first);
    for a in &arm[1..] {
        let (c, s) = joint(a);
        if (&c - &c0).amax() > ANALYTIC_TOL || (&s - &s0).amax() > ANALYTIC_TOL {
            return Err(inapplicable("conditional outcome law is a mixture with covariate-dependent weights"));
        }
    }
    let mu_x = c0.rows(0, nx).into_owned();
    let mu_y = c0.rows(nx, ny).into_owned();
    let sxx = s0.view((0, 0), (nx, nx)).into_owned();
    let syx = s0.view((nx, 0), (ny, nx)).into_owned();
    let syy = s0.view((nx, nx), (ny, ny)).into_owned();
    let (k, resid) = if nx == 0 {
        (DMatrix::zeros(ny, 0), syy)
    } else {
        let chol = sxx.cholesky().ok_or_else(|| inapplicable("covariates are degenerate within the treated arm"))?;
        let k = chol.solve(&syx.transpose()).transpose();
        let resid = &syy - &k * syx.transpose();
        (k, resid)
    };
    let intercept = &mu_y - &k * &mu_x;
    let l_eps = psd_sqrt(&resid);
    let d = 1 + nx + ny;
    let comps = atoms
        .iter()
        .enumerate()
        .map(|(tag, a)| {
            let (cx, ax) = to_mats(&a.x);
            let mut mean = vec![a.t];
            mean.extend(cx.iter());
            mean.extend((&intercept + &k * &cx).iter());
            let mut load = DMatrix::zeros(d, g + ny);
            load.view_mut((1, 0), (nx, g)).copy_from(&ax);
            load.view_mut((1 + nx, 0), (ny, g)).copy_from(&(&k * &ax));
            load.view_mut((1 + nx, g), (ny, ny)).copy_from(&l_eps);
            let cov = &load * load.transpose();
            Component { tag, weight: a.prob, mean, cov: row_major(&cov) }
        })
        .collect();
    Ok(Law::mixture(labels, comps))
}

/// An SCM realizing a finite RCM, with the atom each value of its single
/// noise `U_atom` stands for.
#[derive(Debug, Clone)]
pub struct StructuralRepresentation {
    pub scm: ScmModel,
    pub atoms: Vec<Vec<f64>>,
}

/// Builds an SCM whose entailed RCM reproduces `rcm` atom by atom: one
/// discrete noise indexes the atoms, `T` and `X` read their values off it,
/// and `Y` is the table `(t, u) ↦ Y_t(u)`.
///
/// Such a representation exists for continuous RCMs too, through a
/// measurable bijection of the noise space with the reals, but that proof
/// gives no recipe; non-enumerable input returns `NotEnumerable`.
pub fn structural_representation(rcm: &FunctionalRcm) -> Result<StructuralRepresentation> {
    let table = enumerate_noise(rcm.noise())?;
    let p = &rcm.program;
    let mut row = vec![0.0; p.len()];
    let mut values = Vec::with_capacity(table.len());
    for a in &table.atoms {
        p.eval_row(&a.coords, &mut row)?;
        values.push(row.clone());
    }
    let total = table.total_mass();
    let u = "U_atom";
    let noise = NoiseSpace::new(vec![NoiseSpec::discrete(
        u,
        table.atoms.iter().enumerate().map(|(k, a)| (k as f64, a.prob / total)).collect(),
    )?])?;
    let lookup = |f: &dyn Fn(&Vec<f64>) -> f64| Expr::Table {
        inputs: vec![Expr::noise(u)],
        rows: values.iter().enumerate().map(|(k, v)| (vec![k as f64], f(v))).collect(),
    };
    let tname = rcm.treatment_name().to_string();
    let mut eqs = vec![(tname.clone(), lookup(&|v| v[rcm.t]))];
    for &i in &rcm.x {
        eqs.push((p.names()[i].clone(), lookup(&|v| v[i])));
    }
    for (j, name) in rcm.outcome_names.iter().enumerate() {
        let mut rows = Vec::new();
        for (k, t) in rcm.support.iter().enumerate() {
            for (a, v) in values.iter().enumerate() {
                rows.push((vec![*t, a as f64], v[rcm.y_t[k][j]]));
            }
        }
        eqs.push((name.clone(), Expr::Table { inputs: vec![Expr::var(&tname), Expr::noise(u)], rows }));
    }
    let roles = Roles {
        treatment: tname,
        covariates: rcm.covariate_names(),
        outcomes: rcm.outcome_names.clone(),
        support: rcm.support.clone(),
    };
    let scm = ScmModel::new(noise, eqs, roles)?;
    Ok(StructuralRepresentation { scm, atoms: table.atoms.into_iter().map(|a| a.coords).collect() })
}

/// Largest per-atom discrepancy in `(T, X, (Y_t)_t)` between `rcm` and the
/// entailed RCM of its representation.
pub fn representation_gap(rcm: &FunctionalRcm, rep: &StructuralRepresentation) -> Result<f64> {
    let ent = entailed_rcm(&rep.scm)?;
    let levels: Vec<usize> = (0..rcm.support.len()).collect();
    let (ta, _) = rcm.targets(&levels);
    let (tb, _) = ent.targets(&levels);
    if ta.len() != tb.len() {
        return Err(Error::DimensionMismatch(ta.len(), tb.len()));
    }
    let mut ra = vec![0.0; rcm.program.len()];
    let mut rb = vec![0.0; ent.program.len()];
    let mut worst: f64 = 0.0;
    for (k, coords) in rep.atoms.iter().enumerate() {
        rcm.program.eval_row(coords, &mut ra)?;
        ent.program.eval_row(&[k as f64], &mut rb)?;
        for (a, b) in ta.iter().zip(&tb) {
            worst = worst.max((eval_combo(&ra, a) - eval_combo(&rb, b)).abs());
        }
    }
    Ok(worst)
}
