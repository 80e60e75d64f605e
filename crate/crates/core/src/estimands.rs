//! Causal estimands: CATEs read off potential outcomes or off
//! do-interventions, the direct effect, the interventional CATE, and the
//! law of the outcome-equation intervention.
//!
//! Every estimand takes the first outcome when a model has several.
//! Analytic engines return values with no standard error. The Monte Carlo
//! engine conditions on continuous covariates with a kernel window and a
//! local-linear fit, and reports the intercept's standard error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::infer::{col, conditional_law, in_window, local_linear, simulate, windows, Budget, Combo, Engine};
use crate::law::Law;
use crate::program::Program;
use crate::rcm::{outcome_equation_rcm, ObservationalView};
use crate::scm::{Intervention, ScmModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandReport {
    pub name: String,
    /// Covariate value the estimand is conditioned on, if any.
    pub x: Option<Vec<f64>>,
    pub value: f64,
    pub se: Option<f64>,
    pub engine: Engine,
    pub seed: Option<u64>,
    pub n: Option<usize>,
}

impl EstimandReport {
    fn new(name: &str, x: Option<&[f64]>, (value, se): (f64, Option<f64>), engine: Engine, budget: &Budget) -> Self {
        let mc = engine == Engine::MonteCarlo;
        EstimandReport {
            name: name.to_string(),
            x: x.map(<[f64]>::to_vec),
            value,
            se,
            engine,
            seed: mc.then_some(budget.seed),
            n: mc.then_some(budget.n),
        }
    }
}

type Estimate = (f64, Option<f64>);

fn diff((a, sa): Estimate, (b, sb): Estimate) -> Estimate {
    let se = match (sa, sb) {
        (None, None) => None,
        (x, y) => Some((x.unwrap_or(0.0).powi(2) + y.unwrap_or(0.0).powi(2)).sqrt()),
    };
    (a - b, se)
}

/// `E[target | evidence]`.
pub(crate) fn conditional_mean(
    program: &Program,
    evidence: &[(usize, f64)],
    target: &Combo,
    engine: Engine,
    budget: &Budget,
) -> Result<Estimate> {
    match engine {
        Engine::Exact | Engine::Gaussian => {
            let law =
                conditional_law(program, evidence, std::slice::from_ref(target), vec![String::new()], engine, budget)?;
            Ok((law.mean()[0], None))
        }
        Engine::MonteCarlo => {
            let m = program.len();
            let rows = simulate(program, budget)?;
            let h = windows(program, &rows, evidence, budget);
            let cont: Vec<(usize, f64)> =
                evidence.iter().zip(&h).filter(|(_, h)| h.is_some()).map(|(e, _)| *e).collect();
            let mut y = Vec::new();
            let mut z: Vec<Vec<f64>> = vec![Vec::new(); cont.len()];
            for r in rows.chunks_exact(m) {
                if in_window(r, evidence, &h) {
                    y.push(crate::infer::eval_combo(r, target));
                    for (zc, (i, v)) in z.iter_mut().zip(&cont) {
                        zc.push(r[*i] - v);
                    }
                }
            }
            if y.len() < 3 + cont.len() {
                return Err(Error::EmptyAcceptance(budget.n));
            }
            let (v, se) = local_linear(&y, &z)?;
            Ok((v, Some(se)))
        }
    }
}

fn x_evidence(x_idx: &[usize], x: &[f64]) -> Result<Vec<(usize, f64)>> {
    if x.len() != x_idx.len() {
        return Err(Error::DimensionMismatch(x.len(), x_idx.len()));
    }
    Ok(x_idx.iter().copied().zip(x.iter().copied()).collect())
}

fn binary_levels(support: &[f64]) -> (f64, f64) {
    (support[support.len() - 1], support[0])
}

/// `E[Y | X=x, T=1] − E[Y | X=x, T=0]`, which equals the RCM's CATE under
/// positivity and single-outcome ignorability. Uses the highest and lowest
/// treatment levels.
pub fn cate_rcm(obs: &ObservationalView, x: &[f64], engine: Engine, budget: &Budget) -> Result<EstimandReport> {
    let (hi, lo) = binary_levels(&obs.support);
    let mut ev = x_evidence(&obs.x, x)?;
    let arm = |t: f64, ev: &mut Vec<(usize, f64)>| -> Result<Estimate> {
        ev.insert(0, (obs.t, t));
        let r = conditional_mean(&obs.program, ev, &col(obs.y[0]), engine, budget);
        ev.remove(0);
        r.map_err(|e| match e {
            Error::ZeroProbabilityEvidence | Error::EmptyAcceptance(_) => {
                Error::PositivityViolation(format!("no mass at X={x:?}, T={t}"))
            }
            e => e,
        })
    };
    let v = diff(arm(hi, &mut ev)?, arm(lo, &mut ev)?);
    Ok(EstimandReport::new("cate_rcm", Some(x), v, engine, budget))
}

/// Outcome indices of two coupled worlds built by `ivs` and the difference
/// `Y(world 0) − Y(world 1)` of the first outcome.
fn coupled(model: &ScmModel, ivs: [Intervention; 2]) -> Result<(Program, Combo)> {
    let (p, maps) = model.worlds(&ivs)?;
    let y = model.outcome_indices()[0];
    Ok((p, vec![(maps[0][y], 1.0), (maps[1][y], -1.0)]))
}

/// `E[Y_{T=1} − Y_{T=0} | X=x]`: abduction on the factual covariates,
/// then coupled interventions on the treatment.
pub fn cate_scm(model: &ScmModel, x: &[f64], engine: Engine, budget: &Budget) -> Result<EstimandReport> {
    let (hi, lo) = binary_levels(model.support());
    let t = &model.roles().treatment;
    let (p, target) = coupled(model, [Intervention::new().set(t, hi), Intervention::new().set(t, lo)])?;
    let ev = x_evidence(model.covariate_indices(), x)?;
    let v = conditional_mean(&p, &ev, &target, engine, budget)?;
    Ok(EstimandReport::new("cate_scm", Some(x), v, engine, budget))
}

/// `E[Y_{T=1,X=x} − Y_{T=0,X=x}]`.
pub fn direct_effect_scm(model: &ScmModel, x: &[f64], engine: Engine, budget: &Budget) -> Result<EstimandReport> {
    let (hi, lo) = binary_levels(model.support());
    x_evidence(model.covariate_indices(), x)?;
    let world = |t: f64| {
        model
            .roles()
            .covariates
            .iter()
            .zip(x)
            .fold(Intervention::new().set(&model.roles().treatment, t), |iv, (n, v)| iv.set(n, *v))
    };
    let (p, target) = coupled(model, [world(hi), world(lo)])?;
    let v = conditional_mean(&p, &[], &target, engine, budget)?;
    Ok(EstimandReport::new("direct_effect_scm", Some(x), v, engine, budget))
}

/// `E[Y_{T=1} | X_{T=1}=x] − E[Y_{T=0} | X_{T=0}=x]`: conditioning happens
/// inside each intervened model.
pub fn interventional_cate(model: &ScmModel, x: &[f64], engine: Engine, budget: &Budget) -> Result<EstimandReport> {
    let (hi, lo) = binary_levels(model.support());
    let ev = x_evidence(model.covariate_indices(), x)?;
    let arm = |t: f64| -> Result<Estimate> {
        let m = model.apply_do(&Intervention::new().set(&model.roles().treatment, t))?;
        conditional_mean(m.program(), &ev, &col(m.outcome_indices()[0]), engine, budget)
    };
    let v = diff(arm(hi)?, arm(lo)?);
    Ok(EstimandReport::new("interventional_cate", Some(x), v, engine, budget))
}

/// `E[U_Y | X=x, T=1] − E[U_Y | X=x, T=0]`, where `U_Y` is the sum of the
/// noise terms appearing in the outcome equation. With an additive outcome
/// equation, `cate_rcm` equals the direct coefficient plus this gap.
pub fn relaxed_noise_cate_gap(model: &ScmModel, x: &[f64], engine: Engine, budget: &Budget) -> Result<EstimandReport> {
    let (hi, lo) = binary_levels(model.support());
    let y = model.outcome_indices()[0];
    let mut noises: Vec<String> = model.program().expr(y).noise_refs().into_iter().map(String::from).collect();
    noises.sort();
    noises.dedup();
    if noises.is_empty() {
        return Err(Error::Validation("outcome equation has no noise term".into()));
    }
    let u = Expr::sum(noises.iter().map(|n| Expr::noise(n)));
    let p = model.program().extend(vec![("U_Y~sum".to_string(), u)])?;
    let target = col(p.len() - 1);
    let mut ev = x_evidence(model.covariate_indices(), x)?;
    ev.insert(0, (model.treatment_index(), hi));
    let a = conditional_mean(&p, &ev, &target, engine, budget)?;
    ev[0].1 = lo;
    let b = conditional_mean(&p, &ev, &target, engine, budget)?;
    Ok(EstimandReport::new("relaxed_noise_cate_gap", Some(x), diff(a, b), engine, budget))
}

/// Law of `(T, X, f_Y(t, X, U_Y))`: the treatment is fixed inside the
/// outcome equation only.
pub fn theorem1_law(model: &ScmModel, t: f64, engine: Engine, budget: &Budget) -> Result<Law> {
    outcome_equation_rcm(model)?.single_law(t, engine, budget)
}

/// `E[Y_1] − E[Y_0]` from two potential-outcome laws, read off the last
/// coordinate of each. The laws fix only marginal means; the law of
/// `Y_1 − Y_0` needs a coupling, i.e. a functional RCM.
pub fn ate(treated: &Law, control: &Law, budget: &Budget) -> Result<EstimandReport> {
    if treated.dim() != control.dim() {
        return Err(Error::DimensionMismatch(treated.dim(), control.dim()));
    }
    let last = treated.dim() - 1;
    let se = |l: &Law| l.mean_se().map(|s| s[last]);
    let v = diff((treated.mean()[last], se(treated)), (control.mean()[last], se(control)));
    let engine = if treated.is_empirical() { Engine::MonteCarlo } else { engine_of(treated) };
    Ok(EstimandReport::new("ate", None, v, engine, budget))
}

fn engine_of(l: &Law) -> Engine {
    match l.repr {
        crate::law::LawRepr::ExactTable { .. } => Engine::Exact,
        crate::law::LawRepr::GaussianMixture { .. } => Engine::Gaussian,
        crate::law::LawRepr::Empirical { .. } => Engine::MonteCarlo,
    }
}

/// `E[V_{do(iv)}]` for a named variable.
pub fn mean_do(
    model: &ScmModel,
    iv: &Intervention,
    var: &str,
    engine: Engine,
    budget: &Budget,
) -> Result<EstimandReport> {
    let m = model.apply_do(iv)?;
    let i = m.program().require(var)?;
    let v = conditional_mean(m.program(), &[], &col(i), engine, budget)?;
    Ok(EstimandReport::new(&format!("mean_do({var})"), None, v, engine, budget))
}

/// Mean of coordinate `coord` of a law, with its Monte Carlo standard error.
pub fn law_mean(name: &str, law: &Law, coord: usize, budget: &Budget) -> Result<EstimandReport> {
    if coord >= law.dim() {
        return Err(Error::DimensionMismatch(coord, law.dim()));
    }
    let se = law.mean_se().map(|s| s[coord]);
    Ok(EstimandReport::new(name, None, (law.mean()[coord], se), engine_of(law), budget))
}
