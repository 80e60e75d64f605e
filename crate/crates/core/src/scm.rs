//! Structural causal models.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{parse_expr, split_equation, Expr, Scope};
use crate::infer::{col, conditional_law, Budget, Combo, Engine};
use crate::law::Law;
use crate::probability_space::{enumerate_noise, sample_noise, NoiseBatch, NoiseSpace};
use crate::program::Program;

const ENUMERATION_LIMIT: usize = 1 << 16;
const SUPPORT_CHECK_DRAWS: usize = 4096;

/// Which variables play treatment, covariate and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub treatment: String,
    pub covariates: Vec<String>,
    pub outcomes: Vec<String>,
    /// Integer treatment levels, e.g. `[0, 1]`.
    pub support: Vec<f64>,
}

impl Roles {
    pub fn new(treatment: &str, covariates: &[&str], outcomes: &[&str], support: &[f64]) -> Self {
        Roles {
            treatment: treatment.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            outcomes: outcomes.iter().map(|s| s.to_string()).collect(),
            support: support.to_vec(),
        }
    }

    /// The usual binary-treatment layout `T`, `X...`, `Y`.
    pub fn binary(covariates: &[&str]) -> Self {
        Roles::new("T", covariates, &["Y"], &[0.0, 1.0])
    }
}

pub(crate) fn check_support(support: &[f64]) -> Result<()> {
    if support.is_empty() {
        return Err(Error::Validation("treatment support is empty".into()));
    }
    for (k, t) in support.iter().enumerate() {
        if t.fract() != 0.0 || *t != k as f64 {
            return Err(Error::Validation(format!("treatment support must be 0, 1, ..., N; got {support:?}")));
        }
    }
    Ok(())
}

/// Perfect intervention `do(I = v)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub assignments: Vec<(String, f64)>,
}

impl Intervention {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, var: &str, value: f64) -> Self {
        self.assignments.retain(|(v, _)| v != var);
        self.assignments.push((var.to_string(), value));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Graph-derived assumption flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssumptionFlags {
    pub acyclic: bool,
    /// No outcome is a parent of the treatment or a covariate.
    pub outcome_a5: bool,
    /// Outcome noises are disjoint from treatment and covariate noises.
    pub indep_noises_a6: bool,
    /// The treatment is not a parent of any covariate.
    pub no_posttreatment_a7_parent: bool,
    /// No covariate descends from the treatment.
    pub no_posttreatment_a7_descendant: bool,
}

/// Nodes and edges of the causal graph, noises included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
}

/// Solved endogenous values, row-major `n × names.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl Solution {
    pub fn len(&self) -> usize {
        self.values.len() / self.names.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(self.values.chunks_exact(self.names.len()).map(|r| r[k]).collect())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.names.len();
        &self.values[i * m..(i + 1) * m]
    }
}

/// An acyclic structural model with designated roles.
#[derive(Debug, Clone)]
pub struct ScmModel {
    program: Program,
    roles: Roles,
    t: usize,
    x: Vec<usize>,
    y: Vec<usize>,
}

impl ScmModel {
    pub fn new(noise: impl Into<Arc<NoiseSpace>>, equations: Vec<(String, Expr)>, roles: Roles) -> Result<Self> {
        let program = Program::new(noise.into(), equations)?;
        let model = Self::from_program(program, roles)?;
        model.check_treatment_support()?;
        Ok(model)
    }

    /// Parses `"NAME = expression"` lines with parameters substituted.
    pub fn parse(
        noise: impl Into<Arc<NoiseSpace>>,
        lines: &[&str],
        params: &BTreeMap<String, f64>,
        roles: Roles,
    ) -> Result<Self> {
        let noise = noise.into();
        let equations = parse_equations(&noise, lines, params)?;
        Self::new(noise, equations, roles)
    }

    pub(crate) fn from_program(program: Program, roles: Roles) -> Result<Self> {
        check_support(&roles.support)?;
        let t = program.require(&roles.treatment)?;
        let x = roles.covariates.iter().map(|n| program.require(n)).collect::<Result<Vec<_>>>()?;
        let y = roles.outcomes.iter().map(|n| program.require(n)).collect::<Result<Vec<_>>>()?;
        if y.is_empty() {
            return Err(Error::Validation("at least one outcome is required".into()));
        }
        let mut seen = HashSet::new();
        for i in std::iter::once(t).chain(x.iter().copied()).chain(y.iter().copied()) {
            if !seen.insert(i) {
                return Err(Error::Validation(format!("`{}` has more than one role", program.names()[i])));
            }
        }
        Ok(ScmModel { program, roles, t, x, y })
    }

    fn check_treatment_support(&self) -> Result<()> {
        let noise = self.program.noise();
        let mut row = vec![0.0; self.program.len()];
        let check = |v: f64| {
            if self.roles.support.contains(&v) {
                Ok(())
            } else {
                Err(Error::TreatmentOutOfSupport(v))
            }
        };
        match noise.atom_count() {
            Some(c) if c <= ENUMERATION_LIMIT => {
                for a in enumerate_noise(noise)?.atoms {
                    self.program.eval_row(&a.coords, &mut row)?;
                    check(row[self.t])?;
                }
            }
            _ => {
                let batch = sample_noise(noise, 0, SUPPORT_CHECK_DRAWS);
                for r in batch.rows() {
                    self.program.eval_row(r, &mut row)?;
                    check(row[self.t])?;
                }
            }
        }
        Ok(())
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn noise(&self) -> &Arc<NoiseSpace> {
        self.program.noise()
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn support(&self) -> &[f64] {
        &self.roles.support
    }

    pub fn treatment_index(&self) -> usize {
        self.t
    }

    pub fn covariate_indices(&self) -> &[usize] {
        &self.x
    }

    pub fn outcome_indices(&self) -> &[usize] {
        &self.y
    }

    pub fn equations(&self) -> Vec<(String, Expr)> {
        self.program.equations()
    }

    /// Topological order, ties broken by declaration order.
    pub fn validate(&self) -> Vec<String> {
        self.program.order().iter().map(|&i| self.program.names()[i].clone()).collect()
    }

    pub fn graph(&self) -> CausalGraph {
        let p = &self.program;
        let mut nodes: Vec<String> = p.noise().specs().iter().map(|s| s.name.clone()).collect();
        nodes.extend(p.names().iter().cloned());
        let mut edges = Vec::new();
        for i in 0..p.len() {
            for &j in p.exo(i) {
                edges.push((p.noise().specs()[j].name.clone(), p.names()[i].clone()));
            }
            for &k in p.parents(i) {
                edges.push((p.names()[k].clone(), p.names()[i].clone()));
            }
        }
        CausalGraph { nodes, edges }
    }

    pub fn solve(&self, batch: &NoiseBatch) -> Result<Solution> {
        if batch.space_id != self.noise().id() {
            return Err(Error::SpaceMismatch);
        }
        Ok(Solution { names: self.program.names().to_vec(), values: self.program.solve(batch)? })
    }

    pub(crate) fn resolve(&self, iv: &Intervention) -> Result<Vec<(usize, f64)>> {
        iv.assignments
            .iter()
            .map(|(name, v)| {
                let i = self.program.require(name)?;
                if !v.is_finite() {
                    return Err(Error::InvalidIntervention(format!("{name} = {v}")));
                }
                if i == self.t && !self.roles.support.contains(v) {
                    return Err(Error::TreatmentOutOfSupport(*v));
                }
                Ok((i, *v))
            })
            .collect()
    }

    /// The modified model with intervened equations replaced by constants.
    pub fn apply_do(&self, iv: &Intervention) -> Result<ScmModel> {
        let reps: Vec<(usize, Expr)> = self.resolve(iv)?.into_iter().map(|(i, v)| (i, Expr::Const(v))).collect();
        let program = self.program.with_replaced(&reps)?;
        Ok(ScmModel { program, ..self.clone() })
    }

    /// Every occurrence of the treatment inside outcome equations becomes `t`.
    pub fn outcome_equation_intervention(&self, t: f64) -> Result<ScmModel> {
        if !self.roles.support.contains(&t) {
            return Err(Error::TreatmentOutOfSupport(t));
        }
        let reps: Vec<(usize, Expr)> = self
            .y
            .iter()
            .map(|&i| (i, self.program.expr(i).substitute(&self.roles.treatment, &Expr::Const(t))))
            .collect();
        let program = self.program.with_replaced(&reps)?;
        Ok(ScmModel { program, ..self.clone() })
    }

    /// Closed-form reduced equations for the variables outside `intervened`,
    /// obtained by substituting along the topological order.
    pub fn vectorize(&self, intervened: &[&str]) -> Result<Vectorized> {
        let p = &self.program;
        let set: HashSet<usize> = intervened.iter().map(|n| p.require(n)).collect::<Result<_>>()?;
        let mut reduced: HashMap<usize, Expr> = HashMap::new();
        let mut outputs = Vec::new();
        for &i in p.order() {
            if set.contains(&i) {
                continue;
            }
            let e = p.expr(i).map_refs(&|e| match e {
                Expr::Var(n) => {
                    let k = p.index_of(n).expect("validated");
                    reduced.get(&k).cloned()
                }
                _ => None,
            });
            reduced.insert(i, e);
            outputs.push(i);
        }
        let mut inputs: Vec<usize> =
            set.iter().copied().filter(|&k| outputs.iter().any(|&i| p.parents(i).contains(&k))).collect();
        inputs.sort_unstable();
        let mut noises: Vec<usize> = outputs.iter().flat_map(|&i| p.exo(i).iter().copied()).collect();
        noises.sort_unstable();
        noises.dedup();
        Ok(Vectorized {
            inputs: inputs.iter().map(|&k| p.names()[k].clone()).collect(),
            noises: noises.iter().map(|&j| p.noise().specs()[j].name.clone()).collect(),
            outputs: outputs.iter().map(|&i| p.names()[i].clone()).collect(),
            exprs: outputs.iter().map(|i| reduced[i].clone()).collect(),
        })
    }

    pub fn check_assumptions(&self) -> AssumptionFlags {
        let p = &self.program;
        let ys: HashSet<usize> = self.y.iter().copied().collect();
        let outcome_a5 =
            std::iter::once(self.t).chain(self.x.iter().copied()).all(|i| p.parents(i).iter().all(|k| !ys.contains(k)));
        let y_exo: HashSet<usize> = self.y.iter().flat_map(|&i| p.exo(i).iter().copied()).collect();
        let indep_noises_a6 =
            std::iter::once(self.t).chain(self.x.iter().copied()).all(|i| p.exo(i).iter().all(|j| !y_exo.contains(j)));
        let no_posttreatment_a7_parent = self.x.iter().all(|&i| !p.parents(i).contains(&self.t));
        let desc = p.descendants(&[self.t]);
        let no_posttreatment_a7_descendant = self.x.iter().all(|&i| !desc[i]);
        AssumptionFlags {
            acyclic: true,
            outcome_a5,
            indep_noises_a6,
            no_posttreatment_a7_parent,
            no_posttreatment_a7_descendant,
        }
    }

    /// Twin network of this model with one world per intervention.
    pub(crate) fn worlds(&self, ivs: &[Intervention]) -> Result<(Program, Vec<Vec<usize>>)> {
        let worlds = ivs.iter().map(|iv| self.resolve(iv)).collect::<Result<Vec<_>>>()?;
        self.program.twin(&worlds)
    }

    /// `ℒ(query in M_iv | evidence)` via abduction, action and prediction.
    pub fn counterfactual_law(
        &self,
        evidence: &[(&str, f64)],
        iv: &Intervention,
        query: &[&str],
        engine: Engine,
        budget: &Budget,
    ) -> Result<Law> {
        let (twin, maps) = self.worlds(std::slice::from_ref(iv))?;
        let ev = evidence.iter().map(|(n, v)| Ok((self.program.require(n)?, *v))).collect::<Result<Vec<_>>>()?;
        let targets: Vec<Combo> =
            query.iter().map(|n| Ok(col(maps[0][self.program.require(n)?]))).collect::<Result<_>>()?;
        let labels = query.iter().map(|s| s.to_string()).collect();
        conditional_law(&twin, &ev, &targets, labels, engine, budget)
    }
}

pub(crate) fn parse_equations(
    noise: &NoiseSpace,
    lines: &[&str],
    params: &BTreeMap<String, f64>,
) -> Result<Vec<(String, Expr)>> {
    let heads = lines.iter().map(|l| split_equation(l)).collect::<Result<Vec<_>>>()?;
    let scope = Scope::new(params, noise.specs().iter().map(|s| s.name.clone()), heads.iter().map(|(n, _)| n.clone()))?;
    heads
        .into_iter()
        .map(|(name, rhs)| {
            let e = parse_expr(rhs, &scope).map_err(|e| match e {
                Error::Parse { location, message } => {
                    Error::Parse { location: format!("equation for `{name}`, {location}"), message }
                }
                e => e,
            })?;
            Ok((name, e))
        })
        .collect()
}

/// Reduced-form map from intervened inputs and noises to the remaining
/// variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Vectorized {
    pub inputs: Vec<String>,
    pub noises: Vec<String>,
    pub outputs: Vec<String>,
    pub exprs: Vec<Expr>,
}

impl Vectorized {
    /// Evaluates the map. `noise` is a full draw of the model's noise space;
    /// only the listed noises are read.
    pub fn eval(&self, space: &NoiseSpace, inputs: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::DimensionMismatch(inputs.len(), self.inputs.len()));
        }
        let vars: HashMap<&str, f64> = self.inputs.iter().map(String::as_str).zip(inputs.iter().copied()).collect();
        self.exprs.iter().zip(&self.outputs).map(|(e, name)| eval_tree(e, &vars, space, noise, name)).collect()
    }
}

fn eval_tree(e: &Expr, vars: &HashMap<&str, f64>, space: &NoiseSpace, noise: &[f64], owner: &str) -> Result<f64> {
    use crate::expr::indicator;
    let rec = |x: &Expr| eval_tree(x, vars, space, noise, owner);
    Ok(match e {
        Expr::Const(c) => *c,
        Expr::Noise(n) => noise[space.index_of(n).ok_or_else(|| Error::UnknownReference(n.clone()))?],
        Expr::Var(n) => *vars.get(n.as_str()).ok_or_else(|| Error::UnknownReference(n.clone()))?,
        Expr::Add(a, b) => rec(a)? + rec(b)?,
        Expr::Mul(a, b) => rec(a)? * rec(b)?,
        Expr::Neg(a) => -rec(a)?,
        Expr::Min(a, b) => rec(a)?.min(rec(b)?),
        Expr::Max(a, b) => rec(a)?.max(rec(b)?),
        Expr::Indicator(a) => indicator(rec(a)?),
        Expr::Table { inputs, rows } => {
            let key = inputs.iter().map(|i| rec(i).map(|v| v + 0.0)).collect::<Result<Vec<_>>>()?;
            rows.iter()
                .find(|(k, _)| k.iter().map(|v| v + 0.0).eq(key.iter().copied()))
                .map(|(_, v)| *v)
                .ok_or(Error::MissingTableEntry { var: owner.to_string(), key })?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probability_space::NoiseSpec;

    fn motivating(alpha: f64, beta: f64) -> ScmModel {
        let noise = NoiseSpace::new(vec![
            NoiseSpec::bernoulli("U_T", 0.5).unwrap(),
            NoiseSpec::gaussian("U_X", 0.0, 1.0).unwrap(),
            NoiseSpec::gaussian("U_Y", 0.0, 1.0).unwrap(),
        ])
        .unwrap();
        let params = BTreeMap::from([("alpha".to_string(), alpha), ("beta".to_string(), beta)]);
        ScmModel::parse(
            noise,
            &["T = U_T", "X = alpha*T + U_X", "Y = X + beta*T + U_Y"],
            &params,
            Roles::binary(&["X"]),
        )
        .unwrap()
    }

    #[test]
    fn order_of_motivating_model() {
        assert_eq!(motivating(1.0, 2.0).validate(), ["T", "X", "Y"]);
    }

    #[test]
    fn hand_substitution() {
        let m = motivating(1.0, 2.0);
        let batch = NoiseBatch::from_rows(m.noise(), &[vec![1.0, 0.2, 0.0]]).unwrap();
        let s = m.solve(&batch).unwrap();
        assert_eq!(s.row(0), &[1.0, 1.2, 3.2]);
    }

    #[test]
    fn do_on_treatment_gives_closed_form() {
        let (a, b) = (1.0, 2.0);
        let m = motivating(a, b);
        let batch = sample_noise(m.noise(), 5, 1000);
        for t in [0.0, 1.0] {
            let s = m.apply_do(&Intervention::new().set("T", t)).unwrap().solve(&batch).unwrap();
            for (r, u) in s.values.chunks(3).zip(batch.rows()) {
                assert!((r[2] - ((a + b) * t + u[1] + u[2])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_do_on_treatment_and_covariate() {
        let m = motivating(1.0, 2.0);
        let batch = sample_noise(m.noise(), 6, 100);
        let iv = Intervention::new().set("T", 1.0).set("X", 0.7);
        let s = m.apply_do(&iv).unwrap().solve(&batch).unwrap();
        for (r, u) in s.values.chunks(3).zip(batch.rows()) {
            assert_eq!(r[2], 0.7 + 2.0 * 1.0 + u[2]);
        }
    }

    #[test]
    fn do_outside_support_is_rejected() {
        let m = motivating(1.0, 2.0);
        assert_eq!(m.apply_do(&Intervention::new().set("T", 2.0)).unwrap_err(), Error::TreatmentOutOfSupport(2.0));
        assert_eq!(m.apply_do(&Intervention::new().set("Z", 2.0)).unwrap_err(), Error::UnknownReference("Z".into()));
    }

    #[test]
    fn vectorize_motivating() {
        let m = motivating(1.0, 2.0);
        let v = m.vectorize(&["T"]).unwrap();
        assert_eq!(v.inputs, ["T"]);
        assert_eq!(v.outputs, ["X", "Y"]);
        let out = v.eval(m.noise(), &[1.0], &[0.0, 0.2, -0.5]).unwrap();
        assert_eq!(out, vec![1.0 * 1.0 + 0.2, (1.0 * 1.0 + 0.2) + 2.0 * 1.0 + -0.5]);
        let all = m.vectorize(&["T", "X", "Y"]).unwrap();
        assert!(all.outputs.is_empty());
    }

    #[test]
    fn assumption_flags() {
        let f = motivating(1.0, 2.0).check_assumptions();
        assert!(f.outcome_a5 && f.indep_noises_a6);
        assert!(!f.no_posttreatment_a7_parent && !f.no_posttreatment_a7_descendant);
    }

    #[test]
    fn treatment_outside_declared_support() {
        let noise = NoiseSpace::new(vec![NoiseSpec::discrete("U", vec![(0.0, 0.5), (2.0, 0.5)]).unwrap()]).unwrap();
        let r = ScmModel::parse(noise, &["T = U", "Y = T"], &BTreeMap::new(), Roles::binary(&[]));
        assert_eq!(r.unwrap_err(), Error::TreatmentOutOfSupport(2.0));
    }

    #[test]
    fn self_reference_is_cyclic() {
        let noise = NoiseSpace::new(vec![NoiseSpec::bernoulli("U", 0.5).unwrap()]).unwrap();
        let r = ScmModel::parse(noise, &["T = U", "X = U", "Y = X + Y"], &BTreeMap::new(), Roles::binary(&["X"]));
        assert_eq!(r.unwrap_err(), Error::CyclicGraph { cycle: vec!["Y".into()] });
    }
}
