//! Declarative scenario files: a shared noise space, named models built on
//! it, symbolic parameters, and expectations to check.
//!
//! ```json
//! {
//!   "id": "motivating",
//!   "parameters": {"alpha": 1, "beta": 2},
//!   "noises": [{"name": "U_T", "dist": "bernoulli", "p": 0.5}, ...],
//!   "models": [{"name": "M", "kind": "scm", "equations": ["T = U_T", ...], ...}],
//!   "expectations": [{"quantity": "cate_rcm", "model": "M", "expected": "beta"}]
//! }
//! ```

mod builtin;
mod run;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use builtin::{builtin, builtin_scenarios};
pub use run::{run, Report, ReportRow, RunConfig};

use crate::equivalence::Level;
use crate::error::{Error, Result};
use crate::expr::{parse_expr, Scope};
use crate::infer::Engine;
use crate::probability_space::{NoiseSpace, NoiseSpec};
use crate::rcm::{
    entailed_rcm, outcome_equation_rcm, parse_rcm, shifted_rcm, FunctionalRcm, IgnorabilityMode, RcmRoles,
};
use crate::scm::{Roles, ScmModel};

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

fn binary() -> Vec<f64> {
    vec![0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    pub noises: Vec<NoiseSpec>,
    pub models: Vec<ModelDef>,
    #[serde(default)]
    pub expectations: Vec<Expectation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Structural equations.
    Scm,
    /// Potential outcomes given directly as expressions.
    Rcm,
    /// The RCM entailed by the SCM `base`.
    Entailed,
    /// `Y_t := f_Y(t, X, U_Y)` from the SCM `base`.
    OutcomeEquation,
    /// The entailed RCM of `base` with `Y_t` shifted by `shift` whenever `T ≠ t`.
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDef {
    pub name: String,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub equations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(default = "default_treatment")]
    pub treatment: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<String>,
    /// Outcome names of an SCM, or the observed outcomes of an RCM.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<String>,
    /// Per treatment level, the potential-outcome variables of an RCM.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub potential: Vec<Vec<String>>,
    #[serde(default = "binary")]
    pub support: Vec<f64>,
    /// Shift expressions, one per outcome.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shift: Vec<String>,
}

fn default_treatment() -> String {
    "T".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    CateRcm,
    CateScm,
    DirectEffect,
    InterventionalCate,
    RelaxedGap,
    /// `E[Y_t]` under the identified single-outcome law.
    IdentifiedMean,
    /// `E[Y_{T=t}]`.
    DoMean,
    /// `E[f_Y(t, X, U_Y)]`.
    Theorem1Mean,
    /// `E[Y_t]` for an RCM.
    PotentialMean,
    Consistency,
    Positivity,
    Ignorability,
    Compare,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::CateRcm => "cate_rcm",
            Quantity::CateScm => "cate_scm",
            Quantity::DirectEffect => "direct_effect",
            Quantity::InterventionalCate => "interventional_cate",
            Quantity::RelaxedGap => "relaxed_gap",
            Quantity::IdentifiedMean => "identified_mean",
            Quantity::DoMean => "do_mean",
            Quantity::Theorem1Mean => "theorem1_mean",
            Quantity::PotentialMean => "potential_mean",
            Quantity::Consistency => "consistency",
            Quantity::Positivity => "positivity",
            Quantity::Ignorability => "ignorability",
            Quantity::Compare => "compare",
        }
    }

    /// Conditional on a covariate value, evaluated over a grid by default.
    pub fn on_grid(self) -> bool {
        matches!(
            self,
            Quantity::CateRcm
                | Quantity::CateScm
                | Quantity::DirectEffect
                | Quantity::InterventionalCate
                | Quantity::RelaxedGap
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedVerdict {
    Holds,
    Fails,
    Equal,
    NotEqual,
}

impl ExpectedVerdict {
    pub fn name(self) -> &'static str {
        match self {
            ExpectedVerdict::Holds => "holds",
            ExpectedVerdict::Fails => "fails",
            ExpectedVerdict::Equal => "equal",
            ExpectedVerdict::NotEqual => "not_equal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub quantity: Quantity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// The two models of a comparison.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    /// Covariate values; defaults to a nine-point quantile grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<IgnorabilityMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    /// Expression in the scenario parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ExpectedVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Overrides the run's engine for this expectation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<Engine>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub note: String,
}

/// A model built from a [`ModelDef`].
#[derive(Debug, Clone)]
pub enum Built {
    Scm(ScmModel),
    Rcm(FunctionalRcm),
}

impl Built {
    pub fn scm(&self) -> Result<&ScmModel> {
        match self {
            Built::Scm(m) => Ok(m),
            Built::Rcm(_) => Err(Error::Validation("expected a structural model".into())),
        }
    }

    /// RCMs as they are; SCMs through their entailed RCM.
    pub fn rcm(&self) -> Result<FunctionalRcm> {
        match self {
            Built::Scm(m) => entailed_rcm(m),
            Built::Rcm(r) => Ok(r.clone()),
        }
    }

    pub fn observational(&self) -> Result<crate::rcm::ObservationalView> {
        match self {
            Built::Scm(m) => Ok(m.observational()),
            Built::Rcm(r) => r.observational(),
        }
    }
}

/// Evaluates an expression in the scenario parameters.
pub fn eval_param_expr(src: &str, params: &BTreeMap<String, f64>) -> Result<f64> {
    let scope = Scope::new(params, std::iter::empty(), std::iter::empty())?;
    let e = parse_expr(src, &scope)?;
    e.eval_const().ok_or_else(|| Error::Validation(format!("`{src}` is not a constant expression")))
}

impl Scenario {
    /// Parameters with `overrides` applied; unknown names are rejected.
    pub fn parameters_with(&self, overrides: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
        let mut p = self.parameters.clone();
        for (k, v) in overrides {
            if !p.contains_key(k) {
                return Err(Error::Validation(format!("unknown parameter `{k}` for scenario `{}`", self.id)));
            }
            p.insert(k.clone(), *v);
        }
        Ok(p)
    }

    pub fn noise_space(&self) -> Result<Arc<NoiseSpace>> {
        let specs =
            self.noises.iter().map(|s| NoiseSpec::new(s.name.clone(), s.dist.clone())).collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(NoiseSpace::new(specs)?))
    }

    /// Builds every model, in declaration order, with `params`.
    pub fn build(&self, params: &BTreeMap<String, f64>) -> Result<BTreeMap<String, Built>> {
        let noise = self.noise_space()?;
        let mut out: BTreeMap<String, Built> = BTreeMap::new();
        for m in &self.models {
            let located = |e: Error| match e {
                Error::Parse { location, message } => {
                    Error::Parse { location: format!("model `{}`, {location}", m.name), message }
                }
                e => e,
            };
            let base = || -> Result<&ScmModel> {
                let name = m
                    .base
                    .as_deref()
                    .ok_or_else(|| Error::Validation(format!("model `{}` needs a `base` structural model", m.name)))?;
                out.get(name).ok_or_else(|| Error::UnknownReference(name.to_string()))?.scm()
            };
            let lines: Vec<&str> = m.equations.iter().map(String::as_str).collect();
            let built = match m.kind {
                ModelKind::Scm => {
                    let outcomes = if m.outcomes.is_empty() { vec!["Y".to_string()] } else { m.outcomes.clone() };
                    let roles = Roles {
                        treatment: m.treatment.clone(),
                        covariates: m.covariates.clone(),
                        outcomes,
                        support: m.support.clone(),
                    };
                    Built::Scm(ScmModel::parse(noise.clone(), &lines, params, roles).map_err(located)?)
                }
                ModelKind::Rcm => {
                    let roles = RcmRoles {
                        treatment: m.treatment.clone(),
                        covariates: m.covariates.clone(),
                        observed: (!m.outcomes.is_empty()).then(|| m.outcomes.clone()),
                        potential: m.potential.clone(),
                        support: m.support.clone(),
                    };
                    Built::Rcm(parse_rcm(noise.clone(), &lines, params, roles).map_err(located)?)
                }
                ModelKind::Entailed => Built::Rcm(entailed_rcm(base()?)?),
                ModelKind::OutcomeEquation => Built::Rcm(outcome_equation_rcm(base()?)?),
                ModelKind::Shifted => {
                    let shift = m
                        .shift
                        .iter()
                        .map(|s| eval_param_expr(s, params))
                        .collect::<Result<Vec<_>>>()
                        .map_err(located)?;
                    Built::Rcm(shifted_rcm(base()?, &shift)?)
                }
            };
            if out.insert(m.name.clone(), built).is_some() {
                return Err(Error::DuplicateName(m.name.clone()));
            }
        }
        Ok(out)
    }

    /// Builds the models and checks that every expectation refers to known
    /// models and carries something to compare against.
    pub fn validate(&self) -> Result<()> {
        let models = self.build(&self.parameters)?;
        for (i, e) in self.expectations.iter().enumerate() {
            let at = |msg: String| Error::Validation(format!("expectation {i} ({}): {msg}", e.quantity.name()));
            let names: Vec<&String> = if e.quantity == Quantity::Compare {
                if e.models.len() != 2 {
                    return Err(at("`compare` needs exactly two `models`".into()));
                }
                if e.level.is_none() {
                    return Err(at("`compare` needs a `level`".into()));
                }
                e.models.iter().collect()
            } else {
                vec![e.model.as_ref().ok_or_else(|| at("missing `model`".into()))?]
            };
            for n in names {
                if !models.contains_key(n) {
                    return Err(at(format!("unknown model `{n}`")));
                }
            }
            match (&e.expected, &e.verdict) {
                (Some(x), None) => {
                    eval_param_expr(x, &self.parameters).map_err(|err| at(err.to_string()))?;
                }
                (None, Some(_)) => {}
                _ => return Err(at("set exactly one of `expected` and `verdict`".into())),
            }
            if e.quantity == Quantity::Ignorability && e.mode.is_none() {
                return Err(at("`ignorability` needs a `mode`".into()));
            }
            if matches!(
                e.quantity,
                Quantity::IdentifiedMean | Quantity::DoMean | Quantity::Theorem1Mean | Quantity::PotentialMean
            ) && e.t.is_none()
            {
                return Err(at("missing treatment level `t`".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios serialize")
    }
}

/// Parses and validates a scenario. Errors carry line and column.
pub fn parse_scenario(src: &str) -> Result<Scenario> {
    let s: Scenario = serde_json::from_str(src).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    s.validate()?;
    Ok(s)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse { location: path.display().to_string(), message: e.to_string() })?;
    parse_scenario(&src).map_err(|e| match e {
        Error::Parse { location, message } => {
            Error::Parse { location: format!("{}: {location}", path.display()), message }
        }
        e => e,
    })
}
