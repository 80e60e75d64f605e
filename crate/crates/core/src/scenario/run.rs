use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;

use super::{eval_param_expr, Built, Expectation, ExpectedVerdict, Quantity, Scenario};
use crate::equivalence::{compare_almost_sure, compare_cross_outcome, compare_single_outcome, Level};
use crate::error::{Error, Result};
use crate::estimands::{
    cate_rcm, cate_scm, direct_effect_scm, interventional_cate, law_mean, mean_do, relaxed_noise_cate_gap,
    theorem1_law, EstimandReport,
};
use crate::infer::{Budget, Engine};
use crate::rcm::{check_consistency, check_ignorability, check_positivity, identify_single_outcome, CheckReport};
use crate::scm::Intervention;

/// Numeric expectations pass when `|value − expected| ≤ tolerance + 4·se`.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
const SE_MULTIPLIER: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub engine: Engine,
    pub n: usize,
    pub params: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 0, engine: Engine::Gaussian, n: 100_000, params: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scenario: String,
    pub estimand: String,
    pub model: String,
    pub x: String,
    pub value: String,
    pub se: String,
    pub engine: String,
    pub seed: u64,
    pub expected: String,
    pub tolerance: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub engine: Engine,
    pub n: usize,
    pub rows: Vec<ReportRow>,
    pub elapsed: Duration,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Deterministic given scenario, seed, engine and sample size.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("rows serialize");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "# Scenario `{}`: {status}\n", self.scenario);
        let _ = writeln!(
            s,
            "engine `{}`, seed {}, n = {}, wall-clock {:.2} s\n",
            self.engine,
            self.seed,
            self.n,
            self.elapsed.as_secs_f64()
        );
        let _ = writeln!(s, "| estimand | model | x | value | se | engine | expected | pass | detail |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                r.estimand,
                r.model,
                r.x,
                r.value,
                r.se,
                r.engine,
                r.expected,
                if r.pass { "yes" } else { "**no**" },
                r.detail.replace('|', "\\|")
            );
        }
        s
    }
}

enum Value {
    Number(f64),
    Verdict(String),
}

struct Outcome {
    x: Option<Vec<f64>>,
    value: Value,
    se: Option<f64>,
    statistic: Option<(f64, f64, Option<f64>)>,
    witness: Option<String>,
}

impl Outcome {
    fn number(x: Option<Vec<f64>>, value: f64, se: Option<f64>) -> Self {
        Outcome { x, value: Value::Number(value), se, statistic: None, witness: None }
    }

    fn estimand(r: EstimandReport) -> Self {
        Outcome::number(r.x, r.value, r.se)
    }

    fn check(r: CheckReport) -> Self {
        Outcome {
            x: None,
            value: Value::Verdict(if r.holds { "holds" } else { "fails" }.into()),
            se: None,
            statistic: Some((r.statistic, r.threshold, r.p_value)),
            witness: r.witnesses.into_iter().next(),
        }
    }
}

fn model<'a>(models: &'a BTreeMap<String, Built>, name: &str) -> Result<&'a Built> {
    models.get(name).ok_or_else(|| Error::UnknownReference(name.to_string()))
}

fn evaluate(
    e: &Expectation,
    models: &BTreeMap<String, Built>,
    engine: Engine,
    budget: &Budget,
) -> Result<Vec<Outcome>> {
    let name = e.model.as_deref().unwrap_or_default();
    let t = || e.t.ok_or_else(|| Error::Validation("missing `t`".into()));
    if e.quantity.on_grid() {
        let m = model(models, name)?;
        let xs = match &e.x {
            Some(xs) => xs.clone(),
            None => m.observational()?.covariate_grid(budget)?,
        };
        return xs
            .iter()
            .map(|x| {
                let r = match e.quantity {
                    Quantity::CateRcm => cate_rcm(&m.observational()?, x, engine, budget)?,
                    Quantity::CateScm => cate_scm(m.scm()?, x, engine, budget)?,
                    Quantity::DirectEffect => direct_effect_scm(m.scm()?, x, engine, budget)?,
                    Quantity::InterventionalCate => interventional_cate(m.scm()?, x, engine, budget)?,
                    Quantity::RelaxedGap => relaxed_noise_cate_gap(m.scm()?, x, engine, budget)?,
                    _ => unreachable!(),
                };
                Ok(Outcome::estimand(r))
            })
            .collect();
    }
    let last = |law: crate::law::Law| -> Result<Outcome> {
        let r = law_mean("", &law, law.dim() - 1, budget)?;
        Ok(Outcome::number(None, r.value, r.se))
    };
    let out = match e.quantity {
        Quantity::IdentifiedMean => {
            last(identify_single_outcome(&model(models, name)?.observational()?, t()?, engine, budget)?)?
        }
        Quantity::DoMean => {
            let m = model(models, name)?.scm()?;
            let iv = Intervention::new().set(&m.roles().treatment, t()?);
            Outcome::estimand(mean_do(m, &iv, &m.roles().outcomes[0], engine, budget)?)
        }
        Quantity::Theorem1Mean => last(theorem1_law(model(models, name)?.scm()?, t()?, engine, budget)?)?,
        Quantity::PotentialMean => last(model(models, name)?.rcm()?.single_law(t()?, engine, budget)?)?,
        Quantity::Consistency => Outcome::check(check_consistency(&model(models, name)?.rcm()?, engine, budget)?),
        Quantity::Positivity => {
            Outcome::check(check_positivity(&model(models, name)?.observational()?, engine, budget)?)
        }
        Quantity::Ignorability => {
            let mode = e.mode.ok_or_else(|| Error::Validation("missing `mode`".into()))?;
            Outcome::check(check_ignorability(&model(models, name)?.rcm()?, mode, engine, budget)?)
        }
        Quantity::Compare => {
            let a = model(models, &e.models[0])?.rcm()?;
            let b = model(models, &e.models[1])?.rcm()?;
            let v = match e.level.ok_or_else(|| Error::Validation("missing `level`".into()))? {
                Level::AlmostSure => compare_almost_sure(&a, &b, engine, budget)?,
                Level::CrossOutcome => compare_cross_outcome(&a, &b, engine, budget)?,
                Level::SingleOutcome => compare_single_outcome(&a, &b, engine, budget)?,
            };
            Outcome {
                x: None,
                value: Value::Verdict(v.verdict.name().into()),
                se: None,
                statistic: Some((v.statistic, v.threshold, v.p_value)),
                witness: v.witness,
            }
        }
        _ => unreachable!(),
    };
    Ok(vec![out])
}

/// Tries the requested engine, then falls back to the Gaussian and Monte
/// Carlo engines when the model is out of reach.
fn evaluate_with_fallback(
    e: &Expectation,
    models: &BTreeMap<String, Built>,
    requested: Engine,
    budget: &Budget,
) -> (Engine, Option<String>, Result<Vec<Outcome>>) {
    let mut order = vec![requested];
    order.extend([Engine::Gaussian, Engine::MonteCarlo].into_iter().filter(|g| *g != requested));
    let mut note = None;
    for engine in order {
        match evaluate(e, models, engine, budget) {
            Err(Error::EngineInapplicable(why)) => {
                note.get_or_insert_with(|| format!("{requested} engine not applicable ({why})"));
            }
            r => return (engine, note.map(|n| format!("{n}; fell back to {engine}")), r),
        }
    }
    (requested, note, Err(Error::EngineInapplicable("no engine applies".into())))
}

fn fmt_x(x: &Option<Vec<f64>>) -> String {
    x.as_ref().map(|v| v.iter().map(|c| format!("{c}")).collect::<Vec<_>>().join(";")).unwrap_or_default()
}

/// Wall-clock timer. The browser target has no monotonic clock in std, so
/// reports built there show zero elapsed time.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl FnOnce() -> Duration {
    let start = std::time::Instant::now();
    move || start.elapsed()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl FnOnce() -> Duration {
    || Duration::ZERO
}

/// Evaluates every expectation. Failures are reported per row and never
/// abort the run.
pub fn run(scenario: &Scenario, cfg: &RunConfig) -> Result<Report> {
    let elapsed = stopwatch();
    let params = scenario.parameters_with(&cfg.params)?;
    let models = scenario.build(&params)?;
    let budget = Budget::new(cfg.n, cfg.seed);
    let mut rows = Vec::new();
    for e in &scenario.expectations {
        let model_label =
            if e.quantity == Quantity::Compare { e.models.join(" vs ") } else { e.model.clone().unwrap_or_default() };
        let estimand = match (e.quantity, e.mode, e.level, e.t) {
            (Quantity::Ignorability, Some(m), _, _) => format!("ignorability({})", serde_plain(&m)),
            (Quantity::Compare, _, Some(l), _) => format!("compare({})", l.name()),
            (q, _, _, Some(t)) => format!("{}(t={t})", q.name()),
            (q, ..) => q.name().to_string(),
        };
        let tolerance = e.tolerance.unwrap_or(DEFAULT_TOLERANCE);
        let expected = match (&e.expected, e.verdict) {
            (Some(src), _) => eval_param_expr(src, &params).map(Expected::Number),
            (None, Some(v)) => Ok(Expected::Verdict(v)),
            (None, None) => Err(Error::Validation("nothing to compare against".into())),
        };
        let requested = e.engine.unwrap_or(cfg.engine);
        let (engine, note, result) = evaluate_with_fallback(e, &models, requested, &budget);
        let base = ReportRow {
            scenario: scenario.id.clone(),
            estimand,
            model: model_label,
            x: String::new(),
            value: String::new(),
            se: String::new(),
            engine: engine.to_string(),
            seed: cfg.seed,
            expected: match &expected {
                Ok(Expected::Number(v)) => format!("{v}"),
                Ok(Expected::Verdict(v)) => v.name().to_string(),
                Err(_) => String::new(),
            },
            tolerance: if matches!(expected, Ok(Expected::Number(_))) {
                format!("{tolerance:e}")
            } else {
                String::new()
            },
            pass: false,
            detail: String::new(),
        };
        let outcomes = match (expected, result) {
            (Err(err), _) | (_, Err(err)) => {
                rows.push(ReportRow { detail: err.to_string(), ..base });
                continue;
            }
            (Ok(exp), Ok(o)) => o.into_iter().map(move |o| (exp.clone(), o)),
        };
        for (exp, o) in outcomes {
            let mut row = base.clone();
            row.x = fmt_x(&o.x);
            row.se = o.se.map(|s| format!("{s:e}")).unwrap_or_default();
            let mut detail: Vec<String> = note.iter().cloned().collect();
            match (&exp, &o.value) {
                (Expected::Number(want), Value::Number(got)) => {
                    row.value = format!("{got}");
                    let slack = tolerance + SE_MULTIPLIER * o.se.unwrap_or(0.0);
                    row.pass = (got - want).abs() <= slack;
                    if !row.pass {
                        detail.push(format!("off by {:.3e} (allowed {slack:.3e})", (got - want).abs()));
                    }
                }
                (Expected::Verdict(want), Value::Verdict(got)) => {
                    row.value = got.clone();
                    row.pass = want.name() == got;
                }
                _ => detail.push("quantity and expectation kinds differ".into()),
            }
            if let Some((s, t, p)) = o.statistic {
                let mut d = format!("statistic {s:.6e} vs threshold {t:.6e}");
                if let Some(p) = p {
                    let _ = write!(d, ", p = {p:.4}");
                }
                detail.push(d);
            }
            if let Some(w) = o.witness {
                detail.push(format!("witness: {w}"));
            }
            row.detail = detail.join("; ");
            rows.push(row);
        }
    }
    Ok(Report { scenario: scenario.id.clone(), seed: cfg.seed, engine: cfg.engine, n: cfg.n, rows, elapsed: elapsed() })
}

#[derive(Debug, Clone)]
enum Expected {
    Number(f64),
    Verdict(ExpectedVerdict),
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}
