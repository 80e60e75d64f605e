//! Browser bindings. Every export takes plain numbers or strings and
//! returns a JSON string, so the page needs no generated type glue beyond
//! what `wasm-bindgen` emits.

use std::collections::BTreeMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cfl_core::estimands::{cate_rcm, cate_scm};
use cfl_core::scenario::{builtin, builtin_scenarios, run, RunConfig};
use cfl_core::{Budget, Engine};

#[derive(Serialize)]
struct CateCurves {
    x: Vec<f64>,
    rcm: Vec<f64>,
    scm: Vec<f64>,
}

#[derive(Serialize)]
struct UnitEffects {
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize)]
struct ScenarioEntry {
    id: String,
    description: String,
}

fn json(v: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Both CATEs of the motivating model on an even grid over `[lo, hi]`.
pub fn cate_curves(alpha: f64, beta: f64, lo: f64, hi: f64, points: usize) -> Result<String, String> {
    let s = builtin("motivating").ok_or("motivating scenario missing")?;
    let params = s
        .parameters_with(&BTreeMap::from([("alpha".into(), alpha), ("beta".into(), beta)]))
        .map_err(|e| e.to_string())?;
    let models = s.build(&params).map_err(|e| e.to_string())?;
    let m = models["M"].scm().map_err(|e| e.to_string())?;
    let obs = m.observational();
    let budget = Budget::default();
    let points = points.max(2);
    let x: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let mut out = CateCurves { x: x.clone(), rcm: Vec::new(), scm: Vec::new() };
    for xi in x {
        out.rcm.push(cate_rcm(&obs, &[xi], Engine::Gaussian, &budget).map_err(|e| e.to_string())?.value);
        out.scm.push(cate_scm(m, &[xi], Engine::Gaussian, &budget).map_err(|e| e.to_string())?.value);
    }
    json(&out)
}

/// Draws of `Y_1 - Y_0` from two RCMs of one bundled scenario.
pub fn unit_effects(scenario: &str, a: &str, b: &str, n: usize, seed: u64) -> Result<String, String> {
    let s = builtin(scenario).ok_or_else(|| format!("no bundled scenario `{scenario}`"))?;
    let models = s.build(&s.parameters).map_err(|e| e.to_string())?;
    let budget = Budget::new(n, seed);
    let draws = |name: &str| -> Result<Vec<f64>, String> {
        let rcm = models.get(name).ok_or_else(|| format!("no model `{name}`"))?.rcm().map_err(|e| e.to_string())?;
        if rcm.support().len() != 2 || rcm.outcome_dim() != 1 {
            return Err(format!("`{name}` needs a binary treatment and one outcome"));
        }
        let law = rcm.joint_law(Engine::MonteCarlo, &budget).map_err(|e| e.to_string())?;
        let d = law.dim();
        // columns are T, X..., Y_0, Y_1
        Ok(law.sample(seed, n).chunks(d).map(|r| r[d - 1] - r[d - 2]).collect())
    };
    json(&UnitEffects { a: draws(a)?, b: draws(b)? })
}

/// Runs a bundled scenario and returns its report rows.
pub fn scenario_report(id: &str, engine: &str, seed: u64, n: usize) -> Result<String, String> {
    let s = builtin(id).ok_or_else(|| format!("no bundled scenario `{id}`"))?;
    let engine: Engine = engine.parse().map_err(|e: cfl_core::Error| e.to_string())?;
    let report = run(&s, &RunConfig { seed, engine, n, params: BTreeMap::new() }).map_err(|e| e.to_string())?;
    json(&report.rows)
}

pub fn scenario_list() -> Result<String, String> {
    let entries: Vec<_> =
        builtin_scenarios().into_iter().map(|s| ScenarioEntry { id: s.id, description: s.description }).collect();
    json(&entries)
}

#[wasm_bindgen(js_name = cateCurves)]
pub fn cate_curves_js(alpha: f64, beta: f64, lo: f64, hi: f64, points: usize) -> Result<String, JsValue> {
    cate_curves(alpha, beta, lo, hi, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = unitEffects)]
pub fn unit_effects_js(scenario: &str, a: &str, b: &str, n: usize, seed: u32) -> Result<String, JsValue> {
    unit_effects(scenario, a, b, n, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = scenarioReport)]
pub fn scenario_report_js(id: &str, engine: &str, seed: u32, n: usize) -> Result<String, JsValue> {
    scenario_report(id, engine, seed.into(), n).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = scenarioList)]
pub fn scenario_list_js() -> Result<String, JsValue> {
    scenario_list().map_err(|e| JsValue::from_str(&e))
}
