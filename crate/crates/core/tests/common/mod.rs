#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use cfl_core::probability_space::{NoiseSpace, NoiseSpec};
use cfl_core::rcm::{parse_rcm, FunctionalRcm, RcmRoles};
use cfl_core::scenario::{builtin, Built};
use cfl_core::scm::{Roles, ScmModel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn no_params() -> BTreeMap<String, f64> {
    BTreeMap::new()
}

pub fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Builds the named model of a bundled scenario with some parameters overridden.
pub fn scenario_model(id: &str, name: &str, overrides: &[(&str, f64)]) -> Built {
    let s = builtin(id).unwrap();
    let p = s.parameters_with(&params(overrides)).unwrap();
    s.build(&p).unwrap().remove(name).unwrap()
}

pub fn scenario_scm(id: &str, name: &str, overrides: &[(&str, f64)]) -> ScmModel {
    scenario_model(id, name, overrides).scm().unwrap().clone()
}

pub fn scenario_rcm(id: &str, name: &str, overrides: &[(&str, f64)]) -> FunctionalRcm {
    scenario_model(id, name, overrides).rcm().unwrap()
}

fn coef(r: &mut impl Rng) -> f64 {
    let v: f64 = r.gen_range(0.3..1.5);
    let v = (v * 100.0).round() / 100.0;
    if r.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

/// A random binary-treatment linear model with outcome `Y`, covariates
/// `X0..`, Bernoulli and Gaussian noises, no outcome feeding back into
/// `T` or `X`, and outcome noises of its own. Every covariate carries a
/// Gaussian noise so both arms have positive density everywhere.
/// With `pretreatment` no covariate depends on `T` (they may still share
/// `U_T` with it).
pub fn linear_model(seed: u64, pretreatment: bool) -> ScmModel {
    let mut r = rng(seed);
    let nx = r.gen_range(1..=3);
    let p_t = r.gen_range(0.25..0.75);
    let mut noises = vec![NoiseSpec::bernoulli("U_T", p_t).unwrap()];
    let mut eqs = vec!["T = U_T".to_string()];
    for k in 0..nx {
        noises.push(NoiseSpec::gaussian(&format!("G{k}"), coef(&mut r) * 0.5, r.gen_range(0.5..2.0)).unwrap());
        let mut terms = vec![format!("G{k}")];
        match r.gen_range(0..3) {
            0 => {}
            1 => terms.push(format!("{}*U_T", coef(&mut r))),
            _ if pretreatment => terms.push(format!("{}*U_T", coef(&mut r))),
            _ => terms.push(format!("{}*T", coef(&mut r))),
        }
        for j in 0..k {
            if r.gen_bool(0.5) {
                terms.push(format!("{}*X{j}", coef(&mut r)));
            }
        }
        if r.gen_bool(0.4) {
            noises.push(NoiseSpec::bernoulli(&format!("B{k}"), r.gen_range(0.2..0.8)).unwrap());
            terms.push(format!("{}*B{k}", coef(&mut r)));
        }
        eqs.push(format!("X{k} = {}", terms.join(" + ")));
    }
    noises.push(NoiseSpec::gaussian("U_Y", 0.0, r.gen_range(0.5..2.0)).unwrap());
    let mut terms = vec![format!("{}*T", coef(&mut r)), "U_Y".to_string()];
    for k in 0..nx {
        terms.push(format!("{}*X{k}", coef(&mut r)));
    }
    if r.gen_bool(0.4) {
        noises.push(NoiseSpec::bernoulli("B_Y", 0.5).unwrap());
        terms.push(format!("{}*B_Y", coef(&mut r)));
    }
    eqs.push(format!("Y = {}", terms.join(" + ")));
    let covs: Vec<String> = (0..nx).map(|k| format!("X{k}")).collect();
    let cov_refs: Vec<&str> = covs.iter().map(|s| s.as_str()).collect();
    let lines: Vec<&str> = eqs.iter().map(|s| s.as_str()).collect();
    ScmModel::parse(NoiseSpace::new(noises).unwrap(), &lines, &no_params(), Roles::binary(&cov_refs)).unwrap()
}

fn random_noise(r: &mut impl Rng, name: &str) -> NoiseSpec {
    match r.gen_range(0..4) {
        0 => NoiseSpec::gaussian(name, 0.0, 1.0).unwrap(),
        1 => NoiseSpec::bernoulli(name, r.gen_range(0.1..0.9)).unwrap(),
        2 => NoiseSpec::uniform(name, -1.0, 1.0).unwrap(),
        _ => NoiseSpec::discrete(name, vec![(-1.0, 0.25), (0.0, 0.25), (2.0, 0.5)]).unwrap(),
    }
}

/// A random term over `refs`, possibly nonlinear.
fn random_expr(r: &mut impl Rng, refs: &[String]) -> String {
    let pick = |r: &mut ChaCha8Rng| refs.choose(r).unwrap().clone();
    let mut r2 = ChaCha8Rng::seed_from_u64(r.gen());
    let k = r2.gen_range(1..=3);
    (0..k)
        .map(|_| match r2.gen_range(0..5) {
            0 | 1 => format!("{}*{}", coef(&mut r2), pick(&mut r2)),
            2 => format!("{}*{}", pick(&mut r2), pick(&mut r2)),
            3 => format!("max({}, {})", pick(&mut r2), pick(&mut r2)),
            _ => format!("indicator({} - {})", pick(&mut r2), coef(&mut r2) * 0.5),
        })
        .collect::<Vec<_>>()
        .join(" + ")
}

/// A random acyclic model with at most 8 variables: a binary treatment
/// `T`, covariates `V*` before and after it, and the outcome `Y` last.
pub fn acyclic_model(seed: u64) -> ScmModel {
    let mut r = rng(seed);
    let nvars = r.gen_range(3..=8);
    let t_pos = r.gen_range(0..nvars - 1);
    let mut noises = Vec::new();
    let mut eqs = Vec::new();
    let mut refs: Vec<String> = Vec::new();
    let mut covs = Vec::new();
    for i in 0..nvars {
        let u = format!("U{i}");
        noises.push(random_noise(&mut r, &u));
        refs.push(u.clone());
        let name = if i == t_pos {
            "T".to_string()
        } else if i == nvars - 1 {
            "Y".to_string()
        } else {
            format!("V{i}")
        };
        let rhs = if i == t_pos {
            format!("indicator({} + {u})", random_expr(&mut r, &refs))
        } else {
            format!("{} + {u}", random_expr(&mut r, &refs))
        };
        eqs.push(format!("{name} = {rhs}"));
        if name.starts_with('V') {
            covs.push(name.clone());
        }
        refs.push(name);
    }
    let cov_refs: Vec<&str> = covs.iter().map(|s| s.as_str()).collect();
    let lines: Vec<&str> = eqs.iter().map(|s| s.as_str()).collect();
    ScmModel::parse(NoiseSpace::new(noises).unwrap(), &lines, &no_params(), Roles::binary(&cov_refs)).unwrap()
}

/// A random RCM over discrete noises with at most 64 atoms, two or three
/// treatment levels, and potential outcomes unrelated to any structure.
pub fn finite_rcm(seed: u64) -> FunctionalRcm {
    let mut r = rng(seed);
    let support: Vec<f64> = if r.gen_bool(0.7) { vec![0.0, 1.0] } else { vec![0.0, 1.0, 2.0] };
    let mut noises = Vec::new();
    let mut atoms = 1usize;
    let mut k = 0;
    loop {
        let size = r.gen_range(2..=4);
        if atoms * size > 64 || (k >= 1 && r.gen_bool(0.3)) {
            break;
        }
        let mut w: Vec<f64> = (0..size).map(|_| r.gen_range(1..10) as f64).collect();
        let tot: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= tot);
        noises.push(NoiseSpec::discrete(&format!("N{k}"), (0..size).map(|v| (v as f64, w[v])).collect()).unwrap());
        atoms *= size;
        k += 1;
    }
    let names: Vec<String> = (0..k).map(|j| format!("N{j}")).collect();
    let levels = support.len();
    let mut lines = vec![format!("T = table({}; {})", names[0], treatment_rows(&mut r, &noises[0], levels))];
    let nx = r.gen_range(0..=2);
    for j in 0..nx {
        lines.push(format!("X{j} = {}", random_expr(&mut r, &names)));
    }
    let mut potential = Vec::new();
    for (l, _) in support.iter().enumerate() {
        let refs: Vec<String> = names.iter().cloned().chain((0..nx).map(|j| format!("X{j}"))).collect();
        lines.push(format!("Y{l} = {} + {}", random_expr(&mut r, &refs), r.gen_range(-3..=3)));
        potential.push(vec![format!("Y{l}")]);
    }
    let roles = RcmRoles {
        treatment: "T".into(),
        covariates: (0..nx).map(|j| format!("X{j}")).collect(),
        observed: None,
        potential,
        support,
    };
    let line_refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
    parse_rcm(Arc::new(NoiseSpace::new(noises).unwrap()), &line_refs, &no_params(), roles).unwrap()
}

fn treatment_rows(r: &mut impl Rng, spec: &NoiseSpec, levels: usize) -> String {
    let atoms = spec.dist.atoms().unwrap();
    atoms.iter().map(|(v, _)| format!("{v} => {}", r.gen_range(0..levels))).collect::<Vec<_>>().join("; ")
}
