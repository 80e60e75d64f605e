mod common;

use std::sync::Arc;

use cfl_core::equivalence::{compare_cross_outcome, Verdict};
use cfl_core::law::total_variation;
use cfl_core::probability_space::{sample_noise, NoiseSpace, NoiseSpec};
use cfl_core::rcm::{
    check_consistency, check_ignorability, check_positivity, entailed_rcm, identify_single_outcome, parse_rcm,
    representation_gap, structural_representation, FunctionalRcm, IgnorabilityMode, Provenance, RcmRoles,
};
use cfl_core::scm::{Roles, ScmModel};
use cfl_core::{Budget, Engine, Error};
use proptest::prelude::*;

use common::*;

fn shared_space() -> Arc<NoiseSpace> {
    Arc::new(
        NoiseSpace::new(vec![
            NoiseSpec::bernoulli("U_T", 0.5).unwrap(),
            NoiseSpec::gaussian("U_X", 0.0, 1.0).unwrap(),
            NoiseSpec::gaussian("U_Y", 0.0, 1.0).unwrap(),
        ])
        .unwrap(),
    )
}

fn binary_roles(potential: [&str; 2], observed: Option<&str>) -> RcmRoles {
    RcmRoles {
        treatment: "T".into(),
        covariates: vec!["X".into()],
        observed: observed.map(|o| vec![o.to_string()]),
        potential: potential.iter().map(|p| vec![p.to_string()]).collect(),
        support: vec![0.0, 1.0],
    }
}

/// Values of each potential outcome per draw, with `T` alongside.
fn per_draw(rcm: &FunctionalRcm, n: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let p = rcm.program();
    let rows = p.solve(&sample_noise(p.noise(), seed, n)).unwrap();
    rows.chunks_exact(p.len())
        .map(|r| {
            let ys = (0..rcm.support().len()).map(|k| r[rcm.potential_indices(k)[0]]).collect();
            (r[rcm.treatment_index()], ys)
        })
        .collect()
}

fn noise_col(rcm: &FunctionalRcm, n: usize, seed: u64, name: &str) -> Vec<f64> {
    let j = rcm.noise().index_of(name).unwrap();
    sample_noise(rcm.noise(), seed, n).column(j)
}

#[test]
fn entailed_outcomes_follow_the_motivating_formula() {
    let (alpha, beta) = (1.5, -0.5);
    let m = scenario_scm("motivating", "M", &[("alpha", alpha), ("beta", beta)]);
    let rcm = entailed_rcm(&m).unwrap();
    assert_eq!(rcm.provenance(), Provenance::Entailed);
    let ux = noise_col(&rcm, 500, 3, "U_X");
    let uy = noise_col(&rcm, 500, 3, "U_Y");
    for (i, (_, ys)) in per_draw(&rcm, 500, 3).iter().enumerate() {
        for (t, y) in ys.iter().enumerate() {
            let want = (alpha + beta) * t as f64 + ux[i] + uy[i];
            assert!((y - want).abs() < 1e-12);
        }
    }
}

#[test]
fn entailed_outcomes_of_the_shared_noise_model() {
    let rcm = entailed_rcm(&scenario_scm("prop2", "M", &[])).unwrap();
    let ux = noise_col(&rcm, 300, 4, "U_X");
    let uy = noise_col(&rcm, 300, 4, "U_Y");
    for (i, (_, ys)) in per_draw(&rcm, 300, 4).iter().enumerate() {
        assert!((ys[0] - (ux[i] + uy[i])).abs() < 1e-12);
        assert!((ys[1] - (2.0 + ux[i] + uy[i])).abs() < 1e-12);
    }
}

#[test]
fn outcomes_free_of_treatment_coincide_across_levels() {
    let space = shared_space();
    let m = ScmModel::parse(space, &["T = U_T", "X = T + U_X", "Y = U_X + U_Y"], &no_params(), Roles::binary(&["X"]))
        .unwrap();
    for (_, ys) in per_draw(&entailed_rcm(&m).unwrap(), 200, 5) {
        assert_eq!(ys[0], ys[1]);
    }
}

#[test]
fn user_constructions_and_consistency() {
    let space = shared_space();
    let base = ["T = U_T", "X = T + U_X", "Y = T + X + U_Y"];
    let build = |extra: [&str; 2]| {
        let lines: Vec<&str> = base.iter().copied().chain(extra).collect();
        parse_rcm(space.clone(), &lines, &no_params(), binary_roles(["Y0", "Y1"], Some("Y"))).unwrap()
    };
    let good = build(["Y0 = (1-T)*(X+U_Y) + T*(X-U_Y)", "Y1 = (1-T)*(1+X-U_Y) + T*(1+X+U_Y)"]);
    let bad = build(["Y0 = Y + 1", "Y1 = Y"]);
    let b = Budget::new(10_000, 1);
    assert!(check_consistency(&good, Engine::MonteCarlo, &b).unwrap().holds);
    assert!(check_consistency(&good, Engine::Gaussian, &b).unwrap().holds);
    for engine in [Engine::MonteCarlo, Engine::Gaussian] {
        let r = check_consistency(&bad, engine, &b).unwrap();
        assert!(!r.holds);
        assert!(!r.witnesses.is_empty());
    }
    let shifted = scenario_rcm("prop1", "P", &[("y", 2.0)]);
    assert!(check_consistency(&shifted, Engine::Gaussian, &b).unwrap().holds);
}

#[test]
fn positivity_examples() {
    let b = Budget::new(50_000, 2);
    let m = scenario_scm("prop2", "M", &[]);
    let obs = m.observational();
    assert!(check_positivity(&obs, Engine::Gaussian, &b).unwrap().holds);
    assert!(check_positivity(&obs, Engine::MonteCarlo, &b).unwrap().holds);
    // P(T=1 | X=x) = φ(x-1) / (φ(x) + φ(x-1))
    let phi = |z: f64| (-z * z / 2.0).exp();
    for x in [-1.0, 0.0, 0.5, 2.0] {
        let p = obs.propensity(&[x], Engine::Gaussian, &b).unwrap();
        let want = phi(x - 1.0) / (phi(x) + phi(x - 1.0));
        assert!((p[1] - want).abs() < 1e-9, "x={x}: {} vs {want}", p[1]);
    }

    let cor1 = scenario_scm("cor1", "M", &[]).observational();
    for x in [-1.0, 0.3] {
        let p = cor1.propensity(&[x], Engine::Gaussian, &b).unwrap();
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    let space = Arc::new(NoiseSpace::new(vec![NoiseSpec::gaussian("U_X", 0.0, 1.0).unwrap()]).unwrap());
    let det =
        ScmModel::parse(space, &["X = U_X", "T = indicator(X > 0)", "Y = T + X"], &no_params(), Roles::binary(&["X"]))
            .unwrap();
    let r = check_positivity(&det.observational(), Engine::MonteCarlo, &b).unwrap();
    assert!(!r.holds, "{r:?}");
}

#[test]
fn ignorability_verdicts_and_monotonicity() {
    let b = Budget::new(100_000, 9);
    let r = scenario_rcm("prop2", "R", &[]);
    let r_mod = scenario_rcm("prop2", "R_mod", &[]);
    let e = scenario_rcm("motivating", "E", &[("alpha", 1.0)]);
    assert!(check_ignorability(&r, IgnorabilityMode::Cross, Engine::MonteCarlo, &b).unwrap().holds);
    assert!(check_ignorability(&r, IgnorabilityMode::Single, Engine::MonteCarlo, &b).unwrap().holds);
    assert!(check_ignorability(&r_mod, IgnorabilityMode::Single, Engine::MonteCarlo, &b).unwrap().holds);
    assert!(!check_ignorability(&r_mod, IgnorabilityMode::Cross, Engine::MonteCarlo, &b).unwrap().holds);
    assert!(!check_ignorability(&e, IgnorabilityMode::Single, Engine::MonteCarlo, &b).unwrap().holds);
}

#[test]
fn identified_means_of_the_shared_noise_model() {
    let obs = scenario_scm("prop2", "M", &[]).observational();
    let b = Budget::default();
    for (t, want) in [(0.0, 0.5), (1.0, 1.5)] {
        let law = identify_single_outcome(&obs, t, Engine::Gaussian, &b).unwrap();
        assert!((law.mean()[2] - want).abs() < 1e-12);
    }
}

#[test]
fn identification_without_association_keeps_the_outcome_marginal() {
    let space = Arc::new(
        NoiseSpace::new(vec![
            NoiseSpec::bernoulli("A", 0.3).unwrap(),
            NoiseSpec::bernoulli("B", 0.6).unwrap(),
            NoiseSpec::discrete("C", vec![(0.0, 0.2), (1.0, 0.5), (3.0, 0.3)]).unwrap(),
        ])
        .unwrap(),
    );
    let m = ScmModel::parse(space, &["T = A", "X = B", "Y = C"], &no_params(), Roles::binary(&["X"])).unwrap();
    let b = Budget::default();
    let law = identify_single_outcome(&m.observational(), 1.0, Engine::Exact, &b).unwrap();
    let y = law.marginal(&[2]).unwrap();
    let tx = law.marginal(&[0, 1]).unwrap();
    let want_y =
        cfl_core::law::Law::table(vec!["Y_1".into()], vec![(vec![0.0], 0.2), (vec![1.0], 0.5), (vec![3.0], 0.3)]);
    assert!(total_variation(&y, &want_y).unwrap() < 1e-12);
    let factual = m.observational();
    let obs_tx = cfl_core::infer::program_law(
        &factual.program,
        &[cfl_core::infer::col(factual.t), cfl_core::infer::col(factual.x[0])],
        vec!["T".into(), "X".into()],
        Engine::Exact,
        &b,
    )
    .unwrap();
    assert!(total_variation(&tx, &obs_tx).unwrap() < 1e-12);
}

#[test]
fn identification_depends_on_the_observational_view_alone() {
    // two RCMs with different potential outcomes but the same observed data
    let r = scenario_rcm("prop2", "R", &[]);
    let r_mod = scenario_rcm("prop2", "R_mod", &[]);
    let b = Budget::default();
    for t in [0.0, 1.0] {
        let a = identify_single_outcome(&r.observational().unwrap(), t, Engine::Gaussian, &b).unwrap();
        let c = identify_single_outcome(&r_mod.observational().unwrap(), t, Engine::Gaussian, &b).unwrap();
        assert!(cfl_core::law::mixture_discrepancy(&a, &c).unwrap() < 1e-9);
    }
}

#[test]
fn representation_of_a_four_atom_rcm() {
    let space = Arc::new(
        NoiseSpace::new(vec![NoiseSpec::discrete("N", vec![(0.0, 0.1), (1.0, 0.2), (2.0, 0.3), (3.0, 0.4)]).unwrap()])
            .unwrap(),
    );
    let lines = ["T = table(N; 0 => 0; 1 => 1; 2 => 0; 3 => 1)", "X = N*N", "Y0 = 2*N - 1", "Y1 = 5 - N"];
    let rcm = parse_rcm(space, &lines, &no_params(), binary_roles(["Y0", "Y1"], None)).unwrap();
    let rep = structural_representation(&rcm).unwrap();
    assert_eq!(rep.atoms.len(), 4);
    assert_eq!(representation_gap(&rcm, &rep).unwrap(), 0.0);
}

#[test]
fn representation_of_an_entailed_discrete_rcm_keeps_its_counterfactual_law() {
    let space = Arc::new(
        NoiseSpace::new(vec![
            NoiseSpec::bernoulli("A", 0.4).unwrap(),
            NoiseSpec::discrete("B", vec![(-1.0, 0.5), (2.0, 0.5)]).unwrap(),
        ])
        .unwrap(),
    );
    let m =
        ScmModel::parse(space, &["T = A", "X = B + T", "Y = X * T + B"], &no_params(), Roles::binary(&["X"])).unwrap();
    let rcm = entailed_rcm(&m).unwrap();
    let rep = structural_representation(&rcm).unwrap();
    let again = entailed_rcm(&rep.scm).unwrap();
    let v = compare_cross_outcome(&rcm, &again, Engine::Exact, &Budget::default()).unwrap();
    assert_eq!(v.verdict, Verdict::Equal);
}

#[test]
fn representation_needs_a_finite_space() {
    let rcm = scenario_rcm("prop2", "R", &[]);
    assert!(matches!(structural_representation(&rcm), Err(Error::NotEnumerable(_))));
}

#[test]
fn user_rcm_rejects_mismatched_levels() {
    let mut roles = binary_roles(["Y", "Y"], None);
    roles.potential.pop();
    let r = parse_rcm(shared_space(), &["T = U_T", "X = U_X", "Y = U_Y"], &no_params(), roles);
    assert!(matches!(r, Err(Error::DimensionMismatch(1, 2))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn entailed_rcms_are_consistent(seed in 0u64..10_000) {
        let m = acyclic_model(seed);
        let r = check_consistency(&entailed_rcm(&m).unwrap(), Engine::MonteCarlo, &Budget::new(2_000, seed)).unwrap();
        prop_assert!(r.holds);
        prop_assert_eq!(r.statistic, 0.0);
    }

    #[test]
    fn finite_rcms_round_trip(seed in 0u64..10_000) {
        let rcm = finite_rcm(seed);
        let rep = structural_representation(&rcm).unwrap();
        prop_assert_eq!(representation_gap(&rcm, &rep).unwrap(), 0.0);
    }

    #[test]
    fn representations_are_consistent_on_every_atom(seed in 0u64..10_000) {
        let rep = structural_representation(&finite_rcm(seed)).unwrap();
        let r = check_consistency(&entailed_rcm(&rep.scm).unwrap(), Engine::Exact, &Budget::default()).unwrap();
        prop_assert!(r.holds);
    }
}

#[test]
fn identification_reports_positivity_violations() {
    let space = Arc::new(
        NoiseSpace::new(vec![NoiseSpec::bernoulli("A", 0.3).unwrap(), NoiseSpec::bernoulli("B", 0.6).unwrap()])
            .unwrap(),
    );
    // X = 0 forces T = 0
    let m = ScmModel::parse(space, &["T = A", "X = A + B", "Y = B"], &no_params(), Roles::binary(&["X"])).unwrap();
    let r = identify_single_outcome(&m.observational(), 1.0, Engine::Exact, &Budget::default());
    assert!(matches!(r, Err(Error::PositivityViolation(_))));
    assert!(!check_positivity(&m.observational(), Engine::Exact, &Budget::default()).unwrap().holds);
}
