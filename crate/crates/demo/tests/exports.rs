use cfl_demo::{cate_curves, scenario_list, scenario_report, unit_effects};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn cate_curves_are_flat_at_beta_and_alpha_plus_beta() {
    let v = parse(cate_curves(0.5, -1.0, -2.0, 2.0, 5).unwrap());
    assert_eq!(floats(&v["x"]), [-2.0, -1.0, 0.0, 1.0, 2.0]);
    assert!(floats(&v["rcm"]).iter().all(|c| (c + 1.0).abs() < 1e-9));
    assert!(floats(&v["scm"]).iter().all(|c| (c + 0.5).abs() < 1e-9));
}

#[test]
fn unit_effects_contrast_a_spread_with_a_point_mass() {
    let v = parse(unit_effects("cor1", "R", "E", 5000, 3).unwrap());
    let (a, b) = (floats(&v["a"]), floats(&v["b"]));
    assert_eq!((a.len(), b.len()), (5000, 5000));
    // Y_1 - Y_0 = 1 +- 2 U_Y in R and exactly 1 in E
    let mean = a.iter().sum::<f64>() / 5000.0;
    let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4999.0;
    assert!((mean - 1.0).abs() < 0.15 && (var - 4.0).abs() < 0.4, "{mean} {var}");
    assert!(b.iter().all(|x| (x - 1.0).abs() < 1e-9));
    assert!(unit_effects("cor1", "R", "Z", 10, 0).is_err());
}

#[test]
fn scenario_report_rows_and_list() {
    let rows = parse(scenario_report("smoking", "gaussian", 0, 1000).unwrap());
    assert!(rows.as_array().unwrap().iter().all(|r| r["pass"] == Value::Bool(true)));
    assert!(scenario_report("smoking", "warp", 0, 1000).is_err());
    let list = parse(scenario_list().unwrap());
    assert!(list.as_array().unwrap().iter().any(|e| e["id"] == "cor1"));
}
