use super::{parse_scenario, Scenario};

const SOURCES: [(&str, &str); 7] = [
    ("motivating", include_str!("../../scenarios/motivating.json")),
    ("prop2", include_str!("../../scenarios/prop2.json")),
    ("remark4", include_str!("../../scenarios/remark4.json")),
    ("cor1", include_str!("../../scenarios/cor1.json")),
    ("smoking", include_str!("../../scenarios/smoking.json")),
    ("prop1", include_str!("../../scenarios/prop1.json")),
    ("remark8", include_str!("../../scenarios/remark8.json")),
];

/// The bundled scenarios, in a fixed order.
pub fn builtin_scenarios() -> Vec<Scenario> {
    SOURCES
        .iter()
        .map(|(id, src)| parse_scenario(src).unwrap_or_else(|e| panic!("bundled scenario `{id}` is invalid: {e}")))
        .collect()
}

pub fn builtin(id: &str) -> Option<Scenario> {
    SOURCES.iter().find(|(k, _)| *k == id).map(|(_, src)| parse_scenario(src).expect("bundled scenarios are valid"))
}
