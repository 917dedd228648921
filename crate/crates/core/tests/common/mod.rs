#![allow(dead_code)]

use nalgebra::{DVector, Vector3};
use proptest::prelude::*;

use robomill::config::{parse_scenario, Overrides, ScenarioFile};
use robomill::robot_model::{LinkDescription, ManipulatorDescription};

pub const KR270: &str = include_str!("../../../cli/scenarios/kr270_milling.toml");

pub fn kr270() -> ScenarioFile {
    parse_scenario(KR270, &Overrides::default()).expect("example scenario parses")
}

pub fn kr270_robot() -> ManipulatorDescription {
    kr270().scenario.robot
}

pub fn kr270_weightless() -> ManipulatorDescription {
    kr270_robot().with_gravity(Vector3::zeros())
}

pub fn q0() -> DVector<f64> {
    kr270().scenario.q0
}

/// Configurations within ±0.3 rad of the example start pose, clear of the wrist singularity.
pub fn near_q0() -> impl Strategy<Value = DVector<f64>> {
    let base = q0();
    proptest::collection::vec(-0.3..0.3f64, 6).prop_map(move |d| &base + DVector::from_vec(d))
}

/// Wrench with forces up to `f` N and moments up to `m` N·m.
pub fn wrench(f: f64, m: f64) -> impl Strategy<Value = nalgebra::Vector6<f64>> {
    (proptest::collection::vec(-f..f, 3), proptest::collection::vec(-m..m, 3))
        .prop_map(|(a, b)| nalgebra::Vector6::new(a[0], a[1], a[2], b[0], b[1], b[2]))
}

/// Planar chain of `n` links about `z` with unit compliances scaled by `c`.
pub fn planar_chain(lengths: &[f64], c: f64) -> ManipulatorDescription {
    let links = lengths
        .iter()
        .map(|&l| LinkDescription::revolute(Vector3::z(), Vector3::new(l, 0.0, 0.0)))
        .collect();
    ManipulatorDescription::new(links, vec![c; lengths.len()]).unwrap()
}

/// Example scenario with textual replacements applied to the file before parsing.
pub fn kr270_with(replace: &[(&str, &str)], overrides: Overrides) -> ScenarioFile {
    let mut text = KR270.to_string();
    for (from, to) in replace {
        assert!(text.contains(from), "scenario has no `{from}`");
        text = text.replace(from, to);
    }
    parse_scenario(&text, &overrides).expect("modified scenario parses")
}
