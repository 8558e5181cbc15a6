//! Shared scenario builders and capture helpers for integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use streamweave_core::model::{StageFunction, StageId, StreamOp, TopologyBuilder};
use streamweave_core::scenario::{generate_units, GeneratorSpec, Params, Scenario, SourceSpec};
use streamweave_core::sim::RunOutput;
use streamweave_core::WindowSpec;

/// src (Generate, n_src nodes) -> data.str (op) -> sink (Identity, n_sink).
pub fn pipeline_scenario(
    op: StreamOp,
    n_src: u32,
    n_sink: u32,
    units: u64,
    windows: u64,
    seed: u64,
) -> Scenario {
    pipeline_scenario_with(op, n_src, n_sink, units, windows, seed, Params::default())
}

pub fn pipeline_scenario_with(
    op: StreamOp,
    n_src: u32,
    n_sink: u32,
    units: u64,
    windows: u64,
    seed: u64,
    params: Params,
) -> Scenario {
    let mut b = TopologyBuilder::new();
    let src = b.stage("src", n_src, StageFunction::Generate).unwrap();
    let sink = b.stage("sink", n_sink, StageFunction::Identity).unwrap();
    let s = b.stream("data.str").unwrap();
    b.attach_output(src, s).unwrap();
    b.attach_input(sink, s, op).unwrap();
    Scenario {
        topology: b.build().unwrap(),
        window: WindowSpec::new(100).unwrap(),
        params,
        sources: vec![(
            "src".into(),
            SourceSpec {
                generator: GeneratorSpec::Uniform { keys: 500 },
                units,
                windows,
            },
        )],
        failures: vec![],
        seed,
    }
}

/// src (n_src nodes) -> sorted.str (SortDesc) -> sink (1 node, Identity).
pub fn sort_scenario(n_src: u32, units: u64, windows: u64, seed: u64) -> Scenario {
    let mut b = TopologyBuilder::new();
    let src = b.stage("src", n_src, StageFunction::Generate).unwrap();
    let sink = b.stage("sink", 1, StageFunction::Identity).unwrap();
    let s = b.stream("sorted.str").unwrap();
    b.attach_output(src, s).unwrap();
    b.attach_input(sink, s, StreamOp::SortDesc).unwrap();
    Scenario {
        topology: b.build().unwrap(),
        window: WindowSpec::new(100).unwrap(),
        params: Params::default(),
        sources: vec![(
            "src".into(),
            SourceSpec {
                generator: GeneratorSpec::Uniform { keys: 10_000 },
                units,
                windows,
            },
        )],
        failures: vec![],
        seed,
    }
}

/// Multiset of (window, key, payload) captured by a stage's nodes.
pub fn captured_multiset(out: &RunOutput, stage: &str) -> BTreeMap<(u64, u64, Vec<u8>), u64> {
    let mut m = BTreeMap::new();
    for c in &out.captures {
        if c.stage == stage {
            *m.entry((c.window, c.unit.key.0, c.unit.payload.clone()))
                .or_insert(0) += 1;
        }
    }
    m
}

/// Multiset of (window, key, payload) a source stage generates.
pub fn generated_multiset(sc: &Scenario, stage: &str) -> BTreeMap<(u64, u64, Vec<u8>), u64> {
    let id = sc.topology.stage_by_name(stage).unwrap();
    let nodes = sc.topology.stage(id).node_count;
    let mut m = BTreeMap::new();
    for node in 0..nodes {
        for (key, ts, payload) in generate_units(sc, id, node) {
            *m.entry((ts / sc.window.width(), key.0, payload)).or_insert(0) += 1;
        }
    }
    m
}

/// Multiset generated by a single source node.
pub fn generated_node_multiset(
    sc: &Scenario,
    stage: &str,
    node: u32,
) -> BTreeMap<(u64, u64, Vec<u8>), u64> {
    let id: StageId = sc.topology.stage_by_name(stage).unwrap();
    let mut m = BTreeMap::new();
    for (key, ts, payload) in generate_units(sc, id, node) {
        *m.entry((ts / sc.window.width(), key.0, payload)).or_insert(0) += 1;
    }
    m
}
