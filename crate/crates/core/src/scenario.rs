//! Scenario description: topology plus data generators, failure injections
//! and runtime parameters. A scenario and a seed fully determine a run.

use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::hash::derive_seed;
use crate::model::{
    DataUnit, Key, SequenceId, StageFunction, StageId, Topology, WindowSpec,
};

/// Tunable runtime parameters with the framework defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Params {
    /// Buckets per receiving node of a Group stream (`k = multiplier * nodes`).
    pub bucket_multiplier: u32,
    /// Flow-control credits per connection.
    pub credits: u32,
    /// A receiver is suspect when its progress rate falls below this
    /// fraction of the median alive receiver's rate.
    pub theta: f64,
    /// Consecutive suspect report intervals before a failure verdict.
    pub suspect_intervals: u32,
    /// Ticks between progress reports.
    pub report_interval: u64,
    /// Link latency in ticks for data connections.
    pub link_latency: u64,
    /// Latency of control-plane messages (uncredited).
    pub control_latency: u64,
    /// Units a Group sender buffers locally before reporting its first
    /// histogram (window 0); end-of-window reports earlier.
    pub presend_threshold: u64,
    /// Units a node may consume per tick.
    pub node_rate: u32,
    /// Units a source node may emit per tick.
    pub source_rate: u32,
    /// Tick budget before the run is cut off.
    pub max_ticks: u64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            bucket_multiplier: crate::partition::DEFAULT_BUCKET_MULTIPLIER,
            credits: 64,
            theta: 0.5,
            suspect_intervals: 3,
            report_interval: 50,
            link_latency: 1,
            control_latency: 1,
            presend_threshold: 1_000,
            node_rate: 64,
            source_rate: 64,
            max_ticks: 1_000_000,
        }
    }
}

/// Key distribution of a generated source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "distribution")]
pub enum GeneratorSpec {
    /// Keys uniform over `[1, keys]`.
    Uniform { keys: u64 },
    /// Zipf-distributed keys over `[1, keys]` with the given exponent.
    Zipf { exponent: f64, keys: u64 },
    /// Explicit `(key, timestamp)` pairs, e.g. fed from a file.
    Explicit { units: Vec<(u64, u64)> },
}

/// Input fed by one source stage, spread across its nodes and windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub generator: GeneratorSpec,
    /// Total units the stage emits (ignored for `Explicit`).
    pub units: u64,
    /// Number of windows the units are spread over (ignored for `Explicit`).
    pub windows: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FailureKind {
    /// Fail-stop: the node delivers, processes and sends nothing afterwards.
    Crash,
    /// The node stays alive but consumes at most `rate` units per tick.
    Throttle { rate: u32 },
}

/// A scheduled failure injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub stage: String,
    pub node: u32,
    pub at_tick: u64,
    #[serde(flatten)]
    pub kind: FailureKind,
}

/// A complete, runnable scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub topology: Topology,
    pub window: WindowSpec,
    pub params: Params,
    /// Source specs by stage name; every `Generate` stage needs one.
    pub sources: Vec<(String, SourceSpec)>,
    pub failures: Vec<FailureSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioError {
    Topology(Vec<crate::model::Violation>),
    MissingSource { stage: String },
    SourceForNonGenerator { stage: String },
    UnknownFailureStage { stage: String },
    FailureNodeOutOfRange { stage: String, node: u32 },
}

impl core::fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ScenarioError::Topology(v) => {
                write!(f, "invalid topology ({} violations):", v.len())?;
                for violation in v {
                    write!(f, " [{violation}]")?;
                }
                Ok(())
            }
            ScenarioError::MissingSource { stage } => {
                write!(f, "generate stage {stage:?} has no source spec")
            }
            ScenarioError::SourceForNonGenerator { stage } => {
                write!(f, "source spec given for non-generate stage {stage:?}")
            }
            ScenarioError::UnknownFailureStage { stage } => {
                write!(f, "failure injection names unknown stage {stage:?}")
            }
            ScenarioError::FailureNodeOutOfRange { stage, node } => {
                write!(f, "failure injection names node {node} beyond stage {stage:?}")
            }
        }
    }
}

impl Scenario {
    /// Validates the topology and all cross-references.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let violations = self.topology.validate();
        if !violations.is_empty() {
            return Err(ScenarioError::Topology(violations));
        }
        for stage in self.topology.stages() {
            let has_spec = self.sources.iter().any(|(n, _)| *n == stage.name);
            match stage.function {
                StageFunction::Generate if !has_spec => {
                    return Err(ScenarioError::MissingSource {
                        stage: stage.name.clone(),
                    });
                }
                StageFunction::Generate => {}
                _ if has_spec => {
                    return Err(ScenarioError::SourceForNonGenerator {
                        stage: stage.name.clone(),
                    });
                }
                _ => {}
            }
        }
        for fail in &self.failures {
            let stage = self
                .topology
                .stage_by_name(&fail.stage)
                .ok_or_else(|| ScenarioError::UnknownFailureStage {
                    stage: fail.stage.clone(),
                })?;
            if fail.node >= self.topology.stage(stage).node_count {
                return Err(ScenarioError::FailureNodeOutOfRange {
                    stage: fail.stage.clone(),
                    node: fail.node,
                });
            }
        }
        Ok(())
    }

    pub fn source_spec(&self, stage: StageId) -> Option<&SourceSpec> {
        let name = &self.topology.stage(stage).name;
        self.sources
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }
}

/// Raw input unit before sequence assignment: `(key, timestamp, payload)`.
pub type RawUnit = (Key, u64, Vec<u8>);

/// Deterministically generates the input units one source node emits, in
/// emission order. Pure in `(seed, stage, node)`: tests replay it as an
/// oracle for what the senders produced.
pub fn generate_units(scenario: &Scenario, stage: StageId, node: u32) -> Vec<RawUnit> {
    let spec = match scenario.source_spec(stage) {
        Some(s) => s,
        None => return Vec::new(),
    };
    let decl = scenario.topology.stage(stage);
    let nodes = decl.node_count as u64;
    match &spec.generator {
        GeneratorSpec::Explicit { units } => units
            .iter()
            .enumerate()
            .filter(|(i, _)| *i as u64 % nodes == node as u64)
            .map(|(_, &(k, ts))| (Key(k), ts, k.to_be_bytes().to_vec()))
            .collect(),
        GeneratorSpec::Uniform { keys } => {
            let domain = (*keys).max(1);
            let share = node_share(spec.units, nodes, node);
            let mut rng = node_rng(scenario.seed, stage, node);
            (0..share)
                .map(|j| {
                    let key = Key(1 + rng.next_u64() % domain);
                    stamp(scenario, spec, share, j, key)
                })
                .collect()
        }
        GeneratorSpec::Zipf { exponent, keys } => {
            let table = zipf_cdf(*keys, *exponent);
            let share = node_share(spec.units, nodes, node);
            let mut rng = node_rng(scenario.seed, stage, node);
            (0..share)
                .map(|j| {
                    let key = Key(zipf_sample(&table, &mut rng));
                    stamp(scenario, spec, share, j, key)
                })
                .collect()
        }
    }
}

fn stamp(scenario: &Scenario, spec: &SourceSpec, share: u64, j: u64, key: Key) -> RawUnit {
    let windows = spec.windows.max(1);
    let per_window = share.div_ceil(windows).max(1);
    let window = j / per_window;
    let width = scenario.window.width();
    let offset = (j % per_window).min(width - 1);
    (key, window * width + offset, key.0.to_be_bytes().to_vec())
}

fn node_share(total: u64, nodes: u64, node: u32) -> u64 {
    total / nodes + u64::from((node as u64) < total % nodes)
}

fn node_rng(seed: u64, stage: StageId, node: u32) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(seed, &[stage.0 as u64, node as u64]))
}

/// Cumulative distribution over keys `1..=n` with probability proportional
/// to `1 / k^exponent`.
fn zipf_cdf(n: u64, exponent: f64) -> Vec<f64> {
    let n = n.max(1);
    let mut cdf = Vec::with_capacity(n as usize);
    let mut acc = 0.0f64;
    for k in 1..=n {
        acc += 1.0 / libm::pow(k as f64, exponent);
        cdf.push(acc);
    }
    let total = acc;
    for v in &mut cdf {
        *v /= total;
    }
    cdf
}

fn zipf_sample(cdf: &[f64], rng: &mut ChaCha8Rng) -> u64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let idx = cdf.partition_point(|&p| p <= u);
    (idx as u64 + 1).min(cdf.len() as u64)
}

/// Wraps raw generated units with placeholder sequence ids; tests use this
/// to compare capture multisets on `(key, payload)`.
pub fn raw_to_units(raw: &[RawUnit]) -> Vec<DataUnit> {
    raw.iter()
        .map(|(key, ts, payload)| DataUnit {
            key: *key,
            timestamp: *ts,
            seq: SequenceId(0),
            payload: payload.clone(),
        })
        .collect()
}
