//! Domain types: keys, data units, windows, and the stage/stream
//! declaration graph with validation.
//!
//! A topology is *declared* up front (stages, node counts, streams and the
//! operation applied to each stream); the per-stage computation is named by
//! a [`StageFunction`] and bound at run time. Declarations are immutable
//! after validation and safe to share read-only.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Stream key: fixed-size 64-bit integer, totally ordered, bitwise equality.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct Key(pub u64);

/// Deterministic per-result identifier enabling downstream duplicate
/// suppression after recovery resends.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct SequenceId(pub u64);

/// One stream element.
///
/// `timestamp` is the logical window clock set by the producing stage; it is
/// non-decreasing within one producing node's output to one stream. The
/// payload is opaque to the framework: only keys and timestamps drive
/// routing and windowing.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DataUnit {
    pub key: Key,
    pub timestamp: u64,
    pub seq: SequenceId,
    pub payload: Vec<u8>,
}

/// Window width `T` (in timestamp units). Must be at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    width: u64,
}

impl WindowSpec {
    pub fn new(width: u64) -> Result<Self, TopologyError> {
        if width == 0 {
            return Err(TopologyError::ZeroWindowWidth);
        }
        Ok(WindowSpec { width })
    }

    pub fn width(&self) -> u64 {
        self.width
    }

    /// First timestamp of window `n`.
    pub fn start_of(&self, n: WindowIndex) -> u64 {
        n.0 * self.width
    }
}

/// Index of a window: window `n` holds timestamps in `[nT, (n+1)T - 1]`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct WindowIndex(pub u64);

/// Maps a timestamp to its window: `n = floor(ts / T)`.
///
/// The upper bound is inclusive — `(n+1)T - 1` still belongs to window `n` —
/// so every timestamp lies in exactly one window.
pub fn window_of(timestamp: u64, w: WindowSpec) -> WindowIndex {
    WindowIndex(timestamp / w.width)
}

/// Delivery operation applied to a stream, declared by the consuming stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamOp {
    /// All units of a window sharing a key arrive at a single receiving node.
    Group,
    /// Each receiving node observes a window's units in ascending key order.
    SortAsc,
    /// Each receiving node observes a window's units in descending key order.
    SortDesc,
    /// No delivery guarantee; units are spread across receivers.
    Plain,
}

impl StreamOp {
    pub fn is_sort(self) -> bool {
        matches!(self, StreamOp::SortAsc | StreamOp::SortDesc)
    }
}

/// Index of a stage within a topology.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct StageId(pub u32);

/// Index of a stream within a topology.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct StreamId(pub u32);

/// Built-in stage computations, bound by name from the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageFunction {
    /// Source stage: emits generated input (see `scenario::SourceSpec`).
    Generate,
    /// Forwards every unit to all output streams; with no outputs, records
    /// accepted units (sink).
    Identity,
    /// Per window, counts units per key and emits one `(key, count)` unit
    /// per owned key.
    WordGroupCount,
    /// Consumes the first `take` units of each window, then cancels the
    /// remainder of the window on its input streams.
    TopFractionConsumer { take: u64 },
    /// Per window, joins all input streams on key and emits concatenated
    /// payloads for keys present in every input.
    WindowJoin,
    /// Per window, sums 8-byte big-endian payload integers; emits one partial
    /// per node under a shared key, or records the final total when a sink.
    WindowSum,
}

/// Declaration of one stream: a named edge from its producer stage to its
/// single consumer stage, with the delivery operation the consumer asked for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDecl {
    pub name: String,
    pub producer: StageId,
    pub consumer: StageId,
    pub op: StreamOp,
}

/// Declaration of one stage: its node count, attached streams and function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDecl {
    pub name: String,
    pub node_count: u32,
    pub inputs: Vec<StreamId>,
    pub outputs: Vec<StreamId>,
    pub function: StageFunction,
}

impl StageDecl {
    /// True when every declared input is a `Group` stream, meaning each key
    /// of a window is processed by exactly one node of this stage.
    pub fn key_colocated(&self, topo: &Topology) -> bool {
        !self.inputs.is_empty()
            && self
                .inputs
                .iter()
                .all(|s| topo.stream(*s).op == StreamOp::Group)
    }
}

/// A validated declaration graph of stages and streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    stages: Vec<StageDecl>,
    streams: Vec<StreamDecl>,
}

impl Topology {
    pub fn stages(&self) -> &[StageDecl] {
        &self.stages
    }

    pub fn streams(&self) -> &[StreamDecl] {
        &self.streams
    }

    pub fn stage(&self, id: StageId) -> &StageDecl {
        &self.stages[id.0 as usize]
    }

    pub fn stream(&self, id: StreamId) -> &StreamDecl {
        &self.streams[id.0 as usize]
    }

    pub fn stage_by_name(&self, name: &str) -> Option<StageId> {
        self.stages
            .iter()
            .position(|s| s.name == name)
            .map(|i| StageId(i as u32))
    }

    pub fn stream_by_name(&self, name: &str) -> Option<StreamId> {
        self.streams
            .iter()
            .position(|s| s.name == name)
            .map(|i| StreamId(i as u32))
    }

    /// Stages with no input streams.
    pub fn source_stages(&self) -> impl Iterator<Item = StageId> + '_ {
        self.stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.inputs.is_empty())
            .map(|(i, _)| StageId(i as u32))
    }

    /// Checks every topology invariant; an empty list means the topology is
    /// valid. Violations name the offending stage or stream.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut names = BTreeMap::new();
        for (i, s) in self.streams.iter().enumerate() {
            if let Some(prev) = names.insert(s.name.clone(), i) {
                out.push(Violation::DuplicateStreamName {
                    name: s.name.clone(),
                    first: StreamId(prev as u32),
                    second: StreamId(i as u32),
                });
            }
            for (role, stage) in [("producer", s.producer), ("consumer", s.consumer)] {
                if stage.0 as usize >= self.stages.len() {
                    out.push(Violation::UnknownStage {
                        stream: s.name.clone(),
                        role,
                        stage,
                    });
                }
            }
        }
        let mut stage_names = BTreeSet::new();
        for (i, st) in self.stages.iter().enumerate() {
            let id = StageId(i as u32);
            if !stage_names.insert(st.name.clone()) {
                out.push(Violation::DuplicateStageName {
                    name: st.name.clone(),
                });
            }
            if st.node_count == 0 {
                out.push(Violation::ZeroNodeCount {
                    stage: st.name.clone(),
                });
            }
            for &sid in &st.inputs {
                match self.streams.get(sid.0 as usize) {
                    Some(s) if s.consumer != id => out.push(Violation::MisattachedStream {
                        stage: st.name.clone(),
                        stream: s.name.clone(),
                        role: "input",
                    }),
                    None => out.push(Violation::UnknownStreamRef {
                        stage: st.name.clone(),
                        stream: sid,
                    }),
                    _ => {}
                }
            }
            for &sid in &st.outputs {
                match self.streams.get(sid.0 as usize) {
                    Some(s) if s.producer != id => out.push(Violation::MisattachedStream {
                        stage: st.name.clone(),
                        stream: s.name.clone(),
                        role: "output",
                    }),
                    None => out.push(Violation::UnknownStreamRef {
                        stage: st.name.clone(),
                        stream: sid,
                    }),
                    _ => {}
                }
            }
        }
        // Every stream must be referenced by exactly its producer and consumer.
        for (i, s) in self.streams.iter().enumerate() {
            let sid = StreamId(i as u32);
            let produced = self
                .stages
                .get(s.producer.0 as usize)
                .map(|st| st.outputs.contains(&sid))
                .unwrap_or(false);
            let consumed = self
                .stages
                .get(s.consumer.0 as usize)
                .map(|st| st.inputs.contains(&sid))
                .unwrap_or(false);
            if !produced || !consumed {
                out.push(Violation::DanglingStream {
                    stream: s.name.clone(),
                });
            }
        }
        if self.has_cycle() {
            out.push(Violation::Cycle);
        }
        out
    }

    fn has_cycle(&self) -> bool {
        // Kahn's algorithm over the stage graph.
        let n = self.stages.len();
        let mut indegree = alloc::vec![0usize; n];
        for s in &self.streams {
            let (p, c) = (s.producer.0 as usize, s.consumer.0 as usize);
            if p < n && c < n {
                indegree[c] += 1;
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for s in &self.streams {
                if s.producer.0 as usize == i && (s.consumer.0 as usize) < n {
                    let c = s.consumer.0 as usize;
                    indegree[c] -= 1;
                    if indegree[c] == 0 {
                        ready.push(c);
                    }
                }
            }
        }
        seen < n
    }
}

/// A single topology-invariant violation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    DuplicateStreamName {
        name: String,
        first: StreamId,
        second: StreamId,
    },
    DuplicateStageName {
        name: String,
    },
    UnknownStage {
        stream: String,
        role: &'static str,
        stage: StageId,
    },
    UnknownStreamRef {
        stage: String,
        stream: StreamId,
    },
    MisattachedStream {
        stage: String,
        stream: String,
        role: &'static str,
    },
    DanglingStream {
        stream: String,
    },
    ZeroNodeCount {
        stage: String,
    },
    Cycle,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateStreamName { name, .. } => {
                write!(f, "duplicate stream name {name:?}")
            }
            Violation::DuplicateStageName { name } => {
                write!(f, "duplicate stage name {name:?}")
            }
            Violation::UnknownStage { stream, role, stage } => {
                write!(f, "stream {stream:?}: unknown {role} stage #{}", stage.0)
            }
            Violation::UnknownStreamRef { stage, stream } => {
                write!(f, "stage {stage:?}: unknown stream #{}", stream.0)
            }
            Violation::MisattachedStream { stage, stream, role } => {
                write!(f, "stage {stage:?} lists {stream:?} as {role} but the stream disagrees")
            }
            Violation::DanglingStream { stream } => {
                write!(f, "stream {stream:?} is not attached to both its producer and consumer")
            }
            Violation::ZeroNodeCount { stage } => {
                write!(f, "stage {stage:?} declares zero nodes")
            }
            Violation::Cycle => write!(f, "stream-connection graph over stages contains a cycle"),
        }
    }
}

/// Errors raised while declaring a topology.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologyError {
    ZeroWindowWidth,
    ZeroNodeCount { stage: String },
    DuplicateStage { name: String },
    DuplicateStream { name: String },
    UnknownStage { name: String },
    UnknownStream { name: String },
    ProducerTaken { stream: String },
    ConsumerTaken { stream: String },
    Invalid(Vec<Violation>),
}

impl fmt::Display for TopologyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyError::ZeroWindowWidth => write!(f, "window width must be at least 1"),
            TopologyError::ZeroNodeCount { stage } => {
                write!(f, "stage {stage:?} must declare at least one node")
            }
            TopologyError::DuplicateStage { name } => {
                write!(f, "stage {name:?} declared twice")
            }
            TopologyError::DuplicateStream { name } => {
                write!(f, "stream {name:?} declared twice")
            }
            TopologyError::UnknownStage { name } => write!(f, "unknown stage {name:?}"),
            TopologyError::UnknownStream { name } => write!(f, "unknown stream {name:?}"),
            TopologyError::ProducerTaken { stream } => {
                write!(f, "stream {stream:?} already has a producer stage")
            }
            TopologyError::ConsumerTaken { stream } => {
                write!(f, "stream {stream:?} already has a consumer stage")
            }
            TopologyError::Invalid(v) => {
                write!(f, "topology validation failed with {} violation(s)", v.len())
            }
        }
    }
}

/// Incremental topology declaration: stages and streams are declared first,
/// then wired by attaching each stream as one stage's output and another
/// stage's input (with the operation the consumer requests).
#[derive(Debug, Default)]
pub struct TopologyBuilder {
    stages: Vec<StageDecl>,
    streams: Vec<PendingStream>,
}

#[derive(Debug)]
struct PendingStream {
    name: String,
    producer: Option<StageId>,
    consumer: Option<(StageId, StreamOp)>,
}

impl TopologyBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a stage with its node count and computation.
    pub fn stage(
        &mut self,
        name: &str,
        node_count: u32,
        function: StageFunction,
    ) -> Result<StageId, TopologyError> {
        if node_count == 0 {
            return Err(TopologyError::ZeroNodeCount { stage: name.into() });
        }
        if self.stages.iter().any(|s| s.name == name) {
            return Err(TopologyError::DuplicateStage { name: name.into() });
        }
        let id = StageId(self.stages.len() as u32);
        self.stages.push(StageDecl {
            name: name.into(),
            node_count,
            inputs: Vec::new(),
            outputs: Vec::new(),
            function,
        });
        Ok(id)
    }

    /// Declares a stream in the global namespace.
    pub fn stream(&mut self, name: &str) -> Result<StreamId, TopologyError> {
        if self.streams.iter().any(|s| s.name == name) {
            return Err(TopologyError::DuplicateStream { name: name.into() });
        }
        let id = StreamId(self.streams.len() as u32);
        self.streams.push(PendingStream {
            name: name.into(),
            producer: None,
            consumer: None,
        });
        Ok(id)
    }

    /// Attaches a stream as an output of `stage`.
    pub fn attach_output(&mut self, stage: StageId, stream: StreamId) -> Result<(), TopologyError> {
        let s = self
            .streams
            .get_mut(stream.0 as usize)
            .ok_or(TopologyError::UnknownStream { name: String::new() })?;
        if s.producer.is_some() {
            return Err(TopologyError::ProducerTaken {
                stream: s.name.clone(),
            });
        }
        s.producer = Some(stage);
        self.stages
            .get_mut(stage.0 as usize)
            .ok_or(TopologyError::UnknownStage { name: String::new() })?
            .outputs
            .push(stream);
        Ok(())
    }

    /// Attaches a stream as an input of `stage` with the given operation.
    pub fn attach_input(
        &mut self,
        stage: StageId,
        stream: StreamId,
        op: StreamOp,
    ) -> Result<(), TopologyError> {
        let s = self
            .streams
            .get_mut(stream.0 as usize)
            .ok_or(TopologyError::UnknownStream { name: String::new() })?;
        if s.consumer.is_some() {
            return Err(TopologyError::ConsumerTaken {
                stream: s.name.clone(),
            });
        }
        s.consumer = Some((stage, op));
        self.stages
            .get_mut(stage.0 as usize)
            .ok_or(TopologyError::UnknownStage { name: String::new() })?
            .inputs
            .push(stream);
        Ok(())
    }

    /// Finishes the declaration, running full validation.
    pub fn build(self) -> Result<Topology, TopologyError> {
        let mut streams = Vec::with_capacity(self.streams.len());
        for s in self.streams {
            let producer = s.producer.ok_or(TopologyError::Invalid(alloc::vec![
                Violation::DanglingStream {
                    stream: s.name.clone(),
                }
            ]))?;
            let (consumer, op) = s.consumer.ok_or(TopologyError::Invalid(alloc::vec![
                Violation::DanglingStream {
                    stream: s.name.clone(),
                }
            ]))?;
            streams.push(StreamDecl {
                name: s.name,
                producer,
                consumer,
                op,
            });
        }
        let topo = Topology {
            stages: self.stages,
            streams,
        };
        let violations = topo.validate();
        if violations.is_empty() {
            Ok(topo)
        } else {
            Err(TopologyError::Invalid(violations))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_stage_example() -> Topology {
        // One producing stage feeding two consumers over two streams.
        let mut b = TopologyBuilder::new();
        let s1 = b.stage("stage1", 2, StageFunction::Generate).unwrap();
        let s2 = b.stage("stage2", 2, StageFunction::Identity).unwrap();
        let s3 = b.stage("stage3", 1, StageFunction::Identity).unwrap();
        let a = b.stream("streamA.str").unwrap();
        let c = b.stream("streamB.str").unwrap();
        b.attach_output(s1, a).unwrap();
        b.attach_output(s1, c).unwrap();
        b.attach_input(s2, a, StreamOp::Group).unwrap();
        b.attach_input(s3, c, StreamOp::SortDesc).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn window_of_boundaries() {
        let w = WindowSpec::new(10).unwrap();
        assert_eq!(window_of(0, w), WindowIndex(0));
        assert_eq!(window_of(9, w), WindowIndex(0));
        assert_eq!(window_of(10, w), WindowIndex(1));
        assert_eq!(window_of(19, w), WindowIndex(1));
        assert_eq!(window_of(20, w), WindowIndex(2));
    }

    #[test]
    fn window_width_must_be_positive() {
        assert!(WindowSpec::new(0).is_err());
        assert!(WindowSpec::new(1).is_ok());
    }

    #[test]
    fn three_stage_topology_is_valid() {
        let t = three_stage_example();
        assert!(t.validate().is_empty());
        assert_eq!(t.source_stages().count(), 1);
    }

    #[test]
    fn empty_topology_is_valid() {
        let t = Topology {
            stages: Vec::new(),
            streams: Vec::new(),
        };
        assert!(t.validate().is_empty());
    }

    #[test]
    fn unknown_consumer_is_a_violation() {
        let mut t = three_stage_example();
        t.streams[0].consumer = StageId(9);
        let v = t.validate();
        assert!(v
            .iter()
            .any(|v| matches!(v, Violation::UnknownStage { role: "consumer", .. })));
    }

    #[test]
    fn zero_nodes_is_a_violation() {
        let mut t = three_stage_example();
        t.stages[1].node_count = 0;
        assert!(t
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::ZeroNodeCount { .. })));
    }

    #[test]
    fn duplicate_stream_name_is_a_violation() {
        let mut t = three_stage_example();
        t.streams[1].name = t.streams[0].name.clone();
        assert!(t
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::DuplicateStreamName { .. })));
    }

    #[test]
    fn dangling_stream_is_a_violation() {
        let mut t = three_stage_example();
        t.stages[1].inputs.clear();
        assert!(t
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::DanglingStream { .. })));
    }

    #[test]
    fn cycles_are_rejected() {
        let mut b = TopologyBuilder::new();
        let s1 = b.stage("a", 1, StageFunction::Identity).unwrap();
        let s2 = b.stage("b", 1, StageFunction::Identity).unwrap();
        let x = b.stream("x.str").unwrap();
        let y = b.stream("y.str").unwrap();
        b.attach_output(s1, x).unwrap();
        b.attach_input(s2, x, StreamOp::Plain).unwrap();
        b.attach_output(s2, y).unwrap();
        b.attach_input(s1, y, StreamOp::Plain).unwrap();
        match b.build() {
            Err(TopologyError::Invalid(v)) => {
                assert!(v.iter().any(|v| matches!(v, Violation::Cycle)))
            }
            other => panic!("expected cycle rejection, got {other:?}"),
        }
    }

    #[test]
    fn single_consumer_per_stream() {
        let mut b = TopologyBuilder::new();
        let s1 = b.stage("a", 1, StageFunction::Generate).unwrap();
        let s2 = b.stage("b", 1, StageFunction::Identity).unwrap();
        let s3 = b.stage("c", 1, StageFunction::Identity).unwrap();
        let x = b.stream("x.str").unwrap();
        b.attach_output(s1, x).unwrap();
        b.attach_input(s2, x, StreamOp::Plain).unwrap();
        let err = b.attach_input(s3, x, StreamOp::Plain).unwrap_err();
        assert!(matches!(err, TopologyError::ConsumerTaken { .. }));
    }

    #[test]
    fn duplicate_stage_registration_fails() {
        let mut b = TopologyBuilder::new();
        b.stage("a", 1, StageFunction::Identity).unwrap();
        assert!(matches!(
            b.stage("a", 3, StageFunction::Identity),
            Err(TopologyError::DuplicateStage { .. })
        ));
        assert!(matches!(
            b.stage("z", 0, StageFunction::Identity),
            Err(TopologyError::ZeroNodeCount { .. })
        ));
    }

    #[test]
    fn timestamp_always_inside_its_window() {
        let w = WindowSpec::new(7).unwrap();
        for ts in 0..200u64 {
            let n = window_of(ts, w);
            assert!(w.start_of(n) <= ts);
            assert!(ts <= w.start_of(WindowIndex(n.0 + 1)) - 1);
        }
    }

    #[test]
    fn window_of_monotone_in_timestamp() {
        let w = WindowSpec::new(13).unwrap();
        let mut prev = window_of(0, w);
        for ts in 1..500u64 {
            let cur = window_of(ts, w);
            assert!(cur >= prev);
            prev = cur;
        }
    }
}
