//! scratch debug
use streamweave_core::model::{StageFunction, StreamOp, TopologyBuilder};
use streamweave_core::scenario::{FailureKind, FailureSpec, GeneratorSpec, Params, Scenario, SourceSpec};
use streamweave_core::sim::{run, RunOptions, TraceRecord};
use streamweave_core::WindowSpec;

fn count_scenario(units: u64, windows: u64, seed: u64) -> Scenario {
    let mut b = TopologyBuilder::new();
    let src = b.stage("src", 3, StageFunction::Generate).unwrap();
    let counter = b.stage("counter", 3, StageFunction::WordGroupCount).unwrap();
    let sink = b.stage("sink", 1, StageFunction::Identity).unwrap();
    let words = b.stream("words.str").unwrap();
    let counts = b.stream("counts.str").unwrap();
    b.attach_output(src, words).unwrap();
    b.attach_input(counter, words, StreamOp::Group).unwrap();
    b.attach_output(counter, counts).unwrap();
    b.attach_input(sink, counts, StreamOp::Plain).unwrap();
    Scenario {
        topology: b.build().unwrap(),
        window: WindowSpec::new(100).unwrap(),
        params: Params::default(),
        sources: vec![("src".into(), SourceSpec { generator: GeneratorSpec::Uniform { keys: 120 }, units, windows })],
        failures: vec![],
        seed,
    }
}

#[test]
fn dbg_crash() {
    let sc = count_scenario(30_000, 3, 43);
    let baseline = run(&sc, RunOptions::default()).unwrap();
    eprintln!("baseline ticks={} outcome={:?}", baseline.report.ticks, baseline.report.outcome);
    let mut f = sc.clone();
    f.failures.push(FailureSpec { stage: "counter".into(), node: 1, at_tick: baseline.report.ticks / 4, kind: FailureKind::Crash });
    let out = run(&f, RunOptions { collect_trace: true }).unwrap();
    eprintln!("failure run ticks={} outcome={:?} recoveries={:?}", out.report.ticks, out.report.outcome, out.report.recoveries);
    let mut progress = 0; let mut verdicts = 0;
    for r in &out.trace {
        match r {
            TraceRecord::Progress { receiver_slot: 1, stream, units_sent, units_acked, tick, .. } if stream == "words.str" => {
                if progress < 12 { eprintln!("progress t={tick} recv=1 sent={units_sent} acked={units_acked}"); }
                progress += 1;
            }
            TraceRecord::Verdict { tick, stream, failed, epoch, .. } => { verdicts += 1; eprintln!("VERDICT t={tick} {stream} {failed} e={epoch}"); }
            _ => {}
        }
    }
    eprintln!("progress msgs for recv1: {progress}, verdicts: {verdicts}");
    let mut pushes_k1 = 0; let mut words_k1 = 0; let mut remark_counts = std::collections::BTreeMap::new();
    for r in &out.trace {
        match r {
            TraceRecord::Push { stream, frame: streamweave_core::sim::FrameInfo::Unit { key: 1, window: 0, .. }, tick, sender, receiver, .. } => {
                if stream == "counts.str" { pushes_k1 += 1; if pushes_k1 < 6 { eprintln!("push counts k1 t={tick} {sender}->{receiver}"); } }
                else { words_k1 += 1; if words_k1 > 240 { eprintln!("push words k1 t={tick} {sender}->{receiver}"); } }
            }
            TraceRecord::Push { stream, frame: streamweave_core::sim::FrameInfo::WindowEnd { window: 0 }, tick, sender, receiver } => {
                if stream == "words.str" && *tick > 250 { *remark_counts.entry((sender.clone(), receiver.clone())).or_insert(0u32) += 1; }
            }
            _ => {}
        }
    }
    eprintln!("counts.str pushes of key1/w0: {pushes_k1}; words.str pushes key1/w0 total: {words_k1}; re-marker counts: {remark_counts:?}");
    use std::collections::BTreeMap;
    let ms = |o: &streamweave_core::sim::RunOutput| {
        let mut m: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        for c in &o.captures { if c.stage == "sink" {
            *m.entry((c.window, c.unit.key.0)).or_insert(0) += 1;
        }}
        m
    };
    let b = ms(&baseline); let f2 = ms(&out);
    for (k, v) in &b { match f2.get(k) { None => eprintln!("MISSING {k:?} x{v}"), Some(x) if x != v => eprintln!("COUNT-DIFF {k:?} base={v} fail={x}"), _ => {} } }
    for (k, v) in &f2 { if !b.contains_key(k) { eprintln!("EXTRA {k:?} x{v}"); } }
    // payload diffs for matching keys
    let pm = |o: &streamweave_core::sim::RunOutput| {
        let mut m: BTreeMap<(u64, u64), Vec<Vec<u8>>> = BTreeMap::new();
        for c in &o.captures { if c.stage == "sink" { m.entry((c.window, c.unit.key.0)).or_default().push(c.unit.payload.clone()); }}
        m
    };
    let bp = pm(&baseline); let fp = pm(&out);
    let mut pd = 0;
    for (k, v) in &bp { if let Some(x) = fp.get(k) { if x != v && pd < 8 { eprintln!("PAYLOAD-DIFF {k:?} base={v:?} fail={x:?}"); pd += 1; } } }
    panic!("debug");
}
