//! Hash-to-bucket key partitioning and contiguous bucket grouping.
//!
//! Keys are hashed into `k` buckets, `k` a multiple of the receiving stage's
//! node count, and buckets are grouped contiguously onto nodes so that the
//! sum of squared deviations of per-node load from the per-node target is
//! minimal. [`allocate_buckets`] solves this with a dynamic program over a
//! cost matrix `T` (optimal cost of the first `j` buckets on the first `i`
//! nodes) and a decision matrix `D` for backtracking, in `O(l*k^2)` time
//! with cached prefix sums. [`allocate_buckets_weighted`] generalizes the
//! per-node target from the uniform mean to arbitrary rational targets,
//! which is what failure recovery uses to hand more of a failed node's data
//! to the survivors making the most progress.
//!
//! Costs are computed in exact integer arithmetic by scaling: instead of
//! `sum((load_i - num_i/den)^2)` we minimize `sum((den*load_i - num_i)^2)`,
//! which preserves the argmin and avoids rationals. The scaled cost relates
//! to the true cost by a factor of `den^2`.
//!
//! Grouping may leave nodes empty (an empty group contributes `target^2`),
//! which the recovery path needs when a small bucket range is split across
//! many survivors.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::hash::mix64;
use crate::model::Key;

/// Default ratio of buckets to receiving nodes.
pub const DEFAULT_BUCKET_MULTIPLIER: u32 = 32;

/// Guard for the exhaustive oracle: refuse instances with more contiguous
/// groupings than this.
pub const BRUTE_FORCE_GUARD: u128 = 1_000_000;

/// Index of one hash bucket, in `[0, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BucketId(pub u32);

/// Maps a key to its bucket. Deterministic and stable across nodes and runs:
/// a fixed multiply-xor-shift finalizer reduced modulo the bucket count.
pub fn bucket_of(key: Key, bucket_count: u32) -> BucketId {
    debug_assert!(bucket_count >= 1);
    BucketId((mix64(key.0) % bucket_count as u64) as u32)
}

/// Per-bucket item counts measured by senders; input to the allocator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketHistogram {
    counts: Vec<u64>,
}

impl BucketHistogram {
    pub fn new(counts: Vec<u64>) -> Self {
        BucketHistogram { counts }
    }

    pub fn zeroed(bucket_count: u32) -> Self {
        BucketHistogram {
            counts: vec![0; bucket_count as usize],
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn counts_mut(&mut self) -> &mut [u64] {
        &mut self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bucket-wise sum of per-sender histograms.
    pub fn merge(&mut self, other: &BucketHistogram) {
        debug_assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }
}

/// Per-node load targets as exact rationals `nums[i] / den`, with
/// `sum(nums) == total * den` so targets sum to the histogram total.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTargets {
    nums: Vec<u128>,
    den: u64,
}

impl NodeTargets {
    /// Uniform targets `total / nodes` for the plain allocator.
    pub fn uniform(total: u64, nodes: u32) -> Result<Self, PartitionError> {
        if nodes == 0 {
            return Err(PartitionError::ZeroNodes);
        }
        Ok(NodeTargets {
            nums: vec![total as u128; nodes as usize],
            den: nodes as u64,
        })
    }

    /// Targets proportional to `weights`, summing to `total`. A zero weight
    /// sum falls back to uniform targets.
    pub fn from_weights(total: u64, weights: &[u64]) -> Result<Self, PartitionError> {
        if weights.is_empty() {
            return Err(PartitionError::ZeroNodes);
        }
        let sum: u64 = weights.iter().sum();
        if sum == 0 {
            return Self::uniform(total, weights.len() as u32);
        }
        Ok(NodeTargets {
            nums: weights.iter().map(|&w| total as u128 * w as u128).collect(),
            den: sum,
        })
    }

    /// Explicit rational targets; rejects a mismatch with the total.
    pub fn new(nums: Vec<u64>, den: u64, total: u64) -> Result<Self, PartitionError> {
        if nums.is_empty() || den == 0 {
            return Err(PartitionError::ZeroNodes);
        }
        let sum: u128 = nums.iter().map(|&n| n as u128).sum();
        if sum != total as u128 * den as u128 {
            return Err(PartitionError::TargetSumMismatch);
        }
        Ok(NodeTargets {
            nums: nums.into_iter().map(|n| n as u128).collect(),
            den,
        })
    }

    pub fn len(&self) -> usize {
        self.nums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nums.is_empty()
    }

    pub fn den(&self) -> u64 {
        self.den
    }
}

/// One contiguous bucket range `[start, end)` owned by a node slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSpan {
    pub start: u32,
    pub end: u32,
    pub owner: u32,
}

impl BucketSpan {
    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn len(&self) -> u32 {
        self.end - self.start
    }
}

/// Assignment of every bucket to a node slot, as ordered disjoint spans
/// covering `[0, k)`. Fresh allocator output has one span per node in slot
/// order; after failure repartitions a slot may own several spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAllocation {
    spans: Vec<BucketSpan>,
    bucket_count: u32,
    /// Scaled cost `sum((den*load_i - num_i)^2)` of the optimization that
    /// produced this allocation; true cost is `cost_scaled / scale_den^2`.
    cost_scaled: u128,
    scale_den: u64,
}

impl BucketAllocation {
    /// Builds an allocation from explicit spans; they must be ordered,
    /// disjoint and cover `[0, bucket_count)` (empty spans permitted).
    pub fn from_spans(
        spans: Vec<BucketSpan>,
        bucket_count: u32,
        cost_scaled: u128,
        scale_den: u64,
    ) -> Self {
        debug_assert!({
            let mut cursor = 0u32;
            let mut ok = true;
            for s in &spans {
                ok &= s.start == cursor;
                cursor = s.end;
            }
            ok && cursor == bucket_count
        });
        BucketAllocation {
            spans,
            bucket_count,
            cost_scaled,
            scale_den,
        }
    }

    pub fn spans(&self) -> &[BucketSpan] {
        &self.spans
    }

    pub fn bucket_count(&self) -> u32 {
        self.bucket_count
    }

    pub fn cost_scaled(&self) -> u128 {
        self.cost_scaled
    }

    pub fn scale_den(&self) -> u64 {
        self.scale_den
    }

    /// Achieved sum of squared deviations from the per-node targets.
    pub fn cost(&self) -> f64 {
        self.cost_scaled as f64 / (self.scale_den as f64 * self.scale_den as f64)
    }

    pub fn owner_of(&self, bucket: BucketId) -> u32 {
        debug_assert!(bucket.0 < self.bucket_count);
        for s in &self.spans {
            if s.start <= bucket.0 && bucket.0 < s.end {
                return s.owner;
            }
        }
        unreachable!("spans cover [0, bucket_count)")
    }

    /// Dense bucket-to-owner table for routing.
    pub fn owner_table(&self) -> Vec<u32> {
        let mut table = vec![0u32; self.bucket_count as usize];
        for s in &self.spans {
            for b in s.start..s.end {
                table[b as usize] = s.owner;
            }
        }
        table
    }

    /// Distinct owners appearing in the allocation (including empty spans).
    pub fn owners(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.spans.iter().map(|s| s.owner).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Per-owner load under a histogram, keyed by owner slot.
    pub fn loads(&self, h: &BucketHistogram) -> Vec<(u32, u64)> {
        let mut acc: Vec<(u32, u64)> = Vec::new();
        for s in &self.spans {
            let load: u64 = h.counts()[s.start as usize..s.end as usize].iter().sum();
            match acc.iter_mut().find(|(o, _)| *o == s.owner) {
                Some((_, l)) => *l += load,
                None => acc.push((s.owner, load)),
            }
        }
        acc.sort_unstable_by_key(|&(o, _)| o);
        acc
    }
}

/// Cost matrix `T` (`(l+1) x (k+1)`, scaled integers) and decision matrix
/// `D` from the allocator; `T[i][j]` is the optimal scaled cost of the first
/// `j` buckets on the first `i` nodes, `D[i][j]` the split index realizing
/// it. Kept inspectable for tests and for the CLI allocation dump.
#[derive(Debug, Clone)]
pub struct DpTables {
    nodes: usize,
    buckets: usize,
    cost: Vec<u128>,
    decision: Vec<u32>,
}

impl DpTables {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    /// `T[i][j]` for `i` nodes and `j` buckets; `None` when infeasible.
    pub fn cost(&self, i: usize, j: usize) -> Option<u128> {
        let v = self.cost[i * (self.buckets + 1) + j];
        (v != u128::MAX).then_some(v)
    }

    /// `D[i][j]`: the chosen split (bucket count handed to the first `i-1`
    /// nodes).
    pub fn decision(&self, i: usize, j: usize) -> u32 {
        self.decision[i * (self.buckets + 1) + j]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionError {
    EmptyHistogram,
    ZeroNodes,
    LengthMismatch { targets: usize, expected: usize },
    TargetSumMismatch,
    /// The exhaustive oracle would enumerate more than [`BRUTE_FORCE_GUARD`]
    /// groupings.
    InstanceTooLarge { groupings: u128 },
    NoSurvivors,
    FailedAmongSurvivors,
}

impl fmt::Display for PartitionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionError::EmptyHistogram => write!(f, "histogram has no buckets"),
            PartitionError::ZeroNodes => write!(f, "node count must be at least 1"),
            PartitionError::LengthMismatch { targets, expected } => {
                write!(f, "{targets} targets for {expected} nodes")
            }
            PartitionError::TargetSumMismatch => {
                write!(f, "targets must sum to the histogram total")
            }
            PartitionError::InstanceTooLarge { groupings } => {
                write!(f, "{groupings} contiguous groupings exceed the oracle guard")
            }
            PartitionError::NoSurvivors => write!(f, "no surviving nodes to repartition onto"),
            PartitionError::FailedAmongSurvivors => {
                write!(f, "failed node listed among survivors")
            }
        }
    }
}

/// Minimum-variance contiguous grouping of buckets onto `nodes` equal-target
/// nodes. Returns the allocation (spans in slot order, empty spans allowed)
/// together with the DP tables.
pub fn allocate_buckets(
    h: &BucketHistogram,
    nodes: u32,
) -> Result<(BucketAllocation, DpTables), PartitionError> {
    let targets = NodeTargets::uniform(h.total(), nodes)?;
    allocate_buckets_weighted(h, &targets)
}

/// Minimum-cost contiguous grouping under arbitrary per-node targets;
/// with uniform targets this reduces exactly to [`allocate_buckets`].
pub fn allocate_buckets_weighted(
    h: &BucketHistogram,
    targets: &NodeTargets,
) -> Result<(BucketAllocation, DpTables), PartitionError> {
    if h.is_empty() {
        return Err(PartitionError::EmptyHistogram);
    }
    if targets.is_empty() {
        return Err(PartitionError::ZeroNodes);
    }
    let k = h.len();
    let l = targets.len();
    let width = k + 1;
    let den = targets.den as u128;

    // den * prefix[j], so a group's scaled load is a single subtraction.
    let mut scaled_prefix = vec![0u128; k + 1];
    for (j, &c) in h.counts().iter().enumerate() {
        scaled_prefix[j + 1] = scaled_prefix[j] + den * c as u128;
    }

    let mut cost = vec![u128::MAX; (l + 1) * width];
    let mut decision = vec![0u32; (l + 1) * width];
    cost[0] = 0; // T[0][0]: zero buckets on zero nodes

    for i in 1..=l {
        let num = targets.nums[i - 1];
        let (prev_rows, cur_rows) = cost.split_at_mut(i * width);
        let prev = &prev_rows[(i - 1) * width..i * width];
        let cur = &mut cur_rows[..width];
        let dec = &mut decision[i * width..(i + 1) * width];
        for j in 0..=k {
            let mut best = u128::MAX;
            let mut best_split = 0u32;
            let sp_j = scaled_prefix[j];
            // Split range includes s == j (this node empty) and s == 0
            // (all previous nodes empty); ties take the smallest split.
            for (s, &prev_cost) in prev.iter().enumerate().take(j + 1) {
                if prev_cost == u128::MAX {
                    continue;
                }
                let d = (sp_j - scaled_prefix[s]) as i128 - num as i128;
                let c = prev_cost + (d * d) as u128;
                if c < best {
                    best = c;
                    best_split = s as u32;
                }
            }
            cur[j] = best;
            dec[j] = best_split;
        }
    }

    let tables = DpTables {
        nodes: l,
        buckets: k,
        cost,
        decision,
    };

    // Backtrack from D[l][k] to recover the spans.
    let mut spans = vec![
        BucketSpan {
            start: 0,
            end: 0,
            owner: 0
        };
        l
    ];
    let mut j = k;
    for i in (1..=l).rev() {
        let s = tables.decision(i, j) as usize;
        spans[i - 1] = BucketSpan {
            start: s as u32,
            end: j as u32,
            owner: (i - 1) as u32,
        };
        j = s;
    }
    let total_cost = tables.cost(l, k).expect("full instance is feasible");

    Ok((
        BucketAllocation {
            spans,
            bucket_count: k as u32,
            cost_scaled: total_cost,
            scale_den: targets.den,
        },
        tables,
    ))
}

/// Scaled cost of an explicit grouping given as split points.
fn cuts_cost(cuts: &[usize], prefix: &[u64], targets: &NodeTargets) -> u128 {
    let den = targets.den as u128;
    let mut cost = 0u128;
    for i in 0..targets.len() {
        let load = (prefix[cuts[i + 1]] - prefix[cuts[i]]) as u128;
        let d = (den * load) as i128 - targets.nums[i] as i128;
        cost += (d * d) as u128;
    }
    cost
}

fn groupings_count(k: u128, l: u128) -> u128 {
    // Compositions of k buckets into l ordered (possibly empty) groups:
    // C(k + l - 1, l - 1).
    let mut acc: u128 = 1;
    for i in 1..l {
        acc = acc.saturating_mul(k + l - i).saturating_div(i);
        if acc > BRUTE_FORCE_GUARD * 1000 {
            return acc;
        }
    }
    acc
}

/// Exhaustive counterpart of [`allocate_buckets`]: enumerates every
/// contiguous grouping and returns a minimum-cost one. Test oracle only;
/// guarded against large instances.
pub fn brute_force_allocate(
    h: &BucketHistogram,
    nodes: u32,
) -> Result<BucketAllocation, PartitionError> {
    let targets = NodeTargets::uniform(h.total(), nodes)?;
    brute_force_allocate_weighted(h, &targets)
}

/// Weighted-target version of the exhaustive oracle.
pub fn brute_force_allocate_weighted(
    h: &BucketHistogram,
    targets: &NodeTargets,
) -> Result<BucketAllocation, PartitionError> {
    if h.is_empty() {
        return Err(PartitionError::EmptyHistogram);
    }
    let k = h.len();
    let l = targets.len();
    let groupings = groupings_count(k as u128, l as u128);
    if groupings > BRUTE_FORCE_GUARD {
        return Err(PartitionError::InstanceTooLarge { groupings });
    }

    let mut prefix = vec![0u64; k + 1];
    for (j, &c) in h.counts().iter().enumerate() {
        prefix[j + 1] = prefix[j] + c;
    }

    // cuts[0] = 0 <= cuts[1] <= ... <= cuts[l-1] <= cuts[l] = k
    let mut cuts = vec![0usize; l + 1];
    cuts[l] = k;
    let mut best_cost = u128::MAX;
    let mut best_cuts = cuts.clone();
    loop {
        let c = cuts_cost(&cuts, &prefix, targets);
        if c < best_cost {
            best_cost = c;
            best_cuts = cuts.clone();
        }
        // Lexicographic successor of the inner cut vector.
        let mut pos = l - 1;
        loop {
            if pos == 0 {
                // All inner cuts saturated.
                let done = (1..l).all(|i| cuts[i] == k);
                if done {
                    let spans = (0..l)
                        .map(|i| BucketSpan {
                            start: best_cuts[i] as u32,
                            end: best_cuts[i + 1] as u32,
                            owner: i as u32,
                        })
                        .collect();
                    return Ok(BucketAllocation {
                        spans,
                        bucket_count: k as u32,
                        cost_scaled: best_cost,
                        scale_den: targets.den,
                    });
                }
                unreachable!("successor search covers all vectors");
            }
            if cuts[pos] < k {
                cuts[pos] += 1;
                for i in pos + 1..l {
                    cuts[i] = cuts[pos];
                }
                break;
            }
            pos -= 1;
        }
    }
}

/// Re-splits a failed node's bucket spans among the surviving nodes, with
/// targets proportional to each survivor's progress; survivors keep their
/// existing spans. `survivors` is `(slot, progress)` ordered by slot.
///
/// The returned allocation's cost fields describe the recovery optimization
/// itself (the weighted split of the failed spans), so an empty failed range
/// reports zero added cost.
pub fn repartition_on_failure(
    current: &BucketAllocation,
    failed: u32,
    survivors: &[(u32, u64)],
    h: &BucketHistogram,
) -> Result<BucketAllocation, PartitionError> {
    if survivors.is_empty() {
        return Err(PartitionError::NoSurvivors);
    }
    if survivors.iter().any(|&(slot, _)| slot == failed) {
        return Err(PartitionError::FailedAmongSurvivors);
    }
    debug_assert_eq!(h.len() as u32, current.bucket_count);

    let weights: Vec<u64> = survivors.iter().map(|&(_, w)| w).collect();
    let mut spans: Vec<BucketSpan> = Vec::with_capacity(current.spans.len());
    let mut recovery_cost = 0u128;
    let mut scale_den = 1u64;
    for span in &current.spans {
        if span.owner != failed {
            spans.push(*span);
            continue;
        }
        if span.is_empty() {
            continue;
        }
        let sub = BucketHistogram::new(
            h.counts()[span.start as usize..span.end as usize].to_vec(),
        );
        let targets = NodeTargets::from_weights(sub.total(), &weights)?;
        scale_den = targets.den;
        let (sub_alloc, _) = allocate_buckets_weighted(&sub, &targets)?;
        recovery_cost += sub_alloc.cost_scaled();
        for s in sub_alloc.spans() {
            if s.is_empty() {
                continue;
            }
            spans.push(BucketSpan {
                start: span.start + s.start,
                end: span.start + s.end,
                owner: survivors[s.owner as usize].0,
            });
        }
    }
    spans.sort_by_key(|s| (s.start, s.end));
    // Merge adjacent spans with one owner so routing tables stay small.
    let mut merged: Vec<BucketSpan> = Vec::with_capacity(spans.len());
    for s in spans {
        match merged.last_mut() {
            Some(last) if last.owner == s.owner && last.end == s.start && !s.is_empty() => {
                last.end = s.end;
            }
            _ => merged.push(s),
        }
    }
    Ok(BucketAllocation {
        spans: merged,
        bucket_count: current.bucket_count,
        cost_scaled: recovery_cost,
        scale_den,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist(counts: &[u64]) -> BucketHistogram {
        BucketHistogram::new(counts.to_vec())
    }

    #[test]
    fn bucket_of_is_deterministic() {
        let k = 96;
        for key in [0u64, 1, 42, u64::MAX] {
            assert_eq!(bucket_of(Key(key), k), bucket_of(Key(key), k));
            assert!(bucket_of(Key(key), k).0 < k);
        }
    }

    #[test]
    fn bucket_of_single_bucket() {
        assert_eq!(bucket_of(Key(123), 1), BucketId(0));
        assert_eq!(bucket_of(Key(u64::MAX), 1), BucketId(0));
    }

    #[test]
    fn bucket_of_spreads_random_keys() {
        // 1e5 seeded pseudo-random keys over 96 buckets: max share within
        // 3x the mean.
        let k = 96u32;
        let mut counts = vec![0u64; k as usize];
        let mut x = 0x1234_5678u64;
        for _ in 0..100_000 {
            x = mix64(x.wrapping_add(0x9e37_79b9_7f4a_7c15));
            counts[bucket_of(Key(x), k).0 as usize] += 1;
        }
        let mean = 100_000f64 / k as f64;
        let max = *counts.iter().max().unwrap() as f64;
        assert!(max <= 3.0 * mean, "max bucket {max} vs mean {mean}");
    }

    // Oracle sanity: the four contiguous 2-splits of [5,3,8,2,6] cost
    // 98, 32, 32, 72 against the mean 12, so the optimum is 32.
    #[test]
    fn oracle_hand_checked_instance() {
        let a = brute_force_allocate(&hist(&[5, 3, 8, 2, 6]), 2).unwrap();
        assert_eq!(a.cost(), 32.0);
        assert_eq!(a.cost_scaled(), 32 * 4); // scaled by den^2 = l^2
    }

    #[test]
    fn oracle_single_node_is_zero_cost() {
        let a = brute_force_allocate(&hist(&[7, 1, 2]), 1).unwrap();
        assert_eq!(a.cost_scaled(), 0);
        assert_eq!(a.spans().len(), 1);
    }

    #[test]
    fn oracle_guard_rejects_huge_instances() {
        let counts = vec![1u64; 200];
        match brute_force_allocate(&hist(&counts), 16) {
            Err(PartitionError::InstanceTooLarge { .. }) => {}
            other => panic!("expected guard, got {other:?}"),
        }
    }

    #[test]
    fn dp_equal_counts_split_evenly() {
        let (a, _) = allocate_buckets(&hist(&[4, 4, 4, 4]), 2).unwrap();
        assert_eq!(a.cost_scaled(), 0);
        assert_eq!(
            a.spans(),
            &[
                BucketSpan { start: 0, end: 2, owner: 0 },
                BucketSpan { start: 2, end: 4, owner: 1 },
            ]
        );
    }

    #[test]
    fn dp_hand_checked_instance() {
        let (a, t) = allocate_buckets(&hist(&[5, 3, 8, 2, 6]), 2).unwrap();
        assert_eq!(a.cost(), 32.0);
        // Smallest split index wins the tie between loads {8,16} and {16,8}.
        assert_eq!(
            a.spans(),
            &[
                BucketSpan { start: 0, end: 2, owner: 0 },
                BucketSpan { start: 2, end: 5, owner: 1 },
            ]
        );
        assert_eq!(t.cost(2, 5), Some(a.cost_scaled()));
    }

    #[test]
    fn dp_more_nodes_than_buckets_uses_empty_groups() {
        let (a, _) = allocate_buckets(&hist(&[9]), 3).unwrap();
        // One group holds the bucket, two are empty:
        // (9-3)^2 + 2*(0-3)^2 = 54.
        assert_eq!(a.cost(), 54.0);
        assert_eq!(a.cost_scaled(), 54 * 9);
        let non_empty: Vec<_> = a.spans().iter().filter(|s| !s.is_empty()).collect();
        assert_eq!(non_empty.len(), 1);
        assert_eq!((non_empty[0].start, non_empty[0].end), (0, 1));
    }

    #[test]
    fn dp_rejects_degenerate_inputs() {
        assert!(matches!(
            allocate_buckets(&BucketHistogram::new(vec![]), 2),
            Err(PartitionError::EmptyHistogram)
        ));
        assert!(matches!(
            allocate_buckets(&hist(&[1]), 0),
            Err(PartitionError::ZeroNodes)
        ));
    }

    #[test]
    fn weighted_uniform_reduces_to_unweighted() {
        let h = hist(&[4, 4, 4, 4]);
        let targets = NodeTargets::new(vec![8, 8], 1, 16).unwrap();
        let (a, _) = allocate_buckets_weighted(&h, &targets).unwrap();
        assert_eq!(a.cost_scaled(), 0);
    }

    #[test]
    fn weighted_exact_fit() {
        let h = hist(&[6, 2]);
        let targets = NodeTargets::new(vec![6, 2], 1, 8).unwrap();
        let (a, _) = allocate_buckets_weighted(&h, &targets).unwrap();
        assert_eq!(a.cost_scaled(), 0);
        assert_eq!(
            a.spans(),
            &[
                BucketSpan { start: 0, end: 1, owner: 0 },
                BucketSpan { start: 1, end: 2, owner: 1 },
            ]
        );
    }

    #[test]
    fn weighted_with_zero_target() {
        // Oracle-verified: targets (10, 5, 0) over [5,5,5] admit a perfect
        // grouping {[0,2), [2,3), empty}.
        let h = hist(&[5, 5, 5]);
        let targets = NodeTargets::new(vec![10, 5, 0], 1, 15).unwrap();
        let oracle = brute_force_allocate_weighted(&h, &targets).unwrap();
        let (a, _) = allocate_buckets_weighted(&h, &targets).unwrap();
        assert_eq!(a.cost_scaled(), oracle.cost_scaled());
        assert_eq!(a.cost_scaled(), 0);
    }

    #[test]
    fn weighted_rejects_bad_targets() {
        assert!(matches!(
            NodeTargets::new(vec![5, 5], 1, 16),
            Err(PartitionError::TargetSumMismatch)
        ));
        assert!(matches!(
            NodeTargets::new(vec![], 1, 0),
            Err(PartitionError::ZeroNodes)
        ));
    }

    #[test]
    fn repartition_single_survivor_takes_everything() {
        let h = hist(&[4, 4, 4, 4]);
        let (current, _) = allocate_buckets(&h, 2).unwrap();
        let next = repartition_on_failure(&current, 1, &[(0, 10)], &h).unwrap();
        assert_eq!(next.owner_table(), vec![0, 0, 0, 0]);
        assert!(!next.owners().contains(&1));
    }

    #[test]
    fn repartition_weights_follow_progress() {
        // Slot 2 fails owning [4,8) with counts [3,3,3,3]; survivors with
        // progress 2:1 take targets 8 and 4 over the failed range.
        let h = hist(&[1, 1, 1, 1, 3, 3, 3, 3]);
        let current = BucketAllocation {
            spans: vec![
                BucketSpan { start: 0, end: 2, owner: 0 },
                BucketSpan { start: 2, end: 4, owner: 1 },
                BucketSpan { start: 4, end: 8, owner: 2 },
            ],
            bucket_count: 8,
            cost_scaled: 0,
            scale_den: 1,
        };
        let next = repartition_on_failure(&current, 2, &[(0, 2), (1, 1)], &h).unwrap();
        assert!(!next.owners().contains(&2));
        // Oracle over the failed range with the same weighted targets.
        let sub = hist(&[3, 3, 3, 3]);
        let targets = NodeTargets::from_weights(12, &[2, 1]).unwrap();
        let oracle = brute_force_allocate_weighted(&sub, &targets).unwrap();
        assert_eq!(next.cost_scaled(), oracle.cost_scaled());
        // Survivor 0 keeps [0,2) and gains the left part of the failed range.
        let table = next.owner_table();
        assert_eq!(&table[0..2], &[0, 0]);
        assert_eq!(&table[2..4], &[1, 1]);
        for w in &table[4..8] {
            assert!(*w == 0 || *w == 1);
        }
        // Contiguous split inside the failed range: left piece to the
        // earlier slot.
        assert_eq!(&table[4..8], &[0, 0, 0, 1]);
    }

    #[test]
    fn repartition_empty_failed_range_costs_nothing() {
        let h = hist(&[5, 5, 0, 0]);
        let current = BucketAllocation {
            spans: vec![
                BucketSpan { start: 0, end: 2, owner: 0 },
                BucketSpan { start: 2, end: 4, owner: 1 },
            ],
            bucket_count: 4,
            cost_scaled: 0,
            scale_den: 1,
        };
        let next = repartition_on_failure(&current, 1, &[(0, 7)], &h).unwrap();
        assert_eq!(next.cost_scaled(), 0);
        assert_eq!(next.owner_table(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn repartition_requires_survivors() {
        let h = hist(&[1]);
        let (current, _) = allocate_buckets(&h, 1).unwrap();
        assert!(matches!(
            repartition_on_failure(&current, 0, &[], &h),
            Err(PartitionError::NoSurvivors)
        ));
        assert!(matches!(
            repartition_on_failure(&current, 0, &[(0, 1)], &h),
            Err(PartitionError::FailedAmongSurvivors)
        ));
    }

    #[test]
    fn repartition_symmetric_failures_cost_the_same() {
        let h = hist(&[2, 2, 2, 2, 2, 2]);
        let (current, _) = allocate_buckets(&h, 3).unwrap();
        let fail_first = repartition_on_failure(&current, 0, &[(1, 5), (2, 5)], &h).unwrap();
        let fail_last = repartition_on_failure(&current, 2, &[(0, 5), (1, 5)], &h).unwrap();
        assert_eq!(fail_first.cost_scaled(), fail_last.cost_scaled());
    }

    #[test]
    fn optimal_substructure_holds_on_prefixes() {
        let h = hist(&[5, 3, 8, 2, 6, 1, 9]);
        let l = 3u32;
        let (a, tables) = allocate_buckets(&h, l).unwrap();
        let targets = NodeTargets::uniform(h.total(), l).unwrap();
        for i in 1..=l as usize {
            let j = a.spans()[i - 1].end as usize;
            let prefix_hist = hist(&h.counts()[..j]);
            let prefix_targets = NodeTargets {
                nums: targets.nums[..i].to_vec(),
                den: targets.den,
            };
            if prefix_hist.is_empty() {
                continue;
            }
            let (prefix_alloc, _) =
                allocate_buckets_weighted(&prefix_hist, &prefix_targets).unwrap();
            assert_eq!(
                Some(prefix_alloc.cost_scaled()),
                tables.cost(i, j),
                "prefix ({i} nodes, {j} buckets)"
            );
        }
    }

    #[test]
    fn reconstruction_cost_matches_table() {
        let h = hist(&[3, 0, 7, 7, 1, 4]);
        let (a, tables) = allocate_buckets(&h, 4).unwrap();
        let targets = NodeTargets::uniform(h.total(), 4).unwrap();
        let mut prefix = vec![0u64; h.len() + 1];
        for (j, &c) in h.counts().iter().enumerate() {
            prefix[j + 1] = prefix[j] + c;
        }
        let cuts: Vec<usize> = core::iter::once(0)
            .chain(a.spans().iter().map(|s| s.end as usize))
            .collect();
        assert_eq!(cuts_cost(&cuts, &prefix, &targets), a.cost_scaled());
        assert_eq!(tables.cost(4, h.len()), Some(a.cost_scaled()));
    }

    proptest! {
        #[test]
        fn dp_matches_oracle(
            counts in proptest::collection::vec(0u64..=20, 1..=8),
            nodes in 1u32..=4,
        ) {
            let h = BucketHistogram::new(counts);
            let (dp, _) = allocate_buckets(&h, nodes).unwrap();
            let oracle = brute_force_allocate(&h, nodes).unwrap();
            prop_assert_eq!(dp.cost_scaled(), oracle.cost_scaled());
        }

        #[test]
        fn weighted_uniform_equals_unweighted(
            counts in proptest::collection::vec(0u64..=20, 1..=8),
            nodes in 1u32..=4,
        ) {
            let h = BucketHistogram::new(counts);
            let (plain, _) = allocate_buckets(&h, nodes).unwrap();
            let uniform = NodeTargets::from_weights(h.total(), &vec![1u64; nodes as usize]).unwrap();
            let (weighted, _) = allocate_buckets_weighted(&h, &uniform).unwrap();
            // Same argmin; costs agree after rescaling denominators.
            let lhs = plain.cost_scaled() as f64
                / (plain.scale_den() as f64 * plain.scale_den() as f64);
            let rhs = weighted.cost_scaled() as f64
                / (weighted.scale_den() as f64 * weighted.scale_den() as f64);
            prop_assert!((lhs - rhs).abs() < 1e-6);
        }

        #[test]
        fn equal_counts_divisible_nodes_cost_zero(
            per_bucket in 0u64..=50,
            nodes in 1u32..=4,
            groups_per_node in 1usize..=4,
        ) {
            let k = nodes as usize * groups_per_node;
            let h = BucketHistogram::new(vec![per_bucket; k]);
            let (a, _) = allocate_buckets(&h, nodes).unwrap();
            prop_assert_eq!(a.cost_scaled(), 0);
        }

        #[test]
        fn spans_always_cover_every_bucket(
            counts in proptest::collection::vec(0u64..=20, 1..=10),
            nodes in 1u32..=6,
        ) {
            let h = BucketHistogram::new(counts);
            let (a, _) = allocate_buckets(&h, nodes).unwrap();
            let table = a.owner_table();
            prop_assert_eq!(table.len(), h.len());
            let mut cursor = 0u32;
            for s in a.spans() {
                prop_assert_eq!(s.start, cursor);
                cursor = s.end;
            }
            prop_assert_eq!(cursor as usize, h.len());
        }
    }
}
