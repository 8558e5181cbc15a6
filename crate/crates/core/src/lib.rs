//! StreamWeave core: a keyed-stream dataflow framework executed on a
//! deterministic discrete-event cluster simulator.
//!
//! Applications are declared as a DAG of *stages* connected by named
//! *streams* of keyed, timestamped data units. Streams carry a delivery
//! operation: `Group` (all units of a window sharing a key arrive at one
//! receiving node), `SortAsc`/`SortDesc` (each receiving node observes a
//! window in key order, built from sender-local sorting plus a receiver-side
//! merge), or `Plain` (no guarantee). Receiver load is balanced by hashing
//! keys into buckets and grouping contiguous bucket ranges onto nodes with a
//! variance-minimizing dynamic program ([`partition`]). A per-stream control
//! process collects histograms and progress reports, detects failed or
//! overloaded receivers and re-routes their buckets to survivors; senders
//! buffer each in-flight window and resend it under the new routing, with
//! sequence-number filtering downstream making recovery exactly-once per
//! window ([`control`], [`runtime`]).
//!
//! Everything runs inside [`sim`], a single-threaded integer-tick event
//! simulator: same scenario + seed always reproduces the identical event
//! trace and report. The crate is `no_std` (alloc only); file formats and
//! the scenario runner live in the companion CLI crate.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod control;
pub mod hash;
pub mod model;
pub mod ops;
pub mod partition;
pub mod runtime;
pub mod scenario;
pub mod sim;
pub mod wire;

pub use model::{DataUnit, Key, SequenceId, Topology, WindowIndex, WindowSpec};
pub use scenario::Scenario;
pub use sim::{run, RunOptions, RunOutput};
