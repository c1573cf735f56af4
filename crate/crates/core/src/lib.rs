//! Event-trace tooling: a compact binary trace format, a deterministic
//! workload simulator that produces traces with known ground truth, and
//! analyzers that decompose per-process elapsed time into execution and
//! attributed wait categories, attribute server CPU time to clients, and
//! reduce sample/arc profile data into flat-profile, call-graph, and
//! coverage reports.

pub mod attribution;
pub mod event;
pub mod ids;
pub mod profile;
pub mod replay;
pub mod scenario;
pub mod sim;
pub mod wait;
pub mod time;
pub mod trace;

pub use event::{EventKind, MmapBacking, OutState, WaitSource};
pub use ids::{ConnToken, Fd, IrqId, Pid, SyscallId, TrapId};
pub use time::Timestamp;

/// Profile reductions instantiated with the everyday scalar.
pub type SampleHistogram = profile::SampleHistogram<f64>;
pub type FlatProfile = profile::FlatProfile<f64>;
pub type CallGraphReport = profile::CallGraphReport<f64>;
