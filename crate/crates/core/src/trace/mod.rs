//! Block-structured binary trace format.
//!
//! A trace file is a process snapshot followed by event blocks. Each block
//! header carries a full timestamp; events inside a block store only a
//! 32-bit microsecond delta from the block start, which is where most of
//! the size saving over full per-event timestamps comes from. A new block
//! is opened when the configured capacity is reached or when a delta would
//! no longer fit in 32 bits.

mod decode;
mod dump;
mod encode;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::event::EventKind;
use crate::ids::Pid;
use crate::time::Timestamp;

pub use decode::{decode_trace, DecodeError};
pub use dump::dump_trace;
pub use encode::{encode_trace, EncodeError};

/// Magic bytes at the start of every trace file: "LTR1".
pub const MAGIC: [u8; 4] = [0x4c, 0x54, 0x52, 0x31];
/// Current format version.
pub const FORMAT_VERSION: u16 = 1;
/// Default number of events per block.
pub const DEFAULT_BLOCK_CAPACITY: usize = 4096;

/// Scheduling state of a process at snapshot time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapState {
    Running,
    Runnable,
    Blocked,
}

/// One process known at trace start.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotProcess {
    pub pid: Pid,
    pub parent: Option<Pid>,
    pub name: String,
    pub state: SnapState,
}

/// System state at the instant tracing started: the process table and the
/// pid running on each cpu.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub processes: Vec<SnapshotProcess>,
    pub running: BTreeMap<u16, Pid>,
}

impl Snapshot {
    pub fn process(&self, pid: Pid) -> Option<&SnapshotProcess> {
        self.processes.iter().find(|p| p.pid == pid)
    }
}

/// Event with its 32-bit delta from the block start.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub delta_us: u32,
    pub kind: EventKind,
}

/// A run of events on one cpu sharing a block-header timestamp.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceBlock {
    pub cpu_id: u16,
    pub start: Timestamp,
    pub events: Vec<RawEvent>,
}

/// Per-cpu absolute-timestamped event streams, each in time order.
pub type CpuEventMap = BTreeMap<u16, Vec<(Timestamp, EventKind)>>;

/// In-memory form of a trace file. Blocks are stored in file order
/// (grouped by cpu, chronological within a cpu), so re-encoding a decoded
/// trace reproduces the input bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFile {
    pub snapshot: Snapshot,
    pub blocks: Vec<TraceBlock>,
}

impl TraceFile {
    /// Splits per-cpu event streams into blocks. Fails if a stream is not
    /// time-ordered.
    pub fn build(
        snapshot: Snapshot,
        events: &CpuEventMap,
        block_capacity: usize,
    ) -> Result<TraceFile, EncodeError> {
        encode::build_blocks(snapshot, events, block_capacity)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode::write_trace(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TraceFile, DecodeError> {
        decode::read_trace(bytes)
    }

    /// Reconstructs the absolute-timestamped per-cpu streams.
    pub fn events(&self) -> CpuEventMap {
        let mut map: CpuEventMap = BTreeMap::new();
        for block in &self.blocks {
            let stream = map.entry(block.cpu_id).or_default();
            for ev in &block.events {
                stream.push((block.start.add_micros(ev.delta_us as u64), ev.kind.clone()));
            }
        }
        map
    }

    pub fn event_count(&self) -> usize {
        self.blocks.iter().map(|b| b.events.len()).sum()
    }
}

/// One event in the global merged order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergedEvent {
    pub ts: Timestamp,
    pub cpu: u16,
    pub kind: EventKind,
}

/// Merges per-cpu streams into one global order: by timestamp, ties broken
/// by cpu id, then by position within the cpu stream. Dump lines and pid
/// attribution both use this order, so indices agree between them.
pub fn merge_cpu_events(events: &CpuEventMap) -> Vec<MergedEvent> {
    type Stream<'a> = (u16, &'a [(Timestamp, EventKind)], usize);
    let mut streams: Vec<Stream<'_>> = events
        .iter()
        .map(|(&cpu, evs)| (cpu, evs.as_slice(), 0usize))
        .collect();
    let total: usize = streams.iter().map(|(_, evs, _)| evs.len()).sum();
    let mut merged = Vec::with_capacity(total);
    loop {
        let mut best: Option<usize> = None;
        for (i, (cpu, evs, pos)) in streams.iter().enumerate() {
            if *pos >= evs.len() {
                continue;
            }
            let ts = evs[*pos].0;
            match best {
                None => best = Some(i),
                Some(j) => {
                    let (bcpu, bevs, bpos) = &streams[j];
                    let bts = bevs[*bpos].0;
                    if (ts, *cpu) < (bts, *bcpu) {
                        best = Some(i);
                    }
                }
            }
        }
        match best {
            Some(i) => {
                let (cpu, evs, pos) = &mut streams[i];
                merged.push(MergedEvent {
                    ts: evs[*pos].0,
                    cpu: *cpu,
                    kind: evs[*pos].1.clone(),
                });
                *pos += 1;
            }
            None => break,
        }
    }
    merged
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{OutState, WaitSource};

    fn ts(us: u64) -> Timestamp {
        Timestamp::new(100, 0).add_micros(us)
    }

    #[test]
    fn merge_orders_by_time_then_cpu() {
        let mut map = CpuEventMap::new();
        map.insert(
            1,
            vec![
                (ts(5), EventKind::TrapExit),
                (ts(10), EventKind::IrqExit),
            ],
        );
        map.insert(
            0,
            vec![
                (ts(5), EventKind::SyscallExit { return_value: 0 }),
                (
                    ts(5),
                    EventKind::WakeUp {
                        pid: Pid(7),
                        source: WaitSource::Timer,
                    },
                ),
            ],
        );
        let merged = merge_cpu_events(&map);
        assert_eq!(merged.len(), 4);
        // cpu 0 wins the t=5 tie, and its two events keep their order.
        assert_eq!(merged[0].cpu, 0);
        assert_eq!(merged[0].kind.name(), "SyscallExit");
        assert_eq!(merged[1].cpu, 0);
        assert_eq!(merged[1].kind.name(), "WakeUp");
        assert_eq!(merged[2].cpu, 1);
        assert_eq!(merged[3].kind.name(), "IrqExit");
    }

    #[test]
    fn events_reconstruct_absolute_times() {
        let block = TraceBlock {
            cpu_id: 0,
            start: Timestamp::new(50, 999_998),
            events: vec![
                RawEvent {
                    delta_us: 0,
                    kind: EventKind::IrqExit,
                },
                RawEvent {
                    delta_us: 3,
                    kind: EventKind::SchedChange {
                        in_pid: Pid(1),
                        out_pid: Pid(2),
                        out_state: OutState::Runnable,
                    },
                },
            ],
        };
        let trace = TraceFile {
            snapshot: Snapshot::default(),
            blocks: vec![block],
        };
        let events = trace.events();
        let stream = &events[&0];
        assert_eq!(stream[0].0, Timestamp::new(50, 999_998));
        assert_eq!(stream[1].0, Timestamp::new(51, 1));
    }
}
