//! Binary writer for trace files. All integers little-endian; text
//! payloads are u16-length-prefixed UTF-8.

use thiserror::Error;

use crate::event::{EventKind, MmapBacking, OutState, WaitSource};
use crate::time::Timestamp;
use crate::trace::{
    CpuEventMap, RawEvent, SnapState, Snapshot, TraceBlock, TraceFile, FORMAT_VERSION, MAGIC,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("events on cpu {cpu} not time-ordered at index {index}: {prev} then {next}")]
    NonMonotonic {
        cpu: u16,
        index: usize,
        prev: Timestamp,
        next: Timestamp,
    },
    #[error("block capacity must be at least 1")]
    ZeroCapacity,
}

/// Encodes a snapshot plus per-cpu event streams into trace-file bytes.
pub fn encode_trace(
    snapshot: &Snapshot,
    events: &CpuEventMap,
    block_capacity: usize,
) -> Result<Vec<u8>, EncodeError> {
    let trace = build_blocks(snapshot.clone(), events, block_capacity)?;
    Ok(write_trace(&trace))
}

pub(super) fn build_blocks(
    snapshot: Snapshot,
    events: &CpuEventMap,
    block_capacity: usize,
) -> Result<TraceFile, EncodeError> {
    if block_capacity == 0 {
        return Err(EncodeError::ZeroCapacity);
    }
    let mut blocks = Vec::new();
    for (&cpu, stream) in events {
        let mut current: Option<TraceBlock> = None;
        let mut prev_ts: Option<Timestamp> = None;
        for (index, (ts, kind)) in stream.iter().enumerate() {
            if let Some(prev) = prev_ts {
                if *ts < prev {
                    return Err(EncodeError::NonMonotonic {
                        cpu,
                        index,
                        prev,
                        next: *ts,
                    });
                }
            }
            prev_ts = Some(*ts);
            let delta = current
                .as_ref()
                .map(|b| ts.total_micros() - b.start.total_micros());
            let fits = matches!(delta, Some(d) if d <= u32::MAX as u128);
            let full = current
                .as_ref()
                .is_some_and(|b| b.events.len() >= block_capacity);
            if !fits || full {
                if let Some(done) = current.take() {
                    blocks.push(done);
                }
                current = Some(TraceBlock {
                    cpu_id: cpu,
                    start: *ts,
                    events: Vec::new(),
                });
            }
            let block = current.as_mut().expect("block just ensured");
            block.events.push(RawEvent {
                delta_us: ts.micros_since(block.start) as u32,
                kind: kind.clone(),
            });
        }
        if let Some(done) = current.take() {
            blocks.push(done);
        }
    }
    Ok(TraceFile { snapshot, blocks })
}

pub(super) fn write_trace(trace: &TraceFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    write_snapshot(&mut out, &trace.snapshot);
    for block in &trace.blocks {
        let mut body = Vec::new();
        for ev in &block.events {
            put_u32(&mut body, ev.delta_us);
            write_event(&mut body, &ev.kind);
        }
        put_u16(&mut out, block.cpu_id);
        put_u64(&mut out, block.start.seconds);
        put_u32(&mut out, block.start.micros);
        put_u32(&mut out, block.events.len() as u32);
        put_u32(&mut out, body.len() as u32);
        out.extend_from_slice(&body);
    }
    out
}

fn write_snapshot(out: &mut Vec<u8>, snap: &Snapshot) {
    put_u32(out, snap.processes.len() as u32);
    for proc in &snap.processes {
        put_u32(out, proc.pid.0);
        match proc.parent {
            Some(parent) => {
                out.push(1);
                put_u32(out, parent.0);
            }
            None => out.push(0),
        }
        put_text(out, &proc.name);
        out.push(match proc.state {
            SnapState::Running => 0,
            SnapState::Runnable => 1,
            SnapState::Blocked => 2,
        });
    }
    put_u16(out, snap.running.len() as u16);
    for (&cpu, &pid) in &snap.running {
        put_u16(out, cpu);
        put_u32(out, pid.0);
    }
}

fn write_event(out: &mut Vec<u8>, kind: &EventKind) {
    out.push(kind.code());
    match kind {
        EventKind::SchedChange {
            in_pid,
            out_pid,
            out_state,
        } => {
            put_u32(out, in_pid.0);
            put_u32(out, out_pid.0);
            out.push(match out_state {
                OutState::Runnable => 0,
                OutState::Blocked => 1,
                OutState::Exited => 2,
            });
        }
        EventKind::WakeUp { pid, source } => {
            put_u32(out, pid.0);
            match source {
                WaitSource::File { fd } => {
                    out.push(0);
                    put_u32(out, fd.0);
                }
                WaitSource::Process { pid } => {
                    out.push(1);
                    put_u32(out, pid.0);
                }
                WaitSource::Timer => out.push(2),
                WaitSource::Device => out.push(3),
            }
        }
        EventKind::SyscallEntry { syscall, arg } => {
            put_u16(out, syscall.0);
            put_u64(out, *arg);
        }
        EventKind::SyscallExit { return_value } => put_u64(out, *return_value as u64),
        EventKind::TrapEntry {
            trap,
            fault_address,
        } => {
            put_u16(out, trap.0);
            put_u64(out, *fault_address);
        }
        EventKind::TrapExit | EventKind::IrqExit => {}
        EventKind::FsOpen { fd, path } => {
            put_u32(out, fd.0);
            put_text(out, path);
        }
        EventKind::FsClose { fd } | EventKind::FsPoll { fd } | EventKind::SockListen { fd } => {
            put_u32(out, fd.0)
        }
        EventKind::FsRead { fd, byte_count } | EventKind::FsWrite { fd, byte_count } => {
            put_u32(out, fd.0);
            put_u64(out, *byte_count);
        }
        EventKind::FsPollTimeout { timeout_us } => put_u64(out, *timeout_us),
        EventKind::FsExec { name } => put_text(out, name),
        EventKind::MemMmap {
            start_address,
            length,
            backing,
        } => {
            put_u64(out, *start_address);
            put_u64(out, *length);
            match backing {
                MmapBacking::File { fd } => {
                    out.push(0);
                    put_u32(out, fd.0);
                }
                MmapBacking::Anonymous => out.push(1),
            }
        }
        EventKind::MemMunmap { start_address } => put_u64(out, *start_address),
        EventKind::SockConnect { fd, conn } => {
            put_u32(out, fd.0);
            put_u64(out, conn.0);
        }
        EventKind::SockAccept {
            listen_fd,
            new_fd,
            conn,
        } => {
            put_u32(out, listen_fd.0);
            put_u32(out, new_fd.0);
            put_u64(out, conn.0);
        }
        EventKind::ProcFork { child_pid } => put_u32(out, child_pid.0),
        EventKind::ProcExit { code } => put_u32(out, *code as u32),
        EventKind::ProcWaitpid { target_pid } => put_u32(out, target_pid.0),
        EventKind::TimerSet { expiry } => {
            put_u64(out, expiry.seconds);
            put_u32(out, expiry.micros);
        }
        EventKind::TimerExpire { pid } => put_u32(out, pid.0),
        EventKind::IrqEntry { irq } => put_u16(out, irq.0),
        EventKind::Sample {
            instruction_address,
        } => put_u64(out, *instruction_address),
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    assert!(bytes.len() <= u16::MAX as usize, "text payload too long");
    put_u16(out, bytes.len() as u16);
    out.extend_from_slice(bytes);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::Pid;

    fn ts(us: u64) -> Timestamp {
        Timestamp::new(1000, 0).add_micros(us)
    }

    fn snapshot_one() -> Snapshot {
        Snapshot {
            processes: vec![SnapshotProcess {
                pid: Pid(7),
                parent: None,
                name: "main".to_string(),
                state: SnapState::Running,
            }],
            running: [(0u16, Pid(7))].into_iter().collect(),
        }
    }

    use crate::trace::SnapshotProcess;

    #[test]
    fn empty_trace_has_snapshot_and_no_blocks() {
        let bytes = encode_trace(&snapshot_one(), &CpuEventMap::new(), 16).unwrap();
        let trace = TraceFile::from_bytes(&bytes).unwrap();
        assert_eq!(trace.blocks.len(), 0);
        assert_eq!(trace.snapshot, snapshot_one());
    }

    #[test]
    fn delta_overflow_forces_block_split() {
        let mut events = CpuEventMap::new();
        events.insert(
            0,
            vec![
                (ts(0), EventKind::IrqExit),
                (ts(5_000_000_000), EventKind::IrqExit),
            ],
        );
        let trace = build_blocks(snapshot_one(), &events, 1024).unwrap();
        assert_eq!(trace.blocks.len(), 2);
        assert_eq!(trace.blocks[1].start, ts(5_000_000_000));
        assert_eq!(trace.blocks[1].events[0].delta_us, 0);
    }

    #[test]
    fn capacity_forces_block_split() {
        let mut events = CpuEventMap::new();
        events.insert(
            0,
            (0..10u64).map(|i| (ts(i), EventKind::IrqExit)).collect(),
        );
        let trace = build_blocks(snapshot_one(), &events, 4).unwrap();
        assert_eq!(trace.blocks.len(), 3);
        assert_eq!(
            trace.blocks.iter().map(|b| b.events.len()).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
    }

    #[test]
    fn rejects_non_monotonic_input() {
        let mut events = CpuEventMap::new();
        events.insert(0, vec![(ts(10), EventKind::IrqExit), (ts(5), EventKind::IrqExit)]);
        let err = encode_trace(&snapshot_one(), &events, 16).unwrap_err();
        assert!(matches!(err, EncodeError::NonMonotonic { cpu: 0, index: 1, .. }));
    }

    #[test]
    fn equal_timestamps_are_allowed() {
        let mut events = CpuEventMap::new();
        events.insert(0, vec![(ts(10), EventKind::IrqExit), (ts(10), EventKind::TrapExit)]);
        assert!(encode_trace(&snapshot_one(), &events, 16).is_ok());
    }
}
