//! Binary reader for trace files. Every error names the byte offset at
//! which the problem was found.

use thiserror::Error;

use crate::event::{EventKind, MmapBacking, OutState, WaitSource};
use crate::ids::{ConnToken, Fd, IrqId, Pid, SyscallId, TrapId};
use crate::time::{Timestamp, MICROS_PER_SEC};
use crate::trace::{
    CpuEventMap, RawEvent, SnapState, Snapshot, SnapshotProcess, TraceBlock, TraceFile,
    FORMAT_VERSION, MAGIC,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported format version {version} at offset {offset}")]
    UnsupportedVersion { version: u16, offset: usize },
    #[error("unknown event code {code} at offset {offset}")]
    UnknownEventCode { code: u8, offset: usize },
    #[error("truncated {what} at offset {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("delta regression within block at offset {offset}: {prev} then {next}")]
    DeltaRegression { prev: u32, next: u32, offset: usize },
    #[error("invalid {what} at offset {offset}")]
    InvalidField { what: &'static str, offset: usize },
    #[error("block event bytes mismatch at offset {offset}: header says {declared}, read {actual}")]
    BlockLengthMismatch {
        declared: u32,
        actual: u32,
        offset: usize,
    },
}

/// Decodes trace bytes into the snapshot and per-cpu event streams.
pub fn decode_trace(bytes: &[u8]) -> Result<(Snapshot, CpuEventMap), DecodeError> {
    let trace = read_trace(bytes)?;
    let events = trace.events();
    Ok((trace.snapshot, events))
}

pub(super) fn read_trace(bytes: &[u8]) -> Result<TraceFile, DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DecodeError::BadMagic { offset: 0 });
    }
    let version_offset = r.pos;
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::UnsupportedVersion {
            version,
            offset: version_offset,
        });
    }
    let snapshot = read_snapshot(&mut r)?;
    let mut blocks = Vec::new();
    while !r.done() {
        blocks.push(read_block(&mut r)?);
    }
    Ok(TraceFile { snapshot, blocks })
}

fn read_snapshot(r: &mut Reader<'_>) -> Result<Snapshot, DecodeError> {
    let count = r.u32("snapshot process count")?;
    let mut processes = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let pid = Pid(r.u32("snapshot pid")?);
        let parent = match r.u8("snapshot parent flag")? {
            0 => None,
            1 => Some(Pid(r.u32("snapshot parent pid")?)),
            _ => return Err(r.invalid("snapshot parent flag")),
        };
        let name = r.text("snapshot process name")?;
        let state = match r.u8("snapshot state")? {
            0 => SnapState::Running,
            1 => SnapState::Runnable,
            2 => SnapState::Blocked,
            _ => return Err(r.invalid("snapshot state")),
        };
        processes.push(SnapshotProcess {
            pid,
            parent,
            name,
            state,
        });
    }
    let cpu_count = r.u16("snapshot cpu count")?;
    let mut running = std::collections::BTreeMap::new();
    for _ in 0..cpu_count {
        let cpu = r.u16("snapshot cpu id")?;
        let pid = Pid(r.u32("snapshot running pid")?);
        running.insert(cpu, pid);
    }
    Ok(Snapshot { processes, running })
}

fn read_block(r: &mut Reader<'_>) -> Result<TraceBlock, DecodeError> {
    let cpu_id = r.u16("block header")?;
    let seconds = r.u64("block header")?;
    let micros_offset = r.pos;
    let micros = r.u32("block header")?;
    if micros as u64 >= MICROS_PER_SEC {
        return Err(DecodeError::InvalidField {
            what: "block start micros",
            offset: micros_offset,
        });
    }
    let event_count = r.u32("block header")?;
    let byte_length = r.u32("block header")?;
    let body_start = r.pos;
    let mut events = Vec::with_capacity(event_count.min(1 << 20) as usize);
    let mut prev_delta = 0u32;
    for i in 0..event_count {
        let delta_offset = r.pos;
        let delta_us = r.u32("block (event delta)")?;
        if delta_us < prev_delta {
            return Err(DecodeError::DeltaRegression {
                prev: prev_delta,
                next: delta_us,
                offset: delta_offset,
            });
        }
        prev_delta = delta_us;
        let kind = read_event(r)?;
        events.push(RawEvent { delta_us, kind });
        // Stop early if the block body overruns its declared length.
        let consumed = (r.pos - body_start) as u32;
        if consumed > byte_length {
            return Err(DecodeError::BlockLengthMismatch {
                declared: byte_length,
                actual: consumed,
                offset: delta_offset,
            });
        }
        let _ = i;
    }
    let consumed = (r.pos - body_start) as u32;
    if consumed != byte_length {
        return Err(DecodeError::BlockLengthMismatch {
            declared: byte_length,
            actual: consumed,
            offset: body_start,
        });
    }
    Ok(TraceBlock {
        cpu_id,
        start: Timestamp::new(seconds, micros),
        events,
    })
}

fn read_event(r: &mut Reader<'_>) -> Result<EventKind, DecodeError> {
    let code_offset = r.pos;
    let code = r.u8("event code")?;
    let kind = match code {
        1 => {
            let in_pid = Pid(r.u32("SchedChange")?);
            let out_pid = Pid(r.u32("SchedChange")?);
            let out_state = match r.u8("SchedChange")? {
                0 => OutState::Runnable,
                1 => OutState::Blocked,
                2 => OutState::Exited,
                _ => return Err(r.invalid("SchedChange out_state")),
            };
            EventKind::SchedChange {
                in_pid,
                out_pid,
                out_state,
            }
        }
        2 => {
            let pid = Pid(r.u32("WakeUp")?);
            let source = match r.u8("WakeUp source tag")? {
                0 => WaitSource::File {
                    fd: Fd(r.u32("WakeUp")?),
                },
                1 => WaitSource::Process {
                    pid: Pid(r.u32("WakeUp")?),
                },
                2 => WaitSource::Timer,
                3 => WaitSource::Device,
                _ => return Err(r.invalid("WakeUp source tag")),
            };
            EventKind::WakeUp { pid, source }
        }
        3 => EventKind::SyscallEntry {
            syscall: SyscallId(r.u16("SyscallEntry")?),
            arg: r.u64("SyscallEntry")?,
        },
        4 => EventKind::SyscallExit {
            return_value: r.u64("SyscallExit")? as i64,
        },
        5 => EventKind::TrapEntry {
            trap: TrapId(r.u16("TrapEntry")?),
            fault_address: r.u64("TrapEntry")?,
        },
        6 => EventKind::TrapExit,
        7 => EventKind::FsOpen {
            fd: Fd(r.u32("FsOpen")?),
            path: r.text("FsOpen path")?,
        },
        8 => EventKind::FsClose {
            fd: Fd(r.u32("FsClose")?),
        },
        9 => EventKind::FsRead {
            fd: Fd(r.u32("FsRead")?),
            byte_count: r.u64("FsRead")?,
        },
        10 => EventKind::FsWrite {
            fd: Fd(r.u32("FsWrite")?),
            byte_count: r.u64("FsWrite")?,
        },
        11 => EventKind::FsPoll {
            fd: Fd(r.u32("FsPoll")?),
        },
        12 => EventKind::FsPollTimeout {
            timeout_us: r.u64("FsPollTimeout")?,
        },
        13 => EventKind::FsExec {
            name: r.text("FsExec name")?,
        },
        14 => {
            let start_address = r.u64("MemMmap")?;
            let length = r.u64("MemMmap")?;
            let backing = match r.u8("MemMmap backing tag")? {
                0 => MmapBacking::File {
                    fd: Fd(r.u32("MemMmap")?),
                },
                1 => MmapBacking::Anonymous,
                _ => return Err(r.invalid("MemMmap backing tag")),
            };
            EventKind::MemMmap {
                start_address,
                length,
                backing,
            }
        }
        15 => EventKind::MemMunmap {
            start_address: r.u64("MemMunmap")?,
        },
        16 => EventKind::SockListen {
            fd: Fd(r.u32("SockListen")?),
        },
        17 => EventKind::SockConnect {
            fd: Fd(r.u32("SockConnect")?),
            conn: ConnToken(r.u64("SockConnect")?),
        },
        18 => EventKind::SockAccept {
            listen_fd: Fd(r.u32("SockAccept")?),
            new_fd: Fd(r.u32("SockAccept")?),
            conn: ConnToken(r.u64("SockAccept")?),
        },
        19 => EventKind::ProcFork {
            child_pid: Pid(r.u32("ProcFork")?),
        },
        20 => EventKind::ProcExit {
            code: r.u32("ProcExit")? as i32,
        },
        21 => EventKind::ProcWaitpid {
            target_pid: Pid(r.u32("ProcWaitpid")?),
        },
        22 => {
            let seconds = r.u64("TimerSet")?;
            let micros_offset = r.pos;
            let micros = r.u32("TimerSet")?;
            if micros as u64 >= MICROS_PER_SEC {
                return Err(DecodeError::InvalidField {
                    what: "TimerSet micros",
                    offset: micros_offset,
                });
            }
            EventKind::TimerSet {
                expiry: Timestamp::new(seconds, micros),
            }
        }
        23 => EventKind::TimerExpire {
            pid: Pid(r.u32("TimerExpire")?),
        },
        24 => EventKind::IrqEntry {
            irq: IrqId(r.u16("IrqEntry")?),
        },
        25 => EventKind::IrqExit,
        26 => EventKind::Sample {
            instruction_address: r.u64("Sample")?,
        },
        code => {
            return Err(DecodeError::UnknownEventCode {
                code,
                offset: code_offset,
            })
        }
    };
    Ok(kind)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.bytes.len() {
            return Err(DecodeError::Truncated {
                what,
                offset: self.pos,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &'static str) -> Result<String, DecodeError> {
        let len = self.u16(what)? as usize;
        let offset = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| DecodeError::InvalidField { what, offset })
    }

    fn invalid(&self, what: &'static str) -> DecodeError {
        DecodeError::InvalidField {
            what,
            offset: self.pos - 1,
        }
    }
}
