//! Trace event vocabulary.
//!
//! Events carry no process id of their own (except where the payload
//! inherently references one); attribution to a pid happens during replay
//! from the snapshot plus the chain of `SchedChange` events.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{ConnToken, Fd, IrqId, Pid, SyscallId, TrapId};
use crate::time::Timestamp;

/// State of the outgoing process at a scheduling change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutState {
    Runnable,
    Blocked,
    Exited,
}

impl fmt::Display for OutState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutState::Runnable => f.write_str("Runnable"),
            OutState::Blocked => f.write_str("Blocked"),
            OutState::Exited => f.write_str("Exited"),
        }
    }
}

/// What made a blocked process runnable again.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WaitSource {
    /// Readiness or data on one of the woken process's descriptors.
    File { fd: Fd },
    /// Another process caused the wakeup (child exit, peer hangup).
    Process { pid: Pid },
    /// Timer or timeout expiry.
    Timer,
    /// Generic completion with no tracked object (device, handshake).
    Device,
}

/// Backing store of a memory mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MmapBacking {
    File { fd: Fd },
    Anonymous,
}

/// One kernel-style trace event. Wire codes are listed in
/// [`EventKind::code`]; the binary payload layouts live in [`crate::trace`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    SchedChange {
        in_pid: Pid,
        out_pid: Pid,
        out_state: OutState,
    },
    WakeUp {
        pid: Pid,
        source: WaitSource,
    },
    SyscallEntry {
        syscall: SyscallId,
        arg: u64,
    },
    SyscallExit {
        return_value: i64,
    },
    TrapEntry {
        trap: TrapId,
        fault_address: u64,
    },
    TrapExit,
    FsOpen {
        fd: Fd,
        path: String,
    },
    FsClose {
        fd: Fd,
    },
    FsRead {
        fd: Fd,
        byte_count: u64,
    },
    FsWrite {
        fd: Fd,
        byte_count: u64,
    },
    /// One per polled descriptor, emitted at multiplexed-wait entry.
    FsPoll {
        fd: Fd,
    },
    /// Timeout armed for the current multiplexed wait; 0 means none.
    FsPollTimeout {
        timeout_us: u64,
    },
    FsExec {
        name: String,
    },
    MemMmap {
        start_address: u64,
        length: u64,
        backing: MmapBacking,
    },
    MemMunmap {
        start_address: u64,
    },
    SockListen {
        fd: Fd,
    },
    SockConnect {
        fd: Fd,
        conn: ConnToken,
    },
    SockAccept {
        listen_fd: Fd,
        new_fd: Fd,
        conn: ConnToken,
    },
    ProcFork {
        child_pid: Pid,
    },
    ProcExit {
        code: i32,
    },
    ProcWaitpid {
        target_pid: Pid,
    },
    TimerSet {
        expiry: Timestamp,
    },
    TimerExpire {
        pid: Pid,
    },
    IrqEntry {
        irq: IrqId,
    },
    IrqExit,
    Sample {
        instruction_address: u64,
    },
}

impl EventKind {
    /// Wire code of this event. Codes are part of the on-disk format and
    /// must never be renumbered.
    pub fn code(&self) -> u8 {
        match self {
            EventKind::SchedChange { .. } => 1,
            EventKind::WakeUp { .. } => 2,
            EventKind::SyscallEntry { .. } => 3,
            EventKind::SyscallExit { .. } => 4,
            EventKind::TrapEntry { .. } => 5,
            EventKind::TrapExit => 6,
            EventKind::FsOpen { .. } => 7,
            EventKind::FsClose { .. } => 8,
            EventKind::FsRead { .. } => 9,
            EventKind::FsWrite { .. } => 10,
            EventKind::FsPoll { .. } => 11,
            EventKind::FsPollTimeout { .. } => 12,
            EventKind::FsExec { .. } => 13,
            EventKind::MemMmap { .. } => 14,
            EventKind::MemMunmap { .. } => 15,
            EventKind::SockListen { .. } => 16,
            EventKind::SockConnect { .. } => 17,
            EventKind::SockAccept { .. } => 18,
            EventKind::ProcFork { .. } => 19,
            EventKind::ProcExit { .. } => 20,
            EventKind::ProcWaitpid { .. } => 21,
            EventKind::TimerSet { .. } => 22,
            EventKind::TimerExpire { .. } => 23,
            EventKind::IrqEntry { .. } => 24,
            EventKind::IrqExit => 25,
            EventKind::Sample { .. } => 26,
        }
    }

    /// Stable kind name, used for dump lines and per-process counters.
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SchedChange { .. } => "SchedChange",
            EventKind::WakeUp { .. } => "WakeUp",
            EventKind::SyscallEntry { .. } => "SyscallEntry",
            EventKind::SyscallExit { .. } => "SyscallExit",
            EventKind::TrapEntry { .. } => "TrapEntry",
            EventKind::TrapExit => "TrapExit",
            EventKind::FsOpen { .. } => "FsOpen",
            EventKind::FsClose { .. } => "FsClose",
            EventKind::FsRead { .. } => "FsRead",
            EventKind::FsWrite { .. } => "FsWrite",
            EventKind::FsPoll { .. } => "FsPoll",
            EventKind::FsPollTimeout { .. } => "FsPollTimeout",
            EventKind::FsExec { .. } => "FsExec",
            EventKind::MemMmap { .. } => "MemMmap",
            EventKind::MemMunmap { .. } => "MemMunmap",
            EventKind::SockListen { .. } => "SockListen",
            EventKind::SockConnect { .. } => "SockConnect",
            EventKind::SockAccept { .. } => "SockAccept",
            EventKind::ProcFork { .. } => "ProcFork",
            EventKind::ProcExit { .. } => "ProcExit",
            EventKind::ProcWaitpid { .. } => "ProcWaitpid",
            EventKind::TimerSet { .. } => "TimerSet",
            EventKind::TimerExpire { .. } => "TimerExpire",
            EventKind::IrqEntry { .. } => "IrqEntry",
            EventKind::IrqExit => "IrqExit",
            EventKind::Sample { .. } => "Sample",
        }
    }

    /// Human-readable payload for dump lines. Empty for payload-less events.
    pub fn payload_text(&self) -> String {
        match self {
            EventKind::SchedChange {
                in_pid,
                out_pid,
                out_state,
            } => format!("IN:{in_pid} OUT:{out_pid} STATE:{out_state}"),
            EventKind::WakeUp { pid, source } => {
                let src = match source {
                    WaitSource::File { fd } => format!("FILE:{fd}"),
                    WaitSource::Process { pid } => format!("PROC:{pid}"),
                    WaitSource::Timer => "TIMER".to_string(),
                    WaitSource::Device => "DEV".to_string(),
                };
                format!("PID:{pid} SRC:{src}")
            }
            EventKind::SyscallEntry { syscall, arg } => {
                format!("SYSCALL:{syscall} ARG:{arg}")
            }
            EventKind::SyscallExit { return_value } => format!("RET:{return_value}"),
            EventKind::TrapEntry {
                trap,
                fault_address,
            } => format!("TRAP:{trap} ADDR:0x{fault_address:x}"),
            EventKind::TrapExit => String::new(),
            EventKind::FsOpen { fd, path } => format!("FD:{fd} PATH:{path}"),
            EventKind::FsClose { fd } => format!("FD:{fd}"),
            EventKind::FsRead { fd, byte_count } => format!("FD:{fd} BYTES:{byte_count}"),
            EventKind::FsWrite { fd, byte_count } => format!("FD:{fd} BYTES:{byte_count}"),
            EventKind::FsPoll { fd } => format!("FD:{fd}"),
            EventKind::FsPollTimeout { timeout_us } => format!("TIMEOUT:{timeout_us}"),
            EventKind::FsExec { name } => format!("NAME:{name}"),
            EventKind::MemMmap {
                start_address,
                length,
                backing,
            } => {
                let b = match backing {
                    MmapBacking::File { fd } => format!("FD:{fd}"),
                    MmapBacking::Anonymous => "ANON".to_string(),
                };
                format!("START:0x{start_address:x} LEN:{length} {b}")
            }
            EventKind::MemMunmap { start_address } => format!("START:0x{start_address:x}"),
            EventKind::SockListen { fd } => format!("FD:{fd}"),
            EventKind::SockConnect { fd, conn } => format!("FD:{fd} CONN:{conn}"),
            EventKind::SockAccept {
                listen_fd,
                new_fd,
                conn,
            } => format!("LISTEN:{listen_fd} FD:{new_fd} CONN:{conn}"),
            EventKind::ProcFork { child_pid } => format!("CHILD:{child_pid}"),
            EventKind::ProcExit { code } => format!("CODE:{code}"),
            EventKind::ProcWaitpid { target_pid } => format!("TARGET:{target_pid}"),
            EventKind::TimerSet { expiry } => format!("EXPIRY:{expiry}"),
            EventKind::TimerExpire { pid } => format!("PID:{pid}"),
            EventKind::IrqEntry { irq } => format!("IRQ:{}", irq.0),
            EventKind::IrqExit => String::new(),
            EventKind::Sample {
                instruction_address,
            } => format!("ADDR:0x{instruction_address:x}"),
        }
    }
}
