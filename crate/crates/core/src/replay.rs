//! Trace replay: attributes a pid to every event and reconstructs
//! per-process scheduling state, fd tables, mmap tables, and the socket
//! connection registry.
//!
//! Events carry no pid on the wire. Attribution starts from the snapshot's
//! per-cpu running map and follows the `SchedChange` chain; the scheduling
//! change itself belongs to the outgoing process. Replay is a sequential
//! fold over the attributed events; analyses hook into it through
//! [`ReplayHooks`] so they see process tables as they stood at each
//! instant without re-implementing the bookkeeping.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{EventKind, MmapBacking, OutState, WaitSource};
use crate::ids::{ConnToken, Fd, IrqId, Pid, SyscallId, TrapId};
use crate::time::Timestamp;
use crate::trace::{merge_cpu_events, CpuEventMap, SnapState, Snapshot};

/// One event with its owning pid, in global time order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributedEvent {
    pub ts: Timestamp,
    pub cpu: u16,
    pub pid: Pid,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedState {
    Running,
    Runnable,
    Blocked,
    Exited,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    User,
    Syscall { syscall: SyscallId },
    Trap { trap: TrapId, fault_address: u64 },
}

/// What a descriptor or mapping refers to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FileRefKind {
    RegularFile { path: String },
    SocketConn { conn: ConnToken },
    ListenSocket,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileRef {
    pub kind: FileRefKind,
    /// Path basename for files, `conn:<token>` for connections,
    /// `listen:<fd>` for listening sockets.
    pub display_name: String,
}

impl FileRef {
    pub fn regular(path: &str) -> FileRef {
        let display_name = path.rsplit('/').next().unwrap_or(path).to_string();
        FileRef {
            kind: FileRefKind::RegularFile {
                path: path.to_string(),
            },
            display_name,
        }
    }

    pub fn connection(conn: ConnToken) -> FileRef {
        FileRef {
            kind: FileRefKind::SocketConn { conn },
            display_name: format!("conn:{conn}"),
        }
    }

    pub fn listener(fd: Fd) -> FileRef {
        FileRef {
            kind: FileRefKind::ListenSocket,
            display_name: format!("listen:{fd}"),
        }
    }
}

/// Site a process was blocked at, captured when it is scheduled out
/// non-runnable: the current syscall/trap mode plus the most recent
/// read/poll/waitpid/fork detail seen in the same episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WaitSite {
    Read { fd: Fd },
    PageFault { address: u64 },
    Waitpid { target: Pid },
    Multiplexed { fds: Vec<Fd>, timeout_us: u64 },
    Fork,
    Generic { syscall: SyscallId },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingWait {
    pub site: WaitSite,
    pub blocked_at: Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpisodeKind {
    Syscall(SyscallId),
    Trap(TrapId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Episode {
    pub kind: EpisodeKind,
    pub entered_at: Timestamp,
}

/// A non-overlapping mapped address range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MmapRange {
    pub start: u64,
    pub length: u64,
    /// `None` for anonymous mappings.
    pub backing: Option<FileRef>,
}

/// Replayed view of one process.
#[derive(Clone, Debug)]
pub struct ProcessState {
    pub pid: Pid,
    pub parent: Option<Pid>,
    pub name: String,
    pub sched: SchedState,
    pub mode: ExecMode,
    pub pending_wait: Option<PendingWait>,
    pub fd_table: BTreeMap<Fd, FileRef>,
    /// Sorted by start address.
    pub mmap_table: Vec<MmapRange>,
    pub children: BTreeSet<Pid>,
    pub started_at: Timestamp,
    pub ended_at: Option<Timestamp>,
    /// Start of the current accrual segment (state or mode change).
    pub(crate) anchor: Timestamp,
    pub(crate) episode: Option<Episode>,
    pub(crate) detail: Option<WaitSite>,
    pub(crate) exit_seen: bool,
}

impl ProcessState {
    fn new(pid: Pid, parent: Option<Pid>, name: String, sched: SchedState, ts: Timestamp) -> Self {
        ProcessState {
            pid,
            parent,
            name,
            sched,
            mode: ExecMode::User,
            pending_wait: None,
            fd_table: BTreeMap::new(),
            mmap_table: Vec::new(),
            children: BTreeSet::new(),
            started_at: ts,
            ended_at: None,
            anchor: ts,
            episode: None,
            detail: None,
            exit_seen: false,
        }
    }

    /// FileRef of the mapping containing `address`, if file-backed.
    pub fn file_of_address(&self, address: u64) -> Option<&FileRef> {
        let i = self.mmap_table.partition_point(|r| r.start <= address);
        let range = self.mmap_table.get(i.checked_sub(1)?)?;
        if address < range.start + range.length {
            range.backing.as_ref()
        } else {
            None
        }
    }

    pub fn file_of_fd(&self, fd: Fd) -> Option<&FileRef> {
        self.fd_table.get(&fd)
    }
}

/// Both endpoints of a socket connection. Server fields are filled when
/// the matching accept is seen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionEnds {
    pub client_pid: Pid,
    pub client_fd: Fd,
    pub server_pid: Option<Pid>,
    pub server_fd: Option<Fd>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionRegistry {
    pub connections: BTreeMap<ConnToken, ConnectionEnds>,
}

impl ConnectionRegistry {
    pub fn get(&self, conn: ConnToken) -> Option<&ConnectionEnds> {
        self.connections.get(&conn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionCause {
    Dispatched,
    Preempted,
    Blocked,
    Woken(WaitSource),
    Exited,
    Forked,
}

/// One scheduling-state edge in the replay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    pub pid: Pid,
    pub from: SchedState,
    pub to: SchedState,
    pub ts: Timestamp,
    pub cause: TransitionCause,
}

#[derive(Clone, Debug)]
pub struct ReplayResult {
    pub processes: BTreeMap<Pid, ProcessState>,
    pub connections: ConnectionRegistry,
    pub transitions: Vec<Transition>,
    /// Timestamps of the first and last event, when any exist.
    pub span: Option<(Timestamp, Timestamp)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("sched change at {at} on cpu {cpu}: outgoing pid is {found} but {expected} is running")]
    SchedOutMismatch {
        at: Timestamp,
        cpu: u16,
        expected: Pid,
        found: Pid,
    },
    #[error("event on cpu {cpu} at {at} but the snapshot assigns no running pid to that cpu")]
    UnknownCpu { cpu: u16, at: Timestamp },
    #[error("{context} names unknown pid {pid} at {at}")]
    UnknownPid {
        pid: Pid,
        at: Timestamp,
        context: &'static str,
    },
    #[error("dispatch of pid {pid} at {at} while it is {state:?}")]
    IllegalDispatch {
        pid: Pid,
        at: Timestamp,
        state: SchedState,
    },
    #[error("wake of pid {pid} at {at} while it is {state:?}")]
    WakeNotBlocked {
        pid: Pid,
        at: Timestamp,
        state: SchedState,
    },
    #[error("pid {pid} exited twice, second exit at {at}")]
    DoubleExit { pid: Pid, at: Timestamp },
    #[error("pid {pid} {context} unknown fd {fd} at {at}")]
    UnknownFd {
        pid: Pid,
        fd: Fd,
        at: Timestamp,
        context: &'static str,
    },
    #[error("pid {pid} reopened fd {fd} at {at}")]
    FdInUse { pid: Pid, fd: Fd, at: Timestamp },
    #[error("pid {pid} mapped an overlapping range at 0x{start:x} at {at}")]
    MmapOverlap { pid: Pid, start: u64, at: Timestamp },
    #[error("pid {pid} unmapped unknown range 0x{start:x} at {at}")]
    UnknownMmap { pid: Pid, start: u64, at: Timestamp },
    #[error("connection token {conn} {context} at {at}")]
    BadConnection {
        conn: ConnToken,
        at: Timestamp,
        context: &'static str,
    },
    #[error("fork created duplicate pid {pid} at {at}")]
    DuplicatePid { pid: Pid, at: Timestamp },
    #[error("{context} at {at} in mode {mode:?} for pid {pid}")]
    IllegalMode {
        pid: Pid,
        at: Timestamp,
        mode: &'static str,
        context: &'static str,
    },
    #[error("irq {context} on cpu {cpu} at {at}")]
    IrqMismatch {
        cpu: u16,
        at: Timestamp,
        context: &'static str,
    },
}

/// Assigns a pid to every event: the pid running on the event's cpu at
/// that instant, except that a scheduling change belongs to the outgoing
/// process. Fails when a `SchedChange` contradicts the tracked state.
pub fn attribute_pids(
    snapshot: &Snapshot,
    events: &CpuEventMap,
) -> Result<Vec<AttributedEvent>, ReplayError> {
    let merged = merge_cpu_events(events);
    let mut running = snapshot.running.clone();
    let mut out = Vec::with_capacity(merged.len());
    for ev in merged {
        let current = *running
            .get(&ev.cpu)
            .ok_or(ReplayError::UnknownCpu {
                cpu: ev.cpu,
                at: ev.ts,
            })?;
        let pid = match &ev.kind {
            EventKind::SchedChange { in_pid, out_pid, .. } => {
                if *out_pid != current {
                    return Err(ReplayError::SchedOutMismatch {
                        at: ev.ts,
                        cpu: ev.cpu,
                        expected: current,
                        found: *out_pid,
                    });
                }
                running.insert(ev.cpu, *in_pid);
                *out_pid
            }
            _ => current,
        };
        out.push(AttributedEvent {
            ts: ev.ts,
            cpu: ev.cpu,
            pid,
            kind: ev.kind,
        });
    }
    Ok(out)
}

/// Observation points used by the analyses. Hooks fire before the state
/// they describe is mutated, so `proc` still shows the outgoing state and
/// `proc.anchor` marks where the current accrual segment began.
#[allow(unused_variables)]
pub(crate) trait ReplayHooks {
    fn on_event(&mut self, ev: &AttributedEvent) {}
    fn on_process_start(&mut self, proc: &ProcessState, ts: Timestamp) {}
    fn on_sched_transition(
        &mut self,
        proc: &ProcessState,
        to: SchedState,
        ts: Timestamp,
        wake: Option<&WaitSource>,
    ) {
    }
    fn on_mode_transition(&mut self, proc: &ProcessState, to: &ExecMode, ts: Timestamp) {}
    fn on_episode_end(&mut self, proc: &ProcessState, episode: &Episode, ts: Timestamp) {}
    fn on_irq_window(&mut self, irq: IrqId, cpu: u16, entered: Timestamp, exited: Timestamp) {}
    fn on_trace_end(&mut self, proc: &ProcessState, ts: Timestamp) {}
}

pub(crate) struct NoHooks;
impl ReplayHooks for NoHooks {}

/// Replays attributed events into final per-process state, the connection
/// registry, and a transition log.
pub fn replay(snapshot: &Snapshot, events: &[AttributedEvent]) -> Result<ReplayResult, ReplayError> {
    run_replay(snapshot, events, &mut NoHooks)
}

pub(crate) fn run_replay<H: ReplayHooks>(
    snapshot: &Snapshot,
    events: &[AttributedEvent],
    hooks: &mut H,
) -> Result<ReplayResult, ReplayError> {
    let span = events
        .first()
        .map(|first| (first.ts, events.last().unwrap().ts));
    let start_ts = span.map(|(s, _)| s).unwrap_or_default();

    let mut fold = Fold {
        procs: BTreeMap::new(),
        registry: ConnectionRegistry::default(),
        transitions: Vec::new(),
        irq_stack: BTreeMap::new(),
    };
    for proc in &snapshot.processes {
        let sched = match proc.state {
            SnapState::Running => SchedState::Running,
            SnapState::Runnable => SchedState::Runnable,
            SnapState::Blocked => SchedState::Blocked,
        };
        let state = ProcessState::new(proc.pid, proc.parent, proc.name.clone(), sched, start_ts);
        fold.procs.insert(proc.pid, state);
    }
    if span.is_some() {
        for state in fold.procs.values() {
            hooks.on_process_start(state, start_ts);
        }
    }

    for ev in events {
        fold.apply(ev, hooks)?;
    }

    if let Some((_, end)) = span {
        let pids: Vec<Pid> = fold.procs.keys().copied().collect();
        for pid in pids {
            let proc = fold.procs.get_mut(&pid).unwrap();
            if proc.sched == SchedState::Exited {
                continue;
            }
            if let Some(episode) = proc.episode.take() {
                hooks.on_episode_end(proc, &episode, end);
            }
            hooks.on_trace_end(proc, end);
            proc.ended_at = Some(end);
        }
    }

    Ok(ReplayResult {
        processes: fold.procs,
        connections: fold.registry,
        transitions: fold.transitions,
        span,
    })
}

struct Fold {
    procs: BTreeMap<Pid, ProcessState>,
    registry: ConnectionRegistry,
    transitions: Vec<Transition>,
    /// Per-cpu currently open irq window.
    irq_stack: BTreeMap<u16, (IrqId, Timestamp)>,
}

impl Fold {
    fn proc_mut(
        &mut self,
        pid: Pid,
        at: Timestamp,
        context: &'static str,
    ) -> Result<&mut ProcessState, ReplayError> {
        self.procs
            .get_mut(&pid)
            .ok_or(ReplayError::UnknownPid { pid, at, context })
    }

    fn sched_to<H: ReplayHooks>(
        &mut self,
        hooks: &mut H,
        pid: Pid,
        to: SchedState,
        ts: Timestamp,
        cause: TransitionCause,
        wake: Option<&WaitSource>,
    ) -> Result<(), ReplayError> {
        let from = {
            let proc = self.proc_mut(pid, ts, "sched transition")?;
            hooks.on_sched_transition(proc, to, ts, wake);
            let from = proc.sched;
            proc.sched = to;
            proc.anchor = ts;
            from
        };
        self.transitions.push(Transition {
            pid,
            from,
            to,
            ts,
            cause,
        });
        Ok(())
    }

    fn apply<H: ReplayHooks>(
        &mut self,
        ev: &AttributedEvent,
        hooks: &mut H,
    ) -> Result<(), ReplayError> {
        hooks.on_event(ev);
        let ts = ev.ts;
        let pid = ev.pid;
        match &ev.kind {
            EventKind::SchedChange {
                in_pid,
                out_pid,
                out_state,
            } => {
                // attribute_pids guarantees *out_pid == ev.pid.
                if in_pid == out_pid {
                    return Err(ReplayError::IllegalDispatch {
                        pid: *in_pid,
                        at: ts,
                        state: SchedState::Running,
                    });
                }
                let out = self.proc_mut(*out_pid, ts, "sched change (out)")?;
                if out.sched != SchedState::Running {
                    return Err(ReplayError::IllegalDispatch {
                        pid: *out_pid,
                        at: ts,
                        state: out.sched,
                    });
                }
                match out_state {
                    OutState::Runnable => {
                        self.sched_to(hooks, *out_pid, SchedState::Runnable, ts,
                            TransitionCause::Preempted, None)?;
                    }
                    OutState::Blocked => {
                        let out = self.proc_mut(*out_pid, ts, "sched change (out)")?;
                        let site = match out.mode {
                            ExecMode::Trap { fault_address, .. } => WaitSite::PageFault {
                                address: fault_address,
                            },
                            ExecMode::Syscall { syscall } => out
                                .detail
                                .clone()
                                .unwrap_or(WaitSite::Generic { syscall }),
                            ExecMode::User => WaitSite::Generic {
                                syscall: SyscallId::UNKNOWN,
                            },
                        };
                        self.sched_to(hooks, *out_pid, SchedState::Blocked, ts,
                            TransitionCause::Blocked, None)?;
                        let out = self.proc_mut(*out_pid, ts, "sched change (out)")?;
                        out.pending_wait = Some(PendingWait {
                            site,
                            blocked_at: ts,
                        });
                    }
                    OutState::Exited => {
                        let out = self.proc_mut(*out_pid, ts, "sched change (out)")?;
                        if let Some(episode) = out.episode.take() {
                            hooks.on_episode_end(out, &episode, ts);
                        }
                        self.sched_to(hooks, *out_pid, SchedState::Exited, ts,
                            TransitionCause::Exited, None)?;
                        let out = self.proc_mut(*out_pid, ts, "sched change (out)")?;
                        out.ended_at = Some(ts);
                    }
                }
                let entering = self.proc_mut(*in_pid, ts, "sched change (in)")?;
                match entering.sched {
                    SchedState::Runnable | SchedState::Running => {}
                    state => {
                        return Err(ReplayError::IllegalDispatch {
                            pid: *in_pid,
                            at: ts,
                            state,
                        })
                    }
                }
                // A pid left Running on another cpu stays Running there;
                // only Runnable pids are dispatched.
                if entering.sched == SchedState::Running {
                    return Err(ReplayError::IllegalDispatch {
                        pid: *in_pid,
                        at: ts,
                        state: SchedState::Running,
                    });
                }
                self.sched_to(hooks, *in_pid, SchedState::Running, ts,
                    TransitionCause::Dispatched, None)?;
            }
            EventKind::WakeUp { pid: woken, source } => {
                let proc = self.proc_mut(*woken, ts, "wake")?;
                if proc.sched != SchedState::Blocked {
                    return Err(ReplayError::WakeNotBlocked {
                        pid: *woken,
                        at: ts,
                        state: proc.sched,
                    });
                }
                self.sched_to(hooks, *woken, SchedState::Runnable, ts,
                    TransitionCause::Woken(*source), Some(source))?;
                let proc = self.proc_mut(*woken, ts, "wake")?;
                proc.pending_wait = None;
            }
            EventKind::SyscallEntry { syscall, .. } => {
                let proc = self.proc_mut(pid, ts, "syscall entry")?;
                if !matches!(proc.mode, ExecMode::User) {
                    return Err(ReplayError::IllegalMode {
                        pid,
                        at: ts,
                        mode: "non-user",
                        context: "syscall entry",
                    });
                }
                let to = ExecMode::Syscall { syscall: *syscall };
                hooks.on_mode_transition(proc, &to, ts);
                proc.mode = to;
                proc.anchor = ts;
                proc.episode = Some(Episode {
                    kind: EpisodeKind::Syscall(*syscall),
                    entered_at: ts,
                });
                proc.detail = None;
            }
            EventKind::SyscallExit { .. } => {
                let proc = self.proc_mut(pid, ts, "syscall exit")?;
                if !matches!(proc.mode, ExecMode::Syscall { .. }) {
                    return Err(ReplayError::IllegalMode {
                        pid,
                        at: ts,
                        mode: "non-syscall",
                        context: "syscall exit",
                    });
                }
                let to = ExecMode::User;
                hooks.on_mode_transition(proc, &to, ts);
                if let Some(episode) = proc.episode.take() {
                    hooks.on_episode_end(proc, &episode, ts);
                }
                proc.mode = to;
                proc.anchor = ts;
                proc.detail = None;
            }
            EventKind::TrapEntry {
                trap,
                fault_address,
            } => {
                let proc = self.proc_mut(pid, ts, "trap entry")?;
                if !matches!(proc.mode, ExecMode::User) {
                    return Err(ReplayError::IllegalMode {
                        pid,
                        at: ts,
                        mode: "non-user",
                        context: "trap entry",
                    });
                }
                let to = ExecMode::Trap {
                    trap: *trap,
                    fault_address: *fault_address,
                };
                hooks.on_mode_transition(proc, &to, ts);
                proc.mode = to;
                proc.anchor = ts;
                proc.episode = Some(Episode {
                    kind: EpisodeKind::Trap(*trap),
                    entered_at: ts,
                });
            }
            EventKind::TrapExit => {
                let proc = self.proc_mut(pid, ts, "trap exit")?;
                if !matches!(proc.mode, ExecMode::Trap { .. }) {
                    return Err(ReplayError::IllegalMode {
                        pid,
                        at: ts,
                        mode: "non-trap",
                        context: "trap exit",
                    });
                }
                let to = ExecMode::User;
                hooks.on_mode_transition(proc, &to, ts);
                if let Some(episode) = proc.episode.take() {
                    hooks.on_episode_end(proc, &episode, ts);
                }
                proc.mode = to;
                proc.anchor = ts;
            }
            EventKind::FsOpen { fd, path } => {
                let proc = self.proc_mut(pid, ts, "open")?;
                if proc.fd_table.contains_key(fd) {
                    return Err(ReplayError::FdInUse { pid, fd: *fd, at: ts });
                }
                proc.fd_table.insert(*fd, FileRef::regular(path));
            }
            EventKind::FsClose { fd } => {
                let proc = self.proc_mut(pid, ts, "close")?;
                if proc.fd_table.remove(fd).is_none() {
                    return Err(ReplayError::UnknownFd {
                        pid,
                        fd: *fd,
                        at: ts,
                        context: "closed",
                    });
                }
            }
            EventKind::FsRead { fd, .. } => {
                let proc = self.proc_mut(pid, ts, "read")?;
                if !proc.fd_table.contains_key(fd) {
                    return Err(ReplayError::UnknownFd {
                        pid,
                        fd: *fd,
                        at: ts,
                        context: "read from",
                    });
                }
                proc.detail = Some(WaitSite::Read { fd: *fd });
            }
            EventKind::FsWrite { fd, .. } => {
                let proc = self.proc_mut(pid, ts, "write")?;
                if !proc.fd_table.contains_key(fd) {
                    return Err(ReplayError::UnknownFd {
                        pid,
                        fd: *fd,
                        at: ts,
                        context: "wrote to",
                    });
                }
            }
            EventKind::FsPoll { fd } => {
                let proc = self.proc_mut(pid, ts, "poll")?;
                match &mut proc.detail {
                    Some(WaitSite::Multiplexed { fds, .. }) => fds.push(*fd),
                    _ => {
                        proc.detail = Some(WaitSite::Multiplexed {
                            fds: vec![*fd],
                            timeout_us: 0,
                        })
                    }
                }
            }
            EventKind::FsPollTimeout { timeout_us } => {
                let proc = self.proc_mut(pid, ts, "poll timeout")?;
                match &mut proc.detail {
                    Some(WaitSite::Multiplexed { timeout_us: t, .. }) => *t = *timeout_us,
                    _ => {
                        proc.detail = Some(WaitSite::Multiplexed {
                            fds: Vec::new(),
                            timeout_us: *timeout_us,
                        })
                    }
                }
            }
            EventKind::FsExec { name } => {
                let proc = self.proc_mut(pid, ts, "exec")?;
                proc.name = name.clone();
            }
            EventKind::MemMmap {
                start_address,
                length,
                backing,
            } => {
                let backing_ref = match backing {
                    MmapBacking::File { fd } => {
                        let proc = self.proc_mut(pid, ts, "mmap")?;
                        Some(
                            proc.fd_table
                                .get(fd)
                                .ok_or(ReplayError::UnknownFd {
                                    pid,
                                    fd: *fd,
                                    at: ts,
                                    context: "mapped",
                                })?
                                .clone(),
                        )
                    }
                    MmapBacking::Anonymous => None,
                };
                let proc = self.proc_mut(pid, ts, "mmap")?;
                let end = *start_address + *length;
                let overlaps = proc.mmap_table.iter().any(|r| {
                    *start_address < r.start + r.length && r.start < end
                });
                if overlaps {
                    return Err(ReplayError::MmapOverlap {
                        pid,
                        start: *start_address,
                        at: ts,
                    });
                }
                let pos = proc
                    .mmap_table
                    .partition_point(|r| r.start < *start_address);
                proc.mmap_table.insert(
                    pos,
                    MmapRange {
                        start: *start_address,
                        length: *length,
                        backing: backing_ref,
                    },
                );
            }
            EventKind::MemMunmap { start_address } => {
                let proc = self.proc_mut(pid, ts, "munmap")?;
                match proc.mmap_table.iter().position(|r| r.start == *start_address) {
                    Some(i) => {
                        proc.mmap_table.remove(i);
                    }
                    None => {
                        return Err(ReplayError::UnknownMmap {
                            pid,
                            start: *start_address,
                            at: ts,
                        })
                    }
                }
            }
            EventKind::SockListen { fd } => {
                let proc = self.proc_mut(pid, ts, "listen")?;
                if proc.fd_table.contains_key(fd) {
                    return Err(ReplayError::FdInUse { pid, fd: *fd, at: ts });
                }
                proc.fd_table.insert(*fd, FileRef::listener(*fd));
            }
            EventKind::SockConnect { fd, conn } => {
                let proc = self.proc_mut(pid, ts, "connect")?;
                if proc.fd_table.contains_key(fd) {
                    return Err(ReplayError::FdInUse { pid, fd: *fd, at: ts });
                }
                proc.fd_table.insert(*fd, FileRef::connection(*conn));
                let previous = self.registry.connections.insert(
                    *conn,
                    ConnectionEnds {
                        client_pid: pid,
                        client_fd: *fd,
                        server_pid: None,
                        server_fd: None,
                    },
                );
                if previous.is_some() {
                    return Err(ReplayError::BadConnection {
                        conn: *conn,
                        at: ts,
                        context: "connected twice",
                    });
                }
            }
            EventKind::SockAccept {
                listen_fd,
                new_fd,
                conn,
            } => {
                let proc = self.proc_mut(pid, ts, "accept")?;
                match proc.fd_table.get(listen_fd) {
                    Some(FileRef {
                        kind: FileRefKind::ListenSocket,
                        ..
                    }) => {}
                    _ => {
                        return Err(ReplayError::UnknownFd {
                            pid,
                            fd: *listen_fd,
                            at: ts,
                            context: "accepted on non-listening",
                        })
                    }
                }
                if proc.fd_table.contains_key(new_fd) {
                    return Err(ReplayError::FdInUse {
                        pid,
                        fd: *new_fd,
                        at: ts,
                    });
                }
                proc.fd_table.insert(*new_fd, FileRef::connection(*conn));
                let ends = self.registry.connections.get_mut(conn).ok_or(
                    ReplayError::BadConnection {
                        conn: *conn,
                        at: ts,
                        context: "accepted before any connect",
                    },
                )?;
                if ends.server_pid.is_some() {
                    return Err(ReplayError::BadConnection {
                        conn: *conn,
                        at: ts,
                        context: "accepted twice",
                    });
                }
                ends.server_pid = Some(pid);
                ends.server_fd = Some(*new_fd);
            }
            EventKind::ProcFork { child_pid } => {
                if self.procs.contains_key(child_pid) {
                    return Err(ReplayError::DuplicatePid {
                        pid: *child_pid,
                        at: ts,
                    });
                }
                let parent = self.proc_mut(pid, ts, "fork")?;
                parent.children.insert(*child_pid);
                parent.detail = Some(WaitSite::Fork);
                let name = parent.name.clone();
                let fd_table = parent.fd_table.clone();
                let mut child =
                    ProcessState::new(*child_pid, Some(pid), name, SchedState::Runnable, ts);
                child.fd_table = fd_table;
                hooks.on_process_start(&child, ts);
                self.transitions.push(Transition {
                    pid: *child_pid,
                    from: SchedState::Runnable,
                    to: SchedState::Runnable,
                    ts,
                    cause: TransitionCause::Forked,
                });
                self.procs.insert(*child_pid, child);
            }
            EventKind::ProcExit { .. } => {
                let proc = self.proc_mut(pid, ts, "exit")?;
                if proc.exit_seen || proc.sched == SchedState::Exited {
                    return Err(ReplayError::DoubleExit { pid, at: ts });
                }
                proc.exit_seen = true;
            }
            EventKind::ProcWaitpid { target_pid } => {
                let proc = self.proc_mut(pid, ts, "waitpid")?;
                proc.detail = Some(WaitSite::Waitpid {
                    target: *target_pid,
                });
            }
            EventKind::TimerSet { .. } | EventKind::TimerExpire { .. } | EventKind::Sample { .. } => {}
            EventKind::IrqEntry { irq } => {
                if self.irq_stack.contains_key(&ev.cpu) {
                    return Err(ReplayError::IrqMismatch {
                        cpu: ev.cpu,
                        at: ts,
                        context: "entered while another irq is open",
                    });
                }
                self.irq_stack.insert(ev.cpu, (*irq, ts));
            }
            EventKind::IrqExit => match self.irq_stack.remove(&ev.cpu) {
                Some((irq, entered)) => hooks.on_irq_window(irq, ev.cpu, entered, ts),
                None => {
                    return Err(ReplayError::IrqMismatch {
                        cpu: ev.cpu,
                        at: ts,
                        context: "exited with no matching entry",
                    })
                }
            },
        }
        Ok(())
    }
}

/// FileRef of the mapping containing `address` in `state`, if any.
pub fn file_of_address(state: &ProcessState, address: u64) -> Option<&FileRef> {
    state.file_of_address(address)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::SnapshotProcess;

    fn ts(us: u64) -> Timestamp {
        Timestamp::new(1000, 0).add_micros(us)
    }

    fn snapshot(running: Pid, others: &[(Pid, SnapState)]) -> Snapshot {
        let mut processes = vec![SnapshotProcess {
            pid: running,
            parent: None,
            name: format!("p{running}"),
            state: SnapState::Running,
        }];
        for &(pid, state) in others {
            processes.push(SnapshotProcess {
                pid,
                parent: None,
                name: format!("p{pid}"),
                state,
            });
        }
        Snapshot {
            processes,
            running: [(0u16, running)].into_iter().collect(),
        }
    }

    fn cpu0(events: Vec<(Timestamp, EventKind)>) -> CpuEventMap {
        let mut map = CpuEventMap::new();
        map.insert(0, events);
        map
    }

    #[test]
    fn events_attribute_to_the_running_pid() {
        let snap = snapshot(Pid(7), &[]);
        let events = cpu0(vec![(
            ts(5),
            EventKind::SyscallEntry {
                syscall: SyscallId::STAT,
                arg: 0,
            },
        )]);
        let attributed = attribute_pids(&snap, &events).unwrap();
        assert_eq!(attributed[0].pid, Pid(7));
    }

    #[test]
    fn attribution_follows_sched_changes() {
        // Trap entry/exit and an execve all belong to 1684; the scheduling
        // change switches attribution to 1579 for the following events,
        // while the change itself belongs to the outgoing 1684.
        let snap = snapshot(Pid(1684), &[(Pid(1579), SnapState::Runnable)]);
        let events = cpu0(vec![
            (
                ts(0),
                EventKind::TrapEntry {
                    trap: TrapId::PAGE_FAULT,
                    fault_address: 0x08068fc7,
                },
            ),
            (ts(5), EventKind::TrapExit),
            (
                ts(39),
                EventKind::SyscallEntry {
                    syscall: SyscallId::EXECVE,
                    arg: 0,
                },
            ),
            (
                ts(70),
                EventKind::FsExec {
                    name: "galeon".to_string(),
                },
            ),
            (
                ts(263),
                EventKind::SchedChange {
                    in_pid: Pid(1579),
                    out_pid: Pid(1684),
                    out_state: OutState::Blocked,
                },
            ),
            (ts(274), EventKind::SyscallExit { return_value: 0 }),
        ]);
        let attributed = attribute_pids(&snap, &events).unwrap();
        let pids: Vec<u32> = attributed.iter().map(|e| e.pid.0).collect();
        assert_eq!(pids, vec![1684, 1684, 1684, 1684, 1684, 1579]);
    }

    #[test]
    fn sched_change_with_wrong_out_pid_is_inconsistent() {
        let snap = snapshot(Pid(1), &[(Pid(2), SnapState::Runnable)]);
        let events = cpu0(vec![(
            ts(10),
            EventKind::SchedChange {
                in_pid: Pid(1),
                out_pid: Pid(2),
                out_state: OutState::Runnable,
            },
        )]);
        let err = attribute_pids(&snap, &events).unwrap_err();
        assert!(matches!(err, ReplayError::SchedOutMismatch { .. }));
        assert!(err.to_string().contains("1000.000010"), "{err}");
    }

    fn replay_all(snap: &Snapshot, events: CpuEventMap) -> Result<ReplayResult, ReplayError> {
        let attributed = attribute_pids(snap, &events)?;
        replay(snap, &attributed)
    }

    #[test]
    fn open_then_read_resolves_pending_wait_to_the_file() {
        let snap = snapshot(Pid(7), &[(Pid(0), SnapState::Runnable)]);
        let events = cpu0(vec![
            (
                ts(0),
                EventKind::SyscallEntry {
                    syscall: SyscallId::OPEN,
                    arg: 0,
                },
            ),
            (
                ts(0),
                EventKind::FsOpen {
                    fd: Fd(3),
                    path: "/data/log".to_string(),
                },
            ),
            (ts(2), EventKind::SyscallExit { return_value: 3 }),
            (
                ts(10),
                EventKind::SyscallEntry {
                    syscall: SyscallId::READ,
                    arg: 3,
                },
            ),
            (
                ts(12),
                EventKind::FsRead {
                    fd: Fd(3),
                    byte_count: 4096,
                },
            ),
            (
                ts(12),
                EventKind::SchedChange {
                    in_pid: Pid(0),
                    out_pid: Pid(7),
                    out_state: OutState::Blocked,
                },
            ),
        ]);
        let result = replay_all(&snap, events).unwrap();
        let proc = &result.processes[&Pid(7)];
        assert_eq!(proc.sched, SchedState::Blocked);
        let pending = proc.pending_wait.as_ref().unwrap();
        assert_eq!(pending.site, WaitSite::Read { fd: Fd(3) });
        assert_eq!(pending.blocked_at, ts(12));
        assert_eq!(
            proc.fd_table[&Fd(3)].display_name,
            "log",
            "display name is the basename"
        );
    }

    #[test]
    fn mmap_then_fault_resolves_to_backing_file() {
        let snap = snapshot(Pid(7), &[(Pid(0), SnapState::Runnable)]);
        let events = cpu0(vec![
            (
                ts(0),
                EventKind::SyscallEntry {
                    syscall: SyscallId::MMAP,
                    arg: 0,
                },
            ),
            (
                ts(0),
                EventKind::FsOpen {
                    fd: Fd(3),
                    path: "/opt/galeon/galeon-bin".to_string(),
                },
            ),
            (
                ts(0),
                EventKind::MemMmap {
                    start_address: 0x10000,
                    length: 0x4000,
                    backing: MmapBacking::File { fd: Fd(3) },
                },
            ),
            (ts(2), EventKind::SyscallExit { return_value: 0x10000 }),
            (
                ts(10),
                EventKind::TrapEntry {
                    trap: TrapId::PAGE_FAULT,
                    fault_address: 0x11000,
                },
            ),
            (
                ts(12),
                EventKind::SchedChange {
                    in_pid: Pid(0),
                    out_pid: Pid(7),
                    out_state: OutState::Blocked,
                },
            ),
        ]);
        let result = replay_all(&snap, events).unwrap();
        let proc = &result.processes[&Pid(7)];
        assert_eq!(
            proc.pending_wait.as_ref().unwrap().site,
            WaitSite::PageFault { address: 0x11000 }
        );
        let fref = proc.file_of_address(0x11000).unwrap();
        assert_eq!(fref.display_name, "galeon-bin");
        assert!(proc.file_of_address(0x14000).is_none());
        assert!(proc.file_of_address(0xffff).is_none());
    }

    #[test]
    fn anonymous_ranges_resolve_to_nothing() {
        let snap = snapshot(Pid(7), &[]);
        let events = cpu0(vec![(
            ts(0),
            EventKind::MemMmap {
                start_address: 0x20000,
                length: 0x1000,
                backing: MmapBacking::Anonymous,
            },
        )]);
        let result = replay_all(&snap, events).unwrap();
        let proc = &result.processes[&Pid(7)];
        assert!(proc.file_of_address(0x20800).is_none());
    }

    #[test]
    fn close_of_unknown_fd_is_inconsistent() {
        let snap = snapshot(Pid(7), &[]);
        let events = cpu0(vec![(ts(0), EventKind::FsClose { fd: Fd(9) })]);
        let err = replay_all(&snap, events).unwrap_err();
        assert!(matches!(err, ReplayError::UnknownFd { fd: Fd(9), .. }));
    }

    #[test]
    fn wake_of_non_blocked_pid_is_inconsistent() {
        let snap = snapshot(Pid(7), &[]);
        let events = cpu0(vec![(
            ts(0),
            EventKind::WakeUp {
                pid: Pid(7),
                source: WaitSource::Timer,
            },
        )]);
        let err = replay_all(&snap, events).unwrap_err();
        assert!(matches!(err, ReplayError::WakeNotBlocked { .. }));
    }

    #[test]
    fn double_exit_is_inconsistent() {
        let snap = snapshot(Pid(7), &[]);
        let events = cpu0(vec![
            (ts(0), EventKind::ProcExit { code: 0 }),
            (ts(1), EventKind::ProcExit { code: 0 }),
        ]);
        let err = replay_all(&snap, events).unwrap_err();
        assert!(matches!(err, ReplayError::DoubleExit { .. }));
    }

    #[test]
    fn fork_copies_fd_table_but_not_mappings() {
        let snap = snapshot(Pid(7), &[]);
        let events = cpu0(vec![
            (
                ts(0),
                EventKind::FsOpen {
                    fd: Fd(3),
                    path: "/tmp/shared".to_string(),
                },
            ),
            (
                ts(0),
                EventKind::MemMmap {
                    start_address: 0x1000,
                    length: 0x1000,
                    backing: MmapBacking::File { fd: Fd(3) },
                },
            ),
            (ts(5), EventKind::ProcFork { child_pid: Pid(8) }),
        ]);
        let result = replay_all(&snap, events).unwrap();
        let child = &result.processes[&Pid(8)];
        assert_eq!(child.parent, Some(Pid(7)));
        assert_eq!(child.name, "p7");
        assert!(child.fd_table.contains_key(&Fd(3)));
        assert!(child.mmap_table.is_empty());
        assert_eq!(child.sched, SchedState::Runnable);
        assert_eq!(child.started_at, ts(5));
        assert!(result.processes[&Pid(7)].children.contains(&Pid(8)));
    }

    #[test]
    fn connection_registry_tracks_both_ends() {
        let snap = snapshot(Pid(7), &[(Pid(9), SnapState::Runnable)]);
        let events = cpu0(vec![
            (ts(0), EventKind::SockListen { fd: Fd(3) }),
            (
                ts(1),
                EventKind::SchedChange {
                    in_pid: Pid(9),
                    out_pid: Pid(7),
                    out_state: OutState::Runnable,
                },
            ),
            (
                ts(2),
                EventKind::SockConnect {
                    fd: Fd(4),
                    conn: ConnToken(1),
                },
            ),
            (
                ts(3),
                EventKind::SchedChange {
                    in_pid: Pid(7),
                    out_pid: Pid(9),
                    out_state: OutState::Runnable,
                },
            ),
            (
                ts(4),
                EventKind::SockAccept {
                    listen_fd: Fd(3),
                    new_fd: Fd(5),
                    conn: ConnToken(1),
                },
            ),
        ]);
        let result = replay_all(&snap, events).unwrap();
        let ends = result.connections.get(ConnToken(1)).unwrap();
        assert_eq!(ends.client_pid, Pid(9));
        assert_eq!(ends.client_fd, Fd(4));
        assert_eq!(ends.server_pid, Some(Pid(7)));
        assert_eq!(ends.server_fd, Some(Fd(5)));
        assert_eq!(
            result.processes[&Pid(7)].fd_table[&Fd(5)].display_name,
            "conn:1"
        );
    }

    #[test]
    fn accept_before_connect_is_inconsistent() {
        let snap = snapshot(Pid(7), &[]);
        let events = cpu0(vec![
            (ts(0), EventKind::SockListen { fd: Fd(3) }),
            (
                ts(1),
                EventKind::SockAccept {
                    listen_fd: Fd(3),
                    new_fd: Fd(4),
                    conn: ConnToken(1),
                },
            ),
        ]);
        let err = replay_all(&snap, events).unwrap_err();
        assert!(matches!(err, ReplayError::BadConnection { .. }));
    }
}
