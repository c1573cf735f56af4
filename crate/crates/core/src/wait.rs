//! Wait-time decomposition: splits each process's elapsed time into CPU
//! (by mode) and attributed wait categories, with exact integer-µs
//! conservation — the components always sum to the elapsed time.
//!
//! Blocked intervals are classified from the wait site captured when the
//! process was scheduled out and the source of the wakeup that ended the
//! wait, in rule order:
//!
//! 1. blocked in a read: waiting for the file behind that descriptor;
//! 2. blocked in a page fault: the mapped file, or generic for anonymous
//!    memory;
//! 3. blocked in waitpid: waiting for the named process;
//! 4. multiplexed wait woken by descriptor readiness: that file;
//! 5. multiplexed wait woken by a process: that process;
//! 6. multiplexed wait woken by a timer: the timeout category;
//! 7. anything else: generic wait, keyed by the blocking syscall.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::event::WaitSource;
use crate::ids::{IrqId, Pid, SyscallId, TrapId};
use crate::replay::{
    run_replay, AttributedEvent, EpisodeKind, ExecMode, PendingWait, ProcessState, ReplayError,
    ReplayHooks, ReplayResult, SchedState, WaitSite,
};
use crate::time::Timestamp;
use crate::trace::Snapshot;

/// Category a blocked or runnable interval is attributed to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaitCategory {
    /// Runnable but not running.
    Cpu,
    File { name: String },
    Process { pid: Pid },
    Timeout,
    Fork,
    Generic { syscall: SyscallId },
}

/// Per-process decomposition of elapsed time, all integer microseconds.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitBreakdown {
    pub pid: Pid,
    pub parent: Option<Pid>,
    pub name: String,
    pub elapsed_us: u64,
    pub cpu_user_us: u64,
    pub cpu_syscall_us: BTreeMap<SyscallId, u64>,
    pub cpu_trap_us: BTreeMap<TrapId, u64>,
    pub syscall_calls: BTreeMap<SyscallId, u64>,
    pub syscall_elapsed_us: BTreeMap<SyscallId, u64>,
    pub trap_calls: BTreeMap<TrapId, u64>,
    pub trap_elapsed_us: BTreeMap<TrapId, u64>,
    pub wait_cpu_us: u64,
    pub wait_file_us: BTreeMap<String, u64>,
    pub wait_process_us: BTreeMap<Pid, u64>,
    pub wait_timeout_us: u64,
    pub wait_fork_us: u64,
    pub wait_generic_us: BTreeMap<SyscallId, u64>,
    pub counters: BTreeMap<String, u64>,
}

impl WaitBreakdown {
    pub fn new(pid: Pid, parent: Option<Pid>, name: &str) -> WaitBreakdown {
        WaitBreakdown {
            pid,
            parent,
            name: name.to_string(),
            ..WaitBreakdown::default()
        }
    }

    /// Zero-length intervals never materialize map entries, so two
    /// accountings of the same run produce identical maps.
    pub fn add_wait(&mut self, category: &WaitCategory, dt: u64) {
        if dt == 0 {
            return;
        }
        match category {
            WaitCategory::Cpu => self.wait_cpu_us += dt,
            WaitCategory::File { name } => {
                *self.wait_file_us.entry(name.clone()).or_insert(0) += dt
            }
            WaitCategory::Process { pid } => {
                *self.wait_process_us.entry(*pid).or_insert(0) += dt
            }
            WaitCategory::Timeout => self.wait_timeout_us += dt,
            WaitCategory::Fork => self.wait_fork_us += dt,
            WaitCategory::Generic { syscall } => {
                *self.wait_generic_us.entry(*syscall).or_insert(0) += dt
            }
        }
    }

    pub fn add_mode(&mut self, mode: &ExecMode, dt: u64) {
        if dt == 0 {
            return;
        }
        match mode {
            ExecMode::User => self.cpu_user_us += dt,
            ExecMode::Syscall { syscall } => {
                *self.cpu_syscall_us.entry(*syscall).or_insert(0) += dt
            }
            ExecMode::Trap { trap, .. } => *self.cpu_trap_us.entry(*trap).or_insert(0) += dt,
        }
    }

    pub fn add_syscall_elapsed(&mut self, syscall: SyscallId, dt: u64) {
        if dt > 0 {
            *self.syscall_elapsed_us.entry(syscall).or_insert(0) += dt;
        }
    }

    pub fn add_trap_elapsed(&mut self, trap: TrapId, dt: u64) {
        if dt > 0 {
            *self.trap_elapsed_us.entry(trap).or_insert(0) += dt;
        }
    }

    pub fn count_event(&mut self, kind_name: &str) {
        *self.counters.entry(kind_name.to_string()).or_insert(0) += 1;
    }

    pub fn cpu_total_us(&self) -> u64 {
        self.cpu_user_us
            + self.cpu_syscall_us.values().sum::<u64>()
            + self.cpu_trap_us.values().sum::<u64>()
    }

    pub fn wait_generic_total_us(&self) -> u64 {
        self.wait_generic_us.values().sum()
    }

    /// Sum of every CPU and wait component; equals `elapsed_us` on every
    /// analyzable trace.
    pub fn component_sum_us(&self) -> u64 {
        self.cpu_total_us()
            + self.wait_cpu_us
            + self.wait_file_us.values().sum::<u64>()
            + self.wait_process_us.values().sum::<u64>()
            + self.wait_timeout_us
            + self.wait_fork_us
            + self.wait_generic_total_us()
    }

    pub fn conservation_holds(&self) -> bool {
        self.component_sum_us() == self.elapsed_us
    }
}

/// Global interrupt-handler accounting (calls and handler CPU time); irq
/// time is never charged to a per-process category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrqStats {
    pub calls: u64,
    pub cpu_us: u64,
}

/// Result of decomposing a trace.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitAnalysis {
    pub processes: BTreeMap<Pid, WaitBreakdown>,
    pub irqs: BTreeMap<IrqId, IrqStats>,
}

/// Classifies one blocked interval. `wake` is absent when the interval
/// was cut short by the end of the trace; `pending` is absent for a
/// process that was already blocked when tracing began. Total over its
/// whole input space.
pub fn classify_block(
    pending: Option<&PendingWait>,
    wake: Option<&WaitSource>,
    tables: &ProcessState,
) -> WaitCategory {
    let file_by_fd = |fd| match tables.file_of_fd(fd) {
        Some(fref) => WaitCategory::File {
            name: fref.display_name.clone(),
        },
        None => WaitCategory::File {
            name: format!("fd:{fd}"),
        },
    };
    let current_syscall = || match tables.mode {
        ExecMode::Syscall { syscall } => syscall,
        _ => SyscallId::UNKNOWN,
    };
    let Some(pending) = pending else {
        return WaitCategory::Generic {
            syscall: SyscallId::UNKNOWN,
        };
    };
    match &pending.site {
        WaitSite::Read { fd } => file_by_fd(*fd),
        WaitSite::PageFault { address } => match tables.file_of_address(*address) {
            Some(fref) => WaitCategory::File {
                name: fref.display_name.clone(),
            },
            None => WaitCategory::Generic {
                syscall: SyscallId::PAGE_FAULT,
            },
        },
        WaitSite::Waitpid { target } => WaitCategory::Process { pid: *target },
        WaitSite::Multiplexed { .. } => match wake {
            Some(WaitSource::File { fd }) => file_by_fd(*fd),
            Some(WaitSource::Process { pid }) => WaitCategory::Process { pid: *pid },
            Some(WaitSource::Timer) => WaitCategory::Timeout,
            Some(WaitSource::Device) | None => WaitCategory::Generic {
                syscall: current_syscall(),
            },
        },
        WaitSite::Fork => WaitCategory::Fork,
        WaitSite::Generic { syscall } => WaitCategory::Generic { syscall: *syscall },
    }
}

#[derive(Default)]
struct Accountant {
    rows: BTreeMap<Pid, WaitBreakdown>,
    irqs: BTreeMap<IrqId, IrqStats>,
}

impl Accountant {
    fn row(&mut self, pid: Pid) -> &mut WaitBreakdown {
        self.rows
            .entry(pid)
            .or_insert_with(|| WaitBreakdown::new(pid, None, ""))
    }
}

impl ReplayHooks for Accountant {
    fn on_event(&mut self, ev: &AttributedEvent) {
        self.row(ev.pid).count_event(ev.kind.name());
    }

    fn on_process_start(&mut self, proc: &ProcessState, _ts: Timestamp) {
        self.rows
            .insert(proc.pid, WaitBreakdown::new(proc.pid, proc.parent, &proc.name));
    }

    fn on_sched_transition(
        &mut self,
        proc: &ProcessState,
        to: SchedState,
        ts: Timestamp,
        wake: Option<&WaitSource>,
    ) {
        let _ = to;
        let dt = ts.micros_since(proc.anchor);
        match proc.sched {
            SchedState::Running => {
                let mode = proc.mode;
                self.row(proc.pid).add_mode(&mode, dt);
            }
            SchedState::Runnable => self.row(proc.pid).add_wait(&WaitCategory::Cpu, dt),
            SchedState::Blocked => {
                let category = classify_block(proc.pending_wait.as_ref(), wake, proc);
                self.row(proc.pid).add_wait(&category, dt);
            }
            SchedState::Exited => {}
        }
    }

    fn on_mode_transition(&mut self, proc: &ProcessState, to: &ExecMode, ts: Timestamp) {
        let dt = ts.micros_since(proc.anchor);
        let mode = proc.mode;
        let row = self.row(proc.pid);
        row.add_mode(&mode, dt);
        match to {
            ExecMode::Syscall { syscall } => {
                *row.syscall_calls.entry(*syscall).or_insert(0) += 1;
            }
            ExecMode::Trap { trap, .. } => {
                *row.trap_calls.entry(*trap).or_insert(0) += 1;
            }
            ExecMode::User => {}
        }
    }

    fn on_episode_end(&mut self, proc: &ProcessState, episode: &crate::replay::Episode, ts: Timestamp) {
        let dt = ts.micros_since(episode.entered_at);
        let row = self.row(proc.pid);
        match episode.kind {
            EpisodeKind::Syscall(id) => row.add_syscall_elapsed(id, dt),
            EpisodeKind::Trap(id) => row.add_trap_elapsed(id, dt),
        }
    }

    fn on_irq_window(&mut self, irq: IrqId, _cpu: u16, entered: Timestamp, exited: Timestamp) {
        let stats = self.irqs.entry(irq).or_default();
        stats.calls += 1;
        stats.cpu_us += exited.micros_since(entered);
    }

    fn on_trace_end(&mut self, proc: &ProcessState, ts: Timestamp) {
        self.on_sched_transition(proc, proc.sched, ts, None);
    }
}

/// Decomposes attributed events into per-process breakdowns plus global
/// irq totals. Propagates any replay inconsistency.
pub fn decompose(
    snapshot: &Snapshot,
    events: &[AttributedEvent],
) -> Result<WaitAnalysis, ReplayError> {
    decompose_full(snapshot, events).map(|(analysis, _)| analysis)
}

/// Like [`decompose`], also returning the replay result for report
/// rendering (names, connection registry).
pub fn decompose_full(
    snapshot: &Snapshot,
    events: &[AttributedEvent],
) -> Result<(WaitAnalysis, ReplayResult), ReplayError> {
    let mut accountant = Accountant::default();
    let replay_result = run_replay(snapshot, events, &mut accountant)?;
    let mut rows = accountant.rows;
    for (pid, state) in &replay_result.processes {
        let row = rows
            .entry(*pid)
            .or_insert_with(|| WaitBreakdown::new(*pid, state.parent, &state.name));
        row.name = state.name.clone();
        row.parent = state.parent;
        row.elapsed_us = state
            .ended_at
            .map(|end| end.micros_since(state.started_at))
            .unwrap_or(0);
    }
    Ok((
        WaitAnalysis {
            processes: rows,
            irqs: accountant.irqs,
        },
        replay_result,
    ))
}

fn secs(us: u64) -> String {
    format!("{}.{:06}", us / 1_000_000, us % 1_000_000)
}

fn sorted_desc<K: Clone + Ord>(map: &BTreeMap<K, u64>) -> Vec<(K, u64)> {
    let mut items: Vec<(K, u64)> = map.iter().map(|(k, &v)| (k.clone(), v)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items
}

/// Renders the per-process report: totals, wait categories by descending
/// duration, per-syscall and per-trap call statistics, event counters,
/// then global irq totals and the connection directory.
pub fn render_report(
    analysis: &WaitAnalysis,
    registry: &crate::replay::ConnectionRegistry,
) -> String {
    let mut out = String::new();
    for row in analysis.processes.values() {
        let parent = row
            .parent
            .map(|p| p.to_string())
            .unwrap_or_else(|| "-".to_string());
        writeln!(out, "Process ({}, {}): {}", row.pid, parent, row.name).unwrap();
        writeln!(out, "Elapsed {}", secs(row.elapsed_us)).unwrap();
        writeln!(out, "CPU {}", secs(row.cpu_total_us())).unwrap();
        writeln!(out, "WaitCPU {}", secs(row.wait_cpu_us)).unwrap();
        writeln!(out, "WaitTimeout {}", secs(row.wait_timeout_us)).unwrap();
        writeln!(out, "WaitFork {}", secs(row.wait_fork_us)).unwrap();
        writeln!(out, "WaitGeneric {}", secs(row.wait_generic_total_us())).unwrap();
        for (name, us) in sorted_desc(&row.wait_file_us) {
            writeln!(out, "WaitFile-{name} {}", secs(us)).unwrap();
        }
        for (pid, us) in sorted_desc(&row.wait_process_us) {
            writeln!(out, "WaitProcess-{pid} {}", secs(us)).unwrap();
        }
        let generic_named: BTreeMap<String, u64> = row
            .wait_generic_us
            .iter()
            .map(|(id, &us)| (id.to_string(), us))
            .collect();
        for (name, us) in sorted_desc(&generic_named) {
            writeln!(out, "WaitGeneric-{name} {}", secs(us)).unwrap();
        }
        let by_name: BTreeMap<String, SyscallId> = row
            .syscall_calls
            .keys()
            .map(|id| (id.to_string(), *id))
            .collect();
        for (name, id) in by_name {
            let calls = row.syscall_calls[&id];
            let cpu = row.cpu_syscall_us.get(&id).copied().unwrap_or(0);
            let elapsed = row.syscall_elapsed_us.get(&id).copied().unwrap_or(0);
            writeln!(out, "Syscall {name}").unwrap();
            writeln!(out, "Calls {calls}").unwrap();
            writeln!(out, "CPU {}", secs(cpu)).unwrap();
            writeln!(out, "Elapsed {}", secs(elapsed)).unwrap();
            writeln!(
                out,
                "Elapsed/Calls {:.7}",
                elapsed as f64 / 1e6 / calls as f64
            )
            .unwrap();
        }
        let traps_by_name: BTreeMap<String, TrapId> = row
            .trap_calls
            .keys()
            .map(|id| (id.to_string(), *id))
            .collect();
        for (name, id) in traps_by_name {
            let calls = row.trap_calls[&id];
            let cpu = row.cpu_trap_us.get(&id).copied().unwrap_or(0);
            let elapsed = row.trap_elapsed_us.get(&id).copied().unwrap_or(0);
            writeln!(out, "Trap {name}").unwrap();
            writeln!(out, "Calls {calls}").unwrap();
            writeln!(out, "CPU {}", secs(cpu)).unwrap();
            writeln!(out, "Elapsed {}", secs(elapsed)).unwrap();
            writeln!(
                out,
                "Elapsed/Calls {:.7}",
                elapsed as f64 / 1e6 / calls as f64
            )
            .unwrap();
        }
        for (name, count) in &row.counters {
            writeln!(out, "Counter {name} {count}").unwrap();
        }
        writeln!(out).unwrap();
    }
    for (irq, stats) in &analysis.irqs {
        writeln!(out, "IRQ {}", irq.name()).unwrap();
        writeln!(out, "Calls {}", stats.calls).unwrap();
        writeln!(out, "CPU {}", secs(stats.cpu_us)).unwrap();
    }
    if !registry.connections.is_empty() {
        if !analysis.irqs.is_empty() {
            writeln!(out).unwrap();
        }
        writeln!(out, "Connections").unwrap();
        for (token, ends) in &registry.connections {
            let server = ends
                .server_pid
                .map(|p| p.to_string())
                .unwrap_or_else(|| "-".to_string());
            writeln!(
                out,
                "Conn {token} client {} server {server}",
                ends.client_pid
            )
            .unwrap();
        }
    }
    out
}
