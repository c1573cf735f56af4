//! Deterministic discrete-event workload simulator.
//!
//! Executes a [`Scenario`] on a model machine (round-robin scheduler with a
//! fixed quantum, files with configured read latencies, sockets, timers)
//! and emits the same event vocabulary the analyzers consume, together
//! with ground-truth accounting kept by the simulator's own bookkeeping:
//! per-process wait breakdowns, per-client server CPU, irq totals, and
//! per-function execution segments for the sampling profiler.
//!
//! Wakeup deliveries are wrapped in interrupt events on cpu 0 with a fixed
//! 10 µs handler cost; the handler time stays inside whatever process was
//! interrupted (its mode bucket), and is reported globally per irq line.

pub mod random;
mod rng;
mod sampling;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use thiserror::Error;

pub use rng::SplitMix64;
pub use sampling::{emit_samples, SamplingMode, SamplingPolicy};

use crate::event::{EventKind, MmapBacking, OutState, WaitSource};
use crate::ids::{ConnToken, Fd, IrqId, Pid, SyscallId, TrapId};
use crate::profile::{ArcTable, Symbol, SymbolTable};
use crate::scenario::{Action, MapTarget, ResourceModel, Scenario};
use crate::time::Timestamp;
use crate::trace::{CpuEventMap, SnapState, Snapshot, SnapshotProcess, TraceFile};
use crate::wait::{IrqStats, WaitBreakdown, WaitCategory};

/// Epoch of simulated traces.
pub const SIM_BASE_SECONDS: u64 = 1_000_000_000;
/// Fixed interrupt-handler cost.
pub const IRQ_COST_US: u64 = 10;
/// First pid assigned to scenario processes; idle tasks use 0..cpu_count.
pub const FIRST_SCENARIO_PID: u32 = 1000;

pub fn sim_base() -> Timestamp {
    Timestamp::new(SIM_BASE_SECONDS, 0)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("simulation deadlock at t={at_us}us: pids {blocked:?} blocked with no pending events")]
    Deadlock { at_us: u64, blocked: Vec<Pid> },
    #[error("invalid action in process {name} (pid {pid}): {message}")]
    InvalidAction {
        pid: Pid,
        name: String,
        message: String,
    },
}

/// True per-client CPU attribution for one server process.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ServerTruth {
    pub init_cpu_us: u64,
    pub per_client_cpu_us: BTreeMap<Pid, u64>,
}

/// Everything the simulator knows to be true about a run, kept by its own
/// bookkeeping independently of the trace analyzers.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundTruth {
    pub processes: BTreeMap<Pid, WaitBreakdown>,
    pub servers: BTreeMap<Pid, ServerTruth>,
    pub irqs: BTreeMap<IrqId, IrqStats>,
    /// Fraction of tagged execution time per synthetic function.
    pub function_fractions: BTreeMap<String, f64>,
}

/// One run of a tagged synthetic function on a cpu.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FnSegment {
    pub cpu: u16,
    pub function: String,
    pub start_us: u64,
    pub end_us: u64,
}

/// Result of a simulation run.
#[derive(Clone, Debug)]
pub struct SimRun {
    pub seed: u64,
    pub snapshot: Snapshot,
    pub events: CpuEventMap,
    pub truth: GroundTruth,
    pub symbols: SymbolTable,
    pub fn_timeline: Vec<FnSegment>,
    /// Per-cpu attributed pid of each emitted event, in stream order.
    pub event_pids: BTreeMap<u16, Vec<Pid>>,
    pub arcs: ArcTable,
    pub end_us: u64,
}

impl SimRun {
    pub fn trace_file(&self, block_capacity: usize) -> TraceFile {
        TraceFile::build(self.snapshot.clone(), &self.events, block_capacity)
            .expect("simulator emits time-ordered events")
    }
}

/// Runs the scenario to completion. Deterministic for a given
/// (scenario, seed); the seed only feeds downstream sampling.
pub fn run_simulation(scenario: &Scenario, seed: u64) -> Result<SimRun, SimError> {
    Engine::new(scenario, seed)?.run()
}

// ---------------------------------------------------------------------
// engine internals

#[derive(Clone, Debug)]
enum Delivery {
    /// Completion of a file read, page fault, or generic blocking call.
    IoDone { pid: Pid, wake_gen: u64 },
    Timer { pid: Pid, wake_gen: u64 },
    ForkDone { pid: Pid, wake_gen: u64, child: Pid },
    ChildExit { parent: Pid, child: Pid },
    ConnEstablished { token: ConnToken },
    Data { token: ConnToken, to_server: bool, bytes: u64 },
    Hangup { token: ConnToken, closer: Pid },
}

#[derive(Clone, Debug)]
enum QueuedKind {
    StepDone { cpu: u16, gen: u64 },
    Quantum { cpu: u16, gen: u64 },
    /// `mutated` marks that the delivery's buffer/backlog side effects
    /// already ran (set when an irq-busy window defers the wakeups).
    Deliver { delivery: Delivery, mutated: bool },
    Dispatch,
}

#[derive(Clone, Debug)]
struct QueueItem {
    time: u64,
    seq: u64,
    kind: QueuedKind,
}

impl PartialEq for QueueItem {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for QueueItem {}
impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PSched {
    Running(u16),
    Runnable,
    Blocked,
    Exited,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PMode {
    User,
    Syscall(SyscallId),
    Trap(TrapId),
}

#[derive(Clone, Debug)]
enum SimFd {
    File { path: String },
    Listen,
    Conn { token: ConnToken },
}

#[derive(Clone, Debug)]
enum Binding {
    Fd(Fd),
    Mmap {
        start: u64,
        length: u64,
        backing: Option<String>,
    },
}

/// Why a process is blocked, in the simulator's own terms.
#[derive(Clone, Debug)]
enum Block {
    ReadFile { path: String, fd: Fd },
    ReadConn { token: ConnToken, fd: Fd },
    PageFault { backing: Option<String> },
    WaitingChild { target: Pid },
    Poll { fds: Vec<Fd> },
    Sleeping,
    Forking,
    StatLike,
    Connecting,
    Accepting { listen_fd: Fd },
}

#[derive(Clone, Debug)]
struct Step {
    function: Option<String>,
    remaining: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EpKind {
    Sys(SyscallId),
    Trp(TrapId),
}

struct Proc {
    pid: Pid,
    name: String,
    parent: Option<Pid>,
    is_idle: bool,
    program: Vec<Action>,
    pc: usize,
    phase: u8,
    sched: PSched,
    mode: PMode,
    step: Option<Step>,
    bindings: BTreeMap<String, Binding>,
    fds: BTreeMap<Fd, SimFd>,
    next_fd: u32,
    next_mmap: u64,
    children: VecDeque<Pid>,
    exited_children: BTreeSet<Pid>,
    listen_fd: Option<Fd>,
    backlog: VecDeque<ConnToken>,
    /// Connect tokens parked until this process listens.
    pending_connectors: Vec<ConnToken>,
    block: Option<Block>,
    wake_gen: u64,
    /// Time and cpu of the emission that made this process runnable;
    /// `None` when its runnable state comes from the snapshot. Guards
    /// same-microsecond cross-cpu dispatches so the canonical merge order
    /// (timestamp, then cpu) never shows a dispatch before its cause.
    enqueue_mark: Option<(u64, u16)>,
    // ground-truth bookkeeping
    row: WaitBreakdown,
    anchor: u64,
    episode: Option<(EpKind, u64)>,
    started_us: u64,
    ended_us: Option<u64>,
    serving_client: Option<Pid>,
    server_init: Option<u64>,
    server_per_client: BTreeMap<Pid, u64>,
    listened: bool,
}

impl Proc {
    fn new(pid: Pid, name: &str, parent: Option<Pid>, program: Vec<Action>, now: u64) -> Proc {
        Proc {
            pid,
            name: name.to_string(),
            parent,
            is_idle: false,
            program,
            pc: 0,
            phase: 0,
            sched: PSched::Runnable,
            mode: PMode::User,
            step: None,
            bindings: BTreeMap::new(),
            fds: BTreeMap::new(),
            next_fd: 3,
            next_mmap: 0x7f00_0000_0000,
            children: VecDeque::new(),
            exited_children: BTreeSet::new(),
            listen_fd: None,
            backlog: VecDeque::new(),
            pending_connectors: Vec::new(),
            block: None,
            wake_gen: 0,
            enqueue_mark: None,
            row: WaitBreakdown::new(pid, parent, name),
            anchor: now,
            episode: None,
            started_us: now,
            ended_us: None,
            serving_client: None,
            server_init: None,
            server_per_client: BTreeMap::new(),
            listened: false,
        }
    }
}

struct Conn {
    client_pid: Pid,
    client_fd: Fd,
    server_name_pid: Pid,
    server_fd: Option<Fd>,
    established: bool,
    buf_to_server: u64,
    buf_to_client: u64,
    client_closed: bool,
    server_closed: bool,
}

struct Cpu {
    id: u16,
    running: Pid,
    step_gen: u64,
    quantum_gen: u64,
    step_end: Option<u64>,
    quantum_end: Option<u64>,
    active_fn: Option<(String, u64)>,
}

struct Engine<'a> {
    res: &'a ResourceModel,
    seed: u64,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<QueueItem>>,
    procs: BTreeMap<Pid, Proc>,
    cpus: Vec<Cpu>,
    run_queue: VecDeque<Pid>,
    events: BTreeMap<u16, Vec<(u64, EventKind)>>,
    event_pids: BTreeMap<u16, Vec<Pid>>,
    conns: BTreeMap<ConnToken, Conn>,
    next_token: u64,
    next_pid: u32,
    irq_busy_until: u64,
    irq_truth: BTreeMap<IrqId, IrqStats>,
    fn_timeline: Vec<FnSegment>,
    arcs: ArcTable,
    name_to_pid: BTreeMap<String, Pid>,
    fn_addresses: BTreeMap<String, u64>,
    end_us: u64,
    live_count: usize,
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario, seed: u64) -> Result<Engine<'a>, SimError> {
        let res = &scenario.resources;
        let mut procs = BTreeMap::new();
        let mut cpus = Vec::new();
        for k in 0..res.cpu_count {
            let pid = Pid(k as u32);
            let mut idle = Proc::new(pid, &format!("idle/{k}"), None, Vec::new(), 0);
            idle.is_idle = true;
            idle.sched = PSched::Running(k);
            procs.insert(pid, idle);
            cpus.push(Cpu {
                id: k,
                running: pid,
                step_gen: 0,
                quantum_gen: 0,
                step_end: None,
                quantum_end: None,
                active_fn: None,
            });
        }
        let mut name_to_pid = BTreeMap::new();
        let mut run_queue = VecDeque::new();
        for (i, spec) in scenario.processes.iter().enumerate() {
            let pid = Pid(FIRST_SCENARIO_PID + i as u32);
            let mut program = Vec::new();
            if spec.start_delay_us > 0 {
                program.push(Action::Sleep {
                    duration_us: spec.start_delay_us,
                });
            }
            program.extend(spec.actions.iter().cloned());
            procs.insert(pid, Proc::new(pid, &spec.name, None, program, 0));
            name_to_pid.insert(spec.name.clone(), pid);
            run_queue.push_back(pid);
        }
        let mut fn_names = BTreeSet::new();
        collect_functions(scenario.processes.iter().flat_map(|p| p.actions.iter()), &mut fn_names);
        let fn_addresses: BTreeMap<String, u64> = fn_names
            .iter()
            .enumerate()
            .map(|(i, name)| (name.clone(), 0x10000 + i as u64 * 64))
            .collect();
        let live_count = scenario.processes.len();
        Ok(Engine {
            res,
            seed,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            procs,
            cpus,
            run_queue,
            events: BTreeMap::new(),
            event_pids: BTreeMap::new(),
            conns: BTreeMap::new(),
            next_token: 1,
            next_pid: FIRST_SCENARIO_PID + scenario.processes.len() as u32,
            irq_busy_until: 0,
            irq_truth: BTreeMap::new(),
            fn_timeline: Vec::new(),
            arcs: ArcTable::new(),
            name_to_pid,
            fn_addresses,
            end_us: 0,
            live_count,
        })
    }

    fn run(mut self) -> Result<SimRun, SimError> {
        self.try_dispatch_idle()?;
        while let Some(Reverse(item)) = self.queue.pop() {
            debug_assert!(item.time >= self.now);
            self.now = item.time;
            match item.kind {
                QueuedKind::StepDone { cpu, gen } => {
                    if self.cpus[cpu as usize].step_gen != gen {
                        continue;
                    }
                    self.handle_step_done(cpu)?;
                }
                QueuedKind::Quantum { cpu, gen } => {
                    if self.cpus[cpu as usize].quantum_gen != gen {
                        continue;
                    }
                    self.handle_quantum(cpu)?;
                }
                QueuedKind::Deliver { delivery, mutated } => {
                    self.handle_delivery(delivery, mutated)?
                }
                QueuedKind::Dispatch => self.try_dispatch_idle()?,
            }
        }
        let blocked: Vec<Pid> = self
            .procs
            .values()
            .filter(|p| !p.is_idle && p.sched != PSched::Exited)
            .map(|p| p.pid)
            .collect();
        if !blocked.is_empty() {
            return Err(SimError::Deadlock {
                at_us: self.now,
                blocked,
            });
        }
        self.finish()
    }

    // -- emission & bookkeeping helpers ---------------------------------

    fn push(&mut self, time: u64, kind: QueuedKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(QueueItem { time, seq, kind }));
    }

    fn emit(&mut self, t: u64, cpu: u16, kind: EventKind) {
        let attributed = self.cpus[cpu as usize].running;
        self.procs
            .get_mut(&attributed)
            .expect("running pid exists")
            .row
            .count_event(kind.name());
        self.events.entry(cpu).or_default().push((t, kind));
        self.event_pids.entry(cpu).or_default().push(attributed);
        if t > self.end_us {
            self.end_us = t;
        }
    }

    /// Accrues the truth bucket for the current state over [anchor, t).
    fn truth_accrue(&mut self, pid: Pid, t: u64) {
        let proc = self.procs.get_mut(&pid).unwrap();
        let dt = t - proc.anchor;
        proc.anchor = t;
        if dt == 0 {
            return;
        }
        match proc.sched {
            PSched::Running(_) => {
                match proc.mode {
                    PMode::User => proc.row.cpu_user_us += dt,
                    PMode::Syscall(id) => {
                        *proc.row.cpu_syscall_us.entry(id).or_insert(0) += dt
                    }
                    PMode::Trap(id) => *proc.row.cpu_trap_us.entry(id).or_insert(0) += dt,
                }
                if proc.server_init.is_some() {
                    let client = proc.serving_client.expect("serving set at first accept");
                    *proc.server_per_client.entry(client).or_insert(0) += dt;
                }
            }
            PSched::Runnable => proc.row.wait_cpu_us += dt,
            PSched::Blocked => unreachable!("blocked accrual happens at wake"),
            PSched::Exited => {}
        }
    }

    fn mode_to(&mut self, pid: Pid, mode: PMode) {
        self.truth_accrue(pid, self.now);
        let now = self.now;
        let proc = self.procs.get_mut(&pid).unwrap();
        proc.mode = mode;
        match mode {
            PMode::Syscall(id) => {
                *proc.row.syscall_calls.entry(id).or_insert(0) += 1;
                proc.episode = Some((EpKind::Sys(id), now));
            }
            PMode::Trap(id) => {
                *proc.row.trap_calls.entry(id).or_insert(0) += 1;
                proc.episode = Some((EpKind::Trp(id), now));
            }
            PMode::User => {
                if let Some((kind, entered)) = proc.episode.take() {
                    match kind {
                        EpKind::Sys(id) => proc.row.add_syscall_elapsed(id, now - entered),
                        EpKind::Trp(id) => proc.row.add_trap_elapsed(id, now - entered),
                    }
                }
            }
        }
    }

    fn close_fn_segment(&mut self, cpu: u16, t: u64) {
        if let Some((function, start)) = self.cpus[cpu as usize].active_fn.take() {
            if t > start {
                self.fn_timeline.push(FnSegment {
                    cpu,
                    function,
                    start_us: start,
                    end_us: t,
                });
            }
        }
    }

    fn invalid(&self, pid: Pid, message: String) -> SimError {
        SimError::InvalidAction {
            pid,
            name: self.procs[&pid].name.clone(),
            message,
        }
    }

    // -- scheduling ------------------------------------------------------

    /// Pops the run queue head for a dispatch on `cpu`, unless doing so
    /// at this instant would order the dispatch before the emission that
    /// enqueued it (same microsecond, higher cpu). In that case the head
    /// stays queued and a dispatch pass is scheduled one microsecond on.
    fn pop_runnable_for(&mut self, cpu: u16) -> Option<Pid> {
        let &front = self.run_queue.front()?;
        if let Some((t, from_cpu)) = self.procs[&front].enqueue_mark {
            if t == self.now && from_cpu > cpu {
                self.push(self.now + 1, QueuedKind::Dispatch);
                return None;
            }
        }
        self.run_queue.pop_front()
    }

    /// Dispatches runnable processes onto idle cpus.
    fn try_dispatch_idle(&mut self) -> Result<(), SimError> {
        loop {
            if self.run_queue.is_empty() {
                return Ok(());
            }
            let idle_cpu = self
                .cpus
                .iter()
                .find(|c| self.procs[&c.running].is_idle)
                .map(|c| c.id);
            let Some(cpu) = idle_cpu else {
                return Ok(());
            };
            let Some(next) = self.pop_runnable_for(cpu) else {
                return Ok(());
            };
            let idle_pid = self.cpus[cpu as usize].running;
            self.emit(
                self.now,
                cpu,
                EventKind::SchedChange {
                    in_pid: next,
                    out_pid: idle_pid,
                    out_state: OutState::Runnable,
                },
            );
            self.truth_accrue(idle_pid, self.now);
            self.procs.get_mut(&idle_pid).unwrap().sched = PSched::Runnable;
            self.start_running(next, cpu)?;
        }
    }

    /// Puts `pid` on `cpu` and either resumes its pending step or advances
    /// its program. Arms a fresh quantum.
    fn start_running(&mut self, pid: Pid, cpu: u16) -> Result<(), SimError> {
        self.truth_accrue(pid, self.now);
        {
            let c = &mut self.cpus[cpu as usize];
            c.running = pid;
            c.step_gen += 1;
            c.quantum_gen += 1;
            c.step_end = None;
        }
        self.procs.get_mut(&pid).unwrap().sched = PSched::Running(cpu);
        let quantum_end = self.now + self.res.scheduler_quantum_us;
        self.cpus[cpu as usize].quantum_end = Some(quantum_end);
        let qgen = self.cpus[cpu as usize].quantum_gen;
        self.push(quantum_end, QueuedKind::Quantum { cpu, gen: qgen });
        if self.procs[&pid].step.is_some() {
            self.schedule_step(pid, cpu);
            Ok(())
        } else {
            self.advance(pid)
        }
    }

    fn schedule_step(&mut self, pid: Pid, cpu: u16) {
        let (remaining, function) = {
            let step = self.procs[&pid].step.as_ref().expect("step present");
            (step.remaining, step.function.clone())
        };
        let end = self.now + remaining;
        let c = &mut self.cpus[cpu as usize];
        c.step_end = Some(end);
        if let Some(f) = function {
            c.active_fn = Some((f, self.now));
        }
        let gen = c.step_gen;
        self.push(end, QueuedKind::StepDone { cpu, gen });
    }

    fn handle_step_done(&mut self, cpu: u16) -> Result<(), SimError> {
        let pid = self.cpus[cpu as usize].running;
        self.close_fn_segment(cpu, self.now);
        {
            let c = &mut self.cpus[cpu as usize];
            c.step_gen += 1;
            c.step_end = None;
        }
        self.procs.get_mut(&pid).unwrap().step = None;
        self.advance(pid)
    }

    fn handle_quantum(&mut self, cpu: u16) -> Result<(), SimError> {
        let pid = self.cpus[cpu as usize].running;
        if self.procs[&pid].is_idle {
            return Ok(());
        }
        // Step completions win ties with the quantum edge.
        if self.cpus[cpu as usize].step_end == Some(self.now) {
            let quantum_end = self.now + self.res.scheduler_quantum_us;
            self.cpus[cpu as usize].quantum_end = Some(quantum_end);
            let gen = self.cpus[cpu as usize].quantum_gen;
            self.push(quantum_end, QueuedKind::Quantum { cpu, gen });
            return Ok(());
        }
        if self.run_queue.is_empty() {
            let quantum_end = self.now + self.res.scheduler_quantum_us;
            self.cpus[cpu as usize].quantum_end = Some(quantum_end);
            let gen = self.cpus[cpu as usize].quantum_gen;
            self.push(quantum_end, QueuedKind::Quantum { cpu, gen });
            return Ok(());
        }
        // Preempt: record the unfinished step and rotate the run queue.
        let Some(next) = self.pop_runnable_for(cpu) else {
            // Queue head not dispatchable this instant; retry shortly.
            let retry = self.now + 1;
            self.cpus[cpu as usize].quantum_end = Some(retry);
            let gen = self.cpus[cpu as usize].quantum_gen;
            self.push(retry, QueuedKind::Quantum { cpu, gen });
            return Ok(());
        };
        self.close_fn_segment(cpu, self.now);
        if let Some(end) = self.cpus[cpu as usize].step_end {
            let proc = self.procs.get_mut(&pid).unwrap();
            if let Some(step) = proc.step.as_mut() {
                step.remaining = end - self.now;
            }
        }
        self.emit(
            self.now,
            cpu,
            EventKind::SchedChange {
                in_pid: next,
                out_pid: pid,
                out_state: OutState::Runnable,
            },
        );
        self.truth_accrue(pid, self.now);
        {
            let proc = self.procs.get_mut(&pid).unwrap();
            proc.sched = PSched::Runnable;
            proc.enqueue_mark = Some((self.now, cpu));
        }
        self.run_queue.push_back(pid);
        self.start_running(next, cpu)
    }

    /// Blocks the running process, captures the reason, and dispatches the
    /// next runnable (or idle) task on its cpu. Sets the resume phase.
    fn do_block(&mut self, pid: Pid, reason: Block) -> Result<(), SimError> {
        let cpu = match self.procs[&pid].sched {
            PSched::Running(c) => c,
            other => unreachable!("block of non-running {pid}: {other:?}"),
        };
        self.truth_accrue(pid, self.now);
        {
            let proc = self.procs.get_mut(&pid).unwrap();
            proc.wake_gen += 1;
            proc.block = Some(reason);
            proc.phase += 1;
            proc.sched = PSched::Blocked;
            proc.anchor = self.now;
        }
        let next = self.pop_runnable_for(cpu);
        let in_pid = next.unwrap_or(Pid(cpu as u32));
        self.emit(
            self.now,
            cpu,
            EventKind::SchedChange {
                in_pid,
                out_pid: pid,
                out_state: OutState::Blocked,
            },
        );
        self.free_cpu(cpu, in_pid, next.is_some())
    }

    fn free_cpu(&mut self, cpu: u16, in_pid: Pid, is_real: bool) -> Result<(), SimError> {
        {
            let c = &mut self.cpus[cpu as usize];
            c.step_gen += 1;
            c.quantum_gen += 1;
            c.step_end = None;
            c.quantum_end = None;
        }
        if is_real {
            self.start_running(in_pid, cpu)
        } else {
            // Back to the idle task.
            self.truth_accrue(in_pid, self.now);
            self.cpus[cpu as usize].running = in_pid;
            self.procs.get_mut(&in_pid).unwrap().sched = PSched::Running(cpu);
            Ok(())
        }
    }

    /// Wakes a blocked process inside an irq window at time `t`.
    fn wake(&mut self, pid: Pid, source: WaitSource, category: WaitCategory, t: u64) {
        self.emit(t, 0, EventKind::WakeUp { pid, source });
        self.truth_accrue_blocked(pid, category, t);
        let proc = self.procs.get_mut(&pid).unwrap();
        proc.sched = PSched::Runnable;
        proc.block = None;
        proc.wake_gen += 1;
        proc.anchor = t;
        proc.enqueue_mark = Some((t, 0));
        self.run_queue.push_back(pid);
    }

    fn truth_accrue_blocked(&mut self, pid: Pid, category: WaitCategory, t: u64) {
        let proc = self.procs.get_mut(&pid).unwrap();
        debug_assert_eq!(proc.sched, PSched::Blocked);
        let dt = t - proc.anchor;
        proc.anchor = t;
        proc.row.add_wait(&category, dt);
    }

    /// Display name of one of this process's descriptors, matching the
    /// names the replayed fd tables produce.
    fn fd_display(&self, pid: Pid, fd: Fd) -> String {
        match self.procs[&pid].fds.get(&fd) {
            Some(SimFd::File { path }) => {
                path.rsplit('/').next().unwrap_or(path).to_string()
            }
            Some(SimFd::Conn { token }) => format!("conn:{token}"),
            Some(SimFd::Listen) => format!("listen:{fd}"),
            None => format!("fd:{fd}"),
        }
    }

    // -- wake deliveries --------------------------------------------------

    fn handle_delivery(&mut self, delivery: Delivery, mutated: bool) -> Result<(), SimError> {
        // Buffer/backlog effects happen when the completion fires, even if
        // the interrupt controller is busy and the wakeups get deferred.
        if !mutated {
            if let Delivery::Data { token, to_server, bytes } = &delivery {
                let conn = self.conns.get_mut(token).expect("known conn");
                if *to_server {
                    conn.buf_to_server += bytes;
                } else {
                    conn.buf_to_client += bytes;
                }
            }
            if let Delivery::ConnEstablished { token } = &delivery {
                let conn = self.conns.get_mut(token).expect("known conn");
                conn.established = true;
                let server = conn.server_name_pid;
                self.procs
                    .get_mut(&server)
                    .expect("server proc")
                    .backlog
                    .push_back(*token);
            }
        }
        let t0 = self.now.max(self.irq_busy_until);
        if t0 > self.now {
            // Wakeups re-resolve at delivery time, so nothing goes stale.
            self.push(
                t0,
                QueuedKind::Deliver {
                    delivery,
                    mutated: true,
                },
            );
            return Ok(());
        }
        let wakes = self.collect_wakes(&delivery);
        if wakes.is_empty() {
            return Ok(());
        }
        self.deliver_irq(delivery_irq(&delivery), wakes)
    }

    /// Computes which processes this delivery wakes, with the wakeup
    /// source and the true wait category of the ending blocked interval.
    fn collect_wakes(&mut self, delivery: &Delivery) -> Vec<WakeCmd> {
        let mut wakes = Vec::new();
        match delivery {
            Delivery::IoDone { pid, wake_gen } => {
                if let Some(cmd) = self.io_done_wake(*pid, *wake_gen) {
                    wakes.push(cmd);
                }
            }
            Delivery::Timer { pid, wake_gen } => {
                let proc = &self.procs[pid];
                if proc.sched == PSched::Blocked && proc.wake_gen == *wake_gen {
                    wakes.push(WakeCmd {
                        pid: *pid,
                        source: WaitSource::Timer,
                        category: WaitCategory::Timeout,
                        timer_expire: true,
                    });
                }
            }
            Delivery::ForkDone { pid, wake_gen, child } => {
                let proc = &self.procs[pid];
                if proc.sched == PSched::Blocked && proc.wake_gen == *wake_gen {
                    wakes.push(WakeCmd {
                        pid: *pid,
                        source: WaitSource::Process { pid: *child },
                        category: WaitCategory::Fork,
                        timer_expire: false,
                    });
                }
            }
            Delivery::ChildExit { parent, child } => {
                if let Some(proc) = self.procs.get(parent) {
                    if proc.sched == PSched::Blocked {
                        if let Some(Block::WaitingChild { target }) = &proc.block {
                            if target == child {
                                wakes.push(WakeCmd {
                                    pid: *parent,
                                    source: WaitSource::Process { pid: *child },
                                    category: WaitCategory::Process { pid: *child },
                                    timer_expire: false,
                                });
                            }
                        }
                    }
                }
            }
            Delivery::ConnEstablished { token } => {
                let conn = &self.conns[token];
                let client = conn.client_pid;
                let server = conn.server_name_pid;
                if self.procs[&client].sched == PSched::Blocked
                    && matches!(self.procs[&client].block, Some(Block::Connecting))
                {
                    wakes.push(WakeCmd {
                        pid: client,
                        source: WaitSource::Device,
                        category: WaitCategory::Generic {
                            syscall: SyscallId::CONNECT,
                        },
                        timer_expire: false,
                    });
                }
                if let Some(cmd) = self.listen_ready_wake(server) {
                    wakes.push(cmd);
                }
            }
            Delivery::Data { token, to_server, .. } => {
                let conn = &self.conns[token];
                let (peer, peer_fd) = if *to_server {
                    (conn.server_name_pid, conn.server_fd)
                } else {
                    (conn.client_pid, Some(conn.client_fd))
                };
                if let Some(fd) = peer_fd {
                    if let Some(cmd) = self.conn_event_wake(peer, *token, fd, None) {
                        wakes.push(cmd);
                    }
                }
            }
            Delivery::Hangup { token, closer } => {
                let conn = &self.conns[token];
                let (peer, peer_fd) = if conn.client_pid == *closer {
                    (conn.server_name_pid, conn.server_fd)
                } else {
                    (conn.client_pid, Some(conn.client_fd))
                };
                if let Some(fd) = peer_fd {
                    if let Some(cmd) = self.conn_event_wake(peer, *token, fd, Some(*closer)) {
                        wakes.push(cmd);
                    }
                }
            }
        }
        wakes
    }

    fn io_done_wake(&self, pid: Pid, wake_gen: u64) -> Option<WakeCmd> {
        let proc = self.procs.get(&pid)?;
        if proc.sched != PSched::Blocked || proc.wake_gen != wake_gen {
            return None;
        }
        let (source, category) = match proc.block.as_ref()? {
            Block::ReadFile { path, fd } => (
                WaitSource::File { fd: *fd },
                WaitCategory::File {
                    name: path.rsplit('/').next().unwrap_or(path).to_string(),
                },
            ),
            Block::PageFault { backing } => (
                WaitSource::Device,
                match backing {
                    Some(path) => WaitCategory::File {
                        name: path.rsplit('/').next().unwrap_or(path).to_string(),
                    },
                    None => WaitCategory::Generic {
                        syscall: SyscallId::PAGE_FAULT,
                    },
                },
            ),
            Block::StatLike => (
                WaitSource::Device,
                WaitCategory::Generic {
                    syscall: SyscallId::STAT,
                },
            ),
            other => unreachable!("io completion for {other:?}"),
        };
        Some(WakeCmd {
            pid,
            source,
            category,
            timer_expire: false,
        })
    }

    /// Wake for a connection event (data arrival or hangup) on `fd` of
    /// `peer`. `closer` is set for hangups.
    fn conn_event_wake(
        &self,
        peer: Pid,
        token: ConnToken,
        fd: Fd,
        closer: Option<Pid>,
    ) -> Option<WakeCmd> {
        let proc = self.procs.get(&peer)?;
        if proc.sched != PSched::Blocked {
            return None;
        }
        match proc.block.as_ref()? {
            Block::ReadConn { token: t, fd: read_fd } if *t == token => {
                let source = match closer {
                    Some(pid) => WaitSource::Process { pid },
                    None => WaitSource::File { fd: *read_fd },
                };
                // Rule 1: a blocked read always waits for its file, here
                // the connection, whatever ended it.
                Some(WakeCmd {
                    pid: peer,
                    source,
                    category: WaitCategory::File {
                        name: format!("conn:{token}"),
                    },
                    timer_expire: false,
                })
            }
            Block::Poll { fds } if fds.contains(&fd) => {
                let (source, category) = match closer {
                    Some(pid) => (
                        WaitSource::Process { pid },
                        WaitCategory::Process { pid },
                    ),
                    None => (
                        WaitSource::File { fd },
                        WaitCategory::File {
                            name: self.fd_display(peer, fd),
                        },
                    ),
                };
                Some(WakeCmd {
                    pid: peer,
                    source,
                    category,
                    timer_expire: false,
                })
            }
            _ => None,
        }
    }

    fn listen_ready_wake(&self, server: Pid) -> Option<WakeCmd> {
        let proc = self.procs.get(&server)?;
        if proc.sched != PSched::Blocked {
            return None;
        }
        let listen_fd = proc.listen_fd?;
        match proc.block.as_ref()? {
            Block::Accepting { listen_fd: fd } if *fd == listen_fd => Some(WakeCmd {
                pid: server,
                source: WaitSource::File { fd: listen_fd },
                category: WaitCategory::Generic {
                    syscall: SyscallId::ACCEPT,
                },
                timer_expire: false,
            }),
            Block::Poll { fds } if fds.contains(&listen_fd) => Some(WakeCmd {
                pid: server,
                source: WaitSource::File { fd: listen_fd },
                category: WaitCategory::File {
                    name: format!("listen:{listen_fd}"),
                },
                timer_expire: false,
            }),
            _ => None,
        }
    }

    /// Emits the irq window around a batch of wakeups, delays the
    /// interrupted cpu-0 process, and schedules a dispatch pass.
    fn deliver_irq(&mut self, irq: IrqId, wakes: Vec<WakeCmd>) -> Result<(), SimError> {
        let t0 = self.now;
        let t1 = t0 + IRQ_COST_US;
        self.irq_busy_until = t1;
        // The handler steals time from whatever runs on cpu 0.
        let interrupted = self.cpus[0].running;
        if !self.procs[&interrupted].is_idle {
            self.close_fn_segment(0, t0);
            let c = &mut self.cpus[0];
            c.step_gen += 1;
            c.quantum_gen += 1;
            if let Some(end) = c.step_end.as_mut() {
                *end += IRQ_COST_US;
            }
            if let Some(end) = c.quantum_end.as_mut() {
                *end += IRQ_COST_US;
            }
            let (step_end, step_gen) = (c.step_end, c.step_gen);
            let (quantum_end, quantum_gen) = (c.quantum_end, c.quantum_gen);
            if let Some(end) = step_end {
                self.push(end, QueuedKind::StepDone { cpu: 0, gen: step_gen });
            }
            if let Some(end) = quantum_end {
                self.push(
                    end,
                    QueuedKind::Quantum {
                        cpu: 0,
                        gen: quantum_gen,
                    },
                );
            }
            // Resume the function segment after the handler returns.
            let resumed_fn = self.procs[&interrupted]
                .step
                .as_ref()
                .and_then(|s| s.function.clone());
            if let Some(f) = resumed_fn {
                self.cpus[0].active_fn = Some((f, t1));
            }
        }
        self.emit(t0, 0, EventKind::IrqEntry { irq });
        for cmd in &wakes {
            if cmd.timer_expire {
                self.emit(t0, 0, EventKind::TimerExpire { pid: cmd.pid });
            }
            self.wake(cmd.pid, cmd.source, cmd.category.clone(), t0);
        }
        self.emit(t1, 0, EventKind::IrqExit);
        let stats = self.irq_truth.entry(irq).or_default();
        stats.calls += 1;
        stats.cpu_us += IRQ_COST_US;
        self.push(t1, QueuedKind::Dispatch);
        Ok(())
    }

    // -- program interpretation -------------------------------------------

    fn running_cpu(&self, pid: Pid) -> u16 {
        match self.procs[&pid].sched {
            PSched::Running(cpu) => cpu,
            other => unreachable!("advance of non-running {pid}: {other:?}"),
        }
    }

    fn start_step(&mut self, pid: Pid, function: Option<String>, duration: u64) {
        let cpu = self.running_cpu(pid);
        self.procs.get_mut(&pid).unwrap().step = Some(Step {
            function,
            remaining: duration,
        });
        self.schedule_step(pid, cpu);
    }

    fn alloc_fd(&mut self, pid: Pid, simfd: SimFd) -> Fd {
        let proc = self.procs.get_mut(&pid).unwrap();
        let fd = Fd(proc.next_fd);
        proc.next_fd += 1;
        proc.fds.insert(fd, simfd);
        fd
    }

    fn binding_fd(&self, pid: Pid, name: &str) -> Result<Fd, SimError> {
        match self.procs[&pid].bindings.get(name) {
            Some(Binding::Fd(fd)) => Ok(*fd),
            _ => Err(self.invalid(pid, format!("'{name}' is not an open descriptor"))),
        }
    }

    fn syscall_entry(&mut self, pid: Pid, id: SyscallId, arg: u64) {
        let cpu = self.running_cpu(pid);
        self.emit(self.now, cpu, EventKind::SyscallEntry { syscall: id, arg });
        self.mode_to(pid, PMode::Syscall(id));
    }

    fn syscall_exit(&mut self, pid: Pid, ret: i64) {
        let cpu = self.running_cpu(pid);
        self.emit(self.now, cpu, EventKind::SyscallExit { return_value: ret });
        self.mode_to(pid, PMode::User);
    }

    /// Switches the true serving context of a server to the client behind
    /// `token`. Only meaningful once the process has accepted.
    fn truth_serve(&mut self, pid: Pid, token: ConnToken) {
        self.truth_accrue(pid, self.now);
        let client = self.conns[&token].client_pid;
        self.procs.get_mut(&pid).unwrap().serving_client = Some(client);
    }

    /// Completes an accept: pops the backlog, emits the event, registers
    /// the server side, and marks the serving switch and the end of the
    /// initialization phase.
    fn complete_accept(&mut self, pid: Pid, listen_fd: Fd, bind: &str) -> Result<(), SimError> {
        let token = self.procs.get_mut(&pid).unwrap().backlog.pop_front().expect(
            "accept resumes only with a queued connection",
        );
        let new_fd = self.alloc_fd(pid, SimFd::Conn { token });
        let cpu = self.running_cpu(pid);
        self.emit(
            self.now,
            cpu,
            EventKind::SockAccept {
                listen_fd,
                new_fd,
                conn: token,
            },
        );
        self.conns.get_mut(&token).unwrap().server_fd = Some(new_fd);
        self.truth_serve(pid, token);
        let proc = self.procs.get_mut(&pid).unwrap();
        proc.bindings.insert(bind.to_string(), Binding::Fd(new_fd));
        if proc.server_init.is_none() {
            proc.server_init = Some(proc.row.cpu_total_us());
        }
        Ok(())
    }

    /// Runs the current process program until it starts a cpu step, blocks,
    /// or exits.
    fn advance(&mut self, pid: Pid) -> Result<(), SimError> {
        loop {
            let (action, phase) = {
                let proc = &self.procs[&pid];
                let action = proc.program.get(proc.pc).cloned().unwrap_or(Action::Exit);
                (action, proc.phase)
            };
            let c = self.res.syscall_cpu_us;
            macro_rules! next_phase {
                () => {{
                    self.procs.get_mut(&pid).unwrap().phase += 1;
                }};
            }
            macro_rules! next_action {
                () => {{
                    let proc = self.procs.get_mut(&pid).unwrap();
                    proc.pc += 1;
                    proc.phase = 0;
                }};
            }
            match (&action, phase) {
                (Action::Compute { duration_us, function }, 0)
                | (
                    Action::ServeCompute {
                        duration_us,
                        function,
                        ..
                    },
                    0,
                ) => {
                    if let Action::ServeCompute {
                        on_behalf_of: Some(conn_ref),
                        ..
                    } = &action
                    {
                        let fd = self.binding_fd(pid, conn_ref)?;
                        let token = match self.procs[&pid].fds.get(&fd) {
                            Some(SimFd::Conn { token }) => *token,
                            _ => {
                                return Err(self.invalid(
                                    pid,
                                    format!("'{conn_ref}' is not a connection"),
                                ))
                            }
                        };
                        self.truth_serve(pid, token);
                    }
                    if let Some(f) = function {
                        let name = self.procs[&pid].name.clone();
                        self.arcs.record_arc(&name, f);
                    }
                    next_phase!();
                    self.start_step(pid, function.clone(), *duration_us);
                    return Ok(());
                }
                (Action::Compute { .. }, _) | (Action::ServeCompute { .. }, _) => {
                    next_action!();
                }

                (Action::Open { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::OPEN, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Open { path, bind }, _) => {
                    let fd = self.alloc_fd(pid, SimFd::File { path: path.clone() });
                    let cpu = self.running_cpu(pid);
                    self.emit(
                        self.now,
                        cpu,
                        EventKind::FsOpen {
                            fd,
                            path: path.clone(),
                        },
                    );
                    self.procs
                        .get_mut(&pid)
                        .unwrap()
                        .bindings
                        .insert(bind.clone(), Binding::Fd(fd));
                    self.syscall_exit(pid, fd.0 as i64);
                    next_action!();
                }

                (Action::Close { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::CLOSE, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Close { fd_ref }, _) => {
                    let fd = self.binding_fd(pid, fd_ref)?;
                    let cpu = self.running_cpu(pid);
                    self.emit(self.now, cpu, EventKind::FsClose { fd });
                    let removed = self.procs.get_mut(&pid).unwrap().fds.remove(&fd);
                    if let Some(SimFd::Conn { token }) = removed {
                        self.close_conn_side(pid, token);
                    }
                    self.procs.get_mut(&pid).unwrap().bindings.remove(fd_ref);
                    self.syscall_exit(pid, 0);
                    next_action!();
                }

                (Action::Read { fd_ref, .. }, 0) => {
                    let fd = self.binding_fd(pid, fd_ref)?;
                    self.syscall_entry(pid, SyscallId::READ, fd.0 as u64);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Read { fd_ref, bytes }, 1) => {
                    let fd = self.binding_fd(pid, fd_ref)?;
                    let path = match self.procs[&pid].fds.get(&fd) {
                        Some(SimFd::File { path }) => path.clone(),
                        _ => {
                            return Err(self.invalid(
                                pid,
                                format!("'{fd_ref}' is not a regular file; use readconn"),
                            ))
                        }
                    };
                    let cpu = self.running_cpu(pid);
                    self.emit(
                        self.now,
                        cpu,
                        EventKind::FsRead {
                            fd,
                            byte_count: *bytes,
                        },
                    );
                    let latency = self.res.file_latency(&path);
                    let wake_gen = self.procs[&pid].wake_gen + 1;
                    self.push(
                        self.now + latency,
                        QueuedKind::Deliver { delivery: Delivery::IoDone { pid, wake_gen }, mutated: false },
                    );
                    self.do_block(pid, Block::ReadFile { path, fd })?;
                    return Ok(());
                }
                (Action::Read { .. }, 2) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Read { bytes, .. }, _) => {
                    self.syscall_exit(pid, *bytes as i64);
                    next_action!();
                }

                (Action::Write { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::WRITE, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Write { fd_ref, bytes }, _) => {
                    let fd = self.binding_fd(pid, fd_ref)?;
                    let cpu = self.running_cpu(pid);
                    self.emit(
                        self.now,
                        cpu,
                        EventKind::FsWrite {
                            fd,
                            byte_count: *bytes,
                        },
                    );
                    if let Some(SimFd::Conn { token }) = self.procs[&pid].fds.get(&fd) {
                        let token = *token;
                        let to_server = self.conns[&token].client_pid == pid;
                        // 1us propagation so the arrival orders strictly
                        // after same-instant emissions on other cpus.
                        self.push(
                            self.now + 1,
                            QueuedKind::Deliver { delivery: Delivery::Data {
                                token,
                                to_server,
                                bytes: *bytes,
                            }, mutated: false },
                        );
                    }
                    self.syscall_exit(pid, *bytes as i64);
                    next_action!();
                }

                (Action::Mmap { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::MMAP, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Mmap { target, length, bind }, _) => {
                    let cpu = self.running_cpu(pid);
                    let start = {
                        let proc = self.procs.get_mut(&pid).unwrap();
                        let start = proc.next_mmap;
                        proc.next_mmap += length.div_ceil(0x1000) * 0x1000 + 0x1000;
                        start
                    };
                    let backing = match target {
                        MapTarget::File { path } => {
                            let fd = self.alloc_fd(pid, SimFd::File { path: path.clone() });
                            self.emit(
                                self.now,
                                cpu,
                                EventKind::FsOpen {
                                    fd,
                                    path: path.clone(),
                                },
                            );
                            self.emit(
                                self.now,
                                cpu,
                                EventKind::MemMmap {
                                    start_address: start,
                                    length: *length,
                                    backing: MmapBacking::File { fd },
                                },
                            );
                            Some(path.clone())
                        }
                        MapTarget::Anonymous => {
                            self.emit(
                                self.now,
                                cpu,
                                EventKind::MemMmap {
                                    start_address: start,
                                    length: *length,
                                    backing: MmapBacking::Anonymous,
                                },
                            );
                            None
                        }
                    };
                    self.procs.get_mut(&pid).unwrap().bindings.insert(
                        bind.clone(),
                        Binding::Mmap {
                            start,
                            length: *length,
                            backing,
                        },
                    );
                    self.syscall_exit(pid, start as i64);
                    next_action!();
                }

                (Action::TouchPage { map_ref, offset }, 0) => {
                    let (start, length, backing) = match self.procs[&pid].bindings.get(map_ref) {
                        Some(Binding::Mmap {
                            start,
                            length,
                            backing,
                        }) => (*start, *length, backing.clone()),
                        _ => {
                            return Err(
                                self.invalid(pid, format!("'{map_ref}' is not a mapping"))
                            )
                        }
                    };
                    if *offset >= length {
                        return Err(self.invalid(
                            pid,
                            format!("touch offset {offset} beyond mapping length {length}"),
                        ));
                    }
                    let cpu = self.running_cpu(pid);
                    self.emit(
                        self.now,
                        cpu,
                        EventKind::TrapEntry {
                            trap: TrapId::PAGE_FAULT,

             fault_address: start + offset,
                        },
                    );
                    self.mode_to(pid, PMode::Trap(TrapId::PAGE_FAULT));
                    let latency = match &backing {
                        Some(path) => self.res.file_latency(path),
                        None => self.res.anon_fault_latency_us,
                    };
                    let wake_gen = self.procs[&pid].wake_gen + 1;
                    self.push(
                        self.now + latency,
                        QueuedKind::Deliver { delivery: Delivery::IoDone { pid, wake_gen }, mutated: false },
                    );
                    self.do_block(pid, Block::PageFault { backing })?;
                    return Ok(());
                }
                (Action::TouchPage { .. }, 1) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::TouchPage { .. }, _) => {
                    let cpu = self.running_cpu(pid);
                    self.emit(self.now, cpu, EventKind::TrapExit);
                    self.mode_to(pid, PMode::User);
                    next_action!();
                }

                (Action::Poll { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::POLL, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Poll { fd_refs, timeout_us }, 1) => {
                    let mut fds = Vec::new();
                    for name in fd_refs {
                        fds.push(self.binding_fd(pid, name)?);
                    }
                    let cpu = self.running_cpu(pid);
                    for &fd in &fds {
                        self.emit(self.now, cpu, EventKind::FsPoll { fd });
                    }
                    self.emit(
                        self.now,
                        cpu,
                        EventKind::FsPollTimeout {
                            timeout_us: *timeout_us,
                        },
                    );
                    if self.poll_ready(pid, &fds) {
                        self.syscall_exit(pid, 1);
                        next_action!();
                        continue;
                    }
                    if *timeout_us > 0 {
                        let expiry = sim_base().add_micros(self.now + timeout_us);
                        self.emit(self.now, cpu, EventKind::TimerSet { expiry });
                        let wake_gen = self.procs[&pid].wake_gen + 1;
                        self.push(
                            self.now + timeout_us,
                            QueuedKind::Deliver { delivery: Delivery::Timer { pid, wake_gen }, mutated: false },
                        );
                    }
                    self.do_block(pid, Block::Poll { fds })?;
                    return Ok(());
                }
                (Action::Poll { .. }, 2) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Poll { .. }, _) => {
                    self.syscall_exit(pid, 0);
                    next_action!();
                }

                (Action::Sleep { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::NANOSLEEP, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Sleep { duration_us }, 1) => {
                    let cpu = self.running_cpu(pid);
                    self.emit(
                        self.now,
                        cpu,
                        EventKind::FsPollTimeout {
                            timeout_us: *duration_us,
                        },
                    );
                    let expiry = sim_base().add_micros(self.now + duration_us);
                    self.emit(self.now, cpu, EventKind::TimerSet { expiry });
                    let wake_gen = self.procs[&pid].wake_gen + 1;
                    self.push(
                        self.now + duration_us,
                        QueuedKind::Deliver { delivery: Delivery::Timer { pid, wake_gen }, mutated: false },
                    );
                    self.do_block(pid, Block::Sleeping)?;
                    return Ok(());
                }
                (Action::Sleep { .. }, 2) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Sleep { .. }, _) => {
                    self.syscall_exit(pid, 0);
                    next_action!();
                }

                (Action::Fork { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::FORK, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Fork { child_actions }, 1) => {
                    let child_pid = Pid(self.next_pid);
                    self.next_pid += 1;
                    let (name, bindings, fds, next_fd) = {
                        let parent = &self.procs[&pid];
                        (
                            parent.name.clone(),
                            parent.bindings.clone(),
                            parent.fds.clone(),
                            parent.next_fd,
                        )
                    };
                    let mut child =
                        Proc::new(child_pid, &name, Some(pid), child_actions.clone(), self.now);
                    // Children inherit descriptors, not memory mappings.
                    child.bindings = bindings
                        .into_iter()
                        .filter(|(_, b)| matches!(b, Binding::Fd(_)))
                        .collect();
                    child.fds = fds;
                    child.next_fd = next_fd;
                    self.procs.insert(child_pid, child);
                    self.live_count += 1;
                    let cpu = self.running_cpu(pid);
                    self.emit(self.now, cpu, EventKind::ProcFork { child_pid });
                    self.procs
                        .get_mut(&pid)
                        .unwrap()
                        .children
                        .push_back(child_pid);
                    self.procs.get_mut(&child_pid).unwrap().enqueue_mark = Some((self.now, cpu));
                    self.run_queue.push_back(child_pid);
                    self.push(self.now + 1, QueuedKind::Dispatch);
                    let wake_gen = self.procs[&pid].wake_gen + 1;
                    self.push(
                        self.now + self.res.fork_latency_us,
                        QueuedKind::Deliver { delivery: Delivery::ForkDone {
                            pid,
                            wake_gen,
                            child: child_pid,
                        }, mutated: false },
                    );
                    self.do_block(pid, Block::Forking)?;
                    return Ok(());
                }
                (Action::Fork { .. }, 2) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Fork { .. }, _) => {
                    self.syscall_exit(pid, 0);
                    next_action!();
                }

                (Action::WaitChild, 0) => {
                    self.syscall_entry(pid, SyscallId::WAITPID, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::WaitChild, 1) => {
                    let target = match self.procs[&pid].children.front() {
                        Some(&t) => t,
                        None => {
                            return Err(
                                self.invalid(pid, "waitchild with no children".to_string())
                            )
                        }
                    };
                    let cpu = self.running_cpu(pid);
                    self.emit(self.now, cpu, EventKind::ProcWaitpid { target_pid: target });
                    if self.procs[&pid].exited_children.contains(&target) {
                        let proc = self.procs.get_mut(&pid).unwrap();
                        proc.children.pop_front();
                        proc.exited_children.remove(&target);
                        self.syscall_exit(pid, target.0 as i64);
                        next_action!();
                        continue;
                    }
                    self.do_block(pid, Block::WaitingChild { target })?;
                    return Ok(());
                }
                (Action::WaitChild, 2) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::WaitChild, _) => {
                    let proc = self.procs.get_mut(&pid).unwrap();
                    let target = proc.children.pop_front().expect("woken by child exit");
                    proc.exited_children.remove(&target);
                    self.syscall_exit(pid, target.0 as i64);
                    next_action!();
                }

                (Action::StatLike { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::STAT, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::StatLike { duration_us }, 1) => {
                    let wake_gen = self.procs[&pid].wake_gen + 1;
                    self.push(
                        self.now + duration_us,
                        QueuedKind::Deliver { delivery: Delivery::IoDone { pid, wake_gen }, mutated: false },
                    );
                    self.do_block(pid, Block::StatLike)?;
                    return Ok(());
                }
                (Action::StatLike { .. }, 2) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::StatLike { .. }, _) => {
                    self.syscall_exit(pid, 0);
                    next_action!();
                }

                (Action::Listen { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::LISTEN, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Listen { bind }, _) => {
                    if self.procs[&pid].listen_fd.is_some() {
                        return Err(
                            self.invalid(pid, "process already has a listening socket".into())
                        );
                    }
                    let fd = self.alloc_fd(pid, SimFd::Listen);
                    let cpu = self.running_cpu(pid);
                    self.emit(self.now, cpu, EventKind::SockListen { fd });
                    {
                        let proc = self.procs.get_mut(&pid).unwrap();
                        proc.listen_fd = Some(fd);
                        proc.listened = true;
                        proc.bindings.insert(bind.clone(), Binding::Fd(fd));
                    }
                    let parked = std::mem::take(
                        &mut self.procs.get_mut(&pid).unwrap().pending_connectors,
                    );
                    for token in parked {
                        self.push(
                            self.now + self.res.connect_latency_us,
                            QueuedKind::Deliver { delivery: Delivery::ConnEstablished { token }, mutated: false },
                        );
                    }
                    self.syscall_exit(pid, fd.0 as i64);
                    next_action!();
                }

                (Action::Connect { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::CONNECT, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Connect { server, bind }, 1) => {
                    let server_pid = *self
                        .name_to_pid
                        .get(server)
                        .ok_or_else(|| self.invalid(pid, format!("unknown server '{server}'")))?;
                    let token = ConnToken(self.next_token);
                    self.next_token += 1;
                    let fd = self.alloc_fd(pid, SimFd::Conn { token });
                    let cpu = self.running_cpu(pid);
                    self.emit(self.now, cpu, EventKind::SockConnect { fd, conn: token });
                    self.procs
                        .get_mut(&pid)
                        .unwrap()
                        .bindings
                        .insert(bind.clone(), Binding::Fd(fd));
                    self.conns.insert(
                        token,
                        Conn {
                            client_pid: pid,
                            client_fd: fd,
                            server_name_pid: server_pid,
                            server_fd: None,
                            established: false,
                            buf_to_server: 0,
                            buf_to_client: 0,
                            client_closed: false,
                            server_closed: false,
                        },
                    );
                    if self.procs[&server_pid].listen_fd.is_some() {
                        self.push(
                            self.now + self.res.connect_latency_us,
                            QueuedKind::Deliver { delivery: Delivery::ConnEstablished { token }, mutated: false },
                        );
                    } else {
                        self.procs
                            .get_mut(&server_pid)
                            .unwrap()
                            .pending_connectors
                            .push(token);
                    }
                    self.do_block(pid, Block::Connecting)?;
                    return Ok(());
                }
                (Action::Connect { .. }, 2) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Connect { .. }, _) => {
                    self.syscall_exit(pid, 0);
                    next_action!();
                }

                (Action::Accept { .. }, 0) => {
                    self.syscall_entry(pid, SyscallId::ACCEPT, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Accept { listen_ref, bind }, 1) => {
                    let listen_fd = self.binding_fd(pid, listen_ref)?;
                    if !matches!(self.procs[&pid].fds.get(&listen_fd), Some(SimFd::Listen)) {
                        return Err(
                            self.invalid(pid, format!("'{listen_ref}' is not listening"))
                        );
                    }
                    if !self.procs[&pid].backlog.is_empty() {
                        self.complete_accept(pid, listen_fd, bind)?;
                        self.syscall_exit(pid, 0);
                        next_action!();
                        continue;
                    }
                    self.do_block(pid, Block::Accepting { listen_fd })?;
                    return Ok(());
                }
                (Action::Accept { .. }, 2) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Accept { listen_ref, bind }, _) => {
                    let listen_fd = self.binding_fd(pid, listen_ref)?;
                    self.complete_accept(pid, listen_fd, bind)?;
                    self.syscall_exit(pid, 0);
                    next_action!();
                }

                (Action::ReadConn { conn_ref, .. }, 0) => {
                    let fd = self.binding_fd(pid, conn_ref)?;
                    self.syscall_entry(pid, SyscallId::READ, fd.0 as u64);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::ReadConn { conn_ref, bytes }, 1) => {
                    let fd = self.binding_fd(pid, conn_ref)?;
                    let token = match self.procs[&pid].fds.get(&fd) {
                        Some(SimFd::Conn { token }) => *token,
                        _ => {
                            return Err(
                                self.invalid(pid, format!("'{conn_ref}' is not a connection"))
                            )
                        }
                    };
                    let cpu = self.running_cpu(pid);
                    self.emit(
                        self.now,
                        cpu,
                        EventKind::FsRead {
                            fd,
                            byte_count: *bytes,
                        },
                    );
                    // Reading the server side of a connection switches the
                    // true serving context to that client.
                    if self.conns[&token].server_name_pid == pid {
                        self.truth_serve(pid, token);
                    }
                    let (available, peer_gone) = {
                        let conn = &self.conns[&token];
                        if conn.client_pid == pid {
                            (conn.buf_to_client, conn.server_closed)
                        } else {
                            (conn.buf_to_server, conn.client_closed)
                        }
                    };
                    if available > 0 {
                        self.consume_conn(pid, token);
                        self.syscall_exit(pid, available as i64);
                        next_action!();
                        continue;
                    }
                    if peer_gone {
                        self.syscall_exit(pid, 0);
                        next_action!();
                        continue;
                    }
                    self.do_block(pid, Block::ReadConn { token, fd })?;
                    return Ok(());
                }
                (Action::ReadConn { .. }, 2) => {
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::ReadConn { conn_ref, .. }, _) => {
                    let fd = self.binding_fd(pid, conn_ref)?;
                    let token = match self.procs[&pid].fds.get(&fd) {
                        Some(SimFd::Conn { token }) => *token,
                        _ => unreachable!("validated at entry"),
                    };
                    self.consume_conn(pid, token);
                    self.syscall_exit(pid, 0);
                    next_action!();
                }

                (Action::Exit, 0) => {
                    self.syscall_entry(pid, SyscallId::EXIT, 0);
                    next_phase!();
                    self.start_step(pid, None, c);
                    return Ok(());
                }
                (Action::Exit, _) => {
                    return self.do_exit(pid);
                }
            }
        }
    }

    fn consume_conn(&mut self, pid: Pid, token: ConnToken) {
        let conn = self.conns.get_mut(&token).unwrap();
        if conn.client_pid == pid {
            conn.buf_to_client = 0;
        } else {
            conn.buf_to_server = 0;
        }
    }

    fn poll_ready(&self, pid: Pid, fds: &[Fd]) -> bool {
        fds.iter().any(|fd| match self.procs[&pid].fds.get(fd) {
            Some(SimFd::Conn { token }) => {
                let conn = &self.conns[token];
                if conn.client_pid == pid {
                    conn.buf_to_client > 0 || conn.server_closed
                } else {
                    conn.buf_to_server > 0 || conn.client_closed
                }
            }
            Some(SimFd::Listen) => !self.procs[&pid].backlog.is_empty(),
            _ => false,
        })
    }

    fn close_conn_side(&mut self, pid: Pid, token: ConnToken) {
        let conn = self.conns.get_mut(&token).unwrap();
        if conn.client_pid == pid {
            conn.client_closed = true;
        } else {
            conn.server_closed = true;
        }
        self.push(
            self.now + 1,
            QueuedKind::Deliver { delivery: Delivery::Hangup { token, closer: pid }, mutated: false },
        );
    }

    fn do_exit(&mut self, pid: Pid) -> Result<(), SimError> {
        let cpu = self.running_cpu(pid);
        self.emit(self.now, cpu, EventKind::ProcExit { code: 0 });
        // Hang up every connection this process holds.
        let conn_tokens: Vec<ConnToken> = self.procs[&pid]
            .fds
            .values()
            .filter_map(|f| match f {
                SimFd::Conn { token } => Some(*token),
                _ => None,
            })
            .collect();
        for token in conn_tokens {
            self.close_conn_side(pid, token);
        }
        // Tell the parent.
        if let Some(parent) = self.procs[&pid].parent {
            if self.procs.contains_key(&parent) {
                self.procs
                    .get_mut(&parent)
                    .unwrap()
                    .exited_children
                    .insert(pid);
                self.push(
                    self.now + 1,
                    QueuedKind::Deliver { delivery: Delivery::ChildExit { parent, child: pid }, mutated: false },
                );
            }
        }
        // Final accounting and the terminal scheduling change.
        self.truth_accrue(pid, self.now);
        let now = self.now;
        {
            let proc = self.procs.get_mut(&pid).unwrap();
            if let Some((kind, entered)) = proc.episode.take() {
                match kind {
                    EpKind::Sys(id) => proc.row.add_syscall_elapsed(id, now - entered),
                    EpKind::Trp(id) => proc.row.add_trap_elapsed(id, now - entered),
                }
            }
            proc.ended_us = Some(now);
        }
        let next = self.pop_runnable_for(cpu);
        let in_pid = next.unwrap_or(Pid(cpu as u32));
        self.emit(
            self.now,
            cpu,
            EventKind::SchedChange {
                in_pid,
                out_pid: pid,
                out_state: OutState::Exited,
            },
        );
        self.procs.get_mut(&pid).unwrap().sched = PSched::Exited;
        self.live_count -= 1;
        self.free_cpu(cpu, in_pid, next.is_some())
    }

    // -- finalization ------------------------------------------------------

    fn finish(mut self) -> Result<SimRun, SimError> {
        let end = self.end_us;
        let pids: Vec<Pid> = self.procs.keys().copied().collect();
        for pid in pids {
            if self.procs[&pid].sched != PSched::Exited {
                self.truth_accrue(pid, end);
            }
        }
        for cpu in 0..self.cpus.len() as u16 {
            self.close_fn_segment(cpu, end);
        }

        let mut truth = GroundTruth {
            irqs: self.irq_truth.clone(),
            ..GroundTruth::default()
        };
        let mut tagged_total = 0u64;
        let mut per_fn: BTreeMap<String, u64> = BTreeMap::new();
        for seg in &self.fn_timeline {
            let d = seg.end_us - seg.start_us;
            tagged_total += d;
            *per_fn.entry(seg.function.clone()).or_insert(0) += d;
        }
        for (name, d) in per_fn {
            truth
                .function_fractions
                .insert(name, d as f64 / tagged_total as f64);
        }
        for proc in self.procs.values_mut() {
            let mut row = proc.row.clone();
            row.elapsed_us = proc.ended_us.unwrap_or(end) - proc.started_us;
            truth.processes.insert(proc.pid, row);
            if let (true, Some(init_cpu_us)) = (proc.listened, proc.server_init) {
                truth.servers.insert(
                    proc.pid,
                    ServerTruth {
                        init_cpu_us,
                        per_client_cpu_us: proc.server_per_client.clone(),
                    },
                );
            }
        }

        let snapshot = Snapshot {
            processes: self
                .procs
                .values()
                .filter(|p| p.parent.is_none())
                .map(|p| SnapshotProcess {
                    pid: p.pid,
                    parent: p.parent,
                    name: p.name.clone(),
                    state: if p.is_idle {
                        SnapState::Running
                    } else {
                        SnapState::Runnable
                    },
                })
                .collect(),
            running: self
                .cpus
                .iter()
                .map(|c| (c.id, Pid(c.id as u32)))
                .collect(),
        };

        let symbols = SymbolTable::new(
            self.fn_addresses
                .iter()
                .map(|(name, &start)| Symbol {
                    name: name.clone(),
                    start_address: start,
                    end_address: start + 64,
                })
                .collect(),
        );

        let events: CpuEventMap = self
            .events
            .into_iter()
            .map(|(cpu, evs)| {
                (
                    cpu,
                    evs.into_iter()
                        .map(|(t, kind)| (sim_base().add_micros(t), kind))
                        .collect(),
                )
            })
            .collect();

        Ok(SimRun {
            seed: self.seed,
            snapshot,
            events,
            truth,
            symbols,
            fn_timeline: self.fn_timeline,
            event_pids: self.event_pids,
            arcs: self.arcs,
            end_us: end,
        })
    }
}

#[derive(Clone, Debug)]
struct WakeCmd {
    pid: Pid,
    source: WaitSource,
    category: WaitCategory,
    timer_expire: bool,
}

fn delivery_irq(delivery: &Delivery) -> IrqId {
    match delivery {
        Delivery::Timer { .. } => IrqId::TIMER,
        _ => IrqId::IO,
    }
}

fn collect_functions<'x>(
    actions: impl Iterator<Item = &'x Action>,
    out: &mut BTreeSet<String>,
) {
    for action in actions {
        match action {
            Action::Compute {
                function: Some(f), ..
            }
            | Action::ServeCompute {
                function: Some(f), ..
            } => {
                out.insert(f.clone());
            }
            Action::Fork { child_actions } => collect_functions(child_actions.iter(), out),
            _ => {}
        }
    }
}
