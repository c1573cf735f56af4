//! Encode/decode closure properties for the binary trace format.

use std::collections::BTreeMap;

use proptest::prelude::*;

use tracekit_core::event::{EventKind, MmapBacking, OutState, WaitSource};
use tracekit_core::ids::{ConnToken, Fd, IrqId, Pid, SyscallId, TrapId};
use tracekit_core::time::Timestamp;
use tracekit_core::trace::{
    decode_trace, encode_trace, CpuEventMap, SnapState, Snapshot, SnapshotProcess, TraceFile,
};

fn arb_event() -> impl Strategy<Value = EventKind> {
    prop_oneof![
        (any::<u32>(), any::<u32>(), 0u8..3).prop_map(|(a, b, s)| EventKind::SchedChange {
            in_pid: Pid(a),
            out_pid: Pid(b),
            out_state: match s {
                0 => OutState::Runnable,
                1 => OutState::Blocked,
                _ => OutState::Exited,
            },
        }),
        (any::<u32>(), 0u8..4, any::<u32>()).prop_map(|(p, tag, x)| EventKind::WakeUp {
            pid: Pid(p),
            source: match tag {
                0 => WaitSource::File { fd: Fd(x) },
                1 => WaitSource::Process { pid: Pid(x) },
                2 => WaitSource::Timer,
                _ => WaitSource::Device,
            },
        }),
        (any::<u16>(), any::<u64>()).prop_map(|(id, arg)| EventKind::SyscallEntry {
            syscall: SyscallId(id),
            arg,
        }),
        any::<i64>().prop_map(|return_value| EventKind::SyscallExit { return_value }),
        (any::<u16>(), any::<u64>()).prop_map(|(t, a)| EventKind::TrapEntry {
            trap: TrapId(t),
            fault_address: a,
        }),
        Just(EventKind::TrapExit),
        (any::<u32>(), "[a-z/._-]{0,24}").prop_map(|(fd, path)| EventKind::FsOpen {
            fd: Fd(fd),
            path,
        }),
        any::<u32>().prop_map(|fd| EventKind::FsClose { fd: Fd(fd) }),
        (any::<u32>(), any::<u64>()).prop_map(|(fd, n)| EventKind::FsRead {
            fd: Fd(fd),
            byte_count: n,
        }),
        (any::<u32>(), any::<u64>()).prop_map(|(fd, n)| EventKind::FsWrite {
            fd: Fd(fd),
            byte_count: n,
        }),
        any::<u32>().prop_map(|fd| EventKind::FsPoll { fd: Fd(fd) }),
        any::<u64>().prop_map(|timeout_us| EventKind::FsPollTimeout { timeout_us }),
        "[a-z]{0,12}".prop_map(|name| EventKind::FsExec { name }),
        (any::<u64>(), any::<u64>(), proptest::option::of(any::<u32>())).prop_map(
            |(start, len, fd)| EventKind::MemMmap {
                start_address: start,
                length: len,
                backing: match fd {
                    Some(fd) => MmapBacking::File { fd: Fd(fd) },
                    None => MmapBacking::Anonymous,
                },
            }
        ),
        any::<u64>().prop_map(|a| EventKind::MemMunmap { start_address: a }),
        any::<u32>().prop_map(|fd| EventKind::SockListen { fd: Fd(fd) }),
        (any::<u32>(), any::<u64>()).prop_map(|(fd, c)| EventKind::SockConnect {
            fd: Fd(fd),
            conn: ConnToken(c),
        }),
        (any::<u32>(), any::<u32>(), any::<u64>()).prop_map(|(l, n, c)| EventKind::SockAccept {
            listen_fd: Fd(l),
            new_fd: Fd(n),
            conn: ConnToken(c),
        }),
        any::<u32>().prop_map(|p| EventKind::ProcFork { child_pid: Pid(p) }),
        any::<i32>().prop_map(|code| EventKind::ProcExit { code }),
        any::<u32>().prop_map(|p| EventKind::ProcWaitpid { target_pid: Pid(p) }),
        (any::<u32>(), 0u32..1_000_000).prop_map(|(s, us)| EventKind::TimerSet {
            expiry: Timestamp::new(s as u64, us),
        }),
        any::<u32>().prop_map(|p| EventKind::TimerExpire { pid: Pid(p) }),
        any::<u16>().prop_map(|irq| EventKind::IrqEntry { irq: IrqId(irq) }),
        Just(EventKind::IrqExit),
        any::<u64>().prop_map(|a| EventKind::Sample {
            instruction_address: a,
        }),
    ]
}

fn arb_trace_input() -> impl Strategy<Value = (Snapshot, CpuEventMap)> {
    let snapshot = (1u32..5, 0u16..3).prop_map(|(nprocs, extra_cpus)| {
        let processes: Vec<SnapshotProcess> = (0..nprocs)
            .map(|i| SnapshotProcess {
                pid: Pid(100 + i),
                parent: if i > 0 { Some(Pid(100)) } else { None },
                name: format!("proc{i}"),
                state: if i as u16 <= extra_cpus {
                    SnapState::Running
                } else {
                    SnapState::Runnable
                },
            })
            .collect();
        let running: BTreeMap<u16, Pid> = processes
            .iter()
            .filter(|p| p.state == SnapState::Running)
            .enumerate()
            .map(|(cpu, p)| (cpu as u16, p.pid))
            .collect();
        Snapshot { processes, running }
    });
    let events = proptest::collection::btree_map(
        0u16..3,
        proptest::collection::vec((0u64..200_000, arb_event()), 0..40),
        0..3,
    )
    .prop_map(|mut map: BTreeMap<u16, Vec<(u64, EventKind)>>| {
        let mut out = CpuEventMap::new();
        for (cpu, evs) in map.iter_mut() {
            evs.sort_by_key(|(t, _)| *t);
            out.insert(
                *cpu,
                evs.iter()
                    .map(|(t, k)| (Timestamp::new(1_000, 0).add_micros(*t), k.clone()))
                    .collect(),
            );
        }
        out
    });
    (snapshot, events)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Encode -> decode returns the inputs; re-encoding is byte-identical.
    #[test]
    fn roundtrip_is_exact((snapshot, events) in arb_trace_input(), capacity in 1usize..80) {
        let bytes = encode_trace(&snapshot, &events, capacity).unwrap();
        let (snap2, events2) = decode_trace(&bytes).unwrap();
        prop_assert_eq!(&snap2, &snapshot);
        // Cpus with no events vanish from the block list; compare content.
        for (cpu, evs) in &events {
            if evs.is_empty() {
                prop_assert!(!events2.contains_key(cpu));
            } else {
                prop_assert_eq!(&events2[cpu], evs);
            }
        }
        let trace = TraceFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(trace.to_bytes(), bytes);
    }

    /// Decoded absolute timestamps never decrease within a cpu.
    #[test]
    fn decoded_streams_are_monotonic((snapshot, events) in arb_trace_input(), capacity in 1usize..16) {
        let bytes = encode_trace(&snapshot, &events, capacity).unwrap();
        let (_, events2) = decode_trace(&bytes).unwrap();
        for evs in events2.values() {
            for pair in evs.windows(2) {
                prop_assert!(pair[0].0 <= pair[1].0);
            }
        }
    }
}

#[test]
fn five_hundred_events_at_capacity_64_make_8_blocks() {
    let snapshot = Snapshot {
        processes: vec![SnapshotProcess {
            pid: Pid(1),
            parent: None,
            name: "p".to_string(),
            state: SnapState::Running,
        }],
        running: [(0u16, Pid(1))].into_iter().collect(),
    };
    // Deterministic pseudo-random events, all on one cpu, closely spaced
    // so no delta overflow interferes with the capacity split.
    let mut events = CpuEventMap::new();
    let mut t = 0u64;
    let mut stream = Vec::new();
    for i in 0..500u64 {
        t += (i * 37) % 50;
        let kind = match i % 5 {
            0 => EventKind::SyscallEntry {
                syscall: SyscallId((i % 17) as u16),
                arg: i,
            },
            1 => EventKind::SyscallExit {
                return_value: i as i64,
            },
            2 => EventKind::FsRead {
                fd: Fd((i % 7) as u32),
                byte_count: i * 13,
            },
            3 => EventKind::Sample {
                instruction_address: 0x1000 + i,
            },
            _ => EventKind::IrqExit,
        };
        stream.push((Timestamp::new(500, 0).add_micros(t), kind));
    }
    events.insert(0, stream);
    let bytes = encode_trace(&snapshot, &events, 64).unwrap();
    let trace = TraceFile::from_bytes(&bytes).unwrap();
    assert_eq!(trace.blocks.len(), 8, "500 events over capacity 64");
    assert_eq!(trace.event_count(), 500);
    let (_, decoded) = decode_trace(&bytes).unwrap();
    assert_eq!(decoded[&0], events[&0]);
}
