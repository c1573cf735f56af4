//! Server detection and per-client CPU attribution.
//!
//! A process counts as a server once it has accepted a connection on a
//! socket it listens on. Its running time before the first accept is the
//! initialization phase; afterwards every running microsecond is charged
//! to the current client, which switches when the server accepts a
//! connection or reads from one of its accepted connections. The heuristic
//! deliberately does not model request batching: when a server defers
//! buffered requests and executes them after reading one more client, that
//! last client is overcharged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::event::EventKind;
use crate::ids::{ConnToken, Fd, Pid};
use crate::replay::{AttributedEvent, ConnectionRegistry, ReplayError, ReplayResult};
use crate::time::Timestamp;
use crate::trace::Snapshot;

/// Per-client decomposition of one server's CPU time.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerProfile {
    pub server_pid: Pid,
    pub name: String,
    pub init_cpu_us: u64,
    pub per_client_cpu_us: BTreeMap<Pid, u64>,
    /// Client the server would charge next (state at end of trace).
    pub current_client: Option<Pid>,
}

impl ServerProfile {
    pub fn total_cpu_us(&self) -> u64 {
        self.init_cpu_us + self.per_client_cpu_us.values().sum::<u64>()
    }
}

/// A pid is a server iff it listened and accepted at least one
/// connection; exactly those pids appear as the server end of a
/// registered connection.
pub fn detect_servers(replay: &ReplayResult) -> BTreeSet<Pid> {
    replay
        .connections
        .connections
        .values()
        .filter_map(|ends| ends.server_pid)
        .collect()
}

#[derive(Clone, Copy)]
enum SockSide {
    ServerSide(ConnToken),
    ClientSide,
}

struct ServerWalk {
    profile: ServerProfile,
    running_since: Option<Timestamp>,
    sockets: BTreeMap<Fd, SockSide>,
}

impl ServerWalk {
    fn accrue(&mut self, upto: Timestamp) {
        let Some(since) = self.running_since else {
            return;
        };
        let dt = upto.micros_since(since);
        self.running_since = Some(upto);
        if dt == 0 {
            return;
        }
        match self.profile.current_client {
            Some(client) => {
                *self.profile.per_client_cpu_us.entry(client).or_insert(0) += dt
            }
            None => self.profile.init_cpu_us += dt,
        }
    }
}

/// Splits each named server's running time into init and per-client
/// components by walking its running intervals in time order.
pub fn attribute_cpu(
    snapshot: &Snapshot,
    replay: &ReplayResult,
    events: &[AttributedEvent],
    servers: &BTreeSet<Pid>,
) -> Result<BTreeMap<Pid, ServerProfile>, ReplayError> {
    let registry: &ConnectionRegistry = &replay.connections;
    let mut walks: BTreeMap<Pid, ServerWalk> = servers
        .iter()
        .map(|&pid| {
            let name = replay
                .processes
                .get(&pid)
                .map(|p| p.name.clone())
                .unwrap_or_default();
            (
                pid,
                ServerWalk {
                    profile: ServerProfile {
                        server_pid: pid,
                        name,
                        ..ServerProfile::default()
                    },
                    running_since: None,
                    sockets: BTreeMap::new(),
                },
            )
        })
        .collect();
    for &pid in snapshot.running.values() {
        if let Some(walk) = walks.get_mut(&pid) {
            walk.running_since = events.first().map(|e| e.ts);
        }
    }

    for ev in events {
        match &ev.kind {
            EventKind::SchedChange { in_pid, out_pid, .. } => {
                if let Some(walk) = walks.get_mut(out_pid) {
                    walk.accrue(ev.ts);
                    walk.running_since = None;
                }
                if let Some(walk) = walks.get_mut(in_pid) {
                    walk.running_since = Some(ev.ts);
                }
            }
            EventKind::SockConnect { fd, .. } => {
                if let Some(walk) = walks.get_mut(&ev.pid) {
                    walk.sockets.insert(*fd, SockSide::ClientSide);
                }
            }
            EventKind::SockAccept { new_fd, conn, .. } => {
                if let Some(walk) = walks.get_mut(&ev.pid) {
                    walk.sockets.insert(*new_fd, SockSide::ServerSide(*conn));
                    let ends =
                        registry
                            .get(*conn)
                            .ok_or(ReplayError::BadConnection {
                                conn: *conn,
                                at: ev.ts,
                                context: "accepted but never registered",
                            })?;
                    walk.accrue(ev.ts);
                    walk.profile.current_client = Some(ends.client_pid);
                }
            }
            EventKind::FsRead { fd, .. } => {
                if let Some(walk) = walks.get_mut(&ev.pid) {
                    // Only reads of connections this server accepted switch
                    // the client; reads of its own outgoing connections or
                    // plain files do not.
                    if let Some(SockSide::ServerSide(conn)) = walk.sockets.get(fd).copied() {
                        let ends =
                            registry
                                .get(conn)
                                .ok_or(ReplayError::BadConnection {
                                    conn,
                                    at: ev.ts,
                                    context: "read with no registered connection",
                                })?;
                        walk.accrue(ev.ts);
                        walk.profile.current_client = Some(ends.client_pid);
                    }
                }
            }
            EventKind::FsClose { fd } => {
                if let Some(walk) = walks.get_mut(&ev.pid) {
                    walk.sockets.remove(fd);
                }
            }
            _ => {}
        }
    }
    if let Some(last) = events.last() {
        for walk in walks.values_mut() {
            walk.accrue(last.ts);
        }
    }
    Ok(walks
        .into_iter()
        .map(|(pid, walk)| (pid, walk.profile))
        .collect())
}

/// Text report: one block per server, clients by descending CPU.
pub fn render_attribution(profiles: &BTreeMap<Pid, ServerProfile>) -> String {
    let mut out = String::new();
    for profile in profiles.values() {
        writeln!(out, "Server {} {}", profile.server_pid, profile.name).unwrap();
        writeln!(out, "Init {}", secs(profile.init_cpu_us)).unwrap();
        let mut clients: Vec<(Pid, u64)> = profile
            .per_client_cpu_us
            .iter()
            .map(|(&pid, &us)| (pid, us))
            .collect();
        clients.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (pid, us) in clients {
            writeln!(out, "Client-{pid} {}", secs(us)).unwrap();
        }
        writeln!(out).unwrap();
    }
    out
}

fn secs(us: u64) -> String {
    format!("{}.{:06}", us / 1_000_000, us % 1_000_000)
}
