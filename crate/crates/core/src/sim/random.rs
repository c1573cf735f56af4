//! Seeded random scenario generator. Produces scenarios that always
//! terminate: file waits and sleeps have finite latencies, polls on plain
//! files carry timeouts, forks are paired with waitchild, and the optional
//! client/server pair follows a strict request-response shape.

use crate::scenario::{Action, MapTarget, ProcessSpec, ResourceModel, Scenario};
use crate::sim::SplitMix64;

const PATHS: &[&str] = &[
    "/var/log/messages",
    "/etc/profile",
    "/usr/lib/libc.so",
    "/data/cache.db",
    "/tmp/scratch",
];

/// Builds a deterministic scenario for `seed`.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = SplitMix64::new(seed);
    let mut resources = ResourceModel {
        cpu_count: rng.uniform(1, 2) as u16,
        scheduler_quantum_us: rng.uniform(500, 3000),
        default_file_latency_us: rng.uniform(500, 6000),
        connect_latency_us: rng.uniform(50, 800),
        syscall_cpu_us: rng.uniform(1, 5),
        ..ResourceModel::default()
    };
    for path in PATHS.iter().take(rng.uniform(0, 3) as usize) {
        resources
            .file_latency_us
            .insert((*path).to_string(), rng.uniform(200, 8000));
    }

    let mut processes = Vec::new();
    let worker_count = rng.uniform(1, 3);
    for w in 0..worker_count {
        processes.push(ProcessSpec {
            name: format!("worker{w}"),
            start_delay_us: if rng.chance(40) {
                rng.uniform(100, 5000)
            } else {
                0
            },
            actions: worker_actions(&mut rng, w),
        });
    }
    if rng.chance(50) {
        let serve_us = rng.uniform(300, 3000);
        processes.push(ProcessSpec {
            name: "server".to_string(),
            start_delay_us: 0,
            actions: vec![
                Action::Listen {
                    bind: "ls".to_string(),
                },
                Action::Accept {
                    listen_ref: "ls".to_string(),
                    bind: "c".to_string(),
                },
                Action::ReadConn {
                    conn_ref: "c".to_string(),
                    bytes: 128,
                },
                Action::ServeCompute {
                    duration_us: serve_us,
                    function: Some("serve_request".to_string()),
                    on_behalf_of: None,
                },
                Action::Write {
                    fd_ref: "c".to_string(),
                    bytes: 256,
                },
                Action::Exit,
            ],
        });
        processes.push(ProcessSpec {
            name: "client".to_string(),
            start_delay_us: rng.uniform(0, 2000),
            actions: vec![
                Action::Connect {
                    server: "server".to_string(),
                    bind: "c".to_string(),
                },
                Action::Write {
                    fd_ref: "c".to_string(),
                    bytes: 128,
                },
                Action::Poll {
                    fd_refs: vec!["c".to_string()],
                    timeout_us: 10_000_000,
                },
                Action::ReadConn {
                    conn_ref: "c".to_string(),
                    bytes: 256,
                },
                Action::Exit,
            ],
        });
    }

    Scenario {
        resources,
        processes,
    }
}

fn worker_actions(rng: &mut SplitMix64, worker: u64) -> Vec<Action> {
    let mut actions = Vec::new();
    let mut open_fds: Vec<String> = Vec::new();
    let mut next_handle = 0;
    let steps = rng.uniform(2, 10);
    for _ in 0..steps {
        match rng.uniform(0, 9) {
            0 | 1 => actions.push(Action::Compute {
                duration_us: rng.uniform(50, 8000),
                function: if rng.chance(60) {
                    Some(format!("work{}", rng.uniform(0, 2)))
                } else {
                    None
                },
            }),
            2 => {
                let bind = format!("f{next_handle}");
                next_handle += 1;
                actions.push(Action::Open {
                    path: (*rng.pick(PATHS)).to_string(),
                    bind: bind.clone(),
                });
                open_fds.push(bind);
            }
            3 => {
                if let Some(fd_ref) = pick_opt(rng, &open_fds) {
                    actions.push(Action::Read {
                        fd_ref,
                        bytes: rng.uniform(64, 65536),
                    });
                }
            }
            4 => {
                if let Some(fd_ref) = pick_opt(rng, &open_fds) {
                    actions.push(Action::Write {
                        fd_ref,
                        bytes: rng.uniform(64, 4096),
                    });
                }
            }
            5 => actions.push(Action::Sleep {
                duration_us: rng.uniform(100, 9000),
            }),
            6 => actions.push(Action::StatLike {
                duration_us: rng.uniform(50, 1500),
            }),
            7 => {
                let bind = format!("m{next_handle}");
                next_handle += 1;
                let target = if rng.chance(70) {
                    MapTarget::File {
                        path: (*rng.pick(PATHS)).to_string(),
                    }
                } else {
                    MapTarget::Anonymous
                };
                actions.push(Action::Mmap {
                    target,
                    length: 8192,
                    bind: bind.clone(),
                });
                actions.push(Action::TouchPage {
                    map_ref: bind,
                    offset: rng.uniform(0, 8191),
                });
            }
            8 => {
                if let Some(fd_ref) = pick_opt(rng, &open_fds) {
                    actions.push(Action::Poll {
                        fd_refs: vec![fd_ref],
                        timeout_us: rng.uniform(500, 20000),
                    });
                }
            }
            _ => {
                let child_work = rng.uniform(100, 4000);
                actions.push(Action::Fork {
                    child_actions: vec![
                        Action::Compute {
                            duration_us: child_work,
                            function: Some(format!("child_work{worker}")),
                        },
                        Action::Exit,
                    ],
                });
                actions.push(Action::WaitChild);
            }
        }
    }
    for fd_ref in open_fds {
        actions.push(Action::Close { fd_ref });
    }
    actions.push(Action::Exit);
    actions
}

fn pick_opt(rng: &mut SplitMix64, items: &[String]) -> Option<String> {
    if items.is_empty() {
        None
    } else {
        Some(rng.pick(items).clone())
    }
}
