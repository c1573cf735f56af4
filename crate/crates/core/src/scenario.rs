//! Workload scenario model and its line-oriented text format.
//!
//! A scenario declares resource parameters and a list of processes, each
//! with an ordered action program. Symbolic names bound with `as <name>`
//! refer to descriptors, connections, and mappings in later actions; a
//! forked child sees the names its parent had bound before the fork.
//!
//! ```text
//! cpus 1
//! quantum 1000
//! file-latency default 4000
//! file-latency /opt/galeon/galeon-bin 9000
//!
//! process app
//!   open /etc/galeonrc as f1
//!   read f1 4096
//!   close f1
//!   fork {
//!     compute 2000 fn child_setup
//!     exit
//!   }
//!   waitchild
//!   exit
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Tunable costs and latencies of the simulated machine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceModel {
    pub cpu_count: u16,
    pub scheduler_quantum_us: u64,
    pub default_file_latency_us: u64,
    /// Per-path overrides of the read/fault latency.
    pub file_latency_us: BTreeMap<String, u64>,
    pub connect_latency_us: u64,
    /// In-kernel CPU cost charged on each side of a syscall.
    pub syscall_cpu_us: u64,
    pub fork_latency_us: u64,
    pub anon_fault_latency_us: u64,
}

impl Default for ResourceModel {
    fn default() -> Self {
        ResourceModel {
            cpu_count: 1,
            scheduler_quantum_us: 1000,
            default_file_latency_us: 4000,
            file_latency_us: BTreeMap::new(),
            connect_latency_us: 300,
            syscall_cpu_us: 2,
            fork_latency_us: 2,
            anon_fault_latency_us: 50,
        }
    }
}

impl ResourceModel {
    pub fn file_latency(&self, path: &str) -> u64 {
        *self
            .file_latency_us
            .get(path)
            .unwrap_or(&self.default_file_latency_us)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.cpu_count == 0 {
            return Err("cpu count must be at least 1".into());
        }
        let latencies = [
            self.scheduler_quantum_us,
            self.default_file_latency_us,
            self.connect_latency_us,
            self.fork_latency_us,
            self.anon_fault_latency_us,
        ];
        if latencies.contains(&0) || self.file_latency_us.values().any(|&l| l == 0) {
            return Err("latencies must be positive".into());
        }
        Ok(())
    }
}

/// What an mmap action maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapTarget {
    File { path: String },
    Anonymous,
}

/// One step of a process program. Symbolic references (`fd_ref`,
/// `conn_ref`, `map_ref`) name a binding introduced by an earlier
/// `open`/`connect`/`accept`/`listen`/`mmap ... as <name>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Burn CPU in user mode, optionally tagged as a synthetic function
    /// for the sampling profiler.
    Compute {
        duration_us: u64,
        function: Option<String>,
    },
    Open {
        path: String,
        bind: String,
    },
    Close {
        fd_ref: String,
    },
    Read {
        fd_ref: String,
        bytes: u64,
    },
    Write {
        fd_ref: String,
        bytes: u64,
    },
    Mmap {
        target: MapTarget,
        length: u64,
        bind: String,
    },
    /// Touch a page of a mapping, faulting it in from its backing store.
    TouchPage {
        map_ref: String,
        offset: u64,
    },
    Poll {
        fd_refs: Vec<String>,
        /// 0 means no timeout.
        timeout_us: u64,
    },
    Sleep {
        duration_us: u64,
    },
    Fork {
        child_actions: Vec<Action>,
    },
    WaitChild,
    /// Generic blocking syscall of fixed duration, reported as stat.
    StatLike {
        duration_us: u64,
    },
    Listen {
        bind: String,
    },
    Connect {
        server: String,
        bind: String,
    },
    Accept {
        listen_ref: String,
        bind: String,
    },
    ReadConn {
        conn_ref: String,
        bytes: u64,
    },
    /// Server-side work. `on_behalf_of` names the connection whose client
    /// truly owns this work in the ground truth; when absent the most
    /// recently read or accepted connection owns it.
    ServeCompute {
        duration_us: u64,
        function: Option<String>,
        on_behalf_of: Option<String>,
    },
    Exit,
}

/// One declared process.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub name: String,
    pub start_delay_us: u64,
    pub actions: Vec<Action>,
}

/// A complete workload description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub resources: ResourceModel,
    pub processes: Vec<ProcessSpec>,
}

#[derive(Debug, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Parses the scenario text format.
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    Parser::new(text).run()
}

struct Parser<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

struct Scope {
    names: HashSet<String>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Parser<'a> {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Parser { lines, pos: 0 }
    }

    fn run(mut self) -> Result<Scenario, ParseError> {
        let mut resources = ResourceModel::default();
        let mut processes: Vec<ProcessSpec> = Vec::new();
        while let Some(&(line_no, line)) = self.lines.get(self.pos) {
            let mut words = line.split_whitespace();
            let keyword = words.next().unwrap();
            match keyword {
                "cpus" => {
                    resources.cpu_count = self.number(line_no, words.next())? as u16;
                    self.pos += 1;
                }
                "quantum" => {
                    resources.scheduler_quantum_us = self.number(line_no, words.next())?;
                    self.pos += 1;
                }
                "file-latency" => {
                    let target = words.next().ok_or_else(|| {
                        err(line_no, "file-latency needs a path or 'default'")
                    })?;
                    let value = self.number(line_no, words.next())?;
                    if target == "default" {
                        resources.default_file_latency_us = value;
                    } else {
                        resources.file_latency_us.insert(target.to_string(), value);
                    }
                    self.pos += 1;
                }
                "connect-latency" => {
                    resources.connect_latency_us = self.number(line_no, words.next())?;
                    self.pos += 1;
                }
                "syscall-cost" => {
                    resources.syscall_cpu_us = self.number(line_no, words.next())?;
                    self.pos += 1;
                }
                "fork-latency" => {
                    resources.fork_latency_us = self.number(line_no, words.next())?;
                    self.pos += 1;
                }
                "anon-fault-latency" => {
                    resources.anon_fault_latency_us = self.number(line_no, words.next())?;
                    self.pos += 1;
                }
                "process" => {
                    let name = words
                        .next()
                        .ok_or_else(|| err(line_no, "process needs a name"))?
                        .to_string();
                    if processes.iter().any(|p| p.name == name) {
                        return Err(err(line_no, &format!("duplicate process name '{name}'")));
                    }
                    let mut start_delay_us = 0;
                    if let Some(word) = words.next() {
                        if word != "delay" {
                            return Err(err(line_no, &format!("unexpected token '{word}'")));
                        }
                        start_delay_us = self.number(line_no, words.next())?;
                    }
                    self.pos += 1;
                    let mut scope = Scope {
                        names: HashSet::new(),
                    };
                    let actions = self.actions(&mut scope, true)?;
                    processes.push(ProcessSpec {
                        name,
                        start_delay_us,
                        actions,
                    });
                }
                other => {
                    return Err(err(line_no, &format!("unknown keyword '{other}'")));
                }
            }
        }
        if processes.is_empty() {
            return Err(err(0, "scenario declares no processes"));
        }
        let process_names: HashSet<&str> =
            processes.iter().map(|p| p.name.as_str()).collect();
        for proc in &processes {
            check_connect_targets(&proc.actions, &process_names)?;
        }
        resources
            .validate()
            .map_err(|message| ParseError { line: 0, message })?;
        Ok(Scenario {
            resources,
            processes,
        })
    }

    /// Parses action lines until the next `process` header (top level) or a
    /// closing `}` (inside a fork body).
    fn actions(&mut self, scope: &mut Scope, top_level: bool) -> Result<Vec<Action>, ParseError> {
        let mut actions = Vec::new();
        while let Some(&(line_no, line)) = self.lines.get(self.pos) {
            if top_level && line.starts_with("process ") {
                break;
            }
            if line == "}" {
                if top_level {
                    return Err(err(line_no, "unmatched '}'"));
                }
                break;
            }
            self.pos += 1;
            actions.push(self.action(line_no, line, scope)?);
        }
        Ok(actions)
    }

    fn action(
        &mut self,
        line_no: usize,
        line: &str,
        scope: &mut Scope,
    ) -> Result<Action, ParseError> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let action = match words[0] {
            "compute" | "servecompute" => {
                let duration_us = self.number(line_no, words.get(1).copied())?;
                let mut function = None;
                let mut on_behalf_of = None;
                let mut i = 2;
                while i < words.len() {
                    match words[i] {
                        "fn" => {
                            function = Some(
                                words
                                    .get(i + 1)
                                    .ok_or_else(|| err(line_no, "fn needs a name"))?
                                    .to_string(),
                            );
                            i += 2;
                        }
                        "for" if words[0] == "servecompute" => {
                            let name = words
                                .get(i + 1)
                                .ok_or_else(|| err(line_no, "for needs a connection name"))?;
                            self.resolve(line_no, scope, name)?;
                            on_behalf_of = Some(name.to_string());
                            i += 2;
                        }
                        other => {
                            return Err(err(line_no, &format!("unexpected token '{other}'")))
                        }
                    }
                }
                if words[0] == "compute" {
                    Action::Compute {
                        duration_us,
                        function,
                    }
                } else {
                    Action::ServeCompute {
                        duration_us,
                        function,
                        on_behalf_of,
                    }
                }
            }
            "open" => {
                let path = words
                    .get(1)
                    .ok_or_else(|| err(line_no, "open needs a path"))?
                    .to_string();
                let bind = self.bind_name(line_no, &words, 2, scope)?;
                Action::Open { path, bind }
            }
            "close" => Action::Close {
                fd_ref: self.reference(line_no, words.get(1).copied(), scope)?,
            },
            "read" => Action::Read {
                fd_ref: self.reference(line_no, words.get(1).copied(), scope)?,
                bytes: self.number(line_no, words.get(2).copied())?,
            },
            "write" => Action::Write {
                fd_ref: self.reference(line_no, words.get(1).copied(), scope)?,
                bytes: self.number(line_no, words.get(2).copied())?,
            },
            "mmap" => {
                let target = words
                    .get(1)
                    .ok_or_else(|| err(line_no, "mmap needs a path or 'anon'"))?;
                let target = if *target == "anon" {
                    MapTarget::Anonymous
                } else {
                    MapTarget::File {
                        path: target.to_string(),
                    }
                };
                let length = self.number(line_no, words.get(2).copied())?;
                let bind = self.bind_name(line_no, &words, 3, scope)?;
                Action::Mmap {
                    target,
                    length,
                    bind,
                }
            }
            "touchpage" => Action::TouchPage {
                map_ref: self.reference(line_no, words.get(1).copied(), scope)?,
                offset: self.number(line_no, words.get(2).copied())?,
            },
            "poll" => {
                let mut fd_refs = Vec::new();
                let mut timeout_us = 0;
                let mut i = 1;
                while i < words.len() {
                    if words[i] == "timeout" {
                        timeout_us = self.number(line_no, words.get(i + 1).copied())?;
                        i += 2;
                    } else {
                        fd_refs.push(self.reference(line_no, Some(words[i]), scope)?);
                        i += 1;
                    }
                }
                Action::Poll {
                    fd_refs,
                    timeout_us,
                }
            }
            "sleep" => Action::Sleep {
                duration_us: self.number(line_no, words.get(1).copied())?,
            },
            "fork" => {
                if words.get(1) != Some(&"{") {
                    return Err(err(line_no, "fork must be followed by '{'"));
                }
                // The child inherits the parent's bindings at the fork
                // point; names it binds afterwards stay its own.
                let mut child_scope = Scope {
                    names: scope.names.clone(),
                };
                let child_actions = self.actions(&mut child_scope, false)?;
                match self.lines.get(self.pos) {
                    Some(&(_, "}")) => self.pos += 1,
                    _ => return Err(err(line_no, "fork body not closed with '}'")),
                }
                Action::Fork { child_actions }
            }
            "waitchild" => Action::WaitChild,
            "statlike" => Action::StatLike {
                duration_us: self.number(line_no, words.get(1).copied())?,
            },
            "listen" => Action::Listen {
                bind: self.bind_name(line_no, &words, 1, scope)?,
            },
            "connect" => {
                let server = words
                    .get(1)
                    .ok_or_else(|| err(line_no, "connect needs a server process name"))?
                    .to_string();
                let bind = self.bind_name(line_no, &words, 2, scope)?;
                Action::Connect { server, bind }
            }
            "accept" => {
                let listen_ref = self.reference(line_no, words.get(1).copied(), scope)?;
                let bind = self.bind_name(line_no, &words, 2, scope)?;
                Action::Accept { listen_ref, bind }
            }
            "readconn" => Action::ReadConn {
                conn_ref: self.reference(line_no, words.get(1).copied(), scope)?,
                bytes: self.number(line_no, words.get(2).copied())?,
            },
            "exit" => Action::Exit,
            other => return Err(err(line_no, &format!("unknown action '{other}'"))),
        };
        Ok(action)
    }

    fn number(&self, line_no: usize, word: Option<&str>) -> Result<u64, ParseError> {
        let word = word.ok_or_else(|| err(line_no, "missing number"))?;
        word.parse()
            .map_err(|_| err(line_no, &format!("malformed number '{word}'")))
    }

    fn bind_name(
        &self,
        line_no: usize,
        words: &[&str],
        at: usize,
        scope: &mut Scope,
    ) -> Result<String, ParseError> {
        if words.get(at) != Some(&"as") {
            return Err(err(line_no, "expected 'as <name>'"));
        }
        let name = words
            .get(at + 1)
            .ok_or_else(|| err(line_no, "expected a name after 'as'"))?;
        if words.len() > at + 2 {
            return Err(err(line_no, &format!("unexpected token '{}'", words[at + 2])));
        }
        scope.names.insert(name.to_string());
        Ok(name.to_string())
    }

    fn reference(
        &self,
        line_no: usize,
        word: Option<&str>,
        scope: &Scope,
    ) -> Result<String, ParseError> {
        let word = word.ok_or_else(|| err(line_no, "missing reference"))?;
        self.resolve(line_no, scope, word)?;
        Ok(word.to_string())
    }

    fn resolve(&self, line_no: usize, scope: &Scope, name: &str) -> Result<(), ParseError> {
        if scope.names.contains(name) {
            Ok(())
        } else {
            Err(err(line_no, &format!("reference to undeclared name '{name}'")))
        }
    }
}

fn check_connect_targets(
    actions: &[Action],
    process_names: &HashSet<&str>,
) -> Result<(), ParseError> {
    for action in actions {
        match action {
            Action::Connect { server, .. } => {
                if !process_names.contains(server.as_str()) {
                    return Err(ParseError {
                        line: 0,
                        message: format!("connect target '{server}' is not a declared process"),
                    });
                }
            }
            Action::Fork { child_actions } => check_connect_targets(child_actions, process_names)?,
            _ => {}
        }
    }
    Ok(())
}

fn err(line: usize, message: &str) -> ParseError {
    ParseError {
        line,
        message: message.to_string(),
    }
}
