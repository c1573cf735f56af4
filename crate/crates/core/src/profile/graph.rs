//! Call-graph report: propagates each function's total time (self plus
//! children) to its callers, proportionally to call counts, processing
//! leaf functions first. Mutually recursive functions are collapsed into
//! a cycle entry that lists callers and callees from outside the cycle;
//! member entries list the arcs within it. The apportionment rests on the
//! usual assumption that calls to a function cost the same on average
//! regardless of the caller.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::profile::{ArcTable, FlatProfile, Scalar};

/// One caller or callee line of an entry: the arc count out of the
/// callee's total incoming calls, and the slice of time it carries.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcShare<S> {
    pub name: String,
    pub calls: u64,
    pub total_calls: u64,
    pub self_s: S,
    pub children_s: S,
    pub within_cycle: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEntry<S> {
    pub name: String,
    /// Index into [`CallGraphReport::cycles`] when this function is a
    /// member of one.
    pub cycle: Option<usize>,
    pub self_s: S,
    /// Time pulled in from callees outside this function's cycle.
    pub children_s: S,
    pub total_s: S,
    /// Total recorded calls into this function.
    pub calls: u64,
    pub callers: Vec<ArcShare<S>>,
    pub callees: Vec<ArcShare<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleEntry<S> {
    pub members: Vec<String>,
    pub self_s: S,
    pub children_s: S,
    pub total_s: S,
    /// Calls into the cycle from outside it.
    pub calls: u64,
    pub callers: Vec<ArcShare<S>>,
    pub callees: Vec<ArcShare<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CallGraphReport<S> {
    pub entries: Vec<GraphEntry<S>>,
    pub cycles: Vec<CycleEntry<S>>,
    /// Arc endpoints that had no sample data (they enter with zero self).
    pub warnings: Vec<String>,
    /// Denominator of the percent column: all sampled time, including
    /// functions without call-count data.
    pub total_s: S,
}

impl<S> CallGraphReport<S> {
    pub fn entry(&self, name: &str) -> Option<&GraphEntry<S>> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Builds the call-graph report from a flat profile and arc counts.
pub fn call_graph<S: Scalar>(flat: &FlatProfile<S>, arcs: &ArcTable) -> CallGraphReport<S> {
    // Node universe: sampled functions plus every arc endpoint.
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut names: Vec<&str> = Vec::new();
    for row in &flat.rows {
        add_node(&mut index, &mut names, &row.name);
    }
    let mut warnings = Vec::new();
    for (caller, callee, _) in arcs.iter() {
        for name in [caller, callee] {
            if !index.contains_key(name) {
                warnings.push(format!("no sample data for {name}; it enters with zero self time"));
                add_node(&mut index, &mut names, name);
            }
        }
    }
    warnings.sort();
    warnings.dedup();

    let n = names.len();
    let mut self_s: Vec<S> = vec![S::zero(); n];
    for row in &flat.rows {
        self_s[index[row.name.as_str()]] = row.self_s.clone();
    }

    // caller -> callee adjacency with counts.
    let mut edges: Vec<(usize, usize, u64)> = arcs
        .iter()
        .map(|(caller, callee, count)| (index[caller], index[callee], count))
        .collect();
    edges.sort();
    let mut out_edges: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n];
    let mut in_calls: Vec<u64> = vec![0; n];
    let mut has_self_arc = vec![false; n];
    for &(u, v, c) in &edges {
        out_edges[u].push((v, c));
        in_calls[v] += c;
        if u == v {
            has_self_arc[u] = true;
        }
    }

    // Strongly connected components, emitted callees-first, which is
    // exactly the leaf-up processing order the propagation needs.
    let sccs = tarjan(n, &out_edges);
    let mut scc_of = vec![0usize; n];
    for (i, scc) in sccs.iter().enumerate() {
        for &v in scc {
            scc_of[v] = i;
        }
    }

    // children_node[v]: time v pulls in from callees outside its scc.
    let mut children_node: Vec<S> = vec![S::zero(); n];
    // Resolved caller rows per node and per cycle, filled while processing.
    let mut callers_of_node: Vec<Vec<ArcShare<S>>> = vec![Vec::new(); n];
    let mut scc_total: Vec<S> = vec![S::zero(); sccs.len()];
    let mut scc_self: Vec<S> = vec![S::zero(); sccs.len()];
    let mut scc_children: Vec<S> = vec![S::zero(); sccs.len()];
    let mut scc_in_calls: Vec<u64> = vec![0; sccs.len()];
    let mut callers_of_scc: Vec<Vec<ArcShare<S>>> = vec![Vec::new(); sccs.len()];

    for (scc_idx, members) in sccs.iter().enumerate() {
        let mut total_self = S::zero();
        let mut total_children = S::zero();
        for &m in members {
            total_self = total_self + self_s[m].clone();
            total_children = total_children + children_node[m].clone();
        }
        let total = total_self.clone() + total_children.clone();
        scc_self[scc_idx] = total_self.clone();
        scc_children[scc_idx] = total_children.clone();
        scc_total[scc_idx] = total.clone();

        // External incoming arcs and their total count.
        let mut external_in: Vec<(usize, usize, u64)> = Vec::new();
        for &(u, v, c) in &edges {
            if scc_of[v] == scc_idx && scc_of[u] != scc_idx {
                external_in.push((u, v, c));
            }
        }
        let total_in: u64 = external_in.iter().map(|&(_, _, c)| c).sum();
        scc_in_calls[scc_idx] = total_in;
        if total_in == 0 {
            continue; // root: keeps its total
        }
        let denom = S::from_count(total_in);
        for &(u, v, c) in &external_in {
            let ratio = S::from_count(c) / denom.clone();
            let share_self = total_self.clone() * ratio.clone();
            let share_children = total_children.clone() * ratio.clone();
            let share_total = total.clone() * ratio;
            children_node[u] = children_node[u].clone() + share_total;
            let share = ArcShare {
                name: names[u].to_string(),
                calls: c,
                total_calls: total_in,
                self_s: share_self,
                children_s: share_children,
                within_cycle: false,
            };
            callers_of_node[v].push(share.clone());
            callers_of_scc[scc_idx].push(share);
        }
    }

    let is_cycle = |scc_idx: usize| {
        sccs[scc_idx].len() > 1 || sccs[scc_idx].iter().any(|&v| has_self_arc[v])
    };

    // Cycle entries, numbered in a stable order (by sorted member names).
    let mut cycle_sccs: Vec<usize> = (0..sccs.len()).filter(|&i| is_cycle(i)).collect();
    let member_names = |scc_idx: usize| -> Vec<String> {
        let mut m: Vec<String> = sccs[scc_idx].iter().map(|&v| names[v].to_string()).collect();
        m.sort();
        m
    };
    cycle_sccs.sort_by_key(|&i| member_names(i));
    let cycle_index_of_scc: BTreeMap<usize, usize> = cycle_sccs
        .iter()
        .enumerate()
        .map(|(ci, &scc)| (scc, ci))
        .collect();

    let mut cycles: Vec<CycleEntry<S>> = Vec::new();
    for &scc_idx in &cycle_sccs {
        let mut callers = callers_of_scc[scc_idx].clone();
        merge_shares(&mut callers);
        // External callees of the cycle: what its members pulled in.
        let mut callees: Vec<ArcShare<S>> = Vec::new();
        for &m in &sccs[scc_idx] {
            for &(v, c) in &out_edges[m] {
                if scc_of[v] != scc_idx {
                    callees.push(callee_share(
                        names[v],
                        c,
                        scc_in_calls[scc_of[v]],
                        &scc_self[scc_of[v]],
                        &scc_children[scc_of[v]],
                    ));
                }
            }
        }
        merge_shares(&mut callees);
        cycles.push(CycleEntry {
            members: member_names(scc_idx),
            self_s: scc_self[scc_idx].clone(),
            children_s: scc_children[scc_idx].clone(),
            total_s: scc_total[scc_idx].clone(),
            calls: scc_in_calls[scc_idx],
            callers,
            callees,
        });
    }

    // Per-function entries.
    let mut entries: Vec<GraphEntry<S>> = Vec::new();
    for v in 0..n {
        let scc_idx = scc_of[v];
        let in_cycle = is_cycle(scc_idx);
        let mut callers = callers_of_node[v].clone();
        merge_shares(&mut callers);
        let mut callees: Vec<ArcShare<S>> = Vec::new();
        for &(w, c) in &out_edges[v] {
            if scc_of[w] == scc_idx {
                continue; // rendered as within-cycle rows below
            }
            callees.push(callee_share(
                names[w],
                c,
                scc_in_calls[scc_of[w]],
                &scc_self[scc_of[w]],
                &scc_children[scc_of[w]],
            ));
        }
        merge_shares(&mut callees);
        if in_cycle {
            // Arcs within the cycle are listed without time shares.
            for &(u, w, c) in &edges {
                if w == v && scc_of[u] == scc_idx {
                    callers.push(within_cycle_share(names[u], c));
                }
                if u == v && scc_of[w] == scc_idx {
                    callees.push(within_cycle_share(names[w], c));
                }
            }
        }
        entries.push(GraphEntry {
            name: names[v].to_string(),
            cycle: cycle_index_of_scc.get(&scc_idx).copied(),
            self_s: self_s[v].clone(),
            children_s: children_node[v].clone(),
            total_s: self_s[v].clone() + children_node[v].clone(),
            calls: in_calls[v],
            callers,
            callees,
        });
    }
    entries.sort_by(|a, b| {
        b.total_s
            .partial_cmp(&a.total_s)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });

    CallGraphReport {
        entries,
        cycles,
        warnings,
        total_s: flat.total_s.clone(),
    }
}

fn add_node<'a>(index: &mut BTreeMap<&'a str, usize>, names: &mut Vec<&'a str>, name: &'a str) {
    if !index.contains_key(name) {
        index.insert(name, names.len());
        names.push(name);
    }
}

fn callee_share<S: Scalar>(
    name: &str,
    calls: u64,
    total_calls: u64,
    callee_self: &S,
    callee_children: &S,
) -> ArcShare<S> {
    let ratio = S::from_count(calls) / S::from_count(total_calls.max(1));
    ArcShare {
        name: name.to_string(),
        calls,
        total_calls,
        self_s: callee_self.clone() * ratio.clone(),
        children_s: callee_children.clone() * ratio,
        within_cycle: false,
    }
}

fn within_cycle_share<S: Scalar>(name: &str, calls: u64) -> ArcShare<S> {
    ArcShare {
        name: name.to_string(),
        calls,
        total_calls: 0,
        self_s: S::zero(),
        children_s: S::zero(),
        within_cycle: true,
    }
}

/// Collapses duplicate rows for the same peer name, summing counts and
/// shares, and orders rows by name.
fn merge_shares<S: Scalar>(shares: &mut Vec<ArcShare<S>>) {
    shares.sort_by(|a, b| a.name.cmp(&b.name).then(a.within_cycle.cmp(&b.within_cycle)));
    let mut merged: Vec<ArcShare<S>> = Vec::new();
    for share in shares.drain(..) {
        match merged.last_mut() {
            Some(last) if last.name == share.name && last.within_cycle == share.within_cycle => {
                last.calls += share.calls;
                last.self_s = last.self_s.clone() + share.self_s;
                last.children_s = last.children_s.clone() + share.children_s;
            }
            _ => merged.push(share),
        }
    }
    *shares = merged;
}

/// Iterative Tarjan strongly-connected components. Components come out
/// callees-before-callers for caller->callee edges.
fn tarjan(n: usize, out_edges: &[Vec<(usize, u64)>]) -> Vec<Vec<usize>> {
    #[derive(Clone)]
    struct NodeState {
        index: Option<u32>,
        lowlink: u32,
        on_stack: bool,
    }
    let mut state = vec![
        NodeState {
            index: None,
            lowlink: 0,
            on_stack: false,
        };
        n
    ];
    let mut next_index = 0u32;
    let mut stack: Vec<usize> = Vec::new();
    let mut sccs: Vec<Vec<usize>> = Vec::new();
    let mut work: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if state[root].index.is_some() {
            continue;
        }
        work.push((root, 0));
        while let Some(&mut (v, ref mut edge_pos)) = work.last_mut() {
            if *edge_pos == 0 {
                state[v].index = Some(next_index);
                state[v].lowlink = next_index;
                next_index += 1;
                stack.push(v);
                state[v].on_stack = true;
            }
            let mut recursed = false;
            while *edge_pos < out_edges[v].len() {
                let (w, _) = out_edges[v][*edge_pos];
                *edge_pos += 1;
                match state[w].index {
                    None => {
                        work.push((w, 0));
                        recursed = true;
                        break;
                    }
                    Some(w_index) => {
                        if state[w].on_stack {
                            state[v].lowlink = state[v].lowlink.min(w_index);
                        }
                    }
                }
            }
            if recursed {
                continue;
            }
            work.pop();
            if let Some(&(parent, _)) = work.last() {
                let v_low = state[v].lowlink;
                state[parent].lowlink = state[parent].lowlink.min(v_low);
            }
            if Some(state[v].lowlink) == state[v].index {
                let mut component = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    state[w].on_stack = false;
                    component.push(w);
                    if w == v {
                        break;
                    }
                }
                component.sort_unstable();
                sccs.push(component);
            }
        }
    }
    sccs
}

/// Text rendering: one block per entry (cycles included), gprof-style,
/// sorted by descending total time.
pub fn render_call_graph<S: Scalar>(report: &CallGraphReport<S>) -> String {
    enum Block<'a, S> {
        Function(&'a GraphEntry<S>),
        Cycle(usize, &'a CycleEntry<S>),
    }
    let mut blocks: Vec<Block<'_, S>> = report.entries.iter().map(Block::Function).collect();
    for (i, cycle) in report.cycles.iter().enumerate() {
        blocks.push(Block::Cycle(i, cycle));
    }
    blocks.sort_by(|a, b| {
        let (ta, na) = match a {
            Block::Function(e) => (&e.total_s, e.name.clone()),
            Block::Cycle(i, c) => (&c.total_s, format!("cycle {}", i + 1)),
        };
        let (tb, nb) = match b {
            Block::Function(e) => (&e.total_s, e.name.clone()),
            Block::Cycle(i, c) => (&c.total_s, format!("cycle {}", i + 1)),
        };
        tb.partial_cmp(ta)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| na.cmp(&nb))
    });

    let mut label: BTreeMap<String, usize> = BTreeMap::new();
    for (i, block) in blocks.iter().enumerate() {
        let name = match block {
            Block::Function(e) => e.name.clone(),
            Block::Cycle(ci, _) => cycle_label(*ci),
        };
        label.insert(name, i + 1);
    }

    let total = report.total_s.display_f64();
    let percent = |t: &S| {
        if total == 0.0 {
            0.0
        } else {
            100.0 * t.display_f64() / total
        }
    };
    let idx_of = |name: &str| label.get(name).copied();

    let mut out = String::new();
    writeln!(out, "index  % time    self  children    called  name").unwrap();
    for block in &blocks {
        writeln!(out, "{}", "-".repeat(72)).unwrap();
        let (name, idx, self_s, children_s, total_s, calls, callers, callees) = match block {
            Block::Function(e) => (
                e.name.clone(),
                idx_of(&e.name).unwrap(),
                &e.self_s,
                &e.children_s,
                &e.total_s,
                e.calls,
                &e.callers,
                &e.callees,
            ),
            Block::Cycle(ci, c) => (
                cycle_label(*ci),
                idx_of(&cycle_label(*ci)).unwrap(),
                &c.self_s,
                &c.children_s,
                &c.total_s,
                c.calls,
                &c.callers,
                &c.callees,
            ),
        };
        let _ = total_s;
        for share in callers {
            write_share(&mut out, share, &idx_of);
        }
        writeln!(
            out,
            "[{idx}] {:>7.1} {:>7.2} {:>9.2} {:>9}  {name} [{idx}]",
            percent(&(self_s.clone() + children_s.clone())),
            self_s.display_f64(),
            children_s.display_f64(),
            calls,
        )
        .unwrap();
        if let Block::Cycle(_, c) = block {
            for member in &c.members {
                writeln!(out, "{:>42}  member {member}", "").unwrap();
            }
        }
        for share in callees {
            write_share(&mut out, share, &idx_of);
        }
    }
    if !report.warnings.is_empty() {
        writeln!(out, "{}", "-".repeat(72)).unwrap();
        for warning in &report.warnings {
            writeln!(out, "note: {warning}").unwrap();
        }
    }
    out
}

fn cycle_label(ci: usize) -> String {
    format!("<cycle {} as a whole>", ci + 1)
}

fn write_share<S: Scalar>(
    out: &mut String,
    share: &ArcShare<S>,
    idx_of: &dyn Fn(&str) -> Option<usize>,
) {
    let idx = idx_of(&share.name)
        .map(|i| format!(" [{i}]"))
        .unwrap_or_default();
    if share.within_cycle {
        writeln!(
            out,
            "{:>15} {:>9} {:>9}      {}{} <within cycle>",
            "", "", share.calls, share.name, idx
        )
        .unwrap();
    } else {
        writeln!(
            out,
            "{:>15.2} {:>9.2} {:>7}/{:<7}  {}{}",
            share.self_s.display_f64(),
            share.children_s.display_f64(),
            share.calls,
            share.total_calls,
            share.name,
            idx
        )
        .unwrap();
    }
}
