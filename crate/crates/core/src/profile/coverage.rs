//! Coverage report: per-function line and branch execution percentages
//! with annotated line counts and branch probabilities. A section whose
//! every count is zero was never covered.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// One source line's execution count. Uninstrumented lines carry no
/// counter (declarations, blank lines).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineCount {
    pub line_no: u32,
    pub execution_count: u64,
    pub instrumented: bool,
}

/// One branch site: how often the branch instruction ran and how often
/// the branch was taken.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCount {
    pub line_no: u32,
    pub executed_count: u64,
    pub taken_count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCoverage {
    pub name: String,
    pub lines: Vec<LineCount>,
    pub branches: Vec<BranchCount>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageCounts {
    pub functions: Vec<FunctionCoverage>,
}

fn percent(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Renders the coverage text report.
pub fn coverage_report(counts: &CoverageCounts) -> String {
    let mut out = String::new();
    for (i, func) in counts.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let instrumented = func.lines.iter().filter(|l| l.instrumented).count() as u64;
        let executed = func
            .lines
            .iter()
            .filter(|l| l.instrumented && l.execution_count > 0)
            .count() as u64;
        writeln!(
            out,
            "{:.2}% of {} source lines executed in function {}",
            percent(executed, instrumented),
            instrumented,
            func.name
        )
        .unwrap();
        if !func.branches.is_empty() {
            let total = func.branches.len() as u64;
            let branches_executed =
                func.branches.iter().filter(|b| b.executed_count > 0).count() as u64;
            let branches_taken =
                func.branches.iter().filter(|b| b.taken_count > 0).count() as u64;
            writeln!(
                out,
                "{:.2}% of {} branches executed in function {}",
                percent(branches_executed, total),
                total,
                func.name
            )
            .unwrap();
            writeln!(
                out,
                "{:.2}% of {} branches taken at least once in function {}",
                percent(branches_taken, total),
                total,
                func.name
            )
            .unwrap();
        }
        for line in &func.lines {
            if line.instrumented {
                writeln!(out, "{:>12}  line {}", line.execution_count, line.line_no).unwrap();
            } else {
                writeln!(out, "{:>12}  line {}", "-", line.line_no).unwrap();
            }
            let on_line = func.branches.iter().filter(|b| b.line_no == line.line_no);
            for (branch_index, branch) in on_line.enumerate() {
                if branch.executed_count == 0 {
                    writeln!(out, "branch {branch_index} never executed").unwrap();
                } else {
                    let p = (100.0 * branch.taken_count as f64 / branch.executed_count as f64)
                        .round();
                    writeln!(out, "branch {branch_index} taken = {p}%").unwrap();
                }
            }
        }
    }
    out
}
