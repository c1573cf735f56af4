//! Properties of the profile reductions: time conservation through
//! call-graph propagation, exact apportionment ratios under a rational
//! scalar, scale invariance of the flat profile, and coverage percentages
//! against brute-force recomputation.

// The rational scalar is Copy, but the assertions mirror how generic
// callers use the Scalar trait, which only assumes Clone.
#![allow(clippy::clone_on_copy)]

use num_rational::Ratio;
use proptest::prelude::*;

use tracekit_core::profile::{
    call_graph, coverage_report, flat_profile, ArcTable, BranchCount, CoverageCounts,
    FunctionCoverage, LineCount, SampleHistogram, Symbol, SymbolTable,
};

type Exact = Ratio<i64>;

fn symbols(n: usize) -> SymbolTable {
    SymbolTable::new(
        (0..n)
            .map(|i| Symbol {
                name: format!("fn{i:02}"),
                start_address: i as u64 * 64,
                end_address: (i as u64 + 1) * 64,
            })
            .collect(),
    )
}

fn histogram_f64(samples: &[u64]) -> SampleHistogram<f64> {
    let mut hist = SampleHistogram::new(0, 4, samples.len() * 16, 0.01);
    for (i, &count) in samples.iter().enumerate() {
        for _ in 0..count {
            hist.record_sample(i as u64 * 64).unwrap();
        }
    }
    hist
}

fn histogram_exact(samples: &[u64]) -> SampleHistogram<Exact> {
    let mut hist = SampleHistogram::new(0, 4, samples.len() * 16, Ratio::new(1, 100));
    for (i, &count) in samples.iter().enumerate() {
        for _ in 0..count {
            hist.record_sample(i as u64 * 64).unwrap();
        }
    }
    hist
}

/// Arc sets over `n` functions whose edges only go from lower to higher
/// index (a DAG), plus optionally a back edge to close a cycle.
fn arb_graph(n: usize) -> impl Strategy<Value = (Vec<u64>, Vec<(usize, usize, u64)>, bool)> {
    (
        proptest::collection::vec(0u64..200, n),
        proptest::collection::vec((0usize..n, 0usize..n, 1u64..50), 0..12),
        any::<bool>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// The roots of the condensation keep all the time: summed over
    /// root entries, total == sum of all self times.
    #[test]
    fn propagation_conserves_time((samples, raw_edges, add_cycle) in arb_graph(6)) {
        let flat = flat_profile(&histogram_f64(&samples), &symbols(6), None);
        let mut arcs = ArcTable::new();
        for (a, b, count) in &raw_edges {
            let (a, b) = (*a.min(b), *a.max(b));
            if a != b {
                arcs.add_arc(&format!("fn{a:02}"), &format!("fn{b:02}"), *count);
            }
        }
        if add_cycle {
            arcs.add_arc("fn04", "fn02", 3);
            arcs.add_arc("fn02", "fn04", 2);
        }
        let report = call_graph(&flat, &arcs);
        let total_self: f64 = report.entries.iter().map(|e| e.self_s).sum();
        // Roots: entries whose whole scc receives no external calls.
        let mut root_total = 0.0;
        for entry in &report.entries {
            match entry.cycle {
                Some(ci) => {
                    // Count each cycle once, through its first member.
                    let cycle = &report.cycles[ci];
                    if cycle.calls == 0 && cycle.members[0] == entry.name {
                        root_total += cycle.total_s;
                    }
                }
                None => {
                    if entry.calls == 0 {
                        root_total += entry.total_s;
                    }
                }
            }
        }
        prop_assert!(
            (root_total - total_self).abs() < 1e-9,
            "roots {root_total} vs self {total_self}"
        );
    }

    /// With exact arithmetic, each caller's share of a callee is exactly
    /// total * calls/total_calls, and shares sum exactly to the total.
    #[test]
    fn apportionment_is_exact_in_rational_arithmetic(
        samples in proptest::collection::vec(1u64..500, 3),
        c1 in 1u64..2000,
        c2 in 1u64..2000,
    ) {
        let flat = flat_profile(&histogram_exact(&samples), &symbols(3), None);
        let mut arcs = ArcTable::new();
        // fn00 and fn01 both call fn02.
        arcs.add_arc("fn00", "fn02", c1);
        arcs.add_arc("fn01", "fn02", c2);
        let report = call_graph(&flat, &arcs);
        let callee = report.entry("fn02").unwrap();
        let total_calls = c1 + c2;
        let expected_share = |c: u64| {
            callee.total_s.clone() * Ratio::new(c as i64, total_calls as i64)
        };
        let share_sum: Exact = callee
            .callers
            .iter()
            .map(|s| s.self_s.clone() + s.children_s.clone())
            .sum();
        prop_assert_eq!(share_sum, callee.total_s.clone());
        let from_fn00 = callee.callers.iter().find(|s| s.name == "fn00").unwrap();
        prop_assert_eq!(
            from_fn00.self_s.clone() + from_fn00.children_s.clone(),
            expected_share(c1)
        );
    }

    /// Scaling every bucket count by a positive constant changes neither
    /// the row order nor the percentages (exactly, under rationals).
    #[test]
    fn flat_profile_is_scale_invariant(
        samples in proptest::collection::vec(0u64..60, 5),
        scale in 1u64..40,
    ) {
        let base = flat_profile(&histogram_exact(&samples), &symbols(5), None);
        let scaled_counts: Vec<u64> = samples.iter().map(|c| c * scale).collect();
        let scaled = flat_profile(&histogram_exact(&scaled_counts), &symbols(5), None);
        let names: Vec<&str> = base.rows.iter().map(|r| r.name.as_str()).collect();
        let scaled_names: Vec<&str> = scaled.rows.iter().map(|r| r.name.as_str()).collect();
        prop_assert_eq!(names, scaled_names);
        for (a, b) in base.rows.iter().zip(&scaled.rows) {
            prop_assert_eq!(a.percent.clone(), b.percent.clone());
        }
    }

    /// Sum of self times equals total samples x period.
    #[test]
    fn self_times_sum_to_sampled_time(samples in proptest::collection::vec(0u64..300, 6)) {
        let flat = flat_profile(&histogram_exact(&samples), &symbols(6), None);
        let sum: Exact = flat.rows.iter().map(|r| r.self_s.clone()).sum();
        prop_assert_eq!(sum, flat.total_s.clone());
        let expected = Ratio::new(samples.iter().sum::<u64>() as i64, 100);
        prop_assert_eq!(flat.total_s.clone(), expected);
    }

    /// Rendered coverage percentages agree with a brute-force recount of
    /// the raw counts.
    #[test]
    fn coverage_percentages_match_brute_force(
        line_counts in proptest::collection::vec((0u64..50, any::<bool>()), 1..30),
        branch_pairs in proptest::collection::vec((0u64..100, 0u64..100), 0..12),
    ) {
        let lines: Vec<LineCount> = line_counts
            .iter()
            .enumerate()
            .map(|(i, &(execution_count, instrumented))| LineCount {
                line_no: i as u32 + 1,
                execution_count,
                instrumented,
            })
            .collect();
        // Branches sit on lines that exist, since the report nests the
        // probability lines under their source line.
        let branches: Vec<BranchCount> = branch_pairs
            .iter()
            .enumerate()
            .map(|(i, &(executed, taken))| BranchCount {
                line_no: (i % line_counts.len()) as u32 + 1,
                executed_count: executed,
                taken_count: taken.min(executed),
            })
            .collect();
        let counts = CoverageCounts {
            functions: vec![FunctionCoverage {
                name: "f".to_string(),
                lines,
                branches: branches.clone(),
            }],
        };
        let text = coverage_report(&counts);

        let instrumented = line_counts.iter().filter(|(_, inst)| *inst).count() as u64;
        let executed = line_counts
            .iter()
            .filter(|&&(c, inst)| inst && c > 0)
            .count() as u64;
        let expected_line_pct = if instrumented == 0 {
            0.0
        } else {
            100.0 * executed as f64 / instrumented as f64
        };
        let first_line = text.lines().next().unwrap();
        prop_assert_eq!(
            first_line,
            format!(
                "{expected_line_pct:.2}% of {instrumented} source lines executed in function f"
            )
        );
        if !branches.is_empty() {
            let total = branches.len() as u64;
            let br_exec = branches.iter().filter(|b| b.executed_count > 0).count() as u64;
            let br_taken = branches.iter().filter(|b| b.taken_count > 0).count() as u64;
            let pct = |x: u64| 100.0 * x as f64 / total as f64;
            let executed_line = format!(
                "{:.2}% of {} branches executed in function f",
                pct(br_exec),
                total
            );
            prop_assert!(text.contains(&executed_line));
            let taken_line = format!(
                "{:.2}% of {} branches taken at least once in function f",
                pct(br_taken),
                total
            );
            prop_assert!(text.contains(&taken_line));
            // Per-branch probability lines.
            for branch in &branches {
                if branch.executed_count > 0 {
                    let p = (100.0 * branch.taken_count as f64 / branch.executed_count as f64)
                        .round();
                    let line = format!("taken = {}%", p);
                    prop_assert!(text.contains(&line));
                }
            }
        }
    }
}

proptest! {
    /// Arc counting agrees with a naive tally of the same call sequence.
    #[test]
    fn arc_counts_match_brute_force_tally(
        sequence in proptest::collection::vec((0usize..5, 0usize..5), 0..200)
    ) {
        let mut arcs = ArcTable::new();
        let mut tally: std::collections::HashMap<(usize, usize), u64> =
            std::collections::HashMap::new();
        for &(caller, callee) in &sequence {
            arcs.record_arc(&format!("f{caller}"), &format!("f{callee}"));
            *tally.entry((caller, callee)).or_insert(0) += 1;
        }
        for caller in 0..5 {
            for callee in 0..5 {
                let expected = tally.get(&(caller, callee)).copied().unwrap_or(0);
                prop_assert_eq!(
                    arcs.count(&format!("f{caller}"), &format!("f{callee}")),
                    expected
                );
            }
        }
    }
}

/// Both scalar instantiations agree (up to float rounding) on the same
/// inputs.
#[test]
fn rational_and_float_reductions_agree() {
    let samples = [753u64, 644, 412, 338, 233];
    let flat_f = flat_profile(&histogram_f64(&samples), &symbols(5), None);
    let flat_r = flat_profile(&histogram_exact(&samples), &symbols(5), None);
    for (a, b) in flat_f.rows.iter().zip(&flat_r.rows) {
        assert_eq!(a.name, b.name);
        let b_pct = *b.percent.numer() as f64 / *b.percent.denom() as f64;
        assert!((a.percent - b_pct).abs() < 1e-9);
    }
}
