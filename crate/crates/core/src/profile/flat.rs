//! Flat profile: per-function self time from sample counts.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::profile::{CallGraphReport, SampleHistogram, Scalar, SymbolTable};

/// Name used for samples that fall outside every symbol range.
pub const UNKNOWN_FUNCTION: &str = "<unknown>";

#[derive(Clone, Debug, PartialEq)]
pub struct FlatRow<S> {
    pub name: String,
    pub samples: u64,
    /// samples x period.
    pub self_s: S,
    /// Share of all recorded samples, in percent.
    pub percent: S,
    /// Running total of `self_s` in row order.
    pub cumulative_s: S,
    pub calls: Option<u64>,
    pub self_ms_per_call: Option<S>,
    pub total_ms_per_call: Option<S>,
    /// Marks the designated profiling-overhead function.
    pub is_overhead: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatProfile<S> {
    /// Rows sorted by descending self time (ties by name).
    pub rows: Vec<FlatRow<S>>,
    pub period_s: S,
    pub total_samples: u64,
    /// total_samples x period.
    pub total_s: S,
    pub overhead_function: Option<String>,
    /// total_s minus the overhead function's self time, when one is named.
    pub compensated_total_s: Option<S>,
}

/// Reduces a histogram to per-function rows. Samples in buckets covered by
/// no symbol are reported under [`UNKNOWN_FUNCTION`]. Naming
/// `overhead_function` flags its row and reports a compensated total with
/// that function's self time subtracted.
pub fn flat_profile<S: Scalar>(
    hist: &SampleHistogram<S>,
    symbols: &SymbolTable,
    overhead_function: Option<&str>,
) -> FlatProfile<S> {
    let mut samples_by_name: BTreeMap<String, u64> = BTreeMap::new();
    for (i, &count) in hist.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let address = hist.bucket_address(i);
        let name = symbols
            .resolve(address)
            .map(|s| s.name.clone())
            .unwrap_or_else(|| UNKNOWN_FUNCTION.to_string());
        *samples_by_name.entry(name).or_insert(0) += count;
    }

    let total_samples: u64 = samples_by_name.values().sum();
    let hundred = S::from_count(100);
    let mut rows: Vec<FlatRow<S>> = samples_by_name
        .into_iter()
        .map(|(name, samples)| {
            let self_s = S::from_count(samples) * hist.period_s.clone();
            let percent = if total_samples == 0 {
                S::zero()
            } else {
                hundred.clone() * S::from_count(samples) / S::from_count(total_samples)
            };
            FlatRow {
                is_overhead: overhead_function == Some(name.as_str()),
                name,
                samples,
                self_s,
                percent,
                cumulative_s: S::zero(),
                calls: None,
                self_ms_per_call: None,
                total_ms_per_call: None,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.samples
            .cmp(&a.samples)
            .then_with(|| a.name.cmp(&b.name))
    });

    let mut cumulative = S::zero();
    for row in &mut rows {
        cumulative = cumulative + row.self_s.clone();
        row.cumulative_s = cumulative.clone();
    }

    let total_s = S::from_count(total_samples) * hist.period_s.clone();
    let compensated_total_s = overhead_function.map(|name| {
        let overhead = rows
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.self_s.clone())
            .unwrap_or_else(S::zero);
        total_s.clone() - overhead
    });

    FlatProfile {
        rows,
        period_s: hist.period_s.clone(),
        total_samples,
        total_s,
        overhead_function: overhead_function.map(str::to_string),
        compensated_total_s,
    }
}

impl<S: Scalar> FlatProfile<S> {
    /// Fills the calls and ms/call columns from call-graph results (calls
    /// from the arc counts, total time from propagation).
    pub fn annotate_calls(&mut self, graph: &CallGraphReport<S>) {
        let thousand = S::from_count(1000);
        for row in &mut self.rows {
            let Some(entry) = graph.entry(&row.name) else {
                continue;
            };
            if entry.calls == 0 {
                continue;
            }
            row.calls = Some(entry.calls);
            let calls = S::from_count(entry.calls);
            row.self_ms_per_call =
                Some(row.self_s.clone() * thousand.clone() / calls.clone());
            row.total_ms_per_call =
                Some(entry.total_s.clone() * thousand.clone() / calls);
        }
    }
}

/// Text rendering, one header plus one row per function.
pub fn render_flat_profile<S: Scalar>(profile: &FlatProfile<S>) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "Each sample counts as {} seconds.",
        profile.period_s.display_f64()
    )
    .unwrap();
    writeln!(
        out,
        "  %       cumulative   self                self      total"
    )
    .unwrap();
    writeln!(
        out,
        " time      seconds    seconds     calls  ms/call   ms/call  name"
    )
    .unwrap();
    for row in &profile.rows {
        let calls = row
            .calls
            .map(|c| c.to_string())
            .unwrap_or_default();
        let self_ms = row
            .self_ms_per_call
            .as_ref()
            .map(|v| format!("{:.2}", v.display_f64()))
            .unwrap_or_default();
        let total_ms = row
            .total_ms_per_call
            .as_ref()
            .map(|v| format!("{:.2}", v.display_f64()))
            .unwrap_or_default();
        let marker = if row.is_overhead { " *" } else { "" };
        writeln!(
            out,
            "{:>6.2} {:>12.2} {:>10.2} {:>9} {:>8} {:>9}  {}{}",
            row.percent.display_f64(),
            row.cumulative_s.display_f64(),
            row.self_s.display_f64(),
            calls,
            self_ms,
            total_ms,
            row.name,
            marker,
        )
        .unwrap();
    }
    writeln!(
        out,
        "total sampled time {:.2}s ({} samples)",
        profile.total_s.display_f64(),
        profile.total_samples
    )
    .unwrap();
    if let (Some(name), Some(compensated)) =
        (&profile.overhead_function, &profile.compensated_total_s)
    {
        writeln!(
            out,
            "compensated total {:.2}s (overhead function {} subtracted)",
            compensated.display_f64(),
            name
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Symbol;

    fn symbols() -> SymbolTable {
        SymbolTable::new(vec![
            Symbol {
                name: "alpha".into(),
                start_address: 0,
                end_address: 64,
            },
            Symbol {
                name: "beta".into(),
                start_address: 64,
                end_address: 128,
            },
        ])
    }

    #[test]
    fn empty_histogram_gives_empty_profile() {
        let hist: SampleHistogram<f64> = SampleHistogram::new(0, 4, 64, 0.01);
        let profile = flat_profile(&hist, &symbols(), None);
        assert!(profile.rows.is_empty());
        assert_eq!(profile.total_samples, 0);
        assert_eq!(profile.total_s, 0.0);
    }

    #[test]
    fn self_time_is_samples_times_period() {
        let mut hist: SampleHistogram<f64> = SampleHistogram::new(0, 4, 64, 0.01);
        for _ in 0..30 {
            hist.record_sample(0).unwrap();
        }
        for _ in 0..10 {
            hist.record_sample(64).unwrap();
        }
        let profile = flat_profile(&hist, &symbols(), None);
        assert_eq!(profile.rows[0].name, "alpha");
        assert_eq!(profile.rows[0].self_s, 0.3);
        assert_eq!(profile.rows[0].percent, 75.0);
        assert_eq!(profile.rows[1].cumulative_s, 0.4);
        assert_eq!(profile.total_s, 0.4);
    }

    #[test]
    fn unresolved_samples_fall_into_unknown() {
        let mut hist: SampleHistogram<f64> = SampleHistogram::new(0, 4, 64, 0.01);
        hist.record_sample(200).unwrap();
        let profile = flat_profile(&hist, &symbols(), None);
        assert_eq!(profile.rows[0].name, UNKNOWN_FUNCTION);
    }

    #[test]
    fn overhead_function_is_flagged_and_compensated() {
        let mut hist: SampleHistogram<f64> = SampleHistogram::new(0, 4, 64, 0.01);
        for _ in 0..30 {
            hist.record_sample(0).unwrap();
        }
        for _ in 0..10 {
            hist.record_sample(64).unwrap();
        }
        let profile = flat_profile(&hist, &symbols(), Some("beta"));
        let beta = profile.rows.iter().find(|r| r.name == "beta").unwrap();
        assert!(beta.is_overhead);
        assert!((profile.compensated_total_s.unwrap() - 0.3).abs() < 1e-12);
        let text = render_flat_profile(&profile);
        assert!(text.contains("beta *"), "{text}");
        assert!(text.contains("compensated total 0.30s"), "{text}");
    }

    #[test]
    fn rows_sort_by_samples_then_name() {
        let mut hist: SampleHistogram<f64> = SampleHistogram::new(0, 4, 64, 0.01);
        hist.record_sample(0).unwrap();
        hist.record_sample(64).unwrap();
        let profile = flat_profile(&hist, &symbols(), None);
        assert_eq!(profile.rows[0].name, "alpha");
        assert_eq!(profile.rows[1].name, "beta");
    }
}
