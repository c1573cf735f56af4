//! Program-counter sampling over a simulation run.
//!
//! Samples fire on a global clock. At each instant, every cpu running a
//! tagged synthetic function contributes one sample at that function's
//! address. The jittered mode draws each period uniformly around the mean,
//! which breaks the phase lock a fixed period can develop with periodic
//! workloads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::profile::{SampleHistogram, SymbolTable};
use crate::sim::{FnSegment, SimRun, SplitMix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    Fixed {
        period_us: u64,
    },
    /// Each period drawn uniformly from
    /// `mean_period_us - half_width_us ..= mean_period_us + half_width_us`.
    Jittered {
        mean_period_us: u64,
        half_width_us: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub seed: u64,
}

impl SamplingPolicy {
    pub fn fixed(period_us: u64) -> SamplingPolicy {
        SamplingPolicy {
            mode: SamplingMode::Fixed { period_us },
            seed: 0,
        }
    }

    pub fn jittered(mean_period_us: u64, half_width_us: u64, seed: u64) -> SamplingPolicy {
        assert!(
            half_width_us < mean_period_us,
            "jitter half-width must stay below the mean period"
        );
        SamplingPolicy {
            mode: SamplingMode::Jittered {
                mean_period_us,
                half_width_us,
            },
            seed,
        }
    }

    fn mean_period_us(&self) -> u64 {
        match self.mode {
            SamplingMode::Fixed { period_us } => period_us,
            SamplingMode::Jittered { mean_period_us, .. } => mean_period_us,
        }
    }
}

/// Buckets one sample per cpu running a tagged function at each sampling
/// instant. The histogram's period is the mean sampling period in seconds.
pub fn emit_samples(
    run: &SimRun,
    policy: &SamplingPolicy,
    symbols: &SymbolTable,
) -> SampleHistogram<f64> {
    let addresses: BTreeMap<&str, u64> = symbols
        .entries()
        .iter()
        .map(|s| (s.name.as_str(), s.start_address))
        .collect();
    let (base, extent) = match (
        symbols.entries().first(),
        symbols.entries().last(),
    ) {
        (Some(first), Some(last)) => (first.start_address, last.end_address),
        _ => (0, 4),
    };
    let width = 4;
    let buckets = ((extent - base) / width + 1) as usize;
    let period_s = policy.mean_period_us() as f64 / 1e6;
    let mut hist = SampleHistogram::new(base, width, buckets, period_s);

    // Per-cpu segment streams, already time-ordered within a cpu.
    let mut per_cpu: BTreeMap<u16, Vec<&FnSegment>> = BTreeMap::new();
    for seg in &run.fn_timeline {
        per_cpu.entry(seg.cpu).or_default().push(seg);
    }
    let mut cursors: BTreeMap<u16, usize> = per_cpu.keys().map(|&c| (c, 0)).collect();

    let mut rng = SplitMix64::new(policy.seed);
    let draw = |rng: &mut SplitMix64| match policy.mode {
        SamplingMode::Fixed { period_us } => period_us.max(1),
        SamplingMode::Jittered {
            mean_period_us,
            half_width_us,
        } => rng
            .uniform(
                mean_period_us - half_width_us,
                mean_period_us + half_width_us,
            )
            .max(1),
    };

    // The fixed clock is aligned to the run start; jitter begins with a
    // random first period.
    let mut t = match policy.mode {
        SamplingMode::Fixed { .. } => 0,
        SamplingMode::Jittered { .. } => draw(&mut rng),
    };
    loop {
        if t > run.end_us {
            break;
        }
        for (&cpu, segments) in &per_cpu {
            let cursor = cursors.get_mut(&cpu).unwrap();
            while *cursor < segments.len() && segments[*cursor].end_us <= t {
                *cursor += 1;
            }
            if let Some(seg) = segments.get(*cursor) {
                if seg.start_us <= t && t < seg.end_us {
                    if let Some(&addr) = addresses.get(seg.function.as_str()) {
                        hist.record_sample(addr).expect("symbol within extent");
                    }
                }
            }
        }
        t += draw(&mut rng);
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "half-width must stay below")]
    fn jitter_width_must_be_below_mean() {
        SamplingPolicy::jittered(100, 100, 0);
    }
}
