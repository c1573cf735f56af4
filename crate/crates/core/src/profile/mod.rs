//! Profile-data reduction: sample histograms, caller-callee arc tables,
//! flat profiles, call-graph time propagation, and coverage reports.
//!
//! The reductions are generic over the scalar used for time arithmetic.
//! `f64` (aliased at the crate root) is the everyday choice; the exactness
//! properties (apportionment ratios, argmax stability) also hold literally
//! when instantiated with a rational scalar.

mod coverage;
mod flat;
mod graph;

use std::collections::BTreeMap;

use num_traits::{FromPrimitive, Num, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use coverage::{
    coverage_report, BranchCount, CoverageCounts, FunctionCoverage, LineCount,
};
pub use flat::{flat_profile, render_flat_profile, FlatProfile, FlatRow};
pub use graph::{
    call_graph, render_call_graph, ArcShare, CallGraphReport, CycleEntry, GraphEntry,
};

/// Scalar used for profile time arithmetic. Blanket-implemented for any
/// numeric type with the needed conversions: `f32`, `f64`, rationals.
pub trait Scalar: Clone + PartialOrd + Num + FromPrimitive + ToPrimitive {
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar")
    }

    /// Lossy view for display formatting.
    fn display_f64(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T: Clone + PartialOrd + Num + FromPrimitive + ToPrimitive> Scalar for T {}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("sample address 0x{address:x} below histogram base 0x{base:x}")]
    AddressBelowBase { address: u64, base: u64 },
    #[error("sample address 0x{address:x} beyond histogram extent (bucket {bucket} of {buckets})")]
    AddressBeyondExtent {
        address: u64,
        bucket: usize,
        buckets: usize,
    },
}

/// Bucketed program-counter sample counts: one counter per
/// `bucket_width_bytes` of address space starting at `base_address`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleHistogram<S> {
    pub base_address: u64,
    pub bucket_width_bytes: u64,
    pub counts: Vec<u64>,
    /// Seconds of execution each sample represents.
    pub period_s: S,
    pub total_samples: u64,
}

impl<S: Scalar> SampleHistogram<S> {
    pub fn new(base_address: u64, bucket_width_bytes: u64, buckets: usize, period_s: S) -> Self {
        assert!(bucket_width_bytes >= 1, "bucket width must be at least 1");
        SampleHistogram {
            base_address,
            bucket_width_bytes,
            counts: vec![0; buckets],
            period_s,
            total_samples: 0,
        }
    }

    /// Adds one sample at `address` to its bucket.
    pub fn record_sample(&mut self, address: u64) -> Result<(), ProfileError> {
        if address < self.base_address {
            return Err(ProfileError::AddressBelowBase {
                address,
                base: self.base_address,
            });
        }
        let bucket = ((address - self.base_address) / self.bucket_width_bytes) as usize;
        if bucket >= self.counts.len() {
            return Err(ProfileError::AddressBeyondExtent {
                address,
                bucket,
                buckets: self.counts.len(),
            });
        }
        self.counts[bucket] += 1;
        self.total_samples += 1;
        Ok(())
    }

    /// Start address of bucket `i`; samples in a bucket that spans two
    /// symbols are attributed to the symbol containing this address.
    pub fn bucket_address(&self, i: usize) -> u64 {
        self.base_address + i as u64 * self.bucket_width_bytes
    }

    /// Pointwise sum with a histogram accumulated elsewhere.
    pub fn merge(&mut self, other: &SampleHistogram<S>) {
        assert_eq!(self.base_address, other.base_address);
        assert_eq!(self.bucket_width_bytes, other.bucket_width_bytes);
        assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total_samples += other.total_samples;
    }
}

/// One function's address range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    /// Inclusive start.
    pub start_address: u64,
    /// Exclusive end.
    pub end_address: u64,
}

/// Sorted, non-overlapping function address ranges.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolTable {
    entries: Vec<Symbol>,
}

impl SymbolTable {
    pub fn new(mut entries: Vec<Symbol>) -> SymbolTable {
        entries.sort_by_key(|s| s.start_address);
        for pair in entries.windows(2) {
            assert!(
                pair[0].end_address <= pair[1].start_address,
                "overlapping symbols {} and {}",
                pair[0].name,
                pair[1].name
            );
        }
        SymbolTable { entries }
    }

    pub fn entries(&self) -> &[Symbol] {
        &self.entries
    }

    pub fn resolve(&self, address: u64) -> Option<&Symbol> {
        let i = self
            .entries
            .partition_point(|s| s.start_address <= address);
        let candidate = self.entries.get(i.checked_sub(1)?)?;
        (address < candidate.end_address).then_some(candidate)
    }
}

/// Counting map of (caller, callee) pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ArcTable {
    counts: BTreeMap<(String, String), u64>,
}

impl ArcTable {
    pub fn new() -> ArcTable {
        ArcTable::default()
    }

    /// Counts one call from `caller` to `callee`.
    pub fn record_arc(&mut self, caller: &str, callee: &str) {
        *self
            .counts
            .entry((caller.to_string(), callee.to_string()))
            .or_insert(0) += 1;
    }

    pub fn add_arc(&mut self, caller: &str, callee: &str, count: u64) {
        if count > 0 {
            *self
                .counts
                .entry((caller.to_string(), callee.to_string()))
                .or_insert(0) += count;
        }
    }

    pub fn count(&self, caller: &str, callee: &str) -> u64 {
        self.counts
            .get(&(caller.to_string(), callee.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.counts
            .iter()
            .map(|((caller, callee), &count)| (caller.as_str(), callee.as_str(), count))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Pointwise sum with an arc table accumulated elsewhere.
    pub fn merge(&mut self, other: &ArcTable) {
        for ((caller, callee), &count) in &other.counts {
            *self.counts.entry((caller.clone(), callee.clone())).or_insert(0) += count;
        }
    }
}

/// On-disk profile data: the JSON document produced by the simulator and
/// consumed by the flat/graph reductions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileData {
    pub histogram: HistogramData,
    pub arcs: Vec<ArcData>,
    pub symbols: Vec<SymbolData>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramData {
    pub base: u64,
    pub width: u64,
    pub period: f64,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArcData {
    pub caller: String,
    pub callee: String,
    pub count: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SymbolData {
    pub name: String,
    pub start: u64,
    pub end: u64,
}

impl ProfileData {
    pub fn histogram(&self) -> SampleHistogram<f64> {
        SampleHistogram {
            base_address: self.histogram.base,
            bucket_width_bytes: self.histogram.width.max(1),
            total_samples: self.histogram.counts.iter().sum(),
            counts: self.histogram.counts.clone(),
            period_s: self.histogram.period,
        }
    }

    pub fn arc_table(&self) -> ArcTable {
        let mut table = ArcTable::new();
        for arc in &self.arcs {
            table.add_arc(&arc.caller, &arc.callee, arc.count);
        }
        table
    }

    pub fn symbol_table(&self) -> SymbolTable {
        SymbolTable::new(
            self.symbols
                .iter()
                .map(|s| Symbol {
                    name: s.name.clone(),
                    start_address: s.start,
                    end_address: s.end,
                })
                .collect(),
        )
    }

    pub fn from_parts(
        histogram: &SampleHistogram<f64>,
        arcs: &ArcTable,
        symbols: &SymbolTable,
    ) -> ProfileData {
        ProfileData {
            histogram: HistogramData {
                base: histogram.base_address,
                width: histogram.bucket_width_bytes,
                period: histogram.period_s,
                counts: histogram.counts.clone(),
            },
            arcs: arcs
                .iter()
                .map(|(caller, callee, count)| ArcData {
                    caller: caller.to_string(),
                    callee: callee.to_string(),
                    count,
                })
                .collect(),
            symbols: symbols
                .entries()
                .iter()
                .map(|s| SymbolData {
                    name: s.name.clone(),
                    start: s.start_address,
                    end: s.end_address,
                })
                .collect(),
        }
    }
}
