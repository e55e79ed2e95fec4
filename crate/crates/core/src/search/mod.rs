//! Bit-width search: the per-edge space, candidate evaluation against the
//! float32 reference, and the search methods.

mod methods;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use num_bigint::BigUint;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::Serialize;
use serde_json::Value;

use crate::calibration::EdgeCalib;
use crate::dataset::Sample;
use crate::dtype::max_bits;
use crate::error::{Error, Result};
use crate::hwspec::HardwareSpec;
use crate::interp::{agreement, predictions, Executor, Regime};
use crate::plan::{passthrough_binding, QuantPlan};
use crate::topology::{SimulatedGraph, Topology};

pub use methods::{anneal_search, exhaustive_search, greedy_search, random_search, AnnealConfig, GreedyConfig, EXHAUSTIVE_CAP};

pub const MIN_BIT: u32 = 4;

/// Inclusive bit range of one searchable edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitRange {
    pub edge: usize,
    pub lo: u32,
    pub hi: u32,
}

impl BitRange {
    /// Number of widths in the range; never zero.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u32 {
        self.hi - self.lo + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    pub ranges: Vec<BitRange>,
}

impl SearchSpace {
    /// Space over edges `0..n` with the given `(lo, hi)` ranges.
    pub fn from_bounds(bounds: &[(u32, u32)]) -> Result<Self> {
        let ranges = bounds
            .iter()
            .enumerate()
            .map(|(edge, &(lo, hi))| {
                if lo > hi {
                    Err(Error::Invalid(format!("edge {edge}: empty bit range {lo}..={hi}")))
                } else {
                    Ok(BitRange { edge, lo, hi })
                }
            })
            .collect::<Result<_>>()?;
        Ok(SearchSpace { ranges })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn highest(&self) -> Candidate {
        Candidate(self.ranges.iter().map(|r| r.hi).collect())
    }

    pub fn lowest(&self) -> Candidate {
        Candidate(self.ranges.iter().map(|r| r.lo).collect())
    }

    pub fn contains(&self, c: &Candidate) -> bool {
        c.0.len() == self.ranges.len() && c.0.iter().zip(&self.ranges).all(|(&b, r)| (r.lo..=r.hi).contains(&b))
    }
}

/// One search space range per searchable edge: from `min_bit` up to the width
/// of the widest candidate dtype.
pub fn build_search_space(t: &Topology, min_bit: u32) -> Result<SearchSpace> {
    if min_bit < 2 {
        return Err(Error::Invalid(format!("minimum bit width {min_bit} is below 2")));
    }
    let ranges = t
        .edge_dtypes
        .iter()
        .map(|(&edge, cands)| {
            let hi = cands.iter().map(|&d| max_bits(d)).collect::<Result<Vec<_>>>()?.into_iter().max().unwrap_or(0);
            if min_bit > hi {
                return Err(Error::Invalid(format!("edge {edge}: minimum bit width {min_bit} exceeds its widest dtype ({hi} bits)")));
            }
            Ok(BitRange { edge, lo: min_bit, hi })
        })
        .collect::<Result<_>>()?;
    Ok(SearchSpace { ranges })
}

pub fn space_size(s: &SearchSpace) -> BigUint {
    s.ranges.iter().fold(BigUint::from(1u32), |acc, r| acc * BigUint::from(r.len()))
}

/// Bit widths, one per searchable edge in canonical order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Candidate(pub Vec<u32>);

impl Candidate {
    pub fn bits(&self) -> &[u32] {
        &self.0
    }
}

/// Loss to minimize over candidates. Must be callable from many threads.
pub trait Objective: Sync {
    fn loss(&self, c: &Candidate) -> Result<f64>;

    fn losses(&self, cs: &[Candidate]) -> Result<Vec<f64>> {
        cs.iter().map(|c| self.loss(c)).collect()
    }
}

impl<F: Fn(&Candidate) -> f64 + Sync> Objective for F {
    fn loss(&self, c: &Candidate) -> Result<f64> {
        Ok(self(c))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub bits: Vec<u32>,
    pub loss: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchTrace {
    /// Method name and parameters.
    pub header: Value,
    pub records: Vec<TraceRecord>,
}

impl SearchTrace {
    pub fn new(header: Value) -> Self {
        SearchTrace { header, records: Vec::new() }
    }

    pub(crate) fn push(&mut self, iteration: usize, c: &Candidate, loss: f64, accepted: bool) {
        self.records.push(TraceRecord { iteration, bits: c.0.clone(), loss, accepted });
    }

    /// Header line followed by one line per record.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.to_string());
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_ndjson().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub loss: f64,
    pub trace: SearchTrace,
    pub evaluations: usize,
}

/// Scores candidates by disagreement with the float32 model's predictions.
/// The graph is prepared once; candidates only change the runtime binding.
pub struct Evaluator<'a> {
    sim: &'a SimulatedGraph,
    spec: &'a HardwareSpec,
    calib: &'a BTreeMap<usize, EdgeCalib>,
    samples: &'a [Sample],
    exec: Executor<'a>,
    reference: Vec<(usize, usize)>,
    pool: Option<ThreadPool>,
}

impl<'a> Evaluator<'a> {
    pub fn new(sim: &'a SimulatedGraph, spec: &'a HardwareSpec, calib: &'a BTreeMap<usize, EdgeCalib>, samples: &'a [Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("evaluation needs at least one sample".into()));
        }
        let exec = Executor::new(&sim.graph)?;
        let reference = predictions(&exec, samples, Regime::Float, Some(&passthrough_binding(sim)))?;
        Ok(Evaluator { sim, spec, calib, samples, exec, reference, pool: None })
    }

    /// Run evaluations on a dedicated pool of `workers` threads.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Invalid(format!("cannot start {workers} workers: {e}")))?;
        self.pool = Some(pool);
        Ok(self)
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Quantization plan for `bits`.
    pub fn plan(&self, bits: &[u32]) -> Result<QuantPlan> {
        QuantPlan::from_bits(self.sim, self.spec, self.calib, bits)
    }

    fn loss_inner(&self, c: &Candidate) -> Result<f64> {
        let plan = match self.plan(c.bits()) {
            Ok(p) => p,
            Err(Error::SignatureMismatch { .. }) => return Ok(1.0),
            Err(e) => return Err(e),
        };
        let preds = predictions(&self.exec, self.samples, Regime::Float, Some(&plan.binding))?;
        Ok(1.0 - agreement(&self.reference, &preds)?)
    }

    /// 1 − top-1 agreement with the float32 reference. Candidates no hardware
    /// signature can hold score 1.
    pub fn evaluate(&self, c: &Candidate) -> Result<f64> {
        self.install(|| self.loss_inner(c))
    }

    /// Losses of many candidates, evaluated concurrently; identical to
    /// calling [`Evaluator::evaluate`] on each.
    pub fn batched_evaluate(&self, cs: &[Candidate]) -> Result<Vec<f64>> {
        self.install(|| cs.par_iter().map(|c| self.loss_inner(c)).collect())
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

impl Objective for Evaluator<'_> {
    fn loss(&self, c: &Candidate) -> Result<f64> {
        self.evaluate(c)
    }

    fn losses(&self, cs: &[Candidate]) -> Result<Vec<f64>> {
        self.batched_evaluate(cs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_sizes() {
        let s = SearchSpace::from_bounds(&[(4, 8); 3]).unwrap();
        assert_eq!(space_size(&s), BigUint::from(125u32));
        assert_eq!(space_size(&SearchSpace::from_bounds(&[]).unwrap()), BigUint::from(1u32));
        let big = SearchSpace::from_bounds(&[(4, 8); 118]).unwrap();
        assert!(space_size(&big) > BigUint::from(4u32).pow(118));
        assert!(SearchSpace::from_bounds(&[(9, 8)]).is_err());
    }

    #[test]
    fn trace_lines() {
        let mut t = SearchTrace::new(serde_json::json!({"method": "greedy"}));
        t.push(0, &Candidate(vec![8, 8]), 0.25, true);
        let text = t.to_ndjson();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], r#"{"iteration":0,"bits":[8,8],"loss":0.25,"accepted":true}"#);
    }
}
