//! Per-edge value statistics from float32 runs and threshold estimators.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{dataset_fingerprint, graph_fingerprint, Sample};
use crate::error::{Error, Result};
use crate::graph::{edge_order, read_json, to_pretty, write_text, Graph};
use crate::interp::{Executor, Regime};
use crate::topology::SimulatedGraph;

pub const DEFAULT_BINS: usize = 2048;
/// Threshold substituted for edges that only ever carry zeros.
pub const EPSILON: f32 = 1e-8;
const KL_SMOOTHING: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeStats {
    pub min: f32,
    pub max: f32,
    pub absmax: f32,
    /// Counts of |v| over `[0, absmax]` in equal-width, right-closed bins.
    pub counts: Vec<u64>,
    /// Number of dataset samples observed.
    pub samples: usize,
}

impl EdgeStats {
    /// Statistics of a single batch of values.
    pub fn from_values(values: &[f32], bins: usize) -> Self {
        let (min, max) = extrema(values);
        let absmax = min.abs().max(max.abs());
        let mut counts = vec![0u64; bins];
        bin_into(&mut counts, values, absmax);
        EdgeStats { min, max, absmax, counts, samples: 1 }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Upper edge of bin `i`.
    pub fn bin_edge(&self, i: usize) -> f32 {
        if i + 1 >= self.bins() {
            self.absmax
        } else {
            ((i + 1) as f64 * self.absmax as f64 / self.bins() as f64) as f32
        }
    }
}

fn extrema(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .filter(|v| !v.is_nan())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Right-closed bin of `|v|`: bin i covers `(i·w, (i+1)·w]`, zero lands in bin 0.
fn bin_index(v: f32, absmax: f32, bins: usize) -> usize {
    if absmax <= 0.0 {
        return 0;
    }
    let x = (v.abs() as f64 * bins as f64 / absmax as f64).ceil() as i64 - 1;
    x.clamp(0, bins as i64 - 1) as usize
}

fn bin_into(counts: &mut [u64], values: &[f32], absmax: f32) {
    let bins = counts.len();
    for &v in values.iter().filter(|v| !v.is_nan()) {
        counts[bin_index(v, absmax, bins)] += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationStats {
    /// Canonical edge index to statistics.
    pub per_edge: BTreeMap<usize, EdgeStats>,
    pub dataset_fingerprint: String,
    pub graph_fingerprint: String,
    pub bins: usize,
}

/// Canonical edges that carry a simulated_quantize node.
pub fn calibration_edges(sim: &SimulatedGraph) -> BTreeSet<usize> {
    sim.edge_of_node.values().copied().collect()
}

/// Run the float32 graph over `samples` and record the values on `edges`.
/// Extrema are gathered in a first pass and the histogram in a second, so
/// bins always span the exact absolute maximum.
pub fn collect_stats(g: &Graph, edges: &BTreeSet<usize>, samples: &[Sample], bins: usize) -> Result<CalibrationStats> {
    if samples.is_empty() {
        return Err(Error::Invalid("calibration needs at least one sample".into()));
    }
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let order = edge_order(g)?;
    let sources: Vec<(usize, crate::graph::NodeId)> = edges
        .iter()
        .map(|&e| {
            order
                .get(e)
                .map(|ed| (e, ed.src.node))
                .ok_or_else(|| Error::Invalid(format!("edge {e} does not exist ({} edges)", order.len())))
        })
        .collect::<Result<_>>()?;
    let exec = Executor::new(g)?;
    let edge_values = |s: &Sample| -> Result<Vec<Vec<f32>>> {
        let values = exec.run_all(&s.inputs, Regime::Float, None)?;
        sources
            .iter()
            .map(|(e, src)| {
                values[src]
                    .as_f32()
                    .map(<[f32]>::to_vec)
                    .ok_or_else(|| Error::Invalid(format!("edge {e} does not carry float32 values")))
            })
            .collect()
    };

    let ranges = samples
        .par_iter()
        .map(|s| -> Result<Vec<(f32, f32)>> { Ok(edge_values(s)?.iter().map(|v| extrema(v)).collect()) })
        .try_reduce(
            || vec![(f32::INFINITY, f32::NEG_INFINITY); sources.len()],
            |a, b| -> Result<Vec<(f32, f32)>> { Ok(a.iter().zip(&b).map(|(x, y)| (x.0.min(y.0), x.1.max(y.1))).collect()) },
        )?;
    let absmax: Vec<f32> = ranges.iter().map(|(lo, hi)| lo.abs().max(hi.abs())).collect();
    let counts = samples
        .par_iter()
        .map(|s| -> Result<Vec<Vec<u64>>> {
            Ok(edge_values(s)?
                .iter()
                .zip(&absmax)
                .map(|(v, &m)| {
                    let mut c = vec![0u64; bins];
                    bin_into(&mut c, v, m);
                    c
                })
                .collect::<Vec<_>>())
        })
        .try_reduce(
            || vec![vec![0u64; bins]; sources.len()],
            |a, b| -> Result<Vec<Vec<u64>>> { Ok(a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()) },
        )?;

    let per_edge = sources
        .iter()
        .zip(ranges.iter().zip(absmax).zip(counts))
        .map(|((e, _), ((range, absmax), counts))| {
            let (min, max) = if range.0 > range.1 { (0.0, 0.0) } else { *range };
            (*e, EdgeStats { min, max, absmax, counts, samples: samples.len() })
        })
        .collect();
    Ok(CalibrationStats {
        per_edge,
        dataset_fingerprint: dataset_fingerprint(samples),
        graph_fingerprint: graph_fingerprint(g),
        bins,
    })
}

/// Statistics on every edge of `sim` plus thresholds under `estimator`.
pub fn calibrate(g: &Graph, sim: &SimulatedGraph, samples: &[Sample], estimator: Estimator, pow2: bool) -> Result<Calibration> {
    let stats = collect_stats(g, &calibration_edges(sim), samples, DEFAULT_BINS)?;
    Calibration::new(stats, estimator, pow2)
}

fn guard(t: f32) -> f32 {
    if t > 0.0 {
        t
    } else {
        EPSILON
    }
}

pub fn threshold_max(stats: &EdgeStats) -> f32 {
    guard(stats.absmax)
}

/// Smallest bin upper edge below which at least a fraction `q` of the
/// absolute values fall.
pub fn threshold_quantile(stats: &EdgeStats, q: f64) -> Result<f32> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Invalid(format!("quantile {q} is outside (0, 1]")));
    }
    let total = stats.total();
    if total == 0 {
        return Err(Error::Invalid("quantile of an empty histogram".into()));
    }
    let mut cum = 0u64;
    for (i, &c) in stats.counts.iter().enumerate() {
        cum += c;
        if cum as f64 >= q * total as f64 * (1.0 - 1e-12) {
            return Ok(guard(stats.bin_edge(i)));
        }
    }
    Ok(guard(stats.absmax))
}

/// KL divergence of the clipped reference distribution from its
/// `2^target_bit`-level requantization, for a clip at `i` bins.
pub fn kl_divergence_at(counts: &[u64], i: usize, levels: usize) -> f64 {
    let mut p: Vec<f64> = counts[..i].iter().map(|&c| c as f64).collect();
    p[i - 1] += counts[i..].iter().map(|&c| c as f64).sum::<f64>();
    let mut q = vec![0f64; i];
    for j in 0..levels {
        let (start, end) = (j * i / levels, (j + 1) * i / levels);
        let group = &counts[start..end];
        let mass: f64 = group.iter().map(|&c| c as f64).sum();
        let nonzero = group.iter().filter(|&&c| c > 0).count();
        if nonzero > 0 {
            for (k, &c) in group.iter().enumerate() {
                if c > 0 {
                    q[start + k] = mass / nonzero as f64;
                }
            }
        }
    }
    for v in p.iter_mut().chain(q.iter_mut()) {
        if *v == 0.0 {
            *v = KL_SMOOTHING;
        }
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    p.iter()
        .zip(&q)
        .map(|(&a, &b)| {
            let (a, b) = (a / sp, b / sq);
            a * (a / b).ln()
        })
        .sum()
}

/// Clip point minimizing the divergence between the clipped histogram and its
/// `2^target_bit`-level quantization. Returns the winning bin count.
pub fn kl_best_bins(stats: &EdgeStats, target_bit: u32) -> Result<usize> {
    if !(1..=24).contains(&target_bit) {
        return Err(Error::Invalid(format!("KL target of {target_bit} bits is out of range")));
    }
    let levels = 1usize << target_bit;
    if stats.bins() < levels {
        return Err(Error::Invalid(format!("KL at {target_bit} bits needs at least {levels} bins, have {}", stats.bins())));
    }
    if stats.total() == 0 {
        return Err(Error::Invalid("KL threshold of an empty histogram".into()));
    }
    let mut best = (f64::INFINITY, levels);
    for i in levels..=stats.bins() {
        let kl = kl_divergence_at(&stats.counts, i, levels);
        if kl < best.0 {
            best = (kl, i);
        }
    }
    Ok(best.1)
}

pub fn threshold_kl(stats: &EdgeStats, target_bit: u32) -> Result<f32> {
    let i = kl_best_bins(stats, target_bit)?;
    Ok(guard(stats.bin_edge(i - 1)))
}

/// Nearest power of two, rounding the exponent half up.
pub fn round_pow2(threshold: f32) -> Result<f32> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::Invalid(format!("cannot round {threshold} to a power of two")));
    }
    let e = ((threshold as f64).log2() + 0.5).floor() as i32;
    Ok(2f32.powi(e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Estimator {
    Max,
    Quantile(f64),
    Kl(u32),
}

impl Default for Estimator {
    fn default() -> Self {
        Estimator::Quantile(0.99)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Max => f.write_str("max"),
            Estimator::Quantile(q) => write!(f, "quantile:{q}"),
            Estimator::Kl(b) => write!(f, "kl:{b}"),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("unknown estimator `{s}` (expected max, quantile:Q or kl:BITS)"));
        match s.split_once(':') {
            None if s == "max" => Ok(Estimator::Max),
            Some(("quantile", q)) => Ok(Estimator::Quantile(q.parse().map_err(|_| bad())?)),
            Some(("kl", b)) => Ok(Estimator::Kl(b.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// Estimated threshold plus the observed value range of one edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeCalib {
    pub threshold: f32,
    pub lo: f32,
    pub hi: f32,
}

pub fn estimate(stats: &EdgeStats, estimator: Estimator, pow2: bool) -> Result<EdgeCalib> {
    let t = match estimator {
        Estimator::Max => threshold_max(stats),
        Estimator::Quantile(q) => threshold_quantile(stats, q)?,
        Estimator::Kl(b) => threshold_kl(stats, b)?,
    };
    let threshold = if pow2 { round_pow2(t)? } else { t };
    Ok(EdgeCalib { threshold, lo: stats.min, hi: stats.max })
}

/// Statistics together with the thresholds derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub stats: CalibrationStats,
    pub estimator: Estimator,
    pub pow2: bool,
    pub edges: BTreeMap<usize, EdgeCalib>,
}

impl Calibration {
    pub fn new(stats: CalibrationStats, estimator: Estimator, pow2: bool) -> Result<Self> {
        let edges = stats
            .per_edge
            .iter()
            .map(|(&e, s)| Ok((e, estimate(s, estimator, pow2)?)))
            .collect::<Result<_>>()?;
        Ok(Calibration { stats, estimator, pow2, edges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = StatsFile {
            fingerprints: Fingerprints {
                dataset: self.stats.dataset_fingerprint.clone(),
                graph: self.stats.graph_fingerprint.clone(),
            },
            bins: self.stats.bins,
            estimator: self.estimator.to_string(),
            pow2: self.pow2,
            edges: self
                .stats
                .per_edge
                .iter()
                .map(|(&edge, s)| {
                    let c = self.edges[&edge];
                    EdgeRecord {
                        edge,
                        min: s.min,
                        max: s.max,
                        absmax: s.absmax,
                        bins: s.bins(),
                        counts: s.counts.clone(),
                        samples: s.samples,
                        threshold: c.threshold,
                        lo: c.lo,
                        hi: c.hi,
                    }
                })
                .collect(),
        };
        write_text(path, &to_pretty(&serde_json::to_value(file)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: StatsFile =
            serde_json::from_value(read_json(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut per_edge = BTreeMap::new();
        let mut edges = BTreeMap::new();
        for r in file.edges {
            if r.counts.len() != r.bins {
                return Err(Error::Format(format!("edge {}: {} counts for {} bins", r.edge, r.counts.len(), r.bins)));
            }
            if !(r.threshold > 0.0) {
                return Err(Error::Format(format!("edge {}: threshold must be positive", r.edge)));
            }
            per_edge.insert(r.edge, EdgeStats { min: r.min, max: r.max, absmax: r.absmax, counts: r.counts, samples: r.samples });
            edges.insert(r.edge, EdgeCalib { threshold: r.threshold, lo: r.lo, hi: r.hi });
        }
        Ok(Calibration {
            stats: CalibrationStats {
                per_edge,
                dataset_fingerprint: file.fingerprints.dataset,
                graph_fingerprint: file.fingerprints.graph,
                bins: file.bins,
            },
            estimator: file.estimator.parse()?,
            pow2: file.pow2,
            edges,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Fingerprints {
    dataset: String,
    graph: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    fingerprints: Fingerprints,
    bins: usize,
    estimator: String,
    pow2: bool,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    edge: usize,
    min: f32,
    max: f32,
    absmax: f32,
    bins: usize,
    counts: Vec<u64>,
    samples: usize,
    threshold: f32,
    lo: f32,
    hi: f32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist(counts: Vec<u64>, absmax: f32) -> EdgeStats {
        EdgeStats { min: -absmax, max: absmax, absmax, counts, samples: 1 }
    }

    #[test]
    fn single_batch_extrema() {
        let s = EdgeStats::from_values(&[-3.2, 1.1, 2.9], 16);
        assert_eq!((s.min, s.max, s.absmax), (-3.2, 2.9, 3.2));
        assert_eq!(s.total(), 3);
        assert_eq!(s.counts[15], 1);
        let z = EdgeStats::from_values(&[0.0; 4], 8);
        assert_eq!(z.absmax, 0.0);
        assert_eq!(threshold_max(&z), EPSILON);
        assert_eq!(threshold_quantile(&z, 0.5).unwrap(), EPSILON);
    }

    #[test]
    fn max_threshold() {
        assert_eq!(threshold_max(&EdgeStats::from_values(&[7.0; 5], 8)), 7.0);
        assert_eq!(threshold_max(&EdgeStats::from_values(&[3.2, -1.0], 8)), 3.2);
    }

    #[test]
    fn quantile_of_one_to_hundred() {
        let values: Vec<f32> = (1..=100).map(|v| v as f32).collect();
        let s = EdgeStats::from_values(&values, 100);
        // Nearest rank: the 99th smallest of 1..=100.
        let mut sorted = values.clone();
        sorted.sort_by(f32::total_cmp);
        let rank = (0.99f64 * 100.0).ceil() as usize;
        assert_eq!(threshold_quantile(&s, 0.99).unwrap(), sorted[rank - 1]);
        assert_eq!(threshold_quantile(&s, 1.0).unwrap(), 100.0);
        assert!(threshold_quantile(&s, 0.0).is_err());
        assert!(threshold_quantile(&s, 1.5).is_err());
    }

    #[test]
    fn quantile_excludes_a_single_outlier() {
        let mut values: Vec<f32> = (0..999).map(|i| (i as f32 + 1.0) / 999.0).collect();
        values.push(1000.0);
        let s = EdgeStats::from_values(&values, 2048);
        let t = threshold_quantile(&s, 0.999).unwrap();
        let width = 1000.0 / 2048.0;
        assert!(t <= 1.0 + width && t >= 1.0, "{t}");
    }

    #[test]
    fn kl_on_uniform_and_point_mass() {
        let uniform = hist(vec![10; 64], 6.4);
        assert_eq!(threshold_kl(&uniform, 4).unwrap(), 6.4);
        let mut point = vec![0u64; 64];
        point[0] = 500;
        let p = hist(point, 6.4);
        assert_eq!(kl_best_bins(&p, 4).unwrap(), 16);
        assert!((threshold_kl(&p, 4).unwrap() - 1.6).abs() < 1e-6);
        assert!(threshold_kl(&hist(vec![0; 64], 1.0), 4).is_err());
        assert!(threshold_kl(&hist(vec![1; 8], 1.0), 4).is_err());
    }

    #[test]
    fn pow2_examples() {
        assert_eq!(round_pow2(3.2).unwrap(), 4.0);
        assert_eq!(round_pow2(2.0).unwrap(), 2.0);
        assert_eq!(round_pow2(1.5).unwrap(), 2.0);
        assert_eq!(round_pow2(0.3).unwrap(), 0.25);
        assert!(round_pow2(0.0).is_err());
        assert!(round_pow2(-1.0).is_err());
    }

    #[test]
    fn estimator_strings() {
        for e in [Estimator::Max, Estimator::Quantile(0.99), Estimator::Kl(8)] {
            assert_eq!(e.to_string().parse::<Estimator>().unwrap(), e);
        }
        assert!("median".parse::<Estimator>().is_err());
    }

    fn stats() -> impl Strategy<Value = EdgeStats> {
        (prop::collection::vec(-100.0f32..100.0, 1..200), 1usize..64).prop_map(|(v, b)| EdgeStats::from_values(&v, b))
    }

    proptest! {
        #[test]
        fn quantile_is_monotone_and_bounded(s in stats(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (tl, th) = (threshold_quantile(&s, lo).unwrap(), threshold_quantile(&s, hi).unwrap());
            prop_assert!(tl <= th);
            prop_assert!(th > 0.0 && th <= threshold_max(&s));
            if s.absmax > 0.0 {
                prop_assert_eq!(threshold_quantile(&s, 1.0).unwrap(), threshold_max(&s));
            }
        }

        #[test]
        fn kl_threshold_is_bounded(s in stats(), bit in 1u32..4) {
            prop_assume!(s.bins() >= 1 << bit);
            let t = threshold_kl(&s, bit).unwrap();
            prop_assert!(t > 0.0 && t <= threshold_max(&s));
        }

        #[test]
        fn pow2_is_exact_and_close(t in 1e-6f32..1e6) {
            let p = round_pow2(t).unwrap();
            prop_assert_eq!(p.to_bits() & 0x007f_ffff, 0);
            prop_assert!(((p as f64).log2() - (t as f64).log2()).abs() <= 0.5 + 1e-9);
        }
    }
}
