//! Lowering of a simulated graph plus a bit-width strategy into an integer
//! graph of quantize, dequantize and requantize nodes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::graph_fingerprint;
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::graph::{read_json, validate_graph, write_text, Edge, Graph, IntAnnotation, NodeId, Op, PortRef, QuantizeAttrs, RequantizeAttrs};
use crate::hwspec::HardwareSpec;
use crate::plan::{EdgeSetting, OpPlan, QuantPlan, Repr};
use crate::simulate::Grid;
use crate::tensor::Tensor;
use crate::topology::{generate_topology, insert_simulated_quantize, SimulatedGraph};

pub use crate::plan::{choose_storage_dtype, rewrite_clip};

/// Fixed-point form of a positive ratio: `multiplier · 2^−shift`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RequantParams {
    pub multiplier: i64,
    pub shift: u32,
}

impl RequantParams {
    pub fn ratio(&self) -> f64 {
        self.multiplier as f64 * (-(self.shift as f64)).exp2()
    }
}

/// `x = m · 2^e` with `m` in `[0.5, 1)`, for finite positive `x`.
fn frexp(x: f64) -> (f64, i32) {
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        let (m, e) = frexp(x * 2f64.powi(64));
        return (m, e - 64);
    }
    let m = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
    (m, exp - 1022)
}

const MAX_SHIFT: i32 = 126;

pub fn requantize_params(s_in: f64, s_out: f64) -> Result<RequantParams> {
    if !(s_in > 0.0 && s_out > 0.0 && s_in.is_finite() && s_out.is_finite()) {
        return Err(Error::Invalid(format!("requantize scales must be positive and finite, got {s_in} and {s_out}")));
    }
    let (m, e) = frexp(s_in / s_out);
    let mut multiplier = (m * 2f64.powi(31)).round() as i64;
    let mut shift = 31 - e;
    if multiplier == 1 << 31 {
        multiplier >>= 1;
        shift -= 1;
    }
    if !(0..=MAX_SHIFT).contains(&shift) {
        return Err(Error::Invalid(format!("scale ratio {} is outside the fixed-point range", s_in / s_out)));
    }
    Ok(RequantParams { multiplier, shift: shift as u32 })
}

/// Final per-edge quantization decisions for one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    /// Fingerprint of the float graph the strategy was searched on.
    pub fingerprint: String,
    /// Keyed by canonical edge index.
    pub edges: BTreeMap<usize, EdgeSetting>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyFile {
    fingerprint: String,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    edge: usize,
    bit: u32,
    threshold: f32,
    sign: u32,
    storage_dtype: DType,
    zero_point: i64,
}

impl Strategy {
    pub fn new(g: &Graph, sim: &SimulatedGraph, settings: &[EdgeSetting]) -> Result<Self> {
        if settings.len() != sim.searchable.len() {
            return Err(Error::Invalid(format!("{} settings for {} searchable edges", settings.len(), sim.searchable.len())));
        }
        let edges = sim.searchable.iter().zip(settings).map(|(e, s)| (e.edge, *s)).collect();
        Ok(Strategy { fingerprint: graph_fingerprint(g), edges })
    }

    /// Settings in the searchable-edge order of `sim`.
    pub fn settings(&self, sim: &SimulatedGraph) -> Result<Vec<EdgeSetting>> {
        let want: BTreeSet<usize> = sim.searchable.iter().map(|e| e.edge).collect();
        if let Some(extra) = self.edges.keys().find(|k| !want.contains(k)) {
            return Err(Error::Invalid(format!("strategy sets edge {extra}, which is not searchable")));
        }
        sim.searchable
            .iter()
            .map(|e| self.edges.get(&e.edge).copied().ok_or_else(|| Error::Invalid(format!("strategy does not cover edge {}", e.edge))))
            .collect()
    }

    pub fn bits(&self) -> Vec<u32> {
        self.edges.values().map(|s| s.bit).collect()
    }

    pub fn to_json(&self) -> String {
        let file = StrategyFile {
            fingerprint: self.fingerprint.clone(),
            edges: self
                .edges
                .iter()
                .map(|(&edge, s)| EdgeRecord {
                    edge,
                    bit: s.bit,
                    threshold: s.threshold,
                    sign: s.sign,
                    storage_dtype: s.storage,
                    zero_point: s.zero_point,
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("strategy records serialize");
        s.push('\n');
        s
    }

    pub fn from_json(v: serde_json::Value) -> Result<Self> {
        let file: StrategyFile = serde_json::from_value(v).map_err(|e| Error::Format(format!("strategy: {e}")))?;
        let mut edges = BTreeMap::new();
        for r in file.edges {
            let s = EdgeSetting { bit: r.bit, threshold: r.threshold, sign: r.sign, zero_point: r.zero_point, storage: r.storage_dtype };
            if edges.insert(r.edge, s).is_some() {
                return Err(Error::Format(format!("strategy lists edge {} twice", r.edge)));
            }
        }
        Ok(Strategy { fingerprint: file.fingerprint, edges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(read_json(path)?)
    }
}

/// Lower `g` under `strategy` into an integer graph.
pub fn realize(g: &Graph, spec: &HardwareSpec, strategy: &Strategy) -> Result<Graph> {
    if strategy.fingerprint != graph_fingerprint(g) {
        return Err(Error::Invalid("strategy was produced for a different graph".into()));
    }
    let t = generate_topology(g, spec)?;
    let sim = insert_simulated_quantize(g, &t)?;
    let plan = QuantPlan::build(&sim, spec, strategy.settings(&sim)?)?;
    lower(&sim, &plan)
}

fn requantize(from: Grid, to: Grid, dtype: DType) -> Result<RequantizeAttrs> {
    let p = requantize_params(from.scale as f64, to.scale as f64)?;
    Ok(RequantizeAttrs {
        multiplier: p.multiplier,
        shift: p.shift,
        scale: from.scale / to.scale,
        in_zero_point: from.zero_point,
        zero_point: to.zero_point,
        out_dtype: dtype,
        qmin: to.qmin,
        qmax: to.qmax,
    })
}

fn repr_grid(r: &Repr) -> Grid {
    Grid { scale: r.scale, zero_point: r.zero_point, qmin: r.dtype.min_value(), qmax: r.dtype.max_value() }
}

/// Replace every simulated_quantize node of `sim` according to `plan`.
pub fn lower(sim: &SimulatedGraph, plan: &QuantPlan) -> Result<Graph> {
    let mut g = sim.graph.clone();
    let pos = g.positions();
    let mut next = g.max_id().map_or(0, |m| m.0 + 1);
    let mut dropped_edges: BTreeSet<(PortRef, PortRef)> = BTreeSet::new();
    let mut folded_sources = BTreeSet::new();
    let mut inserted = Vec::new();

    for (k, e) in sim.searchable.iter().enumerate() {
        let s = &plan.settings[k];
        let grid = s.qparams()?.grid();
        let src = sim.source_of(e.node).ok_or_else(|| Error::Invalid(format!("node {} has no producer", e.node)))?;
        let dst = sim.target_of(e.node).ok_or_else(|| Error::Invalid(format!("node {} has no consumer", e.node)))?;
        let rescale = plan.ops[&dst.node].rescale.filter(|(port, _)| *port == dst.port).map(|(_, g)| g);
        let rescale = rescale.map(|to| requantize(grid, to, s.storage)).transpose()?;

        let producer = &sim.graph.nodes[pos[&src.node]];
        let op = match (&producer.op, plan.ops.get(&src.node)) {
            (Op::Constant { value }, _) => {
                let x = value.as_f32().ok_or_else(|| Error::DType { node: src.node, detail: "constant to quantize is not float32".into() })?;
                let codes = x
                    .iter()
                    .map(|&v| {
                        let q = grid.code(v);
                        rescale.as_ref().map_or(q, |r| crate::interp::requantize_value(q, r))
                    })
                    .collect();
                dropped_edges.insert((src, PortRef::new(e.node, 0)));
                folded_sources.insert(src.node);
                g.nodes[pos[&e.node]].op = Op::Constant { value: Tensor::from_int(s.storage, value.shape().to_vec(), codes)? };
                continue;
            }
            (_, Some(p)) => Op::Requantize(requantize(repr_grid(&p.out), grid, s.storage)?),
            (_, None) => Op::Quantize(QuantizeAttrs {
                scale: grid.scale,
                zero_point: grid.zero_point,
                out_dtype: s.storage,
                qmin: grid.qmin,
                qmax: grid.qmax,
            }),
        };
        g.nodes[pos[&e.node]].op = op;
        if let Some(r) = rescale {
            let id = NodeId(next);
            next += 1;
            inserted.push((id, Op::Requantize(r), PortRef::new(e.node, 0), dst));
        }
    }

    for &b in &sim.boundaries {
        let src = sim.source_of(b).ok_or_else(|| Error::Invalid(format!("node {b} has no producer")))?;
        let r = plan.ops.get(&src.node).ok_or_else(|| Error::Invalid(format!("boundary {b} is not fed by a quantized operator")))?;
        g.nodes[pos[&b]].op = Op::Dequantize { scale: r.out.scale, zero_point: r.out.zero_point };
    }

    for (&id, p) in &plan.ops {
        annotate(&mut g.nodes[pos[&id]], p)?;
    }

    g.edges.retain(|e| !dropped_edges.contains(&(e.src, e.dst)));
    for (id, op, from, to) in inserted {
        g.nodes.push(crate::graph::Node::new(id, op));
        for e in g.edges.iter_mut() {
            if e.src == from && e.dst == to {
                e.dst = PortRef::new(id, 0);
            }
        }
        g.edges.push(Edge { src: PortRef::new(id, 0), dst: to });
    }

    let used: HashMap<NodeId, ()> = g.edges.iter().map(|e| (e.src.node, ())).chain(g.outputs.iter().map(|o| (o.node, ()))).collect();
    g.nodes.retain(|n| !folded_sources.contains(&n.id) || used.contains_key(&n.id));

    let problems = validate_graph(&g);
    if let Some(p) = problems.first() {
        return Err(Error::Invalid(format!("realized graph is invalid: {p}")));
    }
    Ok(g)
}

fn annotate(node: &mut crate::graph::Node, p: &OpPlan) -> Result<()> {
    let acc = p.signature.out;
    let bias_grid = p.bias;
    match &mut node.op {
        Op::Conv2d { bias, .. } | Op::Dense { bias } => {
            if let (Some(b), Some(grid)) = (bias.as_mut(), bias_grid) {
                let x = b.as_f32().ok_or_else(|| Error::DType { node: node.id, detail: "bias is not float32".into() })?;
                *b = Tensor::from_int(acc, b.shape().to_vec(), x.iter().map(|&v| grid.code(v)).collect())?;
            }
        }
        Op::Clip { int_bounds, .. } => *int_bounds = p.clip,
        _ => {}
    }
    node.int = Some(IntAnnotation { in_dtypes: p.signature.in_dtypes.clone(), acc_dtype: acc, in_zero_points: p.in_zero_points.clone() });
    Ok(())
}
