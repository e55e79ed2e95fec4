//! Derives everything a bit assignment implies: storage dtypes, matched
//! hardware signatures, operator output scales, accumulator bounds and the
//! runtime binding that simulates them.

use std::collections::{BTreeMap, HashMap};

use crate::calibration::{EdgeCalib, EPSILON};
use crate::dtype::{max_bits, DType};
use crate::error::{Error, Result};
use crate::graph::{infer_shapes, NodeId, Op, OpKind};
use crate::hwspec::{HardwareSpec, Signature};
use crate::simulate::{Binding, Grid, QParams, SimQuantParams};
use crate::topology::SimulatedGraph;

/// Quantization decision for one searchable edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeSetting {
    pub bit: u32,
    pub threshold: f32,
    pub sign: u32,
    pub zero_point: i64,
    pub storage: DType,
}

impl EdgeSetting {
    pub fn qparams(&self) -> Result<QParams> {
        QParams::new(self.threshold, self.bit, self.sign, self.storage, self.zero_point)
    }
}

/// Whether a `bit`-bit code with the given sign convention fits in `d`.
pub fn fits(bit: u32, sign: u32, d: DType) -> bool {
    d.is_integer() && d.is_signed() == (sign == 1) && bit <= d.width()
}

/// Narrowest candidate able to hold a `bit`-bit code of the given sign.
pub fn choose_storage_dtype(bit: u32, sign: u32, candidates: &[DType]) -> Result<DType> {
    candidates
        .iter()
        .copied()
        .filter(|&d| fits(bit, sign, d))
        .min_by_key(|d| d.width())
        .ok_or_else(|| Error::Invalid(format!("no candidate among {candidates:?} holds {bit} bits with sign {sign}")))
}

/// Threshold and zero point of an edge: symmetric edges use the calibrated
/// threshold directly; unsigned edges cover the observed range clipped to
/// `[-threshold, threshold]` and always including zero.
pub fn grid_params(c: &EdgeCalib, bit: u32, sign: u32) -> (f32, i64) {
    if sign == 1 {
        return (c.threshold, 0);
    }
    let lo = c.lo.max(-c.threshold).min(0.0);
    let hi = c.hi.min(c.threshold).max(0.0);
    let range = hi - lo;
    let range = if range > 0.0 { range } else { EPSILON };
    let s = range / (1u64 << bit) as f32;
    let qmax = (1i64 << bit) - 1;
    let zp = ((-lo / s).round() as i64).clamp(0, qmax);
    (range, zp)
}

/// Integer representation of a quantized operator's output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Repr {
    pub scale: f32,
    pub zero_point: i64,
    pub dtype: DType,
}

impl Repr {
    /// Real-valued range the representation can hold.
    pub fn real_bounds(&self) -> (f32, f32) {
        (
            (self.dtype.min_value() - self.zero_point) as f32 * self.scale,
            (self.dtype.max_value() - self.zero_point) as f32 * self.scale,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpPlan {
    pub signature: Signature,
    pub out: Repr,
    pub in_zero_points: Vec<i64>,
    /// Port re-rounded onto the unified scale of an add.
    pub rescale: Option<(usize, Grid)>,
    pub bias: Option<Grid>,
    pub clip: Option<(i64, i64)>,
}

#[derive(Clone, Debug)]
pub struct QuantPlan {
    /// One per searchable edge, in canonical order.
    pub settings: Vec<EdgeSetting>,
    pub ops: BTreeMap<NodeId, OpPlan>,
    pub binding: Binding,
}

fn sig_order(s: &Signature) -> (u32, u32) {
    (s.in_dtypes.iter().map(|d| d.width()).sum(), s.out.width())
}

/// Edge settings for a bit vector: the consumer's narrowest integer signature
/// that holds every port's code decides each edge's storage dtype.
pub fn settings_from_bits(sim: &SimulatedGraph, spec: &HardwareSpec, calib: &BTreeMap<usize, EdgeCalib>, bits: &[u32]) -> Result<Vec<EdgeSetting>> {
    if bits.len() != sim.searchable.len() {
        return Err(Error::Invalid(format!("{} bits given for {} searchable edges", bits.len(), sim.searchable.len())));
    }
    let ports = consumer_ports(sim)?;
    let mut settings: Vec<Option<EdgeSetting>> = vec![None; bits.len()];
    for (consumer, port_edges) in &ports {
        let kind = kind_of(sim, *consumer);
        let want: Vec<(u32, u32)> = port_edges.iter().map(|&k| (bits[k], sim.topology.edge_sign(sim.searchable[k].edge))).collect();
        let sig = pick_signature(spec, kind, |s| s.in_dtypes.iter().zip(&want).all(|(&d, &(b, sg))| fits(b, sg, d)))
            .ok_or_else(|| Error::SignatureMismatch {
                node: *consumer,
                detail: format!("no `{kind}` signature holds input bits {:?}", want.iter().map(|w| w.0).collect::<Vec<_>>()),
            })?;
        for (port, &k) in port_edges.iter().enumerate() {
            let s = &sim.searchable[k];
            let c = calib
                .get(&s.edge)
                .ok_or_else(|| Error::Invalid(format!("no calibration for edge {}", s.edge)))?;
            let sign = want[port].1;
            let (threshold, zero_point) = grid_params(c, bits[k], sign);
            settings[k] = Some(EdgeSetting { bit: bits[k], threshold, sign, zero_point, storage: sig.in_dtypes[port] });
        }
    }
    Ok(settings.into_iter().map(|s| s.expect("every searchable edge feeds a quantized port")).collect())
}

fn kind_of(sim: &SimulatedGraph, id: NodeId) -> OpKind {
    sim.graph.node(id).expect("consumer exists").kind()
}

fn pick_signature(spec: &HardwareSpec, kind: OpKind, ok: impl Fn(&Signature) -> bool) -> Option<&Signature> {
    spec.signatures(kind)
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_all_integer() && ok(s))
        .min_by_key(|(i, s)| (sig_order(s), *i))
        .map(|(_, s)| s)
}

/// Searchable-edge indices feeding each quantized operator, by input port.
fn consumer_ports(sim: &SimulatedGraph) -> Result<BTreeMap<NodeId, Vec<usize>>> {
    let mut by_port: BTreeMap<NodeId, BTreeMap<usize, usize>> = BTreeMap::new();
    for (k, s) in sim.searchable.iter().enumerate() {
        let dst = sim.topology.edges[s.edge].dst;
        by_port.entry(dst.node).or_default().insert(dst.port, k);
    }
    by_port
        .into_iter()
        .map(|(node, ports)| {
            let arity = kind_of(sim, node).arity();
            if ports.len() != arity {
                return Err(Error::Invalid(format!("quantized node {node} has {} of {arity} inputs quantized", ports.len())));
            }
            Ok((node, ports.into_values().collect()))
        })
        .collect()
}

impl QuantPlan {
    pub fn from_bits(sim: &SimulatedGraph, spec: &HardwareSpec, calib: &BTreeMap<usize, EdgeCalib>, bits: &[u32]) -> Result<Self> {
        Self::build(sim, spec, settings_from_bits(sim, spec, calib, bits)?)
    }

    pub fn build(sim: &SimulatedGraph, spec: &HardwareSpec, settings: Vec<EdgeSetting>) -> Result<Self> {
        if settings.len() != sim.searchable.len() {
            return Err(Error::Invalid(format!("{} settings for {} searchable edges", settings.len(), sim.searchable.len())));
        }
        let mut qparams = Vec::with_capacity(settings.len());
        for (s, e) in settings.iter().zip(&sim.searchable) {
            if !e.candidates.contains(&s.storage) {
                return Err(Error::Invalid(format!("edge {}: {} is not among its candidates {:?}", e.edge, s.storage, e.candidates)));
            }
            max_bits(s.storage)?;
            if s.sign != sim.topology.edge_sign(e.edge) {
                return Err(Error::Invalid(format!("edge {}: sign {} does not match its candidates", e.edge, s.sign)));
            }
            qparams.push(s.qparams().map_err(|err| Error::Invalid(format!("edge {}: {err}", e.edge)))?);
        }

        let g = &sim.graph;
        let shapes = infer_shapes(g).0;
        let producers = g.producers();
        let mut ops = BTreeMap::new();
        for (consumer, ks) in consumer_ports(sim)? {
            let node = g.node(consumer).expect("consumer exists");
            let kind = node.kind();
            let dtypes: Vec<DType> = ks.iter().map(|&k| settings[k].storage).collect();
            let signature = pick_signature(spec, kind, |s| s.in_dtypes == dtypes).cloned().ok_or_else(|| Error::SignatureMismatch {
                node: consumer,
                detail: format!("no `{kind}` signature takes {dtypes:?}"),
            })?;
            let grids: Vec<Grid> = ks.iter().map(|&k| qparams[k].grid()).collect();
            let zps: Vec<i64> = grids.iter().map(|g| g.zero_point).collect();
            let acc = signature.out;
            let mut plan = OpPlan {
                signature,
                out: Repr { scale: grids[0].scale, zero_point: grids[0].zero_point, dtype: acc },
                in_zero_points: zps.clone(),
                rescale: None,
                bias: None,
                clip: None,
            };
            match &node.op {
                Op::Conv2d { bias, .. } | Op::Dense { bias } => {
                    let scale = grids[0].scale * grids[1].scale;
                    plan.out = Repr { scale, zero_point: 0, dtype: acc };
                    if bias.is_some() {
                        plan.bias = Some(Grid { scale, zero_point: 0, qmin: acc.min_value(), qmax: acc.max_value() });
                    }
                }
                Op::Add => {
                    if zps.iter().any(|&z| z != 0) {
                        return Err(Error::SignatureMismatch {
                            node: consumer,
                            detail: "add needs symmetric inputs to share a scale".into(),
                        });
                    }
                    let (t0, t1) = (settings[ks[0]].threshold, settings[ks[1]].threshold);
                    let (keep, other) = if t1 > t0 { (1, 0) } else { (0, 1) };
                    let scale = grids[keep].scale;
                    plan.out = Repr { scale, zero_point: 0, dtype: acc };
                    let d = plan.signature.in_dtypes[other];
                    plan.rescale = Some((other, Grid { scale, zero_point: 0, qmin: d.min_value(), qmax: d.max_value() }));
                }
                Op::Clip { min, max, .. } => {
                    let (lo, hi) = rewrite_clip(*min, *max, grids[0].scale, grids[0].zero_point, acc);
                    plan.clip = Some((lo, hi));
                }
                Op::GlobalAvgPool2d => {
                    if zps[0] != 0 {
                        return Err(Error::SignatureMismatch {
                            node: consumer,
                            detail: "integer average pooling needs a zero-point-free input".into(),
                        });
                    }
                    let src = producers[&consumer][&0].node;
                    let s = shapes.get(&src).ok_or_else(|| Error::Shape { node: consumer, detail: "unknown input shape".into() })?;
                    plan.out.scale = grids[0].scale / (s[2] * s[3]) as f32;
                }
                Op::Relu | Op::MaxPool2d { .. } | Op::Flatten => {}
                _ => {
                    return Err(Error::SignatureMismatch { node: consumer, detail: format!("`{kind}` has no integer lowering") });
                }
            }
            ops.insert(consumer, plan);
        }

        let mut binding = Binding::default();
        let overflow = |sq: NodeId| -> Option<(f32, f32)> {
            sim.source_of(sq).and_then(|p| ops.get(&p.node)).map(|o: &OpPlan| o.out.real_bounds())
        };
        for (k, e) in sim.searchable.iter().enumerate() {
            let dst = sim.topology.edges[e.edge].dst;
            let rescale = ops[&dst.node].rescale.filter(|(port, _)| *port == dst.port).map(|(_, g)| g);
            binding.sim.insert(
                e.node,
                SimQuantParams { passthrough: false, quant: Some(qparams[k]), overflow: overflow(e.node), rescale },
            );
        }
        for &b in &sim.boundaries {
            binding
                .sim
                .insert(b, SimQuantParams { passthrough: false, quant: None, overflow: overflow(b), rescale: None });
        }
        for (&id, op) in &ops {
            if let Some((lo, hi)) = op.clip {
                let g = Grid { scale: op.out.scale, zero_point: op.out.zero_point, qmin: lo, qmax: hi };
                binding.clip.insert(id, (g.value(lo), g.value(hi)));
            }
            if let Some(b) = op.bias {
                binding.bias.insert(id, b);
            }
        }
        Ok(QuantPlan { settings, ops, binding })
    }
}

/// Integer clip bounds for codes at `scale` with `zero_point`, intersected
/// with the range of `dtype`.
pub fn rewrite_clip(min: f32, max: f32, scale: f32, zero_point: i64, dtype: DType) -> (i64, i64) {
    let q = |v: f32| ((v / scale).round() as i64).saturating_add(zero_point);
    let (lo, hi) = (dtype.min_value(), dtype.max_value());
    (q(min).clamp(lo, hi), q(max).clamp(lo, hi))
}

/// Binding under which every inserted node passes values through unchanged.
pub fn passthrough_binding(sim: &SimulatedGraph) -> Binding {
    let mut b = Binding::default();
    let nodes = sim.searchable.iter().map(|s| s.node).chain(sim.boundaries.iter().copied());
    b.sim = nodes.map(|n| (n, crate::simulate::noop_params())).collect::<HashMap<_, _>>();
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storage_choice() {
        let c = [DType::Int8, DType::Int16];
        assert_eq!(choose_storage_dtype(6, 1, &c).unwrap(), DType::Int8);
        assert_eq!(choose_storage_dtype(12, 1, &c).unwrap(), DType::Int16);
        assert!(choose_storage_dtype(9, 1, &[DType::Int8]).is_err());
        assert!(choose_storage_dtype(8, 1, &[DType::UInt8]).is_err());
        assert_eq!(choose_storage_dtype(8, 0, &[DType::UInt8]).unwrap(), DType::UInt8);
    }

    #[test]
    fn clip_rewrite_examples() {
        assert_eq!(rewrite_clip(0.0, 6.0, 0.05, 0, DType::Int32), (0, 120));
        assert_eq!(rewrite_clip(0.0, 6.0, 0.05, 10, DType::Int8), (10, 127));
        assert_eq!(rewrite_clip(-1.0, 1.0, 1.0, 0, DType::Int8), (-1, 1));
    }

    #[test]
    fn unsigned_grid_covers_zero() {
        let c = EdgeCalib { threshold: 4.0, lo: 1.0, hi: 6.0 };
        let (t, zp) = grid_params(&c, 8, 0);
        assert_eq!((t, zp), (4.0, 0));
        let c = EdgeCalib { threshold: 2.0, lo: -1.0, hi: 3.0 };
        let (t, zp) = grid_params(&c, 8, 0);
        assert_eq!(t, 3.0);
        assert_eq!(zp, 85);
        let (t, zp) = grid_params(&c, 8, 1);
        assert_eq!((t, zp), (2.0, 0));
    }
}
