//! Reference executor for float32 graphs (optionally carrying
//! simulated_quantize nodes) and realized integer graphs.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::dataset::{Feed, Sample};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::graph::{traversal_order, Graph, IntAnnotation, Node, NodeId, Op, OpKind, RequantizeAttrs};
use crate::simulate::Binding;
use crate::tensor::{numel, Tensor, TensorData};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverflowMode {
    /// Clamp the accumulator to its dtype range whenever it leaves it.
    Saturate,
    /// Abort at the first accumulator overflow.
    Trap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Float,
    Int(OverflowMode),
}

impl Regime {
    fn name(self) -> &'static str {
        match self {
            Regime::Float => "float32",
            Regime::Int(_) => "integer",
        }
    }
}

/// Regime a graph is meant to run in: integer once it contains any
/// quantize/dequantize/requantize node.
pub fn natural_regime(g: &Graph) -> Regime {
    let realized = g
        .nodes
        .iter()
        .any(|n| matches!(n.kind(), OpKind::Quantize | OpKind::Dequantize | OpKind::Requantize));
    if realized {
        Regime::Int(OverflowMode::Saturate)
    } else {
        Regime::Float
    }
}

/// A graph prepared for repeated evaluation. Shareable across threads.
#[derive(Debug)]
pub struct Executor<'g> {
    g: &'g Graph,
    order: Vec<usize>,
    /// Producer positions per node, in input-port order.
    args: Vec<Vec<usize>>,
    outputs: Vec<usize>,
}

impl<'g> Executor<'g> {
    pub fn new(g: &'g Graph) -> Result<Self> {
        let pos = g.positions();
        let order = traversal_order(g)?.into_iter().map(|id| pos[&id]).collect();
        let producers = g.producers();
        let mut args = Vec::with_capacity(g.nodes.len());
        for n in &g.nodes {
            let ps: BTreeMap<usize, usize> = producers
                .get(&n.id)
                .map(|m| m.iter().map(|(&port, p)| (port, pos[&p.node])).collect())
                .unwrap_or_default();
            if ps.len() != n.kind().arity() || ps.keys().enumerate().any(|(i, &p)| i != p) {
                return Err(Error::Invalid(format!("node {} does not have every input port fed exactly once", n.id)));
            }
            args.push(ps.into_values().collect());
        }
        let outputs = g
            .outputs
            .iter()
            .map(|o| pos.get(&o.node).copied().ok_or_else(|| Error::Invalid(format!("output node {} does not exist", o.node))))
            .collect::<Result<_>>()?;
        Ok(Executor { g, order, args, outputs })
    }

    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    /// Evaluate and return the graph outputs.
    pub fn run(&self, feed: &Feed, regime: Regime, binding: Option<&Binding>) -> Result<Vec<Tensor>> {
        let mut values = self.values(feed, regime, binding)?;
        Ok(self.outputs.iter().map(|&i| values[i].take().expect("every node is evaluated")).collect())
    }

    /// Evaluate and return every node's output.
    pub fn run_all(&self, feed: &Feed, regime: Regime, binding: Option<&Binding>) -> Result<HashMap<NodeId, Tensor>> {
        let values = self.values(feed, regime, binding)?;
        Ok(self
            .g
            .nodes
            .iter()
            .zip(values)
            .map(|(n, v)| (n.id, v.expect("every node is evaluated")))
            .collect())
    }

    fn values(&self, feed: &Feed, regime: Regime, binding: Option<&Binding>) -> Result<Vec<Option<Tensor>>> {
        let mut values: Vec<Option<Tensor>> = vec![None; self.g.nodes.len()];
        for &i in &self.order {
            let node = &self.g.nodes[i];
            let ins: Vec<&Tensor> = self.args[i].iter().map(|&p| values[p].as_ref().expect("producers run first")).collect();
            let out = eval_node(node, &ins, feed, regime, binding)?;
            values[i] = Some(out);
        }
        Ok(values)
    }
}

pub fn eval_fp32(g: &Graph, feed: &Feed) -> Result<Vec<Tensor>> {
    Executor::new(g)?.run(feed, Regime::Float, None)
}

pub fn eval_int(g: &Graph, feed: &Feed, mode: OverflowMode) -> Result<Vec<Tensor>> {
    Executor::new(g)?.run(feed, Regime::Int(mode), None)
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of the first output of every sample.
pub fn predictions(exec: &Executor<'_>, samples: &[Sample], regime: Regime, binding: Option<&Binding>) -> Result<Vec<(usize, usize)>> {
    samples
        .par_iter()
        .map(|s| {
            let out = exec.run(&s.inputs, regime, binding)?;
            let first = out.first().ok_or_else(|| Error::Invalid("graph has no outputs".into()))?;
            Ok((argmax(&first.to_f64()), first.len()))
        })
        .collect()
}

/// Fraction of samples on which both graphs predict the same class, each
/// graph running in its natural regime.
pub fn top1_agreement(g_ref: &Graph, g_test: &Graph, samples: &[Sample]) -> Result<f64> {
    let a = predictions(&Executor::new(g_ref)?, samples, natural_regime(g_ref), None)?;
    let b = predictions(&Executor::new(g_test)?, samples, natural_regime(g_test), None)?;
    agreement(&a, &b)
}

pub(crate) fn agreement(a: &[(usize, usize)], b: &[(usize, usize)]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Invalid("empty sample set".into()));
    }
    let mut same = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.1 != y.1 {
            return Err(Error::Invalid(format!("output sizes differ ({} vs {})", x.1, y.1)));
        }
        same += usize::from(x.0 == y.0);
    }
    Ok(same as f64 / a.len() as f64)
}

/// Fraction of labeled samples predicted correctly; `None` when no sample
/// carries a label.
pub fn labeled_accuracy(g: &Graph, samples: &[Sample]) -> Result<Option<f64>> {
    let labeled: Vec<Sample> = samples.iter().filter(|s| s.label.is_some()).cloned().collect();
    if labeled.is_empty() {
        return Ok(None);
    }
    let preds = predictions(&Executor::new(g)?, &labeled, natural_regime(g), None)?;
    let hits = preds.iter().zip(&labeled).filter(|(p, s)| Some(p.0 as i64) == s.label).count();
    Ok(Some(hits as f64 / labeled.len() as f64))
}

fn eval_node(node: &Node, ins: &[&Tensor], feed: &Feed, regime: Regime, binding: Option<&Binding>) -> Result<Tensor> {
    let id = node.id;
    let unsupported = || Error::UnsupportedOp { node: id, op: node.kind().name(), regime: regime.name() };
    let float_args = || -> Result<Vec<&[f32]>> {
        ins.iter()
            .map(|t| {
                t.as_f32().ok_or_else(|| Error::DType { node: id, detail: format!("expected float32 input, got {}", t.dtype()) })
            })
            .collect()
    };
    let all_int = !ins.is_empty() && ins.iter().all(|t| t.dtype().is_integer());
    let mode = match regime {
        Regime::Int(m) => Some(m),
        Regime::Float => None,
    };
    let shape_err = |detail: String| Error::Shape { node: id, detail };

    match &node.op {
        Op::Input { name, shape } => {
            let t = feed.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err(format!("input `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.clone())
        }
        Op::Constant { value } => Ok(value.clone()),
        Op::Conv2d { bias, .. } | Op::Dense { bias } => {
            let mac = Mac::new(&node.op, ins[0].shape(), ins[1].shape()).map_err(shape_err)?;
            match (all_int, mode) {
                (true, Some(m)) => {
                    let ann = annotation(node)?;
                    check_in_dtypes(node, ann, ins)?;
                    let bias = match bias {
                        Some(b) => Some(b.as_int().ok_or_else(|| Error::DType {
                            node: id,
                            detail: "integer execution needs an integer bias".into(),
                        })?),
                        None => None,
                    };
                    mac.run_int(id, ins[0].as_int().unwrap(), ins[1].as_int().unwrap(), bias, ann, m)
                }
                _ => {
                    let a = float_args()?;
                    let bias: Option<Vec<f32>> = match bias {
                        Some(b) => {
                            let data = b.as_f32().ok_or_else(|| Error::DType {
                                node: id,
                                detail: "float execution needs a float32 bias".into(),
                            })?;
                            let grid = binding.and_then(|bd| bd.bias.get(&id));
                            Some(data.iter().map(|&v| grid.map_or(v, |g| g.apply(v))).collect())
                        }
                        None => None,
                    };
                    Ok(mac.run_f32(a[0], a[1], bias.as_deref()))
                }
            }
        }
        Op::Add => {
            if ins[0].shape() != ins[1].shape() {
                return Err(shape_err(format!("operand shapes {:?} and {:?} differ", ins[0].shape(), ins[1].shape())));
            }
            match (all_int, mode) {
                (true, Some(m)) => {
                    let ann = annotation(node)?;
                    check_in_dtypes(node, ann, ins)?;
                    let (a, b) = (ins[0].as_int().unwrap(), ins[1].as_int().unwrap());
                    let (za, zb) = (ann.in_zero_points[0], ann.in_zero_points[1]);
                    let mut acc = Accumulator::new(id, ann.acc_dtype, m);
                    let out = a
                        .iter()
                        .zip(b)
                        .enumerate()
                        .map(|(i, (&x, &y))| acc.fit(i, (x - za) + (y - zb)))
                        .collect::<Result<_>>()?;
                    Tensor::from_int(ann.acc_dtype, ins[0].shape().to_vec(), out)
                }
                _ => {
                    let a = float_args()?;
                    Tensor::from_f32(ins[0].shape().to_vec(), a[0].iter().zip(a[1]).map(|(x, y)| x + y).collect())
                }
            }
        }
        Op::Relu => match (ins[0].data(), mode) {
            (TensorData::Int(q), Some(m)) => {
                let zp = node.int.as_ref().map_or(0, |a| a.in_zero_points[0]);
                int_unary(node, ins[0], ins[0].shape().to_vec(), m, q.iter().map(|&v| v.max(zp)).collect())
            }
            _ => Tensor::from_f32(ins[0].shape().to_vec(), float_args()?[0].iter().map(|&v| v.max(0.0)).collect()),
        },
        Op::Clip { min, max, int_bounds } => match (ins[0].data(), mode) {
            (TensorData::Int(q), Some(m)) => {
                let (lo, hi) = int_bounds.ok_or_else(|| Error::DType {
                    node: id,
                    detail: "clip on integer codes needs integer bounds".into(),
                })?;
                int_unary(node, ins[0], ins[0].shape().to_vec(), m, q.iter().map(|&v| v.clamp(lo, hi)).collect())
            }
            _ => {
                let (lo, hi) = binding.and_then(|b| b.clip.get(&id)).copied().unwrap_or((*min, *max));
                Tensor::from_f32(ins[0].shape().to_vec(), float_args()?[0].iter().map(|&v| v.clamp(lo, hi)).collect())
            }
        },
        Op::MaxPool2d { pool, stride, padding } => {
            let s = ins[0].shape();
            if s.len() != 4 {
                return Err(shape_err(format!("max_pool2d expects rank 4, got {s:?}")));
            }
            let p = Pool::new(s, *pool, *stride, *padding).ok_or_else(|| shape_err("pool window larger than padded input".into()))?;
            match (ins[0].data(), mode) {
                (TensorData::Int(q), Some(m)) => {
                    let out = p.apply(|i| q[i], i64::MIN, |a, b| a.max(b));
                    int_unary(node, ins[0], p.out_shape(), m, out)
                }
                _ => {
                    let x = float_args()?[0];
                    Tensor::from_f32(p.out_shape(), p.apply(|i| x[i], f32::NEG_INFINITY, f32::max))
                }
            }
        }
        Op::GlobalAvgPool2d => {
            let s = ins[0].shape();
            if s.len() != 4 {
                return Err(shape_err(format!("global_avg_pool2d expects rank 4, got {s:?}")));
            }
            let (planes, hw) = (s[0] * s[1], s[2] * s[3]);
            let out_shape = vec![s[0], s[1], 1, 1];
            match (ins[0].data(), mode) {
                (TensorData::Int(q), Some(m)) => {
                    let ann = annotation(node)?;
                    check_in_dtypes(node, ann, ins)?;
                    let mut out = Vec::with_capacity(planes);
                    for p in 0..planes {
                        let mut acc = Accumulator::new(id, ann.acc_dtype, m);
                        let mut sum = 0i64;
                        for &v in &q[p * hw..(p + 1) * hw] {
                            sum = acc.fit(p, sum + (v - ann.in_zero_points[0]))?;
                        }
                        out.push(sum);
                    }
                    Tensor::from_int(ann.acc_dtype, out_shape, out)
                }
                _ => {
                    let x = float_args()?[0];
                    let out = (0..planes)
                        .map(|p| (x[p * hw..(p + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
                        .collect();
                    Tensor::from_f32(out_shape, out)
                }
            }
        }
        Op::Flatten => {
            let s = ins[0].shape();
            if s.is_empty() {
                return Err(shape_err("cannot flatten a scalar".into()));
            }
            ins[0].reshaped(vec![s[0], s[1..].iter().product()])
        }
        Op::SimulatedQuantize(a) => {
            if mode.is_some() {
                return Err(unsupported());
            }
            let params = binding.and_then(|b| b.sim.get(&id)).unwrap_or(&a.params);
            Tensor::from_f32(ins[0].shape().to_vec(), params.apply_slice(float_args()?[0]))
        }
        Op::Quantize(a) => {
            if mode.is_none() {
                return Err(unsupported());
            }
            let grid = crate::simulate::Grid { scale: a.scale, zero_point: a.zero_point, qmin: a.qmin, qmax: a.qmax };
            let codes = float_args()?[0].iter().map(|&v| grid.code(v)).collect();
            Tensor::from_int(a.out_dtype, ins[0].shape().to_vec(), codes)
        }
        Op::Dequantize { scale, zero_point } => {
            if mode.is_none() {
                return Err(unsupported());
            }
            let q = int_arg(node, ins[0])?;
            Tensor::from_f32(ins[0].shape().to_vec(), q.iter().map(|&v| (v - zero_point) as f32 * scale).collect())
        }
        Op::Requantize(a) => {
            if mode.is_none() {
                return Err(unsupported());
            }
            let q = int_arg(node, ins[0])?;
            Tensor::from_int(a.out_dtype, ins[0].shape().to_vec(), q.iter().map(|&v| requantize_value(v, a)).collect())
        }
    }
}

fn int_arg<'t>(node: &Node, t: &'t Tensor) -> Result<&'t [i64]> {
    t.as_int().ok_or_else(|| Error::DType { node: node.id, detail: format!("expected integer input, got {}", t.dtype()) })
}

fn annotation(node: &Node) -> Result<&IntAnnotation> {
    node.int.as_ref().ok_or(Error::MissingAnnotation(node.id))
}

fn check_in_dtypes(node: &Node, ann: &IntAnnotation, ins: &[&Tensor]) -> Result<()> {
    for (i, (t, want)) in ins.iter().zip(&ann.in_dtypes).enumerate() {
        if t.dtype() != *want {
            return Err(Error::DType { node: node.id, detail: format!("input {i} is {}, annotation says {want}", t.dtype()) });
        }
    }
    Ok(())
}

/// Integer output of a value-preserving unary op, stored in the annotated
/// output dtype when there is one.
fn int_unary(node: &Node, input: &Tensor, shape: Vec<usize>, mode: OverflowMode, values: Vec<i64>) -> Result<Tensor> {
    let dtype = node.int.as_ref().map_or(input.dtype(), |a| a.acc_dtype);
    let mut acc = Accumulator::new(node.id, dtype, mode);
    let values = values.into_iter().enumerate().map(|(i, v)| acc.fit(i, v)).collect::<Result<_>>()?;
    Tensor::from_int(dtype, shape, values)
}

/// `round((v − in_zp) · multiplier / 2^shift) + zp`, rounding half away from
/// zero, clamped to the output code range.
pub fn requantize_value(v: i64, a: &RequantizeAttrs) -> i64 {
    let prod = (v - a.in_zero_point) as i128 * a.multiplier as i128;
    let shifted = if a.shift == 0 {
        prod
    } else {
        let half = 1i128 << (a.shift - 1);
        let mag = (prod.abs() + half) >> a.shift;
        if prod < 0 {
            -mag
        } else {
            mag
        }
    };
    let r = shifted.clamp(i64::MIN as i128, i64::MAX as i128) as i64;
    r.saturating_add(a.zero_point).clamp(a.qmin, a.qmax)
}

/// Range enforcement for integer results.
struct Accumulator {
    node: NodeId,
    lo: i64,
    hi: i64,
    mode: OverflowMode,
}

impl Accumulator {
    fn new(node: NodeId, dtype: DType, mode: OverflowMode) -> Self {
        Accumulator { node, lo: dtype.min_value(), hi: dtype.max_value(), mode }
    }

    fn fit(&mut self, index: usize, v: i64) -> Result<i64> {
        if v >= self.lo && v <= self.hi {
            return Ok(v);
        }
        match self.mode {
            OverflowMode::Saturate => Ok(v.clamp(self.lo, self.hi)),
            OverflowMode::Trap => Err(Error::Overflow { node: self.node, index }),
        }
    }
}

/// Index geometry of a multiply-accumulate operator.
enum Mac {
    Conv { n: usize, c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize, oh: usize, ow: usize, stride: [usize; 2], pad: [usize; 2] },
    Dense { n: usize, i: usize, o: usize },
}

impl Mac {
    fn new(op: &Op, x: &[usize], w: &[usize]) -> Result<Self, String> {
        match op {
            Op::Conv2d { stride, padding, .. } => {
                if x.len() != 4 || w.len() != 4 {
                    return Err(format!("conv2d expects rank-4 data and weight, got {x:?} and {w:?}"));
                }
                if x[1] != w[1] {
                    return Err(format!("data has {} channels, weight expects {}", x[1], w[1]));
                }
                let ph = x[2] + 2 * padding[0];
                let pw = x[3] + 2 * padding[1];
                if ph < w[2] || pw < w[3] || stride[0] == 0 || stride[1] == 0 {
                    return Err("kernel larger than padded input".into());
                }
                Ok(Mac::Conv {
                    n: x[0],
                    c: x[1],
                    h: x[2],
                    w: x[3],
                    o: w[0],
                    kh: w[2],
                    kw: w[3],
                    oh: (ph - w[2]) / stride[0] + 1,
                    ow: (pw - w[3]) / stride[1] + 1,
                    stride: *stride,
                    pad: *padding,
                })
            }
            Op::Dense { .. } => {
                if x.len() != 2 || w.len() != 2 || x[1] != w[1] {
                    return Err(format!("dense expects (batch, k) data and (out, k) weight, got {x:?} and {w:?}"));
                }
                Ok(Mac::Dense { n: x[0], i: x[1], o: w[0] })
            }
            _ => unreachable!("only conv2d and dense accumulate"),
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        match *self {
            Mac::Conv { n, o, oh, ow, .. } => vec![n, o, oh, ow],
            Mac::Dense { n, o, .. } => vec![n, o],
        }
    }

    fn channels(&self) -> usize {
        match *self {
            Mac::Conv { o, .. } | Mac::Dense { o, .. } => o,
        }
    }

    fn channel(&self, idx: usize) -> usize {
        match *self {
            Mac::Conv { o, oh, ow, .. } => (idx / (oh * ow)) % o,
            Mac::Dense { o, .. } => idx % o,
        }
    }

    /// (data index, weight index) pairs summed into output element `idx`.
    fn taps(&self, idx: usize, buf: &mut Vec<(usize, usize)>) {
        buf.clear();
        match *self {
            Mac::Conv { c, h, w, o, kh, kw, oh, ow, stride, pad, .. } => {
                let x0 = idx % ow;
                let y0 = (idx / ow) % oh;
                let oc = (idx / (oh * ow)) % o;
                let b = idx / (oh * ow * o);
                for ic in 0..c {
                    for ky in 0..kh {
                        let y = (y0 * stride[0] + ky) as isize - pad[0] as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let x = (x0 * stride[1] + kx) as isize - pad[1] as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let xi = ((b * c + ic) * h + y as usize) * w + x as usize;
                            let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                            buf.push((xi, wi));
                        }
                    }
                }
            }
            Mac::Dense { i, o, .. } => {
                let (b, oc) = (idx / o, idx % o);
                buf.extend((0..i).map(|k| (b * i + k, oc * i + k)));
            }
        }
    }

    fn run_f32(&self, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Tensor {
        let shape = self.out_shape();
        let mut buf = Vec::new();
        let out = (0..numel(&shape))
            .map(|idx| {
                self.taps(idx, &mut buf);
                let mut acc: f64 = buf.iter().map(|&(xi, wi)| x[xi] as f64 * w[wi] as f64).sum();
                if let Some(b) = bias {
                    acc += b[self.channel(idx)] as f64;
                }
                acc as f32
            })
            .collect();
        Tensor::from_f32(shape, out).expect("output length matches its shape")
    }

    fn run_int(&self, node: NodeId, x: &[i64], w: &[i64], bias: Option<&[i64]>, ann: &IntAnnotation, mode: OverflowMode) -> Result<Tensor> {
        if let Some(b) = bias {
            if b.len() != self.channels() {
                return Err(Error::Shape { node, detail: format!("bias has {} entries for {} channels", b.len(), self.channels()) });
            }
        }
        let (zx, zw) = (ann.in_zero_points[0], ann.in_zero_points[1]);
        let shape = self.out_shape();
        let mut acc = Accumulator::new(node, ann.acc_dtype, mode);
        let mut buf = Vec::new();
        let mut out = Vec::with_capacity(numel(&shape));
        for idx in 0..numel(&shape) {
            self.taps(idx, &mut buf);
            let mut sum = 0i64;
            for &(xi, wi) in &buf {
                sum = acc.fit(idx, sum + (x[xi] - zx) * (w[wi] - zw))?;
            }
            if let Some(b) = bias {
                sum = acc.fit(idx, sum + b[self.channel(idx)])?;
            }
            out.push(sum);
        }
        Tensor::from_int(ann.acc_dtype, shape, out)
    }
}

struct Pool {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pool: [usize; 2],
    stride: [usize; 2],
    pad: [usize; 2],
}

impl Pool {
    fn new(s: &[usize], pool: [usize; 2], stride: [usize; 2], pad: [usize; 2]) -> Option<Self> {
        let ph = s[2] + 2 * pad[0];
        let pw = s[3] + 2 * pad[1];
        if ph < pool[0] || pw < pool[1] || stride.contains(&0) {
            return None;
        }
        Some(Pool {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            oh: (ph - pool[0]) / stride[0] + 1,
            ow: (pw - pool[1]) / stride[1] + 1,
            pool,
            stride,
            pad,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.oh, self.ow]
    }

    fn apply<T: Copy>(&self, get: impl Fn(usize) -> T, init: T, max: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n * self.c * self.oh * self.ow);
        for plane in 0..self.n * self.c {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let mut m = init;
                    for ky in 0..self.pool[0] {
                        let y = (oy * self.stride[0] + ky) as isize - self.pad[0] as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.pool[1] {
                            let x = (ox * self.stride[1] + kx) as isize - self.pad[1] as isize;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            m = max(m, get((plane * self.h + y as usize) * self.w + x as usize));
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }
}
