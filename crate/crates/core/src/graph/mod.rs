//! Dataflow graph IR: nodes, edges, validation and deterministic orders.

mod io;
mod shape;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::simulate::SimQuantParams;
use crate::tensor::Tensor;

pub use io::{graph_from_json, graph_to_json, load_graph, save_graph, sidecar_name, to_pretty, Sidecar, SidecarReader, TensorRef};
pub(crate) use io::{parent_dir, read_json, write_text};
pub use shape::infer_shapes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One port of a node: an output index on the producing side, an input index
/// on the consuming side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub node: NodeId,
    pub port: usize,
}

impl PortRef {
    pub fn new(node: NodeId, port: usize) -> Self {
        PortRef { node, port }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: PortRef,
    pub dst: PortRef,
}

/// Operator names, independent of their attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Constant,
    Conv2d,
    Dense,
    Add,
    Relu,
    Clip,
    MaxPool2d,
    GlobalAvgPool2d,
    Flatten,
    SimulatedQuantize,
    Quantize,
    Dequantize,
    Requantize,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Input,
        OpKind::Constant,
        OpKind::Conv2d,
        OpKind::Dense,
        OpKind::Add,
        OpKind::Relu,
        OpKind::Clip,
        OpKind::MaxPool2d,
        OpKind::GlobalAvgPool2d,
        OpKind::Flatten,
        OpKind::SimulatedQuantize,
        OpKind::Quantize,
        OpKind::Dequantize,
        OpKind::Requantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Constant => "constant",
            OpKind::Conv2d => "conv2d",
            OpKind::Dense => "dense",
            OpKind::Add => "add",
            OpKind::Relu => "relu",
            OpKind::Clip => "clip",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::GlobalAvgPool2d => "global_avg_pool2d",
            OpKind::Flatten => "flatten",
            OpKind::SimulatedQuantize => "simulated_quantize",
            OpKind::Quantize => "quantize",
            OpKind::Dequantize => "dequantize",
            OpKind::Requantize => "requantize",
        }
    }

    /// Number of data inputs.
    pub fn arity(self) -> usize {
        match self {
            OpKind::Input | OpKind::Constant => 0,
            OpKind::Conv2d | OpKind::Dense | OpKind::Add => 2,
            _ => 1,
        }
    }

    /// Operators a hardware spec may list.
    pub fn is_compute(self) -> bool {
        !matches!(
            self,
            OpKind::Input
                | OpKind::Constant
                | OpKind::SimulatedQuantize
                | OpKind::Quantize
                | OpKind::Dequantize
                | OpKind::Requantize
        )
    }

    /// Multiply-accumulate operators, whose output scale is the product of
    /// their input scales.
    pub fn is_mac(self) -> bool {
        matches!(self, OpKind::Conv2d | OpKind::Dense)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown operator `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimQuantAttrs {
    /// Canonical index of the original edge this node sits on; `None` for a
    /// boundary on a graph output.
    pub edge: Option<usize>,
    pub in_dtype: DType,
    pub out_dtype: DType,
    pub params: SimQuantParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeAttrs {
    pub scale: f32,
    pub zero_point: i64,
    pub out_dtype: DType,
    pub qmin: i64,
    pub qmax: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RequantizeAttrs {
    pub multiplier: i64,
    pub shift: u32,
    /// The float32 ratio the fixed-point pair approximates.
    pub scale: f32,
    pub in_zero_point: i64,
    pub zero_point: i64,
    pub out_dtype: DType,
    pub qmin: i64,
    pub qmax: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input { name: String, shape: Vec<usize> },
    Constant { value: Tensor },
    /// NCHW data, OIHW weight.
    Conv2d { stride: [usize; 2], padding: [usize; 2], bias: Option<Tensor> },
    /// (batch, in) data, (out, in) weight.
    Dense { bias: Option<Tensor> },
    Add,
    Relu,
    /// `int_bounds` replaces `min`/`max` when the node runs on integer codes.
    Clip { min: f32, max: f32, int_bounds: Option<(i64, i64)> },
    MaxPool2d { pool: [usize; 2], stride: [usize; 2], padding: [usize; 2] },
    GlobalAvgPool2d,
    Flatten,
    SimulatedQuantize(SimQuantAttrs),
    Quantize(QuantizeAttrs),
    Dequantize { scale: f32, zero_point: i64 },
    Requantize(RequantizeAttrs),
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::Constant { .. } => OpKind::Constant,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Dense { .. } => OpKind::Dense,
            Op::Add => OpKind::Add,
            Op::Relu => OpKind::Relu,
            Op::Clip { .. } => OpKind::Clip,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::GlobalAvgPool2d => OpKind::GlobalAvgPool2d,
            Op::Flatten => OpKind::Flatten,
            Op::SimulatedQuantize(_) => OpKind::SimulatedQuantize,
            Op::Quantize(_) => OpKind::Quantize,
            Op::Dequantize { .. } => OpKind::Dequantize,
            Op::Requantize(_) => OpKind::Requantize,
        }
    }
}

/// Integer execution annotation of an arithmetic node.
#[derive(Clone, Debug, PartialEq)]
pub struct IntAnnotation {
    pub in_dtypes: Vec<DType>,
    pub acc_dtype: DType,
    pub in_zero_points: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub int: Option<IntAnnotation>,
}

impl Node {
    pub fn new(id: NodeId, op: Op) -> Self {
        Node { id, op, int: None }
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<PortRef>,
}

impl Graph {
    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn max_id(&self) -> Option<NodeId> {
        self.nodes.iter().map(|n| n.id).max()
    }

    pub fn positions(&self) -> HashMap<NodeId, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    /// Producer feeding each input port, keyed by consumer id.
    pub fn producers(&self) -> HashMap<NodeId, BTreeMap<usize, PortRef>> {
        let mut map: HashMap<NodeId, BTreeMap<usize, PortRef>> = HashMap::new();
        for e in &self.edges {
            map.entry(e.dst.node).or_default().insert(e.dst.port, e.src);
        }
        map
    }

    /// Consumers of each node's output, in edge-list order.
    pub fn consumers(&self) -> HashMap<NodeId, Vec<PortRef>> {
        let mut map: HashMap<NodeId, Vec<PortRef>> = HashMap::new();
        for e in &self.edges {
            map.entry(e.src.node).or_default().push(e.dst);
        }
        map
    }

    /// Name-to-id map of the graph inputs.
    pub fn input_names(&self) -> Vec<(String, NodeId)> {
        self.inputs
            .iter()
            .filter_map(|&id| match self.node(id).map(|n| &n.op) {
                Some(Op::Input { name, .. }) => Some((name.clone(), id)),
                _ => None,
            })
            .collect()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.kind() == kind).count()
    }
}

/// A single graph invariant violation.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    DuplicateId(NodeId),
    DanglingEdge { edge: usize, node: NodeId },
    PortOutOfRange { edge: usize, port: PortRef },
    UnfedPort(PortRef),
    MultiplyFedPort(PortRef),
    Cycle(NodeId),
    BadInput(NodeId),
    DuplicateInputName(String),
    BadOutput(PortRef),
    Attr { node: NodeId, detail: String },
    Shape { node: NodeId, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate node id {id}"),
            Violation::DanglingEdge { edge, node } => write!(f, "edge {edge} references missing node {node}"),
            Violation::PortOutOfRange { edge, port } => {
                write!(f, "edge {edge} uses port {} of node {}, which does not exist", port.port, port.node)
            }
            Violation::UnfedPort(p) => write!(f, "input port {} of node {} is not fed", p.port, p.node),
            Violation::MultiplyFedPort(p) => write!(f, "input port {} of node {} is fed more than once", p.port, p.node),
            Violation::Cycle(id) => write!(f, "cycle through node {id}"),
            Violation::BadInput(id) => write!(f, "graph input {id} is missing or not an input node"),
            Violation::DuplicateInputName(name) => write!(f, "input name `{name}` used twice"),
            Violation::BadOutput(p) => write!(f, "graph output ({}, {}) does not exist", p.node, p.port),
            Violation::Attr { node, detail } => write!(f, "node {node}: {detail}"),
            Violation::Shape { node, detail } => write!(f, "node {node}: {detail}"),
        }
    }
}

/// Check every graph invariant. An empty report means the graph is valid.
pub fn validate_graph(g: &Graph) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut seen = HashSet::new();
    for n in &g.nodes {
        if !seen.insert(n.id) {
            report.push(Violation::DuplicateId(n.id));
        }
    }
    let pos = g.positions();

    let mut fed: HashMap<PortRef, usize> = HashMap::new();
    for (i, e) in g.edges.iter().enumerate() {
        let mut ok = true;
        for end in [e.src, e.dst] {
            if !pos.contains_key(&end.node) {
                report.push(Violation::DanglingEdge { edge: i, node: end.node });
                ok = false;
            }
        }
        if !ok {
            continue;
        }
        if e.src.port != 0 {
            report.push(Violation::PortOutOfRange { edge: i, port: e.src });
        }
        let arity = g.nodes[pos[&e.dst.node]].kind().arity();
        if e.dst.port >= arity {
            report.push(Violation::PortOutOfRange { edge: i, port: e.dst });
            continue;
        }
        *fed.entry(e.dst).or_default() += 1;
    }
    for n in &g.nodes {
        for port in 0..n.kind().arity() {
            let p = PortRef::new(n.id, port);
            match fed.get(&p).copied().unwrap_or(0) {
                0 => report.push(Violation::UnfedPort(p)),
                1 => {}
                _ => report.push(Violation::MultiplyFedPort(p)),
            }
        }
        if let Some(detail) = attr_problem(n) {
            report.push(Violation::Attr { node: n.id, detail });
        }
    }

    let mut names = HashSet::new();
    for &id in &g.inputs {
        match pos.get(&id).map(|&i| &g.nodes[i].op) {
            Some(Op::Input { name, .. }) => {
                if !names.insert(name.clone()) {
                    report.push(Violation::DuplicateInputName(name.clone()));
                }
            }
            _ => report.push(Violation::BadInput(id)),
        }
    }
    let listed: HashSet<NodeId> = g.inputs.iter().copied().collect();
    for n in &g.nodes {
        if n.kind() == OpKind::Input && !listed.contains(&n.id) {
            report.push(Violation::BadInput(n.id));
        }
    }
    for o in &g.outputs {
        if !pos.contains_key(&o.node) || o.port != 0 {
            report.push(Violation::BadOutput(*o));
        }
    }

    let structural = report.is_empty();
    match traversal_order(g) {
        Err(Error::Cycle(id)) => report.push(Violation::Cycle(id)),
        Err(_) => {}
        Ok(_) if structural => {
            let (_, problems) = infer_shapes(g);
            report.extend(problems);
        }
        Ok(_) => {}
    }
    report
}

fn attr_problem(n: &Node) -> Option<String> {
    let positive = |v: &[usize; 2], what: &str| v.contains(&0).then(|| format!("{what} must be positive"));
    match &n.op {
        Op::Input { name, .. } if name.is_empty() => Some("input name is empty".into()),
        Op::Conv2d { stride, .. } => positive(stride, "stride"),
        Op::MaxPool2d { pool, stride, .. } => positive(pool, "pool size").or_else(|| positive(stride, "stride")),
        Op::Clip { min, max, int_bounds } => {
            if !(min <= max) {
                Some(format!("clip min {min} exceeds max {max}"))
            } else if matches!(int_bounds, Some((lo, hi)) if lo > hi) {
                Some("integer clip bounds are inverted".into())
            } else {
                None
            }
        }
        Op::SimulatedQuantize(a) => a.params.quant.and_then(|q| q.check().err().map(|e| e.to_string())),
        Op::Quantize(a) => {
            if !(a.scale > 0.0) || a.out_dtype.is_float() {
                Some("quantize needs a positive scale and an integer dtype".into())
            } else if !(a.qmin <= a.qmax && a.out_dtype.contains(a.qmin) && a.out_dtype.contains(a.qmax)) {
                Some("quantize code range does not fit its dtype".into())
            } else {
                None
            }
        }
        Op::Dequantize { scale, .. } if !(*scale > 0.0) => Some("dequantize needs a positive scale".into()),
        Op::Requantize(a) => {
            if !((1i64 << 30)..(1i64 << 31)).contains(&a.multiplier) {
                Some(format!("requantize multiplier {} outside [2^30, 2^31)", a.multiplier))
            } else if a.shift > 62 || a.out_dtype.is_float() {
                Some("requantize needs a shift of at most 62 and an integer dtype".into())
            } else if !(a.qmin <= a.qmax && a.out_dtype.contains(a.qmin) && a.out_dtype.contains(a.qmax)) {
                Some("requantize code range does not fit its dtype".into())
            } else {
                None
            }
        }
        _ => None,
    }
    .or_else(|| {
        n.int.as_ref().and_then(|a| {
            let arity = n.kind().arity();
            (a.in_dtypes.len() != arity || a.in_zero_points.len() != arity)
                .then(|| format!("integer annotation lists {} inputs, operator has {arity}", a.in_dtypes.len()))
        })
    })
}

/// Deterministic topological order: depth-first from the graph inputs (in
/// list order), then constants (ascending id); consumers are visited by
/// ascending input port, then ascending id. A node is emitted once all of its
/// producers have been.
pub fn traversal_order(g: &Graph) -> Result<Vec<NodeId>> {
    let pos = g.positions();
    let n = g.nodes.len();
    let mut remaining = vec![0usize; n];
    let mut fanout: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut children: Vec<Vec<(usize, NodeId)>> = vec![Vec::new(); n];
    for e in &g.edges {
        let (Some(&s), Some(&d)) = (pos.get(&e.src.node), pos.get(&e.dst.node)) else {
            return Err(Error::Invalid(format!("edge references a missing node ({} -> {})", e.src.node, e.dst.node)));
        };
        remaining[d] += 1;
        fanout[s].push(d);
        children[s].push((e.dst.port, e.dst.node));
    }
    let children: Vec<Vec<usize>> = children
        .into_iter()
        .map(|mut c| {
            c.sort();
            let mut seen = HashSet::new();
            c.into_iter().filter(|&(_, id)| seen.insert(id)).map(|(_, id)| pos[&id]).collect()
        })
        .collect();

    let sorted = |pred: &dyn Fn(&Node) -> bool| {
        let mut v: Vec<&Node> = g.nodes.iter().filter(|n| pred(n)).collect();
        v.sort_by_key(|n| n.id);
        v.into_iter().map(|n| pos[&n.id]).collect::<Vec<_>>()
    };
    let mut roots: Vec<usize> = g.inputs.iter().filter_map(|id| pos.get(id).copied()).collect();
    roots.extend(sorted(&|n| n.kind() == OpKind::Constant));
    roots.extend(sorted(&|n| !matches!(n.kind(), OpKind::Constant | OpKind::Input) && remaining[pos[&n.id]] == 0));
    roots.extend(sorted(&|n| n.kind() == OpKind::Input && !g.inputs.contains(&n.id)));

    let mut emitted = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let emit = |i: usize, order: &mut Vec<NodeId>, emitted: &mut Vec<bool>, remaining: &mut Vec<usize>| {
        emitted[i] = true;
        order.push(g.nodes[i].id);
        for &d in &fanout[i] {
            remaining[d] -= 1;
        }
    };
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for root in roots {
        if emitted[root] || remaining[root] != 0 {
            continue;
        }
        emit(root, &mut order, &mut emitted, &mut remaining);
        stack.push((root, 0));
        while let Some(frame) = stack.last_mut() {
            let (node, next) = *frame;
            if next < children[node].len() {
                frame.1 += 1;
                let c = children[node][next];
                if !emitted[c] && remaining[c] == 0 {
                    emit(c, &mut order, &mut emitted, &mut remaining);
                    stack.push((c, 0));
                }
            } else {
                stack.pop();
            }
        }
    }

    if order.len() < n {
        let producers = g.producers();
        let mut cur = (0..n).find(|&i| !emitted[i]).expect("some node was not emitted");
        let mut visited = HashSet::new();
        while visited.insert(cur) {
            let id = g.nodes[cur].id;
            cur = producers
                .get(&id)
                .and_then(|ps| ps.values().map(|p| pos[&p.node]).find(|&p| !emitted[p]))
                .unwrap_or(cur);
        }
        return Err(Error::Cycle(g.nodes[cur].id));
    }
    Ok(order)
}

/// Edges sorted by (position of the consumer in [`traversal_order`], consumer
/// port). Indices into this list are the canonical edge indices.
pub fn edge_order(g: &Graph) -> Result<Vec<Edge>> {
    let order = traversal_order(g)?;
    let rank: HashMap<NodeId, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut edges = g.edges.clone();
    edges.sort_by_key(|e| (rank[&e.dst.node], e.dst.port));
    Ok(edges)
}
