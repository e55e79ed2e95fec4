//! Quantized/non-quantized vertex partition, per-edge candidate dtypes and
//! simulated_quantize insertion.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::graph::{edge_order, traversal_order, Edge, Graph, Node, NodeId, Op, OpKind, PortRef, SimQuantAttrs};
use crate::hwspec::{classify_op, HardwareSpec, OpClass};
use crate::simulate::noop_params;

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub qv: BTreeSet<NodeId>,
    pub nqv: BTreeSet<NodeId>,
    /// Edges in canonical order; map keys below index into this list.
    pub edges: Vec<Edge>,
    /// Integer dtypes allowed on each edge consumed by a quantized vertex,
    /// ordered by width.
    pub edge_dtypes: BTreeMap<usize, Vec<DType>>,
    /// Edges consumed by a non-quantized vertex; always float32.
    pub fixed_edges: BTreeMap<usize, DType>,
    /// Distinct result dtypes of each quantized operator's integer
    /// signatures, ordered by width.
    pub out_dtypes: BTreeMap<NodeId, Vec<DType>>,
}

impl Topology {
    pub fn is_quantized(&self, id: NodeId) -> bool {
        self.qv.contains(&id)
    }

    /// 0 when every candidate dtype of the edge is unsigned, else 1.
    pub fn edge_sign(&self, edge: usize) -> u32 {
        match self.edge_dtypes.get(&edge) {
            Some(c) if !c.is_empty() && c.iter().all(|d| !d.is_signed()) => 0,
            _ => 1,
        }
    }

    /// Debug dump keyed by canonical edge index.
    pub fn to_json(&self, g: &Graph) -> serde_json::Value {
        #[derive(Serialize)]
        struct EdgeDump {
            edge: usize,
            src: [u32; 2],
            dst: [u32; 2],
            #[serde(skip_serializing_if = "Option::is_none")]
            candidates: Option<Vec<DType>>,
            #[serde(skip_serializing_if = "Option::is_none")]
            fixed: Option<DType>,
        }
        let class = |id: &NodeId| if self.qv.contains(id) { "quantized" } else { "float" };
        let vertices: BTreeMap<String, serde_json::Value> = g
            .nodes
            .iter()
            .map(|n| (n.id.to_string(), serde_json::json!({"op": n.kind().name(), "class": class(&n.id)})))
            .collect();
        let edges: Vec<EdgeDump> = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| EdgeDump {
                edge: i,
                src: [e.src.node.0, e.src.port as u32],
                dst: [e.dst.node.0, e.dst.port as u32],
                candidates: self.edge_dtypes.get(&i).cloned(),
                fixed: self.fixed_edges.get(&i).copied(),
            })
            .collect();
        serde_json::json!({"vertices": vertices, "edges": edges})
    }
}

/// Partition vertices into quantized and float sets and derive each edge's
/// candidate dtypes.
pub fn generate_topology(g: &Graph, spec: &HardwareSpec) -> Result<Topology> {
    let order = traversal_order(g)?;
    let edges = edge_order(g)?;
    let pos = g.positions();
    let producers = g.producers();
    let consumers = g.consumers();
    let node = |id: NodeId| -> &Node { &g.nodes[pos[&id]] };
    let is_source = |id: NodeId| matches!(node(id).kind(), OpKind::Input | OpKind::Constant);

    let mut qv = BTreeSet::new();
    for &id in &order {
        let kind = node(id).kind();
        if is_source(id) {
            continue;
        }
        let quantized = match classify_op(spec, kind) {
            OpClass::FloatOnly => false,
            OpClass::IntegerOnly => true,
            OpClass::Mixed => producers
                .get(&id)
                .is_some_and(|ps| ps.values().any(|p| !is_source(p.node) && qv.contains(&p.node))),
        };
        if quantized {
            if spec.integer_signatures(kind).next().is_none() {
                return Err(Error::Constraint {
                    node: id,
                    detail: format!("`{kind}` is quantized but the spec offers no all-integer signature"),
                });
            }
            qv.insert(id);
        }
    }
    for n in &g.nodes {
        if is_source(n.id) {
            let cons = consumers.get(&n.id).map(Vec::as_slice).unwrap_or(&[]);
            if !cons.is_empty() && cons.iter().all(|c| qv.contains(&c.node)) {
                qv.insert(n.id);
            }
        }
    }
    let nqv = g.nodes.iter().map(|n| n.id).filter(|id| !qv.contains(id)).collect();

    let by_width = |v: &mut Vec<DType>| {
        v.sort_by_key(|d| (d.width(), d.is_signed()));
        v.dedup();
    };
    let mut out_dtypes = BTreeMap::new();
    for &id in &qv {
        if !is_source(id) {
            let mut outs: Vec<DType> = spec.integer_signatures(node(id).kind()).map(|s| s.out).collect();
            by_width(&mut outs);
            out_dtypes.insert(id, outs);
        }
    }
    let mut edge_dtypes = BTreeMap::new();
    let mut fixed_edges = BTreeMap::new();
    for (i, e) in edges.iter().enumerate() {
        if qv.contains(&e.dst.node) {
            let mut cands: Vec<DType> = spec
                .integer_signatures(node(e.dst.node).kind())
                .map(|s| s.in_dtypes[e.dst.port])
                .collect();
            by_width(&mut cands);
            edge_dtypes.insert(i, cands);
        } else {
            fixed_edges.insert(i, DType::Float32);
        }
    }
    Ok(Topology { qv, nqv, edges, edge_dtypes, fixed_edges, out_dtypes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchableEdge {
    /// Canonical edge index in the original graph.
    pub edge: usize,
    /// The simulated_quantize node sitting on the edge.
    pub node: NodeId,
    pub candidates: Vec<DType>,
}

/// A graph with simulated_quantize nodes inserted, plus the bookkeeping
/// needed to bind strategies to it.
#[derive(Clone, Debug)]
pub struct SimulatedGraph {
    pub graph: Graph,
    pub topology: Topology,
    /// Quantizing nodes in canonical edge order.
    pub searchable: Vec<SearchableEdge>,
    /// Float32-out nodes where a quantized producer hands off to float code.
    pub boundaries: Vec<NodeId>,
    /// Canonical edge index of every inserted node on an original edge.
    pub edge_of_node: HashMap<NodeId, usize>,
}

impl SimulatedGraph {
    /// Producer of the original edge a simulated_quantize node sits on.
    pub fn source_of(&self, sq: NodeId) -> Option<PortRef> {
        self.graph.edges.iter().find(|e| e.dst.node == sq).map(|e| e.src)
    }

    /// Original consumer port fed by a simulated_quantize node.
    pub fn target_of(&self, sq: NodeId) -> Option<PortRef> {
        self.graph.edges.iter().find(|e| e.src.node == sq).map(|e| e.dst)
    }
}

fn widest(cands: &[DType]) -> DType {
    *cands.iter().max_by_key(|d| (d.width(), d.is_signed())).expect("candidate lists are nonempty")
}

/// Insert a simulated_quantize node on every edge consumed by a quantized
/// vertex, and a float32-out one wherever a quantized vertex feeds float code
/// or a graph output. All inserted nodes start in pass-through mode.
pub fn insert_simulated_quantize(g: &Graph, t: &Topology) -> Result<SimulatedGraph> {
    let spec_out = |id: NodeId| -> DType { t.out_dtypes.get(&id).map_or(DType::Float32, |outs| widest(outs)) };
    let mut next = g.max_id().map_or(0, |m| m.0 + 1);
    let mut fresh = || {
        let id = NodeId(next);
        next += 1;
        id
    };

    let mut graph = g.clone();
    let mut searchable = Vec::new();
    let mut boundaries = Vec::new();
    let mut edge_of_node = HashMap::new();
    let mut replaced: HashMap<(PortRef, PortRef), NodeId> = HashMap::new();
    for (i, e) in t.edges.iter().enumerate() {
        let producer_q = t.out_dtypes.contains_key(&e.src.node);
        let attrs = if let Some(cands) = t.edge_dtypes.get(&i) {
            let id = fresh();
            searchable.push(SearchableEdge { edge: i, node: id, candidates: cands.clone() });
            (id, SimQuantAttrs { edge: Some(i), in_dtype: spec_out(e.src.node), out_dtype: widest(cands), params: noop_params() })
        } else if producer_q {
            let id = fresh();
            boundaries.push(id);
            (id, SimQuantAttrs { edge: Some(i), in_dtype: spec_out(e.src.node), out_dtype: DType::Float32, params: noop_params() })
        } else {
            continue;
        };
        edge_of_node.insert(attrs.0, i);
        replaced.insert((e.src, e.dst), attrs.0);
        graph.nodes.push(Node::new(attrs.0, Op::SimulatedQuantize(attrs.1)));
    }
    graph.edges = g
        .edges
        .iter()
        .flat_map(|e| match replaced.get(&(e.src, e.dst)) {
            Some(&sq) => vec![Edge { src: e.src, dst: PortRef::new(sq, 0) }, Edge { src: PortRef::new(sq, 0), dst: e.dst }],
            None => vec![*e],
        })
        .collect();
    for out in graph.outputs.iter_mut() {
        if t.out_dtypes.contains_key(&out.node) {
            let id = fresh();
            boundaries.push(id);
            graph.nodes.push(Node::new(
                id,
                Op::SimulatedQuantize(SimQuantAttrs { edge: None, in_dtype: spec_out(out.node), out_dtype: DType::Float32, params: noop_params() }),
            ));
            graph.edges.push(Edge { src: *out, dst: PortRef::new(id, 0) });
            *out = PortRef::new(id, 0);
        }
    }
    Ok(SimulatedGraph { graph, topology: t.clone(), searchable, boundaries, edge_of_node })
}

/// Topology generation followed by simulated_quantize insertion.
pub fn prepare(g: &Graph, spec: &HardwareSpec) -> Result<SimulatedGraph> {
    let t = generate_topology(g, spec)?;
    insert_simulated_quantize(g, &t)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub nodes: BTreeSet<NodeId>,
    /// Canonical indices of edges with both endpoints inside the segment.
    pub interior: Vec<usize>,
    /// Canonical indices of edges with exactly one endpoint inside.
    pub boundary: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub segments: Vec<Segment>,
    pub remainder_nodes: BTreeSet<NodeId>,
    pub remainder_edges: Vec<usize>,
}

/// Maximal connected groups of quantized operator vertices.
pub fn partition_segments(g: &Graph, t: &Topology) -> Result<Partition> {
    let order = traversal_order(g)?;
    let pos = g.positions();
    let is_member = |id: NodeId| t.qv.contains(&id) && !matches!(g.nodes[pos[&id]].kind(), OpKind::Input | OpKind::Constant);
    let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for e in &t.edges {
        if is_member(e.src.node) && is_member(e.dst.node) {
            adj.entry(e.src.node).or_default().push(e.dst.node);
            adj.entry(e.dst.node).or_default().push(e.src.node);
        }
    }
    let mut segment_of: HashMap<NodeId, usize> = HashMap::new();
    let mut segments: Vec<Segment> = Vec::new();
    for &id in &order {
        if !is_member(id) || segment_of.contains_key(&id) {
            continue;
        }
        let k = segments.len();
        let mut nodes = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(v) = stack.pop() {
            if segment_of.insert(v, k).is_some() {
                continue;
            }
            nodes.insert(v);
            stack.extend(adj.get(&v).into_iter().flatten().copied().filter(|u| !segment_of.contains_key(u)));
        }
        segments.push(Segment { nodes, interior: Vec::new(), boundary: Vec::new() });
    }
    let mut remainder_edges = Vec::new();
    for (i, e) in t.edges.iter().enumerate() {
        match (segment_of.get(&e.src.node), segment_of.get(&e.dst.node)) {
            (Some(a), Some(b)) if a == b => segments[*a].interior.push(i),
            (Some(a), None) | (None, Some(a)) => segments[*a].boundary.push(i),
            (Some(_), Some(_)) => unreachable!("adjacent quantized operators share a segment"),
            (None, None) => remainder_edges.push(i),
        }
    }
    let remainder_nodes = g.nodes.iter().map(|n| n.id).filter(|id| !segment_of.contains_key(id)).collect();
    Ok(Partition { segments, remainder_nodes, remainder_edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{edge, input, op};
    use crate::graph::validate_graph;
    use crate::hwspec::{parse_spec, Signature};
    use crate::tensor::Tensor;

    fn conv_add_gap() -> HardwareSpec {
        parse_spec(
            r#"{"ops": {
            "add": [{"in": ["float32", "float32"], "out": "float32"}, {"in": ["int32", "int32"], "out": "int32"}],
            "conv2d": [{"in": ["int16", "int16"], "out": "int32"}, {"in": ["int8", "int8"], "out": "int16"}],
            "global_avg_pool2d": [{"in": ["float32"], "out": "float32"}]}}"#,
        )
        .unwrap()
    }

    /// x -> conv2d(w) -> add(conv, x) -> global_avg_pool2d
    fn chain() -> Graph {
        Graph {
            nodes: vec![
                input(0, "x", &[1, 2, 4, 4]),
                op(1, Op::Constant { value: Tensor::from_f32(vec![2, 2, 1, 1], vec![0.5, -0.25, 0.75, 1.0]).unwrap() }),
                op(2, Op::Conv2d { stride: [1, 1], padding: [0, 0], bias: None }),
                op(3, Op::Add),
                op(4, Op::GlobalAvgPool2d),
            ],
            edges: vec![edge(0, 2, 0), edge(1, 2, 1), edge(2, 3, 0), edge(0, 3, 1), edge(3, 4, 0)],
            inputs: vec![NodeId(0)],
            outputs: vec![PortRef::new(NodeId(4), 0)],
        }
    }

    fn ids(v: &[u32]) -> BTreeSet<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    #[test]
    fn chain_partition_and_insertion() {
        let g = chain();
        let t = generate_topology(&g, &conv_add_gap()).unwrap();
        assert_eq!(t.qv, ids(&[0, 1, 2, 3]));
        assert_eq!(t.nqv, ids(&[4]));
        assert_eq!(t.edge_dtypes[&0], vec![DType::Int8, DType::Int16]);
        assert_eq!(t.edge_dtypes[&2], vec![DType::Int32]);
        assert_eq!(t.fixed_edges.keys().copied().collect::<Vec<_>>(), vec![4]);

        let sim = insert_simulated_quantize(&g, &t).unwrap();
        assert_eq!(sim.searchable.iter().map(|s| s.edge).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(sim.boundaries.len(), 1);
        assert_eq!(sim.graph.count(OpKind::SimulatedQuantize), 5);
        assert_eq!(validate_graph(&sim.graph), vec![]);
        assert_eq!(sim.searchable[0].node, NodeId(5));
        assert_eq!(sim.target_of(sim.boundaries[0]), Some(PortRef::new(NodeId(4), 0)));

        let p = partition_segments(&g, &t).unwrap();
        assert_eq!(p.segments.len(), 1);
        assert_eq!(p.segments[0].nodes, ids(&[2, 3]));
        assert_eq!(p.remainder_nodes, ids(&[0, 1, 4]));
    }

    #[test]
    fn float_only_graph_is_untouched() {
        let g = Graph {
            nodes: vec![input(0, "x", &[1, 2, 2, 2]), op(1, Op::GlobalAvgPool2d)],
            edges: vec![edge(0, 1, 0)],
            inputs: vec![NodeId(0)],
            outputs: vec![PortRef::new(NodeId(1), 0)],
        };
        let t = generate_topology(&g, &conv_add_gap()).unwrap();
        assert!(t.qv.is_empty());
        let sim = insert_simulated_quantize(&g, &t).unwrap();
        assert_eq!(sim.graph, g);
        assert!(partition_segments(&g, &t).unwrap().segments.is_empty());
    }

    #[test]
    fn mixed_add_of_float_producers_stays_float() {
        let g = Graph {
            nodes: vec![input(0, "x", &[1, 2, 2, 2]), op(1, Op::GlobalAvgPool2d), op(2, Op::GlobalAvgPool2d), op(3, Op::Add)],
            edges: vec![edge(0, 1, 0), edge(0, 2, 0), edge(1, 3, 0), edge(2, 3, 1)],
            inputs: vec![NodeId(0)],
            outputs: vec![PortRef::new(NodeId(3), 0)],
        };
        let t = generate_topology(&g, &conv_add_gap()).unwrap();
        assert!(t.qv.is_empty());
    }

    #[test]
    fn alternating_chain_gives_singleton_segments() {
        let spec = HardwareSpec::new()
            .with_op(OpKind::Relu, vec![Signature::new(&[DType::Int8], DType::Int8)])
            .unwrap();
        let g = Graph {
            nodes: vec![input(0, "x", &[1, 1, 2, 2]), op(1, Op::Relu), op(2, Op::GlobalAvgPool2d), op(3, Op::Relu), op(4, Op::Flatten)],
            edges: vec![edge(0, 1, 0), edge(1, 2, 0), edge(2, 3, 0), edge(3, 4, 0)],
            inputs: vec![NodeId(0)],
            outputs: vec![PortRef::new(NodeId(4), 0)],
        };
        let t = generate_topology(&g, &spec).unwrap();
        let p = partition_segments(&g, &t).unwrap();
        assert_eq!(p.segments.iter().map(|s| s.nodes.clone()).collect::<Vec<_>>(), vec![ids(&[1]), ids(&[3])]);
        assert_eq!(p.segments[0].boundary, vec![0, 1]);
    }

    #[test]
    fn quantized_mixed_op_without_integer_signature_is_rejected() {
        let spec = HardwareSpec::new()
            .with_op(OpKind::Relu, vec![Signature::new(&[DType::Int8], DType::Int8)])
            .unwrap()
            .with_op(
                OpKind::Flatten,
                vec![Signature::new(&[DType::Float32], DType::Float32), Signature::new(&[DType::Int8], DType::Float32)],
            )
            .unwrap();
        let g = Graph {
            nodes: vec![input(0, "x", &[1, 4]), op(1, Op::Relu), op(2, Op::Flatten)],
            edges: vec![edge(0, 1, 0), edge(1, 2, 0)],
            inputs: vec![NodeId(0)],
            outputs: vec![PortRef::new(NodeId(2), 0)],
        };
        assert!(matches!(generate_topology(&g, &spec), Err(Error::Constraint { node, .. }) if node == NodeId(2)));
    }

    #[test]
    fn unsigned_candidates_give_sign_zero() {
        let spec = HardwareSpec::new()
            .with_op(OpKind::Dense, vec![Signature::new(&[DType::UInt8, DType::Int8], DType::Int32)])
            .unwrap();
        let g = Graph {
            nodes: vec![input(0, "x", &[1, 2]), op(1, Op::Constant { value: Tensor::zeros_f32(vec![3, 2]) }), op(2, Op::Dense { bias: None })],
            edges: vec![edge(0, 2, 0), edge(1, 2, 1)],
            inputs: vec![NodeId(0)],
            outputs: vec![PortRef::new(NodeId(2), 0)],
        };
        let t = generate_topology(&g, &spec).unwrap();
        assert_eq!((t.edge_sign(0), t.edge_sign(1)), (0, 1));
        let sim = insert_simulated_quantize(&g, &t).unwrap();
        assert_eq!(sim.graph.outputs, vec![PortRef::new(NodeId(5), 0)]);
        assert_eq!(validate_graph(&sim.graph), vec![]);
    }
}
