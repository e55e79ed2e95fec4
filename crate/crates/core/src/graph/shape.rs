use std::collections::HashMap;

use super::{traversal_order, Graph, NodeId, Op, Violation};

fn window(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

/// Output shape of every node whose inputs have known shapes, plus a
/// violation for each node whose input shapes break its operator rules.
pub fn infer_shapes(g: &Graph) -> (HashMap<NodeId, Vec<usize>>, Vec<Violation>) {
    let mut shapes: HashMap<NodeId, Vec<usize>> = HashMap::new();
    let mut problems = Vec::new();
    let Ok(order) = traversal_order(g) else {
        return (shapes, problems);
    };
    let producers = g.producers();
    let pos = g.positions();
    for id in order {
        let node = &g.nodes[pos[&id]];
        let ins: Option<Vec<&Vec<usize>>> = producers
            .get(&id)
            .map(|ps| ps.values().map(|p| shapes.get(&p.node)).collect())
            .unwrap_or(Some(Vec::new()));
        let Some(ins) = ins else { continue };
        match output_shape(&node.op, &ins) {
            Ok(s) => {
                shapes.insert(id, s);
            }
            Err(detail) => problems.push(Violation::Shape { node: id, detail }),
        }
    }
    (shapes, problems)
}

pub(crate) fn output_shape(op: &Op, ins: &[&Vec<usize>]) -> Result<Vec<usize>, String> {
    let rank = |i: usize, r: usize| -> Result<&Vec<usize>, String> {
        let s = ins[i];
        if s.len() == r {
            Ok(s)
        } else {
            Err(format!("input {i} has rank {}, expected {r}", s.len()))
        }
    };
    let bias_ok = |bias: &Option<crate::tensor::Tensor>, out: usize| -> Result<(), String> {
        match bias {
            Some(b) if b.shape() != [out] => Err(format!("bias shape {:?} does not match {out} outputs", b.shape())),
            _ => Ok(()),
        }
    };
    match op {
        Op::Input { shape, .. } => Ok(shape.clone()),
        Op::Constant { value } => Ok(value.shape().to_vec()),
        Op::Conv2d { stride, padding, bias } => {
            let x = rank(0, 4)?;
            let w = rank(1, 4)?;
            if x[1] != w[1] {
                return Err(format!("data has {} channels, weight expects {}", x[1], w[1]));
            }
            bias_ok(bias, w[0])?;
            let h = window(x[2], w[2], stride[0], padding[0]);
            let wd = window(x[3], w[3], stride[1], padding[1]);
            match (h, wd) {
                (Some(h), Some(wd)) => Ok(vec![x[0], w[0], h, wd]),
                _ => Err("kernel larger than padded input".into()),
            }
        }
        Op::Dense { bias } => {
            let x = rank(0, 2)?;
            let w = rank(1, 2)?;
            if x[1] != w[1] {
                return Err(format!("data has {} features, weight expects {}", x[1], w[1]));
            }
            bias_ok(bias, w[0])?;
            Ok(vec![x[0], w[0]])
        }
        Op::Add => {
            if ins[0] != ins[1] {
                return Err(format!("operand shapes {:?} and {:?} differ", ins[0], ins[1]));
            }
            Ok(ins[0].clone())
        }
        Op::MaxPool2d { pool, stride, padding } => {
            let x = rank(0, 4)?;
            if padding[0] >= pool[0] || padding[1] >= pool[1] {
                return Err("padding must be smaller than the pool window".into());
            }
            match (window(x[2], pool[0], stride[0], padding[0]), window(x[3], pool[1], stride[1], padding[1])) {
                (Some(h), Some(w)) => Ok(vec![x[0], x[1], h, w]),
                _ => Err("pool window larger than padded input".into()),
            }
        }
        Op::GlobalAvgPool2d => {
            let x = rank(0, 4)?;
            if x[2] * x[3] == 0 {
                return Err("empty spatial extent".into());
            }
            Ok(vec![x[0], x[1], 1, 1])
        }
        Op::Flatten => {
            let x = ins[0];
            if x.is_empty() {
                return Err("cannot flatten a scalar".into());
            }
            Ok(vec![x[0], x[1..].iter().product()])
        }
        Op::Relu
        | Op::Clip { .. }
        | Op::SimulatedQuantize(_)
        | Op::Quantize(_)
        | Op::Dequantize { .. }
        | Op::Requantize(_) => Ok(ins[0].clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{edge, input, op};
    use crate::graph::{validate_graph, PortRef};
    use crate::tensor::Tensor;

    #[test]
    fn conv_and_pool_shapes() {
        let w = Tensor::zeros_f32(vec![8, 3, 3, 3]);
        let g = Graph {
            nodes: vec![
                input(0, "x", &[1, 3, 8, 8]),
                op(1, Op::Constant { value: w }),
                op(2, Op::Conv2d { stride: [2, 2], padding: [1, 1], bias: None }),
                op(3, Op::MaxPool2d { pool: [2, 2], stride: [2, 2], padding: [0, 0] }),
                op(4, Op::Flatten),
            ],
            edges: vec![edge(0, 2, 0), edge(1, 2, 1), edge(2, 3, 0), edge(3, 4, 0)],
            inputs: vec![NodeId(0)],
            outputs: vec![PortRef::new(NodeId(4), 0)],
        };
        let (shapes, problems) = infer_shapes(&g);
        assert!(problems.is_empty());
        assert_eq!(shapes[&NodeId(2)], vec![1, 8, 4, 4]);
        assert_eq!(shapes[&NodeId(3)], vec![1, 8, 2, 2]);
        assert_eq!(shapes[&NodeId(4)], vec![1, 32]);
    }

    #[test]
    fn channel_mismatch_is_a_violation() {
        let g = Graph {
            nodes: vec![
                input(0, "x", &[1, 4]),
                op(1, Op::Constant { value: Tensor::zeros_f32(vec![2, 5]) }),
                op(2, Op::Dense { bias: None }),
            ],
            edges: vec![edge(0, 2, 0), edge(1, 2, 1)],
            inputs: vec![NodeId(0)],
            outputs: vec![PortRef::new(NodeId(2), 0)],
        };
        assert!(matches!(validate_graph(&g).as_slice(), [Violation::Shape { node, .. }] if *node == NodeId(2)));
    }
}
