//! Graph files: JSON structure plus a little-endian binary sidecar holding
//! tensor payloads.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Edge, Graph, IntAnnotation, Node, NodeId, Op, OpKind, PortRef, QuantizeAttrs, RequantizeAttrs, SimQuantAttrs};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::simulate::{Grid, QParams, SimQuantParams};
use crate::tensor::{numel, Tensor};

/// Location of a tensor payload inside a sidecar file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    pub file: String,
    pub offset: u64,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

/// Accumulates tensor payloads for one sidecar file.
#[derive(Debug)]
pub struct Sidecar {
    file: String,
    bytes: Vec<u8>,
}

impl Sidecar {
    pub fn new(file: impl Into<String>) -> Self {
        Sidecar { file: file.into(), bytes: Vec::new() }
    }

    pub fn push(&mut self, t: &Tensor) -> TensorRef {
        let r = TensorRef {
            file: self.file.clone(),
            offset: self.bytes.len() as u64,
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
        };
        self.bytes.extend(t.to_le_bytes());
        r
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(&self.file);
        fs::write(&path, &self.bytes).map_err(|e| Error::io(path, e))
    }
}

/// Resolves [`TensorRef`]s relative to a directory, caching file contents.
#[derive(Debug)]
pub struct SidecarReader {
    dir: PathBuf,
    cache: HashMap<String, Vec<u8>>,
}

impl SidecarReader {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SidecarReader { dir: dir.into(), cache: HashMap::new() }
    }

    pub fn read(&mut self, r: &TensorRef) -> Result<Tensor> {
        if !self.cache.contains_key(&r.file) {
            let path = self.dir.join(&r.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(path, e))?;
            self.cache.insert(r.file.clone(), bytes);
        }
        let bytes = &self.cache[&r.file];
        let start = usize::try_from(r.offset).map_err(|_| Error::Format("tensor offset too large".into()))?;
        let len = numel(&r.shape) * r.dtype.byte_size();
        let end = start.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            Error::Format(format!("tensor at offset {start} ({len} bytes) runs past the end of `{}`", r.file))
        })?;
        Tensor::from_le_bytes(r.dtype, r.shape.clone(), &bytes[start..end])
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    inputs: Vec<u32>,
    outputs: Vec<[u32; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: u32,
    op: String,
    #[serde(default)]
    attrs: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    src: [u32; 2],
    dst: [u32; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputAttrs {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantAttrs {
    value: TensorRef,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Conv2dAttrs {
    stride: [usize; 2],
    padding: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<TensorRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<TensorRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipAttrs {
    min: f32,
    max: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    int_bounds: Option<(i64, i64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolAttrs {
    pool: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridAttrs {
    scale: f32,
    zero_point: i64,
    qmin: i64,
    qmax: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimQuantRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge: Option<usize>,
    in_dtype: DType,
    out_dtype: DType,
    passthrough: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sign: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zero_point: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    overflow: Option<(f32, f32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rescale: Option<GridAttrs>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantizeRecord {
    scale: f32,
    zero_point: i64,
    out_dtype: DType,
    qmin: i64,
    qmax: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DequantizeRecord {
    scale: f32,
    zero_point: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequantizeRecord {
    multiplier: i64,
    shift: u32,
    scale: f32,
    in_zero_point: i64,
    zero_point: i64,
    out_dtype: DType,
    qmin: i64,
    qmax: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

const ANNOTATION_KEYS: [&str; 3] = ["in_dtypes", "acc_dtype", "in_zero_points"];

fn to_map<T: Serialize>(v: T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("attribute records always serialize") {
        Value::Object(m) => m,
        _ => unreachable!("attribute records are structs"),
    }
}

fn from_map<T: DeserializeOwned>(id: u32, op: &str, m: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Format(format!("node {id} ({op}): {e}")))
}

fn op_to_attrs(op: &Op, sidecar: &mut Sidecar) -> Map<String, Value> {
    match op {
        Op::Input { name, shape } => to_map(InputAttrs { name: name.clone(), shape: shape.clone() }),
        Op::Constant { value } => to_map(ConstantAttrs { value: sidecar.push(value) }),
        Op::Conv2d { stride, padding, bias } => to_map(Conv2dAttrs {
            stride: *stride,
            padding: *padding,
            bias: bias.as_ref().map(|b| sidecar.push(b)),
        }),
        Op::Dense { bias } => to_map(DenseAttrs { bias: bias.as_ref().map(|b| sidecar.push(b)) }),
        Op::Add | Op::Relu | Op::GlobalAvgPool2d | Op::Flatten => Map::new(),
        Op::Clip { min, max, int_bounds } => to_map(ClipAttrs { min: *min, max: *max, int_bounds: *int_bounds }),
        Op::MaxPool2d { pool, stride, padding } => to_map(PoolAttrs { pool: *pool, stride: *stride, padding: *padding }),
        Op::SimulatedQuantize(a) => {
            let q = a.params.quant;
            to_map(SimQuantRecord {
                edge: a.edge,
                in_dtype: a.in_dtype,
                out_dtype: a.out_dtype,
                passthrough: a.params.passthrough,
                threshold: q.map(|q| q.threshold),
                bit: q.map(|q| q.bit),
                sign: q.map(|q| q.sign),
                zero_point: q.map(|q| q.zero_point),
                overflow: a.params.overflow,
                rescale: a.params.rescale.map(|g| GridAttrs {
                    scale: g.scale,
                    zero_point: g.zero_point,
                    qmin: g.qmin,
                    qmax: g.qmax,
                }),
            })
        }
        Op::Quantize(a) => to_map(QuantizeRecord {
            scale: a.scale,
            zero_point: a.zero_point,
            out_dtype: a.out_dtype,
            qmin: a.qmin,
            qmax: a.qmax,
        }),
        Op::Dequantize { scale, zero_point } => to_map(DequantizeRecord { scale: *scale, zero_point: *zero_point }),
        Op::Requantize(a) => to_map(RequantizeRecord {
            multiplier: a.multiplier,
            shift: a.shift,
            scale: a.scale,
            in_zero_point: a.in_zero_point,
            zero_point: a.zero_point,
            out_dtype: a.out_dtype,
            qmin: a.qmin,
            qmax: a.qmax,
        }),
    }
}

fn attrs_to_op(id: u32, kind: OpKind, m: Map<String, Value>, reader: &mut SidecarReader) -> Result<Op> {
    let name = kind.name();
    Ok(match kind {
        OpKind::Input => {
            let a: InputAttrs = from_map(id, name, m)?;
            Op::Input { name: a.name, shape: a.shape }
        }
        OpKind::Constant => {
            let a: ConstantAttrs = from_map(id, name, m)?;
            Op::Constant { value: reader.read(&a.value)? }
        }
        OpKind::Conv2d => {
            let a: Conv2dAttrs = from_map(id, name, m)?;
            let bias = a.bias.map(|r| reader.read(&r)).transpose()?;
            Op::Conv2d { stride: a.stride, padding: a.padding, bias }
        }
        OpKind::Dense => {
            let a: DenseAttrs = from_map(id, name, m)?;
            Op::Dense { bias: a.bias.map(|r| reader.read(&r)).transpose()? }
        }
        OpKind::Add | OpKind::Relu | OpKind::GlobalAvgPool2d | OpKind::Flatten => {
            let Empty {} = from_map(id, name, m)?;
            match kind {
                OpKind::Add => Op::Add,
                OpKind::Relu => Op::Relu,
                OpKind::GlobalAvgPool2d => Op::GlobalAvgPool2d,
                _ => Op::Flatten,
            }
        }
        OpKind::Clip => {
            let a: ClipAttrs = from_map(id, name, m)?;
            Op::Clip { min: a.min, max: a.max, int_bounds: a.int_bounds }
        }
        OpKind::MaxPool2d => {
            let a: PoolAttrs = from_map(id, name, m)?;
            Op::MaxPool2d { pool: a.pool, stride: a.stride, padding: a.padding }
        }
        OpKind::SimulatedQuantize => {
            let a: SimQuantRecord = from_map(id, name, m)?;
            let quant = match (a.threshold, a.bit, a.sign, a.zero_point) {
                (Some(threshold), Some(bit), Some(sign), zp) => {
                    Some(QParams { threshold, bit, sign, dtype: a.out_dtype, zero_point: zp.unwrap_or(0) })
                }
                (None, None, None, None) => None,
                _ => {
                    return Err(Error::Format(format!(
                        "node {id} ({name}): threshold, bit and sign must be given together"
                    )))
                }
            };
            Op::SimulatedQuantize(SimQuantAttrs {
                edge: a.edge,
                in_dtype: a.in_dtype,
                out_dtype: a.out_dtype,
                params: SimQuantParams {
                    passthrough: a.passthrough,
                    quant,
                    overflow: a.overflow,
                    rescale: a.rescale.map(|g| Grid { scale: g.scale, zero_point: g.zero_point, qmin: g.qmin, qmax: g.qmax }),
                },
            })
        }
        OpKind::Quantize => {
            let a: QuantizeRecord = from_map(id, name, m)?;
            Op::Quantize(QuantizeAttrs { scale: a.scale, zero_point: a.zero_point, out_dtype: a.out_dtype, qmin: a.qmin, qmax: a.qmax })
        }
        OpKind::Dequantize => {
            let a: DequantizeRecord = from_map(id, name, m)?;
            Op::Dequantize { scale: a.scale, zero_point: a.zero_point }
        }
        OpKind::Requantize => {
            let a: RequantizeRecord = from_map(id, name, m)?;
            Op::Requantize(RequantizeAttrs {
                multiplier: a.multiplier,
                shift: a.shift,
                scale: a.scale,
                in_zero_point: a.in_zero_point,
                zero_point: a.zero_point,
                out_dtype: a.out_dtype,
                qmin: a.qmin,
                qmax: a.qmax,
            })
        }
    })
}

/// Serialize `g`, pushing tensor payloads into `sidecar`.
pub fn graph_to_json(g: &Graph, sidecar: &mut Sidecar) -> Value {
    let nodes = g
        .nodes
        .iter()
        .map(|n| {
            let mut attrs = op_to_attrs(&n.op, sidecar);
            if let Some(a) = &n.int {
                attrs.insert("in_dtypes".into(), serde_json::to_value(&a.in_dtypes).expect("dtypes serialize"));
                attrs.insert("acc_dtype".into(), serde_json::to_value(a.acc_dtype).expect("dtypes serialize"));
                attrs.insert("in_zero_points".into(), a.in_zero_points.clone().into());
            }
            NodeRecord { id: n.id.0, op: n.kind().name().into(), attrs }
        })
        .collect();
    let file = GraphFile {
        nodes,
        edges: g
            .edges
            .iter()
            .map(|e| EdgeRecord {
                src: [e.src.node.0, e.src.port as u32],
                dst: [e.dst.node.0, e.dst.port as u32],
            })
            .collect(),
        inputs: g.inputs.iter().map(|i| i.0).collect(),
        outputs: g.outputs.iter().map(|o| [o.node.0, o.port as u32]).collect(),
    };
    serde_json::to_value(file).expect("graph records always serialize")
}

/// Parse a graph document, resolving tensor payloads through `reader`.
pub fn graph_from_json(v: Value, reader: &mut SidecarReader) -> Result<Graph> {
    let file: GraphFile = serde_json::from_value(v).map_err(|e| Error::Format(format!("graph file: {e}")))?;
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for rec in file.nodes {
        let kind: OpKind = rec.op.parse()?;
        let mut attrs = rec.attrs;
        let present: Vec<Option<Value>> = ANNOTATION_KEYS.iter().map(|k| attrs.remove(*k)).collect();
        let int = match present.as_slice() {
            [None, None, None] => None,
            [Some(d), Some(acc), Some(zp)] => {
                let bad = |e: serde_json::Error| Error::Format(format!("node {}: integer annotation: {e}", rec.id));
                Some(IntAnnotation {
                    in_dtypes: serde_json::from_value(d.clone()).map_err(bad)?,
                    acc_dtype: serde_json::from_value(acc.clone()).map_err(bad)?,
                    in_zero_points: serde_json::from_value(zp.clone()).map_err(bad)?,
                })
            }
            _ => {
                return Err(Error::Format(format!(
                    "node {}: in_dtypes, acc_dtype and in_zero_points must be given together",
                    rec.id
                )))
            }
        };
        let op = attrs_to_op(rec.id, kind, attrs, reader)?;
        nodes.push(Node { id: NodeId(rec.id), op, int });
    }
    let port = |p: [u32; 2]| PortRef::new(NodeId(p[0]), p[1] as usize);
    Ok(Graph {
        nodes,
        edges: file.edges.iter().map(|e| Edge { src: port(e.src), dst: port(e.dst) }).collect(),
        inputs: file.inputs.into_iter().map(NodeId).collect(),
        outputs: file.outputs.into_iter().map(port).collect(),
    })
}

/// Name of the sidecar written next to a JSON document at `path`.
pub fn sidecar_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("graph");
    format!("{stem}.bin")
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

pub(crate) fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn parent_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

/// Write `g` to `path` and its tensor payloads to a `.bin` file beside it.
pub fn save_graph(g: &Graph, path: &Path) -> Result<()> {
    let mut sidecar = Sidecar::new(sidecar_name(path));
    let v = graph_to_json(g, &mut sidecar);
    sidecar.write(parent_dir(path))?;
    write_text(path, &to_pretty(&v))
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    let v = read_json(path)?;
    graph_from_json(v, &mut SidecarReader::new(parent_dir(path)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{edge, input, op};

    fn sample() -> Graph {
        let w = Tensor::from_f32(vec![2, 3], vec![0.5, -1.0, 0.25, 3.0, 0.1, -0.7]).unwrap();
        let b = Tensor::from_int(DType::Int32, vec![2], vec![-5, 70000]).unwrap();
        let mut dense = op(2, Op::Dense { bias: Some(b) });
        dense.int = Some(IntAnnotation { in_dtypes: vec![DType::Int8, DType::Int8], acc_dtype: DType::Int32, in_zero_points: vec![0, 0] });
        let q = QParams::new(1.5, 6, 1, DType::Int8, 0).unwrap();
        Graph {
            nodes: vec![
                input(0, "x", &[1, 3]),
                op(1, Op::Constant { value: w }),
                dense,
                op(
                    3,
                    Op::SimulatedQuantize(SimQuantAttrs {
                        edge: Some(2),
                        in_dtype: DType::Int32,
                        out_dtype: DType::Int8,
                        params: SimQuantParams {
                            passthrough: false,
                            quant: Some(q),
                            overflow: Some((-4.0, 4.0)),
                            rescale: Some(Grid { scale: 0.1, zero_point: 0, qmin: -128, qmax: 127 }),
                        },
                    }),
                ),
                op(4, Op::Clip { min: 0.0, max: 6.0, int_bounds: Some((0, 120)) }),
            ],
            edges: vec![edge(0, 2, 0), edge(1, 2, 1), edge(2, 3, 0), edge(3, 4, 0)],
            inputs: vec![NodeId(0)],
            outputs: vec![PortRef::new(NodeId(4), 0)],
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        let g = sample();
        save_graph(&g, &path).unwrap();
        assert!(dir.path().join("g.bin").exists());
        assert_eq!(load_graph(&path).unwrap(), g);
    }

    #[test]
    fn rejects_unknown_attrs_and_partial_annotation() {
        let mut sc = Sidecar::new("g.bin");
        let mut v = graph_to_json(&sample(), &mut sc);
        v["nodes"][4]["attrs"]["bogus"] = 1.into();
        let dir = tempfile::tempdir().unwrap();
        sc.write(dir.path()).unwrap();
        assert!(matches!(graph_from_json(v.clone(), &mut SidecarReader::new(dir.path())), Err(Error::Format(_))));
        v["nodes"][4]["attrs"].as_object_mut().unwrap().remove("bogus");
        v["nodes"][2]["attrs"].as_object_mut().unwrap().remove("acc_dtype");
        assert!(matches!(graph_from_json(v, &mut SidecarReader::new(dir.path())), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_sidecar_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.bin"), [0u8; 7]).unwrap();
        let r = TensorRef { file: "t.bin".into(), offset: 0, dtype: DType::Float32, shape: vec![2] };
        assert!(matches!(SidecarReader::new(dir.path()).read(&r), Err(Error::Format(_))));
    }
}
