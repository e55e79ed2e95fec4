//! Deterministic synthetic models, sample sets and hardware specs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::calibration::{calibrate, Estimator};
use crate::dataset::{save_dataset, Feed, Sample};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::graph::{save_graph, write_text, Edge, Graph, Node, NodeId, Op, PortRef};
use crate::hwspec::{HardwareSpec, Signature};
use crate::interp::{argmax, eval_fp32, Executor, OverflowMode, Regime};
use crate::plan::settings_from_bits;
use crate::realize::{realize, Strategy};
use crate::tensor::Tensor;
use crate::topology::prepare;
use crate::OpKind;

pub const SPEC_NAMES: [&str; 4] = ["conv_add_gap", "int8_int32", "arm_vmlal_like", "x86_vnni_like"];

pub const SMALL_CNN_SEED: u64 = 7;
pub const RESIDUAL_SEED: u64 = 11;
pub const THREE_EDGE_SEED: u64 = 13;
pub const PROBE_SEED: u64 = 17;
pub const RELU_CHAIN_LEN: usize = 118;

/// A model with its calibration samples and, when it has one, a held-out
/// evaluation set.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub graph: Graph,
    pub calib: Vec<Sample>,
    pub eval: Vec<Sample>,
}

fn sig(ins: &[DType], out: DType) -> Signature {
    Signature::new(ins, out)
}

pub fn spec_fixture(name: &str) -> Result<HardwareSpec> {
    use DType::*;
    let unary = |ds: &[DType]| ds.iter().map(|&d| sig(&[d], d)).collect::<Vec<_>>();
    match name {
        "conv_add_gap" => HardwareSpec::new()
            .with_op(OpKind::Add, vec![sig(&[Float32, Float32], Float32), sig(&[Int32, Int32], Int32)])?
            .with_op(OpKind::Conv2d, vec![sig(&[Int16, Int16], Int32), sig(&[Int8, Int8], Int16)])?
            .with_op(OpKind::GlobalAvgPool2d, vec![sig(&[Float32], Float32)]),
        "int8_int32" => HardwareSpec::new()
            .with_op(OpKind::Conv2d, vec![sig(&[Int8, Int8], Int32)])?
            .with_op(OpKind::Dense, vec![sig(&[Int8, Int8], Int32)])?
            .with_op(OpKind::Add, vec![sig(&[Int8, Int8], Int32)])?
            .with_op(OpKind::Relu, unary(&[Int8]))?
            .with_op(OpKind::MaxPool2d, unary(&[Int8]))?
            .with_op(OpKind::Clip, unary(&[Int8]))?
            .with_op(OpKind::GlobalAvgPool2d, vec![sig(&[Float32], Float32)]),
        "arm_vmlal_like" => {
            let mac = vec![sig(&[Int8, Int8], Int16), sig(&[Int16, Int16], Int32)];
            HardwareSpec::new()
                .with_op(OpKind::Conv2d, mac.clone())?
                .with_op(OpKind::Dense, mac)?
                .with_op(OpKind::Add, vec![sig(&[Int16, Int16], Int32)])?
                .with_op(OpKind::Relu, unary(&[Int8, Int16]))?
                .with_op(OpKind::MaxPool2d, unary(&[Int8, Int16]))?
                .with_op(OpKind::Clip, unary(&[Int8, Int16]))
        }
        "x86_vnni_like" => {
            let mac = vec![sig(&[UInt8, Int8], Int32)];
            HardwareSpec::new().with_op(OpKind::Conv2d, mac.clone())?.with_op(OpKind::Dense, mac)
        }
        _ => Err(Error::Invalid(format!("unknown spec fixture `{name}` (expected one of {})", SPEC_NAMES.join(", ")))),
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect()
}

fn f32t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::from_f32(shape.to_vec(), data).expect("fixture tensors match their shapes")
}

fn feed(name: &str, t: Tensor) -> Feed {
    BTreeMap::from([(name.to_string(), t)])
}

/// Graph assembly in id order.
struct Builder {
    g: Graph,
}

impl Builder {
    fn new() -> Self {
        Builder { g: Graph::default() }
    }

    fn add(&mut self, op: Op, ins: &[NodeId]) -> NodeId {
        let id = NodeId(self.g.nodes.len() as u32);
        if matches!(op, Op::Input { .. }) {
            self.g.inputs.push(id);
        }
        for (port, &src) in ins.iter().enumerate() {
            self.g.edges.push(Edge { src: PortRef::new(src, 0), dst: PortRef::new(id, port) });
        }
        self.g.nodes.push(Node::new(id, op));
        id
    }

    fn input(&mut self, shape: &[usize]) -> NodeId {
        self.add(Op::Input { name: "x".into(), shape: shape.to_vec() }, &[])
    }

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.add(Op::Constant { value: t }, &[])
    }

    fn finish(mut self, out: NodeId) -> Graph {
        self.g.outputs.push(PortRef::new(out, 0));
        self.g
    }
}

fn conv(b: &mut Builder, rng: &mut ChaCha8Rng, x: NodeId, cin: usize, cout: usize, stride: usize) -> NodeId {
    let fan_in = cin * 9;
    let w = b.constant(f32t(&[cout, cin, 3, 3], normal(rng, cout * fan_in, (2.0 / fan_in as f32).sqrt())));
    let bias = f32t(&[cout], normal(rng, cout, 0.05));
    let c = b.add(Op::Conv2d { stride: [stride, stride], padding: [1, 1], bias: Some(bias) }, &[x, w]);
    b.add(Op::Relu, &[c])
}

const CNN_CLASSES: usize = 10;
const CNN_SHAPE: [usize; 4] = [1, 3, 8, 8];
const CNN_FEATURES: usize = 16;
const CNN_NOISE: f32 = 0.6;
const CNN_MARGIN: f64 = 0.1;

/// Three convolutions, global average pooling and a dense classifier over
/// 3×8×8 inputs. The classifier is fitted to class prototypes and samples
/// are kept only when the float32 top-1 wins by a clear margin.
pub fn make_small_cnn(seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new();
    let x = b.input(&CNN_SHAPE);
    let h = conv(&mut b, &mut rng, x, 3, 8, 1);
    let h = conv(&mut b, &mut rng, h, 8, 8, 1);
    let h = conv(&mut b, &mut rng, h, 8, CNN_FEATURES, 2);
    let p = b.add(Op::GlobalAvgPool2d, &[h]);
    let f = b.add(Op::Flatten, &[p]);
    let mut feature_graph = b.g.clone();
    feature_graph.outputs.push(PortRef::new(f, 0));
    let numel: usize = CNN_SHAPE.iter().product();
    let protos: Vec<Vec<f32>> = (0..CNN_CLASSES).map(|_| normal(&mut rng, numel, 1.0)).collect();

    let mut fvecs = Vec::new();
    for p in &protos {
        let out = eval_fp32(&feature_graph, &feed("x", f32t(&CNN_SHAPE, p.clone())))?;
        fvecs.push(out[0].to_f64());
    }
    let mean: Vec<f64> = (0..CNN_FEATURES).map(|j| fvecs.iter().map(|v| v[j]).sum::<f64>() / CNN_CLASSES as f64).collect();
    let mut w = Vec::with_capacity(CNN_CLASSES * CNN_FEATURES);
    let mut bias = Vec::with_capacity(CNN_CLASSES);
    for v in &fvecs {
        let d: Vec<f64> = v.iter().zip(&mean).map(|(a, m)| a - m).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
        let row: Vec<f64> = d.iter().map(|x| x / norm).collect();
        bias.push(-(row.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>()) as f32);
        w.extend(row.iter().map(|&x| x as f32));
    }
    let wd = b.constant(f32t(&[CNN_CLASSES, CNN_FEATURES], w));
    let out = b.add(Op::Dense { bias: Some(f32t(&[CNN_CLASSES], bias)) }, &[f, wd]);
    let graph = b.finish(out);

    let exec = Executor::new(&graph)?;
    let mut draw = |count: usize, offset: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let class = (i + offset) % CNN_CLASSES;
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > 1000 {
                    return Err(Error::Invalid(format!("small_cnn: no sample of class {class} reaches the required margin")));
                }
                let noise = normal(&mut rng, numel, CNN_NOISE);
                let x: Vec<f32> = protos[class].iter().zip(&noise).map(|(p, n)| p + n).collect();
                let inputs = feed("x", f32t(&CNN_SHAPE, x));
                let logits = exec.run(&inputs, Regime::Float, None)?[0].to_f64();
                if argmax(&logits) == class && margin(&logits) >= CNN_MARGIN * logits.iter().fold(0.0f64, |m, v| m.max(v.abs())) {
                    out.push(Sample { inputs, label: Some(class as i64) });
                    break;
                }
            }
        }
        Ok(out)
    };
    let calib = draw(64, 0)?;
    let eval = draw(256, 3)?;
    Ok(Fixture { graph, calib, eval })
}

fn margin(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] - s.get(1).copied().unwrap_or(f64::NEG_INFINITY)
}

/// `x → conv2d(w) → add(·, x) → global_avg_pool2d`.
pub fn make_residual_chain(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 4, 6, 6];
    let mut b = Builder::new();
    let x = b.input(&shape);
    let w = b.constant(f32t(&[4, 4, 3, 3], normal(&mut rng, 144, (2.0f32 / 36.0).sqrt())));
    let c = b.add(Op::Conv2d { stride: [1, 1], padding: [1, 1], bias: None }, &[x, w]);
    let a = b.add(Op::Add, &[c, x]);
    let p = b.add(Op::GlobalAvgPool2d, &[a]);
    let graph = b.finish(p);
    let calib = (0..32).map(|_| Sample { inputs: feed("x", f32t(&shape, normal(&mut rng, 144, 1.0))), label: None }).collect();
    Fixture { graph, calib, eval: Vec::new() }
}

/// `x → dense(w) → relu`: three searchable edges under int8-only specs.
pub fn make_three_edge(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new();
    let x = b.input(&[1, 16]);
    let w = b.constant(f32t(&[8, 16], normal(&mut rng, 128, 0.25)));
    let bias = f32t(&[8], normal(&mut rng, 8, 0.1));
    let d = b.add(Op::Dense { bias: Some(bias) }, &[x, w]);
    let r = b.add(Op::Relu, &[d]);
    let graph = b.finish(r);
    let calib = (0..64).map(|_| Sample { inputs: feed("x", f32t(&[1, 16], normal(&mut rng, 16, 1.0))), label: None }).collect();
    Fixture { graph, calib, eval: Vec::new() }
}

/// `x` followed by `n` relus.
pub fn make_relu_chain(n: usize) -> Graph {
    let mut b = Builder::new();
    let mut h = b.input(&[1, 8]);
    for _ in 0..n {
        h = b.add(Op::Relu, &[h]);
    }
    b.finish(h)
}

const PROBE_WIDTH: usize = 512;
const PROBE_CLASSES: usize = 10;
const PROBE_SUPPORT: usize = 48;
const PROBE_SAMPLES: usize = 63;
/// Active features of the decoy class and of the true class, which also gets
/// one half-strength feature.
const PROBE_LEVELS: [usize; 7] = [3, 5, 7, 9, 11, 13, 15];

/// Dense layer with a 512-wide reduction. Every class owns a block of unit
/// weights; a sample of class `c ≥ 1` switches on `L + ½` features of its
/// block and `L` of class 0's block, with `L` odd. The float result is `c`,
/// but any accumulator bound below the true score also clips the decoy, and
/// the tie goes to class 0. Data and weights are non-negative, so partial
/// sums only grow.
pub fn make_overflow_probe() -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let mut w = vec![0f32; PROBE_CLASSES * PROBE_WIDTH];
    for c in 0..PROBE_CLASSES {
        for j in 0..PROBE_WIDTH {
            let own = j / PROBE_SUPPORT == c;
            w[c * PROBE_WIDTH + j] = if own { 1.0 } else { rng.random_range(0.0..0.005) };
        }
    }
    let mut b = Builder::new();
    let x = b.input(&[1, PROBE_WIDTH]);
    let wn = b.constant(f32t(&[PROBE_CLASSES, PROBE_WIDTH], w));
    let d = b.add(Op::Dense { bias: None }, &[x, wn]);
    let graph = b.finish(d);
    let exec = Executor::new(&graph)?;

    let mut calib = Vec::with_capacity(PROBE_SAMPLES);
    for i in 0..PROBE_SAMPLES {
        let class = 1 + i % (PROBE_CLASSES - 1);
        let level = PROBE_LEVELS[i % PROBE_LEVELS.len()];
        let mut tries = 0;
        let sample = loop {
            tries += 1;
            if tries > 100 {
                return Err(Error::Invalid(format!("overflow probe: sample {i} never separates its classes")));
            }
            let mut xs: Vec<f32> = (0..PROBE_WIDTH).map(|_| rng.random_range(0.0..0.005)).collect();
            let mut activate = |block: usize, k: usize, rng: &mut ChaCha8Rng| {
                let picks = sample_indices(rng, PROBE_SUPPORT, k).into_vec();
                for &j in &picks {
                    xs[block * PROBE_SUPPORT + j] = 1.0;
                }
                picks
            };
            let own = activate(class, level + 1, &mut rng);
            activate(0, level, &mut rng);
            let other = loop {
                let o = rng.random_range(1..PROBE_CLASSES);
                if o != class {
                    break o;
                }
            };
            activate(other, 2, &mut rng);
            xs[class * PROBE_SUPPORT + own[level]] = 0.5;
            let inputs = feed("x", f32t(&[1, PROBE_WIDTH], xs));
            let logits = exec.run(&inputs, Regime::Float, None)?[0].to_f64();
            if argmax(&logits) == class && margin(&logits) >= 0.25 {
                break Sample { inputs, label: Some(class as i64) };
            }
        };
        calib.push(sample);
    }

    let spec = spec_fixture("arm_vmlal_like")?;
    let wide = probe_overflows(&graph, &spec, &calib, &[16, 16])?;
    let eight = probe_overflows(&graph, &spec, &calib, &[8, 8])?;
    let six = probe_overflows(&graph, &spec, &calib, &[6, 6])?;
    if wide != calib.len() || eight != calib.len() || six != 0 {
        return Err(Error::Invalid(format!(
            "overflow probe: expected every sample to overflow at 16 and 8 bits and none at 6, got {wide}, {eight} and {six} of {}",
            calib.len()
        )));
    }
    Ok(Fixture { graph, eval: calib.clone(), calib })
}

/// Number of samples whose realized integer run traps, with max thresholds
/// and the given bits on every searchable edge.
pub fn probe_overflows(g: &Graph, spec: &HardwareSpec, samples: &[Sample], bits: &[u32]) -> Result<usize> {
    let sim = prepare(g, spec)?;
    let calib = calibrate(g, &sim, samples, Estimator::Max, false)?;
    let settings = settings_from_bits(&sim, spec, &calib.edges, bits)?;
    let realized = realize(g, spec, &Strategy::new(g, &sim, &settings)?)?;
    let exec = Executor::new(&realized)?;
    let mut count = 0;
    for s in samples {
        match exec.run(&s.inputs, Regime::Int(OverflowMode::Trap), None) {
            Ok(_) => {}
            Err(Error::Overflow { .. }) => count += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(count)
}

/// Write every fixture under `dir`; returns the written paths.
pub fn write_fixtures(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let specs = dir.join("specs");
    std::fs::create_dir_all(&specs).map_err(|e| Error::io(&specs, e))?;
    for name in SPEC_NAMES {
        let p = specs.join(format!("{name}.json"));
        write_text(&p, &spec_fixture(name)?.to_json())?;
        written.push(p);
    }
    let models = [
        ("small_cnn", make_small_cnn(SMALL_CNN_SEED)?),
        ("residual_chain", make_residual_chain(RESIDUAL_SEED)),
        ("three_edge", make_three_edge(THREE_EDGE_SEED)),
        ("overflow_probe", make_overflow_probe()?),
        ("relu_chain", Fixture { graph: make_relu_chain(RELU_CHAIN_LEN), calib: Vec::new(), eval: Vec::new() }),
    ];
    for (name, f) in models {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let model = sub.join("model.json");
        save_graph(&f.graph, &model)?;
        written.extend([model, sub.join("model.bin")]);
        for (set, samples) in [("calib", &f.calib), ("eval", &f.eval)] {
            if !samples.is_empty() {
                let p = sub.join(format!("{set}.json"));
                save_dataset(samples, &p)?;
                written.extend([p, sub.join(format!("{set}.bin"))]);
            }
        }
    }
    Ok(written)
}
