use hwquant::calibration::{calibrate, Calibration, Estimator};
use hwquant::dataset::Sample;
use hwquant::fixtures::*;
use hwquant::graph::{Edge, Graph, Node, NodeId, Op, PortRef};
use hwquant::hwspec::HardwareSpec;
use hwquant::interp::{predictions, top1_agreement, Executor, OverflowMode, Regime};
use hwquant::plan::QuantPlan;
use hwquant::realize::{lower, realize, Strategy};
use hwquant::search::*;
use hwquant::tensor::Tensor;
use hwquant::topology::{prepare, SimulatedGraph};
use hwquant::OpKind;

struct Setup {
    fixture: Fixture,
    spec: HardwareSpec,
    sim: SimulatedGraph,
    calib: Calibration,
}

fn setup(fixture: Fixture, spec: &str, est: Estimator) -> Setup {
    let spec = spec_fixture(spec).unwrap();
    let sim = prepare(&fixture.graph, &spec).unwrap();
    let calib = calibrate(&fixture.graph, &sim, &fixture.calib, est, false).unwrap();
    Setup { fixture, spec, sim, calib }
}

fn realize_bits(s: &Setup, bits: &[u32]) -> (QuantPlan, Graph) {
    let plan = QuantPlan::from_bits(&s.sim, &s.spec, &s.calib.edges, bits).unwrap();
    let strategy = Strategy::new(&s.fixture.graph, &s.sim, &plan.settings).unwrap();
    let g = realize(&s.fixture.graph, &s.spec, &strategy).unwrap();
    (plan, g)
}

fn consumer_of(g: &Graph, id: NodeId) -> &Node {
    let e = g.edges.iter().find(|e| e.src.node == id).unwrap();
    g.node(e.dst.node).unwrap()
}

fn producer_of(g: &Graph, id: NodeId, port: usize) -> &Node {
    let e = g.edges.iter().find(|e| e.dst == PortRef::new(id, port)).unwrap();
    g.node(e.src.node).unwrap()
}

#[test]
fn residual_chain_lowering_layout() {
    let s = setup(make_residual_chain(RESIDUAL_SEED), "conv_add_gap", Estimator::Max);
    let (plan, g) = realize_bits(&s, &[8, 8, 16, 16]);
    assert_eq!(g.count(OpKind::SimulatedQuantize), 0);
    let conv = g.nodes.iter().find(|n| n.kind() == OpKind::Conv2d).unwrap();
    let ann = conv.int.as_ref().unwrap();
    assert_eq!((ann.in_dtypes.as_slice(), ann.acc_dtype), (&[hwquant::DType::Int8, hwquant::DType::Int8][..], hwquant::DType::Int16));
    match &producer_of(&g, conv.id, 1).op {
        Op::Constant { value } => assert_eq!(value.dtype(), hwquant::DType::Int8),
        other => panic!("weights not folded: {other:?}"),
    }
    assert_eq!(producer_of(&g, conv.id, 0).kind(), OpKind::Quantize);
    let after_conv = consumer_of(&g, conv.id);
    assert_eq!(after_conv.kind(), OpKind::Requantize);
    let gap = g.nodes.iter().find(|n| n.kind() == OpKind::GlobalAvgPool2d).unwrap();
    assert_eq!(producer_of(&g, gap.id, 0).kind(), OpKind::Dequantize);
    let add = g.nodes.iter().find(|n| n.kind() == OpKind::Add).unwrap();
    assert_eq!(add.int.as_ref().unwrap().acc_dtype, hwquant::DType::Int32);
    // The lower-threshold operand is requantized once more onto the shared scale.
    let (port, _) = plan.ops[&add.id].rescale.unwrap();
    let rescaled = producer_of(&g, add.id, port);
    assert_eq!(rescaled.kind(), OpKind::Requantize);
    assert!(s.sim.graph.node(rescaled.id).is_none());
    assert!(top1_agreement(&s.fixture.graph, &g, &s.fixture.calib).unwrap() >= 0.99);
}

#[test]
fn float_only_spec_leaves_graph_alone() {
    let f = make_residual_chain(RESIDUAL_SEED);
    let spec = HardwareSpec::new();
    let sim = prepare(&f.graph, &spec).unwrap();
    assert!(sim.searchable.is_empty() && sim.boundaries.is_empty());
    let strategy = Strategy::new(&f.graph, &sim, &[]).unwrap();
    assert_eq!(realize(&f.graph, &spec, &strategy).unwrap(), f.graph);
}

#[test]
fn realized_graphs_follow_the_spec() {
    let s = setup(make_small_cnn(SMALL_CNN_SEED).unwrap(), "int8_int32", Estimator::Max);
    let bits = vec![8; s.sim.searchable.len()];
    let (_, g) = realize_bits(&s, &bits);
    assert_eq!(g.count(OpKind::SimulatedQuantize), 0);
    for n in &g.nodes {
        if let Some(ann) = &n.int {
            let ok = s.spec.signatures(n.kind()).iter().any(|sig| sig.in_dtypes == ann.in_dtypes && sig.out == ann.acc_dtype);
            assert!(ok, "node {} ({}) annotated outside the spec", n.id, n.kind());
        }
    }
    let exec = Executor::new(&g).unwrap();
    for sample in &s.fixture.calib {
        exec.run(&sample.inputs, Regime::Int(OverflowMode::Trap), None).unwrap();
    }
}

#[test]
fn simulated_and_realized_chain_agree_within_one_step() {
    let s = setup(make_three_edge(THREE_EDGE_SEED), "int8_int32", Estimator::Max);
    for bits in [[8, 8, 8], [6, 7, 5], [4, 4, 4]] {
        let (plan, g) = realize_bits(&s, &bits);
        let relu = s.sim.graph.nodes.iter().find(|n| n.kind() == OpKind::Relu).unwrap().id;
        let step = plan.ops[&relu].out.scale as f64;
        let sim_exec = Executor::new(&s.sim.graph).unwrap();
        let int_exec = Executor::new(&g).unwrap();
        for sample in &s.fixture.calib {
            let a = sim_exec.run(&sample.inputs, Regime::Float, Some(&plan.binding)).unwrap()[0].to_f64();
            let b = int_exec.run(&sample.inputs, Regime::Int(OverflowMode::Saturate), None).unwrap()[0].to_f64();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= step, "{bits:?}: {x} vs {y}, step {step}");
            }
        }
    }
}

#[test]
fn lowering_matches_realize() {
    let s = setup(make_three_edge(THREE_EDGE_SEED), "int8_int32", Estimator::Max);
    let (plan, g) = realize_bits(&s, &[7, 6, 8]);
    assert_eq!(lower(&s.sim, &plan).unwrap(), g);
}

#[test]
fn evaluator_losses_on_small_cnn() {
    let s = setup(make_small_cnn(SMALL_CNN_SEED).unwrap(), "int8_int32", Estimator::Max);
    let ev = Evaluator::new(&s.sim, &s.spec, &s.calib.edges, &s.fixture.eval).unwrap();
    let space = build_search_space(&s.sim.topology, MIN_BIT).unwrap();
    let hi = ev.evaluate(&space.highest()).unwrap();
    let lo = ev.evaluate(&space.lowest()).unwrap();
    assert!(hi <= 0.01, "{hi}");
    assert!(lo >= hi, "{lo} < {hi}");
}

#[test]
fn batched_equals_sequential() {
    let s = setup(make_three_edge(THREE_EDGE_SEED), "int8_int32", Estimator::Quantile(0.99));
    let ev = Evaluator::new(&s.sim, &s.spec, &s.calib.edges, &s.fixture.calib).unwrap();
    let cands: Vec<Candidate> = (0..8u32).map(|i| Candidate(vec![4 + i % 5, 8 - i % 5, 4 + (i * 3) % 5])).collect();
    let seq: Vec<f64> = cands.iter().map(|c| ev.evaluate(c).unwrap()).collect();
    assert_eq!(ev.batched_evaluate(&cands).unwrap(), seq);
    let twice = ev.batched_evaluate(&[cands[3].clone(), cands[3].clone()]).unwrap();
    assert_eq!(twice, vec![seq[3], seq[3]]);
    assert_eq!(ev.batched_evaluate(&cands[..1]).unwrap(), vec![seq[0]]);
}

fn accepted_losses(t: &SearchTrace) -> Vec<f64> {
    t.records.iter().filter(|r| r.accepted).map(|r| r.loss).collect()
}

#[test]
fn searches_on_the_coupled_fixture() {
    let s = setup(make_three_edge(THREE_EDGE_SEED), "int8_int32", Estimator::Quantile(0.99));
    let ev = Evaluator::new(&s.sim, &s.spec, &s.calib.edges, &s.fixture.calib).unwrap();
    let space = build_search_space(&s.sim.topology, MIN_BIT).unwrap();
    assert_eq!(space_size(&space), 125u32.into());

    let ex = exhaustive_search(&space, &ev, EXHAUSTIVE_CAP).unwrap();
    assert_eq!(ex.evaluations, 125);
    let greedy = greedy_search(&space, &ev, GreedyConfig { rounds: 2, tol: 0.0 }).unwrap();
    assert!(greedy.loss <= ex.loss + 0.02, "greedy {} vs optimum {}", greedy.loss, ex.loss);
    let acc = accepted_losses(&greedy.trace);
    assert!(acc.windows(2).all(|w| w[1] <= w[0]));
    assert!(greedy.loss <= acc[0]);
    let budget: u32 = space.ranges.iter().map(|r| r.len()).sum();
    assert!(greedy.evaluations <= 2 * budget as usize);
    assert!(space.contains(&greedy.best));

    let anneal = anneal_search(&space, &ev, AnnealConfig { steps: 2000, t0: 0.1, decay: 0.995, seed: 1 }).unwrap();
    assert!(anneal.loss <= greedy.loss + 0.02, "anneal {} vs greedy {}", anneal.loss, greedy.loss);
    assert!(space.contains(&anneal.best));
}

#[test]
fn second_greedy_round_gains_no_more_than_the_first() {
    let s = setup(make_three_edge(THREE_EDGE_SEED), "int8_int32", Estimator::Quantile(0.99));
    let ev = Evaluator::new(&s.sim, &s.spec, &s.calib.edges, &s.fixture.calib).unwrap();
    let space = build_search_space(&s.sim.topology, MIN_BIT).unwrap();
    let one = greedy_search(&space, &ev, GreedyConfig { rounds: 1, tol: 0.0 }).unwrap();
    let two = greedy_search(&space, &ev, GreedyConfig { rounds: 2, tol: 0.0 }).unwrap();
    let start = one.trace.records[0].loss;
    assert!(two.loss - one.loss <= 0.0);
    assert!(one.loss - two.loss <= start - one.loss);
}

#[test]
fn random_search_misses_a_lone_good_point_at_the_expected_rate() {
    let space = SearchSpace::from_bounds(&[(4, 8); 3]).unwrap();
    let good = Candidate(vec![5, 7, 6]);
    let f = |c: &Candidate| if *c == good { 0.0 } else { 1.0 };
    let trials = 2000;
    let misses = (0..trials).filter(|&seed| random_search(&space, &f, 10, seed).unwrap().loss > 0.0).count();
    let expected = (124.0f64 / 125.0).powi(10);
    assert!((expected - 0.9228).abs() < 1e-4);
    let rate = misses as f64 / trials as f64;
    assert!((rate - expected).abs() < 0.03, "miss rate {rate}, expected {expected}");
}

#[test]
fn output_noise_below_the_score_gap_keeps_agreement() {
    let f = make_three_edge(THREE_EDGE_SEED);
    let samples: Vec<Sample> = f.calib[..10].to_vec();
    let exec = Executor::new(&f.graph).unwrap();
    let scores: Vec<Vec<f64>> = samples.iter().map(|s| exec.run(&s.inputs, Regime::Float, None).unwrap()[0].to_f64()).collect();
    let gap = scores
        .iter()
        .map(|v| {
            let mut v = v.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            v[0] - v[1]
        })
        .fold(f64::INFINITY, f64::min);
    assert!(gap > 0.0);
    let noise: Vec<f32> = (0..8).map(|i| (i as f32 * 0.37).sin() * 0.45 * gap as f32).collect();
    let mut g = f.graph.clone();
    let out = g.outputs[0];
    let c = NodeId(100);
    let a = NodeId(101);
    g.nodes.push(Node::new(c, Op::Constant { value: Tensor::from_f32(vec![1, 8], noise).unwrap() }));
    g.nodes.push(Node::new(a, Op::Add));
    g.edges.push(Edge { src: out, dst: PortRef::new(a, 0) });
    g.edges.push(Edge { src: PortRef::new(c, 0), dst: PortRef::new(a, 1) });
    g.outputs = vec![PortRef::new(a, 0)];
    assert_eq!(top1_agreement(&f.graph, &g, &samples).unwrap(), 1.0);
}

#[test]
fn passthrough_binding_reproduces_float_predictions() {
    let s = setup(make_small_cnn(SMALL_CNN_SEED).unwrap(), "int8_int32", Estimator::Max);
    let exec = Executor::new(&s.sim.graph).unwrap();
    let orig = Executor::new(&s.fixture.graph).unwrap();
    for sample in s.fixture.calib.iter().take(8) {
        let a = exec.run(&sample.inputs, Regime::Float, None).unwrap();
        let b = orig.run(&sample.inputs, Regime::Float, None).unwrap();
        assert_eq!(a, b);
    }
    let reference = predictions(&orig, &s.fixture.calib, Regime::Float, None).unwrap();
    let through = predictions(&exec, &s.fixture.calib, Regime::Float, None).unwrap();
    assert_eq!(reference, through);
}
