use std::path::{Path, PathBuf};

use hwquant::dataset::load_dataset;
use hwquant::fixtures::*;
use hwquant::graph::{load_graph, validate_graph};
use hwquant::hwspec::load_spec;
use hwquant::interp::top1_agreement;

fn committed() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn regeneration_reproduces_committed_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_fixtures(dir.path()).unwrap();
    assert_eq!(written.len(), 26);
    for path in written {
        let rel = path.strip_prefix(dir.path()).unwrap();
        let fresh = std::fs::read(&path).unwrap();
        let shipped = std::fs::read(committed().join(rel)).unwrap_or_else(|e| panic!("{}: {e}", rel.display()));
        assert!(fresh == shipped, "{} differs from the committed copy", rel.display());
    }
}

#[test]
fn committed_specs_match_constructors() {
    for name in SPEC_NAMES {
        let loaded = load_spec(&committed().join(format!("specs/{name}.json"))).unwrap();
        assert_eq!(loaded, spec_fixture(name).unwrap(), "{name}");
    }
}

#[test]
fn committed_models_validate_and_agree_with_themselves() {
    for name in ["small_cnn", "residual_chain", "three_edge", "overflow_probe", "relu_chain"] {
        let g = load_graph(&committed().join(name).join("model.json")).unwrap();
        assert!(validate_graph(&g).is_empty(), "{name}");
        let calib = committed().join(name).join("calib.json");
        if calib.exists() {
            let samples = load_dataset(&calib).unwrap();
            assert_eq!(top1_agreement(&g, &g, &samples).unwrap(), 1.0, "{name}");
        }
    }
}

#[test]
fn small_cnn_shape_and_determinism() {
    let a = make_small_cnn(SMALL_CNN_SEED).unwrap();
    let b = make_small_cnn(SMALL_CNN_SEED).unwrap();
    assert_eq!(a.graph, b.graph);
    assert_eq!(a.calib, b.calib);
    assert_eq!((a.calib.len(), a.eval.len()), (64, 256));
    let kinds: Vec<&str> = a.graph.nodes.iter().map(|n| n.kind().name()).filter(|k| *k != "constant").collect();
    assert_eq!(
        kinds,
        ["input", "conv2d", "relu", "conv2d", "relu", "conv2d", "relu", "global_avg_pool2d", "flatten", "dense"]
    );
    assert_ne!(make_small_cnn(SMALL_CNN_SEED + 1).unwrap().graph, a.graph);
}

#[test]
fn overflow_probe_facts() {
    let f = make_overflow_probe().unwrap();
    let spec = spec_fixture("arm_vmlal_like").unwrap();
    let n = f.calib.len();
    assert_eq!(probe_overflows(&f.graph, &spec, &f.calib, &[8, 8]).unwrap(), n);
    assert_eq!(probe_overflows(&f.graph, &spec, &f.calib, &[6, 6]).unwrap(), 0);
    let out = hwquant::interp::eval_fp32(&f.graph, &f.calib[0].inputs).unwrap();
    assert!(out[0].to_f64().iter().all(|v| v.is_finite()));
}
