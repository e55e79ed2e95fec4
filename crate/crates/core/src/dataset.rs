//! Sample sets: input feeds with optional class labels, stored as a JSON
//! manifest plus a binary sidecar.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{graph_to_json, parent_dir, read_json, sidecar_name, to_pretty, write_text, Graph, Sidecar, SidecarReader, TensorRef};
use crate::tensor::Tensor;

/// Input name to tensor.
pub type Feed = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub inputs: Feed,
    pub label: Option<i64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    inputs: BTreeMap<String, TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
}

pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut sidecar = Sidecar::new(sidecar_name(path));
    let records: Vec<SampleRecord> = samples
        .iter()
        .map(|s| SampleRecord {
            inputs: s.inputs.iter().map(|(k, t)| (k.clone(), sidecar.push(t))).collect(),
            label: s.label,
        })
        .collect();
    sidecar.write(parent_dir(path))?;
    let v = serde_json::to_value(records)?;
    write_text(path, &to_pretty(&v))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let v = read_json(path)?;
    let records: Vec<SampleRecord> =
        serde_json::from_value(v).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut reader = SidecarReader::new(parent_dir(path));
    records
        .into_iter()
        .map(|r| {
            let inputs = r
                .inputs
                .iter()
                .map(|(k, t)| Ok((k.clone(), reader.read(t)?)))
                .collect::<Result<Feed>>()?;
            Ok(Sample { inputs, label: r.label })
        })
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a sample set: names, dtypes, shapes, payloads and labels.
pub fn dataset_fingerprint(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    h.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        for (name, t) in &s.inputs {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(t.dtype().name().as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        match s.label {
            Some(l) => {
                h.update([1]);
                h.update(l.to_le_bytes());
            }
            None => h.update([0]),
        }
    }
    hex(&h.finalize())
}

/// Content hash of a graph's serialized form.
pub fn graph_fingerprint(g: &Graph) -> String {
    let mut sidecar = Sidecar::new("graph.bin");
    let v = graph_to_json(g, &mut sidecar);
    let mut h = Sha256::new();
    h.update(v.to_string().as_bytes());
    h.update(sidecar.bytes());
    hex(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::DType;

    fn samples() -> Vec<Sample> {
        (0..3)
            .map(|i| Sample {
                inputs: BTreeMap::from([
                    ("x".to_string(), Tensor::from_f32(vec![2], vec![i as f32, -0.5]).unwrap()),
                    ("y".to_string(), Tensor::from_int(DType::UInt8, vec![1], vec![200 + i]).unwrap()),
                ]),
                label: (i != 1).then_some(i),
            })
            .collect()
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        save_dataset(&samples(), &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, samples());
        assert_eq!(dataset_fingerprint(&back), dataset_fingerprint(&samples()));
    }

    #[test]
    fn fingerprint_sees_labels_and_values() {
        let base = dataset_fingerprint(&samples());
        let mut s = samples();
        s[1].label = Some(1);
        assert_ne!(dataset_fingerprint(&s), base);
        let mut s = samples();
        s[0].inputs.insert("x".into(), Tensor::from_f32(vec![2], vec![0.0, -0.25]).unwrap());
        assert_ne!(dataset_fingerprint(&s), base);
        assert_eq!(base.len(), 64);
    }

    #[test]
    fn missing_manifest_names_the_path() {
        let err = load_dataset(Path::new("/nonexistent/data.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/data.json"));
    }
}
