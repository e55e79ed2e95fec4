//! Hardware specifications: the datatype signatures each operator supports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::graph::OpKind;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    pub in_dtypes: Vec<DType>,
    /// Result dtype; for multiply-accumulate operators, the accumulator.
    pub out: DType,
}

impl Signature {
    pub fn new(in_dtypes: &[DType], out: DType) -> Self {
        Signature { in_dtypes: in_dtypes.to_vec(), out }
    }

    fn dtypes(&self) -> impl Iterator<Item = DType> + '_ {
        self.in_dtypes.iter().copied().chain(std::iter::once(self.out))
    }

    pub fn is_all_float(&self) -> bool {
        self.dtypes().all(DType::is_float)
    }

    pub fn is_all_integer(&self) -> bool {
        self.dtypes().all(DType::is_integer)
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<&str> = self.in_dtypes.iter().map(|d| d.name()).collect();
        write!(f, "({}) -> {}", ins.join(", "), self.out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpClass {
    FloatOnly,
    IntegerOnly,
    Mixed,
}

/// Operator to supported signatures. Operators absent from the table run in
/// float32 only.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HardwareSpec {
    table: BTreeMap<OpKind, Vec<Signature>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    #[serde(default)]
    ops: BTreeMap<String, Vec<SigRecord>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SigRecord {
    #[serde(rename = "in")]
    ins: Vec<String>,
    out: String,
}

impl HardwareSpec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add an operator's signatures, checking the same rules as parsing.
    pub fn with_op(mut self, op: OpKind, sigs: Vec<Signature>) -> Result<Self> {
        self.insert(op, sigs)?;
        Ok(self)
    }

    fn insert(&mut self, op: OpKind, sigs: Vec<Signature>) -> Result<()> {
        if !op.is_compute() {
            return Err(Error::Spec(format!("`{op}` is not a hardware operator")));
        }
        if self.table.contains_key(&op) {
            return Err(Error::Spec(format!("`{op}` is listed twice")));
        }
        if sigs.is_empty() {
            return Err(Error::Spec(format!("`{op}` lists no signatures")));
        }
        for (i, s) in sigs.iter().enumerate() {
            if s.in_dtypes.len() != op.arity() {
                return Err(Error::Spec(format!(
                    "`{op}` signature {s} has {} inputs, the operator takes {}",
                    s.in_dtypes.len(),
                    op.arity()
                )));
            }
            if sigs[..i].contains(s) {
                return Err(Error::Spec(format!("`{op}` lists signature {s} twice")));
            }
        }
        self.table.insert(op, sigs);
        Ok(())
    }

    /// Signatures of `op`; empty when the operator is unlisted.
    pub fn signatures(&self, op: OpKind) -> &[Signature] {
        self.table.get(&op).map_or(&[], Vec::as_slice)
    }

    pub fn integer_signatures(&self, op: OpKind) -> impl Iterator<Item = &Signature> {
        self.signatures(op).iter().filter(|s| s.is_all_integer())
    }

    pub fn ops(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.table.keys().copied()
    }

    pub fn to_json(&self) -> String {
        let file = SpecFile {
            ops: self
                .table
                .iter()
                .map(|(op, sigs)| {
                    let recs = sigs
                        .iter()
                        .map(|s| SigRecord { ins: s.in_dtypes.iter().map(|d| d.name().to_string()).collect(), out: s.out.name().into() })
                        .collect();
                    (op.name().to_string(), recs)
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("spec records always serialize");
        s.push('\n');
        s
    }
}

pub fn parse_spec(text: &str) -> Result<HardwareSpec> {
    if text.trim().is_empty() {
        return Ok(HardwareSpec::new());
    }
    let file: SpecFile = serde_json::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
    let mut spec = HardwareSpec::new();
    for (name, recs) in file.ops {
        let op: OpKind = name.parse().map_err(|_| Error::Spec(format!("unknown operator `{name}`")))?;
        let sigs = recs
            .iter()
            .map(|r| {
                let ins = r.ins.iter().map(|t| t.parse()).collect::<Result<Vec<DType>>>()?;
                Ok(Signature { in_dtypes: ins, out: r.out.parse()? })
            })
            .collect::<Result<Vec<_>>>()?;
        spec.insert(op, sigs)?;
    }
    Ok(spec)
}

pub fn load_spec(path: &Path) -> Result<HardwareSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spec(&text)
}

pub fn classify_op(spec: &HardwareSpec, op: OpKind) -> OpClass {
    let sigs = spec.signatures(op);
    if sigs.iter().all(Signature::is_all_float) {
        OpClass::FloatOnly
    } else if sigs.iter().all(Signature::is_all_integer) {
        OpClass::IntegerOnly
    } else {
        OpClass::Mixed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CONV_ADD_GAP: &str = r#"{"ops": {
        "add": [{"in": ["float32", "float32"], "out": "float32"}, {"in": ["int32", "int32"], "out": "int32"}],
        "conv2d": [{"in": ["int16", "int16"], "out": "int32"}, {"in": ["int8", "int8"], "out": "int16"}],
        "global_avg_pool2d": [{"in": ["float32"], "out": "float32"}]
    }}"#;

    #[test]
    fn parses_three_op_spec() {
        let spec = parse_spec(CONV_ADD_GAP).unwrap();
        assert_eq!(spec.signatures(OpKind::Conv2d).len(), 2);
        assert_eq!(classify_op(&spec, OpKind::GlobalAvgPool2d), OpClass::FloatOnly);
        assert_eq!(classify_op(&spec, OpKind::Conv2d), OpClass::IntegerOnly);
        assert_eq!(classify_op(&spec, OpKind::Add), OpClass::Mixed);
        assert_eq!(classify_op(&spec, OpKind::Relu), OpClass::FloatOnly);
    }

    #[test]
    fn rejects_bad_documents() {
        let arity = r#"{"ops": {"conv2d": [{"in": ["int8"], "out": "int16"}]}}"#;
        let unknown_op = r#"{"ops": {"softmax": [{"in": ["float32"], "out": "float32"}]}}"#;
        let unknown_dtype = r#"{"ops": {"relu": [{"in": ["int4"], "out": "int4"}]}}"#;
        let dup = r#"{"ops": {"relu": [{"in": ["int8"], "out": "int8"}, {"in": ["int8"], "out": "int8"}]}}"#;
        let not_hw = r#"{"ops": {"quantize": [{"in": ["float32"], "out": "int8"}]}}"#;
        for text in [arity, unknown_op, unknown_dtype, dup, not_hw, "[1, 2]"] {
            assert!(matches!(parse_spec(text), Err(Error::Spec(_))), "{text}");
        }
    }

    #[test]
    fn empty_document_is_float_only() {
        for text in ["", "  \n", "{}"] {
            let spec = parse_spec(text).unwrap();
            assert!(OpKind::ALL.iter().all(|&op| classify_op(&spec, op) == OpClass::FloatOnly));
        }
    }

    fn signature(arity: usize) -> impl Strategy<Value = Signature> {
        let dtype = prop::sample::select(DType::ALL.to_vec());
        (prop::collection::vec(dtype.clone(), arity), dtype).prop_map(|(ins, out)| Signature { in_dtypes: ins, out })
    }

    fn specs() -> impl Strategy<Value = HardwareSpec> {
        let ops: Vec<OpKind> = OpKind::ALL.into_iter().filter(|k| k.is_compute()).collect();
        prop::sample::subsequence(ops.clone(), 0..=ops.len()).prop_flat_map(|chosen| {
            chosen
                .into_iter()
                .map(|op| prop::collection::vec(signature(op.arity()), 1..4).prop_map(move |sigs| (op, sigs)))
                .collect::<Vec<_>>()
                .prop_map(|entries| {
                    let mut spec = HardwareSpec::new();
                    for (op, mut sigs) in entries {
                        let mut seen = Vec::new();
                        sigs.retain(|s| {
                            let fresh = !seen.contains(s);
                            seen.push(s.clone());
                            fresh
                        });
                        spec.insert(op, sigs).unwrap();
                    }
                    spec
                })
        })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(spec in specs()) {
            prop_assert_eq!(parse_spec(&spec.to_json()).unwrap(), spec);
        }

        #[test]
        fn classes_partition_every_op(spec in specs()) {
            for op in OpKind::ALL {
                let sigs = spec.signatures(op);
                let float = sigs.iter().all(Signature::is_all_float);
                let int = !sigs.is_empty() && sigs.iter().all(Signature::is_all_integer);
                let expected = if float { OpClass::FloatOnly } else if int { OpClass::IntegerOnly } else { OpClass::Mixed };
                prop_assert_eq!(classify_op(&spec, op), expected);
            }
        }
    }
}
