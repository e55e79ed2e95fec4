use crate::dtype::DType;
use crate::error::{Error, Result};

/// Element buffer. Integer tensors of every width share an `i64` buffer; the
/// owning [`Tensor`]'s dtype bounds the values.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Int(Vec<i64>),
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: TensorData,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { dtype: DType::Float32, shape, data: TensorData::F32(data) })
    }

    pub fn from_int(dtype: DType, shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        if dtype.is_float() {
            return Err(Error::Invalid("integer data with float32 dtype".into()));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !dtype.contains(**v)) {
            return Err(Error::Invalid(format!("value {v} outside the {dtype} range")));
        }
        Ok(Tensor { dtype, shape, data: TensorData::Int(data) })
    }

    pub fn zeros_f32(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { dtype: DType::Float32, shape, data: TensorData::F32(vec![0.0; n]) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::Int(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::Int(_) => None,
        }
    }

    pub fn as_int(&self) -> Option<&[i64]> {
        match &self.data {
            TensorData::Int(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Same data, new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.len() {
            return Err(Error::Invalid(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(Tensor { dtype: self.dtype, shape, data: self.data.clone() })
    }

    /// Values widened to f64, for reporting and comparisons.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::Int(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Little-endian raw element bytes in the tensor's storage dtype.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.dtype.byte_size());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Int(v) => {
                for &x in v {
                    match self.dtype {
                        DType::Int8 => out.extend_from_slice(&(x as i8).to_le_bytes()),
                        DType::UInt8 => out.push(x as u8),
                        DType::Int16 => out.extend_from_slice(&(x as i16).to_le_bytes()),
                        DType::Int32 => out.extend_from_slice(&(x as i32).to_le_bytes()),
                        DType::Float32 => unreachable!("integer buffer tagged float32"),
                    }
                }
            }
        }
        out
    }

    pub fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let n = numel(&shape);
        if bytes.len() != n * dtype.byte_size() {
            return Err(Error::Format(format!(
                "{dtype} tensor of shape {shape:?} needs {} bytes, got {}",
                n * dtype.byte_size(),
                bytes.len()
            )));
        }
        let data = match dtype {
            DType::Float32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ),
            DType::Int8 => TensorData::Int(bytes.iter().map(|&b| b as i8 as i64).collect()),
            DType::UInt8 => TensorData::Int(bytes.iter().map(|&b| b as i64).collect()),
            DType::Int16 => {
                TensorData::Int(bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i64).collect())
            }
            DType::Int32 => TensorData::Int(
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64).collect(),
            ),
        };
        Ok(Tensor { dtype, shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_range() {
        assert!(Tensor::from_f32(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_int(DType::Int8, vec![1], vec![128]).is_err());
        assert!(Tensor::from_int(DType::UInt8, vec![1], vec![-1]).is_err());
        assert!(Tensor::from_int(DType::Int16, vec![2], vec![-32768, 32767]).is_ok());
    }

    #[test]
    fn byte_roundtrip_every_dtype() {
        let f = Tensor::from_f32(vec![3], vec![-1.5, 0.0, f32::MIN_POSITIVE]).unwrap();
        assert_eq!(Tensor::from_le_bytes(DType::Float32, vec![3], &f.to_le_bytes()).unwrap(), f);
        for d in [DType::Int8, DType::UInt8, DType::Int16, DType::Int32] {
            let t = Tensor::from_int(d, vec![2], vec![d.min_value(), d.max_value()]).unwrap();
            assert_eq!(Tensor::from_le_bytes(d, vec![2], &t.to_le_bytes()).unwrap(), t);
        }
    }
}
