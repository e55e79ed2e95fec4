use std::collections::HashMap;

use crate::dtype::{max_bits, DType};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::tensor::Tensor;

/// Quantization parameters of one edge: a `bit`-wide grid (`sign` = 1 for a
/// signed grid) spanning `threshold`, stored in `dtype`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QParams {
    pub threshold: f32,
    pub bit: u32,
    pub sign: u32,
    pub dtype: DType,
    pub zero_point: i64,
}

impl QParams {
    pub fn new(threshold: f32, bit: u32, sign: u32, dtype: DType, zero_point: i64) -> Result<Self> {
        let p = QParams { threshold, bit, sign, dtype, zero_point };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        compute_scale(self.threshold, self.bit, self.sign)?;
        let width = max_bits(self.dtype)?;
        if self.bit > width {
            return Err(Error::Invalid(format!("{} bits do not fit in {}", self.bit, self.dtype)));
        }
        if (self.sign == 1) != self.dtype.is_signed() {
            return Err(Error::Invalid(format!("sign {} does not match storage dtype {}", self.sign, self.dtype)));
        }
        let (lo, hi) = quant_bounds(self.bit, self.sign);
        if self.sign == 1 && self.zero_point != 0 || !(lo..=hi).contains(&self.zero_point) {
            return Err(Error::Invalid(format!("zero point {} invalid for this grid", self.zero_point)));
        }
        Ok(())
    }

    pub fn scale(&self) -> f32 {
        self.threshold / pow2(self.bit - self.sign)
    }

    pub fn bounds(&self) -> (i64, i64) {
        quant_bounds(self.bit, self.sign)
    }

    pub fn grid(&self) -> Grid {
        let (qmin, qmax) = self.bounds();
        Grid { scale: self.scale(), zero_point: self.zero_point, qmin, qmax }
    }
}

fn pow2(k: u32) -> f32 {
    (1u64 << k) as f32
}

/// Step size of a `bit`-wide grid spanning `threshold`.
pub fn compute_scale(threshold: f32, bit: u32, sign: u32) -> Result<f32> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::Invalid(format!("threshold must be positive and finite, got {threshold}")));
    }
    if !(2..=32).contains(&bit) || sign > 1 || bit <= sign {
        return Err(Error::Invalid(format!("unsupported grid: bit={bit}, sign={sign}")));
    }
    Ok(threshold / pow2(bit - sign))
}

/// Integer code range of a `bit`-wide grid.
pub fn quant_bounds(bit: u32, sign: u32) -> (i64, i64) {
    if sign == 1 {
        (-(1i64 << (bit - 1)), (1i64 << (bit - 1)) - 1)
    } else {
        (0, (1i64 << bit) - 1)
    }
}

/// An integer grid applied to real values: round to `scale` steps, offset by
/// `zero_point`, clamp codes to `[qmin, qmax]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub scale: f32,
    pub zero_point: i64,
    pub qmin: i64,
    pub qmax: i64,
}

impl Grid {
    /// Integer code of `x`, rounding half away from zero.
    pub fn code(&self, x: f32) -> i64 {
        let r = (x / self.scale).round();
        (r as i64).saturating_add(self.zero_point).clamp(self.qmin, self.qmax)
    }

    pub fn value(&self, q: i64) -> f32 {
        (q - self.zero_point) as f32 * self.scale
    }

    pub fn apply(&self, x: f32) -> f32 {
        if x.is_nan() {
            return x;
        }
        self.value(self.code(x))
    }

    /// Real-valued interval covered by the code range.
    pub fn real_range(&self) -> (f32, f32) {
        (self.value(self.qmin), self.value(self.qmax))
    }
}

/// Runtime parameters of a simulated_quantize node. Applied in order:
/// accumulator saturation, grid rounding, then optional re-rounding onto a
/// second grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimQuantParams {
    pub passthrough: bool,
    /// `None` leaves values in float32 (a dequantize boundary).
    pub quant: Option<QParams>,
    /// Accumulator range of the producing operator, in real units.
    pub overflow: Option<(f32, f32)>,
    pub rescale: Option<Grid>,
}

impl SimQuantParams {
    pub fn apply(&self, x: f32) -> f32 {
        if self.passthrough {
            return x;
        }
        let mut v = x;
        if let Some((lo, hi)) = self.overflow {
            v = v.clamp(lo, hi);
        }
        if let Some(q) = &self.quant {
            v = q.grid().apply(v);
        }
        if let Some(g) = &self.rescale {
            v = g.apply(v);
        }
        v
    }

    pub fn apply_slice(&self, xs: &[f32]) -> Vec<f32> {
        if self.passthrough {
            return xs.to_vec();
        }
        let grid = self.quant.map(|q| q.grid());
        xs.iter()
            .map(|&x| {
                let mut v = x;
                if let Some((lo, hi)) = self.overflow {
                    v = v.clamp(lo, hi);
                }
                if let Some(g) = &grid {
                    v = g.apply(v);
                }
                if let Some(g) = &self.rescale {
                    v = g.apply(v);
                }
                v
            })
            .collect()
    }
}

/// Parameters under which simulated_quantize is the identity.
pub fn noop_params() -> SimQuantParams {
    SimQuantParams { passthrough: true, quant: None, overflow: None, rescale: None }
}

/// Round-trip `x` through the grid described by `p`.
pub fn simulated_quantize(x: &Tensor, p: &QParams) -> Result<Tensor> {
    p.check()?;
    let data = x
        .as_f32()
        .ok_or_else(|| Error::Invalid(format!("simulated_quantize expects float32, got {}", x.dtype())))?;
    let grid = p.grid();
    Tensor::from_f32(x.shape().to_vec(), data.iter().map(|&v| grid.apply(v)).collect())
}

/// Runtime overrides for a simulated graph, keyed by node id. Nodes without an
/// entry use the parameters stored in the graph.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    pub sim: HashMap<NodeId, SimQuantParams>,
    /// Real-valued clip bounds snapped to the input grid.
    pub clip: HashMap<NodeId, (f32, f32)>,
    /// Grid onto which a conv2d/dense bias is rounded.
    pub bias: HashMap<NodeId, Grid>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym8(t: f32) -> QParams {
        QParams::new(t, 8, 1, DType::Int8, 0).unwrap()
    }

    #[test]
    fn scale_examples() {
        assert_eq!(compute_scale(1.0, 8, 1).unwrap(), 0.0078125);
        assert_eq!(compute_scale(6.0, 6, 1).unwrap(), 0.1875);
        assert_eq!(compute_scale(1.0, 8, 0).unwrap(), 0.00390625);
        assert!(compute_scale(0.0, 8, 1).is_err());
        assert!(compute_scale(-1.0, 8, 1).is_err());
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(quant_bounds(8, 1), (-128, 127));
        assert_eq!(quant_bounds(6, 1), (-32, 31));
        assert_eq!(quant_bounds(8, 0), (0, 255));
        assert_eq!(quant_bounds(32, 1), (i32::MIN as i64, i32::MAX as i64));
    }

    #[test]
    fn quantize_examples() {
        let g = sym8(1.0).grid();
        assert_eq!(g.code(0.5), 64);
        assert_eq!(g.apply(0.5), 0.5);
        assert_eq!(g.code(2.0), 127);
        assert_eq!(g.apply(2.0), 0.9921875);
        assert_eq!(g.code(0.004), 1);
        assert_eq!(g.apply(0.004), 0.0078125);
    }

    #[test]
    fn qparams_validation() {
        assert!(QParams::new(1.0, 9, 1, DType::Int8, 0).is_err());
        assert!(QParams::new(1.0, 8, 0, DType::Int8, 0).is_err());
        assert!(QParams::new(1.0, 8, 1, DType::UInt8, 0).is_err());
        assert!(QParams::new(1.0, 8, 0, DType::UInt8, 300).is_err());
        assert!(QParams::new(1.0, 8, 1, DType::Int8, 3).is_err());
        assert!(QParams::new(1.0, 6, 0, DType::UInt8, 17).is_ok());
    }

    #[test]
    fn six_bits_in_int8_stay_in_six_bit_range() {
        let p = QParams::new(1.0, 6, 1, DType::Int8, 0).unwrap();
        let g = p.grid();
        for i in -400..=400 {
            let q = g.code(i as f32 / 100.0);
            assert!((-32..=31).contains(&q));
        }
    }

    #[test]
    fn noop_is_identity() {
        let p = noop_params();
        for x in [0.0f32, -0.0, 1e-30, -3.5, f32::MAX, f32::INFINITY] {
            assert_eq!(p.apply(p.apply(x)).to_bits(), x.to_bits());
        }
        assert!(p.apply(f32::NAN).is_nan());
    }

    #[test]
    fn overflow_clamps_before_rounding() {
        let p = SimQuantParams {
            passthrough: false,
            quant: Some(sym8(8.0)),
            overflow: Some((-2.0, 2.0)),
            rescale: None,
        };
        assert_eq!(p.apply(5.0), 2.0);
        assert_eq!(p.apply(-0.01), 0.0);
    }

    #[test]
    fn tensor_entry_point() {
        let x = Tensor::from_f32(vec![3], vec![0.5, 2.0, 0.004]).unwrap();
        let y = simulated_quantize(&x, &sym8(1.0)).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[0.5, 0.9921875, 0.0078125]);
    }

    fn grids() -> impl Strategy<Value = Grid> {
        (1.0e-3f32..1.0e2, 2u32..=16, any::<bool>(), 0.0f64..1.0).prop_map(|(t, bit, signed, z)| {
            let p = if signed {
                QParams::new(t, bit, 1, DType::Int16, 0).unwrap()
            } else {
                let bit = bit.min(8);
                let zp = (z * ((1u64 << bit) - 1) as f64).round() as i64;
                QParams::new(t, bit, 0, DType::UInt8, zp).unwrap()
            };
            p.grid()
        })
    }

    proptest! {
        #[test]
        fn roundtrip_bound(g in grids(), x in -1.0e3f32..1.0e3) {
            let (lo, hi) = g.real_range();
            let y = g.apply(x);
            if x >= lo && x <= hi {
                prop_assert!((y - x).abs() <= g.scale / 2.0 * (1.0 + 1e-5));
            } else if x > hi {
                prop_assert_eq!(y, hi);
            } else {
                prop_assert_eq!(y, lo);
            }
        }

        #[test]
        fn idempotent_and_monotone(g in grids(), x in -1.0e3f32..1.0e3, dx in 0.0f32..10.0) {
            let y = g.apply(x);
            prop_assert_eq!(g.apply(y).to_bits(), y.to_bits());
            prop_assert!(g.apply(x + dx) >= y);
        }
    }
}
