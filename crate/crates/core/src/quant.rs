//! Uniform lattice quantization over a fixed interval.
//!
//! The interval [a,b] is partitioned into 2^N + 1 levels so the lattice
//! contains 0 whenever a = -b. Rounding is half-away-from-zero.

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub a: f64,
    pub b: f64,
    pub bits: u32,
}

impl QuantSpec {
    pub fn new(a: f64, b: f64, bits: u32) -> Result<Self> {
        if bits < 1 {
            return Err(Error::InvalidArgument("quantizer bits must be >= 1".into()));
        }
        if !(a < b) {
            return Err(Error::InvalidArgument(format!(
                "quantizer interval [{a},{b}] is empty"
            )));
        }
        Ok(QuantSpec { a, b, bits })
    }

    /// Default interval [-1, 1].
    pub fn symmetric(bits: u32) -> Self {
        QuantSpec::new(-1.0, 1.0, bits).unwrap()
    }

    /// Lattice step s = (b - a) / 2^N.
    pub fn step(&self) -> f64 {
        (self.b - self.a) / (1u64 << self.bits) as f64
    }

    /// Number of lattice levels, 2^N + 1.
    pub fn levels(&self) -> usize {
        (1usize << self.bits) + 1
    }

    /// Q(x) = Round((Clamp(x,a,b) - a)/s) * s + a.
    pub fn quantize(&self, x: f64) -> f64 {
        let s = self.step();
        let c = x.clamp(self.a, self.b);
        // f64::round is half-away-from-zero
        ((c - self.a) / s).round() * s + self.a
    }

    pub fn quantize_f32(&self, x: f32) -> f32 {
        self.quantize(x as f64) as f32
    }

    /// Lattice index of a quantized value; errors if `x` is off-lattice by
    /// more than 1e-9.
    pub fn to_level(&self, x: f64) -> Result<u32> {
        let s = self.step();
        let raw = (x - self.a) / s;
        let idx = raw.round();
        if (raw - idx).abs() > 1e-9 / s || idx < 0.0 || idx as usize >= self.levels() {
            return Err(Error::Integrity(format!(
                "value {x} is not on the quantization lattice"
            )));
        }
        Ok(idx as u32)
    }

    pub fn from_level(&self, level: u32) -> f64 {
        self.a + level as f64 * self.step()
    }
}

pub fn quantize_slice_f32(values: &mut [f32], spec: &QuantSpec) {
    for v in values.iter_mut() {
        *v = spec.quantize_f32(*v);
    }
}

pub fn to_levels_f32(values: &[f32], spec: &QuantSpec) -> Result<Vec<u32>> {
    values.iter().map(|&v| spec.to_level(v as f64)).collect()
}

pub fn from_levels_f32(levels: &[u32], spec: &QuantSpec) -> Vec<f32> {
    levels.iter().map(|&l| spec.from_level(l) as f32).collect()
}
