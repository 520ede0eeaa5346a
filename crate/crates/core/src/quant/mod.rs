//! Weight-only post-training quantization, component by component.
//!
//! Quantized tensors are dequantized back to `f64` for inference, so a
//! simulated model runs through the same forward pass as the original.

mod checkpoint;
pub mod fp16;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Component, ModelWeights, Tensor};
use crate::tensor::ensure_finite;

pub use checkpoint::{read_checkpoint, size_report, write_checkpoint, Checkpoint, SizeReport, TensorRecord, FORMAT_VERSION, MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Int8Affine,
    Int8SymmetricPerChannel,
    Fp16,
    Fp32,
}

impl Precision {
    pub const ALL: [Precision; 4] = [
        Precision::Int8Affine,
        Precision::Int8SymmetricPerChannel,
        Precision::Fp16,
        Precision::Fp32,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Precision::Int8Affine => "int8-affine",
            Precision::Int8SymmetricPerChannel => "int8-symmetric",
            Precision::Fp16 => "fp16",
            Precision::Fp32 => "fp32",
        }
    }

    pub fn bytes_per_element(&self) -> usize {
        match self {
            Precision::Int8Affine | Precision::Int8SymmetricPerChannel => 1,
            Precision::Fp16 => 2,
            Precision::Fp32 => 4,
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Precision::Int8Affine => 0,
            Precision::Int8SymmetricPerChannel => 1,
            Precision::Fp16 => 2,
            Precision::Fp32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Precision::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown precision `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Int8Mode {
    AffinePerTensor,
    SymmetricPerChannel,
}

impl Int8Mode {
    pub fn precision(&self) -> Precision {
        match self {
            Int8Mode::AffinePerTensor => Precision::Int8Affine,
            Int8Mode::SymmetricPerChannel => Precision::Int8SymmetricPerChannel,
        }
    }
}

impl FromStr for Int8Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(Int8Mode::AffinePerTensor),
            "symmetric" => Ok(Int8Mode::SymmetricPerChannel),
            _ => Err(Error::invalid(format!("unknown int8 mode `{s}` (expected affine or symmetric)"))),
        }
    }
}

/// Stored form of one tensor. Int8 payloads are two's-complement bytes,
/// Fp16 and Fp32 payloads little-endian IEEE values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub precision: Precision,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
    /// One per tensor (affine) or one per output channel (symmetric).
    pub scales: Vec<f64>,
    /// Affine only.
    pub zero_points: Vec<i32>,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Payload plus quantization metadata: 8 bytes per scale, 4 per zero point.
    pub fn stored_bytes(&self) -> u64 {
        (self.payload.len() + 8 * self.scales.len() + 4 * self.zero_points.len()) as u64
    }

    fn validate(&self) -> Result<()> {
        let n = self.numel();
        if self.payload.len() != n * self.precision.bytes_per_element() {
            return Err(Error::format(format!(
                "payload of {} bytes for {n} {} elements",
                self.payload.len(),
                self.precision
            )));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::format("scales must be finite and positive"));
        }
        if self.zero_points.iter().any(|z| !(-128..=127).contains(z)) {
            return Err(Error::format("zero point outside [-128, 127]"));
        }
        let ok = match self.precision {
            Precision::Int8Affine => self.scales.len() == 1 && self.zero_points.len() == 1,
            Precision::Int8SymmetricPerChannel => {
                !self.scales.is_empty() && n.is_multiple_of(self.scales.len()) && self.zero_points.is_empty()
            }
            Precision::Fp16 | Precision::Fp32 => self.scales.is_empty() && self.zero_points.is_empty(),
        };
        if !ok {
            return Err(Error::format(format!(
                "{} tensor with {} scales and {} zero points",
                self.precision,
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        Ok(())
    }
}

fn int8_payload(q: impl Iterator<Item = i32>) -> Vec<u8> {
    q.map(|v| (v as i8) as u8).collect()
}

/// Affine per-tensor or symmetric per-channel Int8 quantization.
///
/// Affine calibrates min-max over the range widened to contain zero, so the
/// zero point never clamps. A constant tensor is stored with scale `|c|`
/// and codes of `+-1`, which dequantize exactly; all zeros use scale 1.
/// Symmetric mode treats the first dimension as output channels.
pub fn quantize_int8(values: &[f64], shape: &[usize], mode: Int8Mode) -> Result<QuantizedTensor> {
    ensure_finite(values, "tensor")?;
    if shape.iter().product::<usize>() != values.len() {
        return Err(Error::invalid(format!("shape {shape:?} does not hold {} values", values.len())));
    }
    match mode {
        Int8Mode::AffinePerTensor => Ok(quantize_affine(values, shape)),
        Int8Mode::SymmetricPerChannel => {
            if shape.len() < 2 {
                return Err(Error::invalid(format!(
                    "per-channel quantization needs at least 2 dimensions, got shape {shape:?}"
                )));
            }
            Ok(quantize_symmetric(values, shape, shape[0]))
        }
    }
}

fn quantize_affine(values: &[f64], shape: &[usize]) -> QuantizedTensor {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (scale, zp, q): (f64, i32, Vec<i32>) = if values.is_empty() || lo == hi {
        let c = if values.is_empty() { 0.0 } else { lo };
        if c == 0.0 {
            (1.0, 0, vec![0; values.len()])
        } else {
            (c.abs(), 0, vec![c.signum() as i32; values.len()])
        }
    } else {
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        let range = hi - lo;
        let zp = ((-lo * 255.0 / range).round_ties_even() as i32 - 128).clamp(-128, 127);
        let q = values
            .iter()
            .map(|v| ((v * 255.0 / range).round_ties_even() as i32 + zp).clamp(-128, 127))
            .collect();
        (range / 255.0, zp, q)
    };
    QuantizedTensor {
        precision: Precision::Int8Affine,
        shape: shape.to_vec(),
        payload: int8_payload(q.into_iter()),
        scales: vec![scale],
        zero_points: vec![zp],
    }
}

fn quantize_symmetric(values: &[f64], shape: &[usize], channels: usize) -> QuantizedTensor {
    let width = if channels == 0 { 0 } else { values.len() / channels };
    let mut scales = Vec::with_capacity(channels);
    let mut q = Vec::with_capacity(values.len());
    for row in values.chunks(width.max(1)).take(channels) {
        let absmax = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if absmax == 0.0 {
            scales.push(1.0);
            q.extend(row.iter().map(|_| 0));
        } else {
            scales.push(absmax / 127.0);
            q.extend(row.iter().map(|v| ((v * 127.0 / absmax).round_ties_even() as i32).clamp(-127, 127)));
        }
    }
    QuantizedTensor {
        precision: Precision::Int8SymmetricPerChannel,
        shape: shape.to_vec(),
        payload: int8_payload(q.into_iter()),
        scales,
        zero_points: Vec::new(),
    }
}

/// Binary16 storage; values beyond the binary16 range are rejected.
pub fn quantize_fp16(values: &[f64], shape: &[usize]) -> Result<QuantizedTensor> {
    let mut payload = Vec::with_capacity(values.len() * 2);
    for &v in values {
        let h = fp16::f64_to_f16_bits(v)
            .ok_or_else(|| Error::invalid(format!("value {v} is not representable in binary16")))?;
        payload.extend_from_slice(&h.to_le_bytes());
    }
    Ok(QuantizedTensor { precision: Precision::Fp16, shape: shape.to_vec(), payload, scales: vec![], zero_points: vec![] })
}

/// Binary32 storage (rounds to nearest).
pub fn quantize_fp32(values: &[f64], shape: &[usize]) -> Result<QuantizedTensor> {
    ensure_finite(values, "tensor")?;
    let mut payload = Vec::with_capacity(values.len() * 4);
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::invalid(format!("value {v} is not representable in binary32")));
        }
        payload.extend_from_slice(&f.to_le_bytes());
    }
    Ok(QuantizedTensor { precision: Precision::Fp32, shape: shape.to_vec(), payload, scales: vec![], zero_points: vec![] })
}

pub fn quantize(values: &[f64], shape: &[usize], precision: Precision) -> Result<QuantizedTensor> {
    match precision {
        Precision::Int8Affine => quantize_int8(values, shape, Int8Mode::AffinePerTensor),
        Precision::Int8SymmetricPerChannel => {
            // vectors are treated as a single channel
            let as_matrix = if shape.len() < 2 { vec![1, values.len()] } else { shape.to_vec() };
            let mut qt = quantize_int8(values, &as_matrix, Int8Mode::SymmetricPerChannel)?;
            qt.shape = shape.to_vec();
            Ok(qt)
        }
        Precision::Fp16 => quantize_fp16(values, shape),
        Precision::Fp32 => quantize_fp32(values, shape),
    }
}

pub fn dequantize(qt: &QuantizedTensor) -> Result<Vec<f64>> {
    qt.validate()?;
    let p = &qt.payload;
    Ok(match qt.precision {
        Precision::Int8Affine => {
            let (s, z) = (qt.scales[0], qt.zero_points[0]);
            p.iter().map(|&b| ((b as i8) as i32 - z) as f64 * s).collect()
        }
        Precision::Int8SymmetricPerChannel => {
            let width = qt.numel() / qt.scales.len();
            p.iter()
                .enumerate()
                .map(|(i, &b)| (b as i8) as f64 * qt.scales[i / width.max(1)])
                .collect()
        }
        Precision::Fp16 => p
            .chunks_exact(2)
            .map(|c| fp16::f16_bits_to_f64(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        Precision::Fp32 => p
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    })
}

/// Precision per model component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantPlan {
    pub precisions: BTreeMap<Component, Precision>,
}

impl QuantPlan {
    pub fn new(precisions: BTreeMap<Component, Precision>) -> Result<Self> {
        let plan = Self { precisions };
        plan.validate()?;
        Ok(plan)
    }

    /// Condition encoder in Int8, decoder blocks in Fp16, output head in Fp32.
    pub fn mixed(int8: Int8Mode) -> Self {
        Self {
            precisions: [
                (Component::CondEncoder, int8.precision()),
                (Component::DecoderBlocks, Precision::Fp16),
                (Component::OutputHead, Precision::Fp32),
            ]
            .into_iter()
            .collect(),
        }
    }

    pub fn uniform(p: Precision) -> Self {
        Self { precisions: Component::ALL.iter().map(|c| (*c, p)).collect() }
    }

    /// `paper`, `fp32`, `fp16` or `int8`.
    pub fn by_name(name: &str, int8: Int8Mode) -> Result<Self> {
        match name {
            "paper" => Ok(Self::mixed(int8)),
            "fp32" => Ok(Self::uniform(Precision::Fp32)),
            "fp16" => Ok(Self::uniform(Precision::Fp16)),
            "int8" => Ok(Self::uniform(int8.precision())),
            _ => Err(Error::invalid(format!("unknown quant plan `{name}` (expected paper, fp32, fp16 or int8)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in Component::ALL {
            if !self.precisions.contains_key(&c) {
                return Err(Error::invalid(format!("quant plan has no precision for {c}")));
            }
        }
        Ok(())
    }
}

/// Quantizes every tensor per its component's precision. Returns the
/// checkpoint and the dequantized weights used for simulated inference.
pub fn apply_plan(w: &ModelWeights, plan: &QuantPlan) -> Result<(Checkpoint, ModelWeights)> {
    plan.validate()?;
    let spec = w.spec();
    let quantized: Vec<(Component, QuantizedTensor)> = w
        .tensors()
        .par_iter()
        .map(|t| {
            let c = spec.component_of(&t.name);
            quantize(&t.data, &t.shape, plan.precisions[&c])
                .map(|q| (c, q))
                .map_err(|e| Error::invalid(format!("tensor `{}`: {e}", t.name)))
        })
        .collect::<Result<_>>()?;
    let mut simulated = Vec::with_capacity(quantized.len());
    let mut records = Vec::with_capacity(quantized.len());
    for (t, (component, q)) in w.tensors().iter().zip(quantized) {
        simulated.push(Tensor { name: t.name.clone(), shape: t.shape.clone(), data: dequantize(&q)? });
        records.push(TensorRecord { name: t.name.clone(), component, tensor: q });
    }
    let checkpoint = Checkpoint::new(spec.clone(), w.seed(), records);
    let sim = ModelWeights::from_tensors(spec.clone(), w.seed(), simulated)?;
    Ok((checkpoint, sim))
}
