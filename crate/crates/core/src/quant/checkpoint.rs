//! Versioned little-endian checkpoint codec and byte accounting.
//!
//! ```text
//! "TKDC" u32 version
//! spec:   u32 vocab_size d_model n_layers n_heads max_len cond_vocab
//!         u32 n_tags, n_tags x (u32 len, utf8 group, u8 component)
//! u64 seed
//! u32 n_records, n_records x record (sorted by name):
//!         u32 len, utf8 name, u8 component, u8 precision,
//!         u32 ndim, ndim x u32 dim,
//!         u32 n_scales, n_scales x f64, u32 n_zero_points, n x i32,
//!         u64 payload_len, payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{dequantize, Precision, QuantizedTensor};
use crate::error::{Error, Result};
use crate::model::{Component, ModelSpec, ModelWeights, Tensor};

pub const MAGIC: &[u8; 4] = b"TKDC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub component: Component,
    pub tensor: QuantizedTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    /// Sorted by name.
    pub records: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, seed: u64, mut records: Vec<TensorRecord>) -> Self {
        records.sort_by(|a, b| a.name.cmp(&b.name));
        Self { version: FORMAT_VERSION, spec, seed, records }
    }

    /// Dequantized weights in canonical layout order.
    pub fn to_weights(&self) -> Result<ModelWeights> {
        let by_name: BTreeMap<&str, &TensorRecord> = self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let tensors = self
            .spec
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let r = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::format(format!("checkpoint lacks tensor `{name}`")))?;
                Ok(Tensor { data: dequantize(&r.tensor)?, name, shape })
            })
            .collect::<Result<Vec<_>>>()?;
        ModelWeights::from_tensors(self.spec.clone(), self.seed, tensors)
    }

    /// Serialized length in bytes, computed without serializing.
    pub fn encoded_len(&self) -> u64 {
        let mut n = 4 + 4 + 6 * 4 + 4;
        n += self.spec.component_tags.keys().map(|g| 4 + g.len() + 1).sum::<usize>();
        n += 8 + 4;
        for r in &self.records {
            n += record_framing(r) as usize;
            n += r.tensor.stored_bytes() as usize;
        }
        n as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len() as usize);
        write_checkpoint(&mut out, self).expect("writing to memory cannot fail");
        out
    }
}

fn record_framing(r: &TensorRecord) -> u64 {
    (4 + r.name.len() + 1 + 1 + 4 + 4 * r.tensor.shape.len() + 4 + 4 + 8) as u64
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit in 32 bits")))
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&u32_of(s.len(), "string length")?.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<()> {
    let s = &ck.spec;
    w.write_all(MAGIC)?;
    w.write_all(&ck.version.to_le_bytes())?;
    for (name, v) in [
        ("vocab_size", s.vocab_size),
        ("d_model", s.d_model),
        ("n_layers", s.n_layers),
        ("n_heads", s.n_heads),
        ("max_len", s.max_len),
        ("cond_vocab", s.cond_vocab),
    ] {
        w.write_all(&u32_of(v, name)?.to_le_bytes())?;
    }
    w.write_all(&u32_of(s.component_tags.len(), "tag count")?.to_le_bytes())?;
    for (group, c) in &s.component_tags {
        put_str(&mut w, group)?;
        w.write_all(&[c.code()])?;
    }
    w.write_all(&ck.seed.to_le_bytes())?;
    w.write_all(&u32_of(ck.records.len(), "record count")?.to_le_bytes())?;
    for r in &ck.records {
        let t = &r.tensor;
        put_str(&mut w, &r.name)?;
        w.write_all(&[r.component.code(), t.precision.code()])?;
        w.write_all(&u32_of(t.shape.len(), "ndim")?.to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
        }
        w.write_all(&u32_of(t.scales.len(), "scale count")?.to_le_bytes())?;
        for s in &t.scales {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&u32_of(t.zero_points.len(), "zero point count")?.to_le_bytes())?;
        for z in &t.zero_points {
            w.write_all(&z.to_le_bytes())?;
        }
        w.write_all(&(t.payload.len() as u64).to_le_bytes())?;
        w.write_all(&t.payload)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::format("unexpected end of checkpoint"));
        }
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format("unexpected end of checkpoint"))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn count(&mut self, limit: usize, what: &str) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > limit {
            return Err(Error::format(format!("{what} count {n} exceeds {limit}")));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.count(1 << 16, "string length")?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::format("name is not valid UTF-8"))
    }
}

/// Parses and validates a checkpoint: every tensor of the spec's layout
/// must be present once, with the right shape and component.
pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut rd = Reader { inner: r };
    if &rd.array::<4>()? != MAGIC {
        return Err(Error::format("bad magic, not a checkpoint"));
    }
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = rd.u32()? as usize;
    }
    let n_tags = rd.count(1 << 10, "tag")?;
    let mut tags = BTreeMap::new();
    for _ in 0..n_tags {
        let group = rd.string()?;
        let c = Component::from_code(rd.u8()?).ok_or_else(|| Error::format("unknown component code"))?;
        if tags.insert(group.clone(), c).is_some() {
            return Err(Error::format(format!("duplicate tag for `{group}`")));
        }
    }
    let spec = ModelSpec::with_tags(dims[0], dims[1], dims[2], dims[3], dims[4], dims[5], tags)
        .map_err(|e| Error::format(format!("invalid spec block: {e}")))?;
    let seed = rd.u64()?;
    let mut layout: Vec<(String, Vec<usize>)> = spec.layout();
    layout.sort();
    let n = rd.count(layout.len(), "record")?;
    if n != layout.len() {
        return Err(Error::format(format!("expected {} records, found {n}", layout.len())));
    }
    let mut records = Vec::with_capacity(n);
    for (name, shape) in &layout {
        let got = rd.string()?;
        if &got != name {
            return Err(Error::format(format!("expected record `{name}`, found `{got}`")));
        }
        let component = Component::from_code(rd.u8()?).ok_or_else(|| Error::format("unknown component code"))?;
        if component != spec.component_of(name) {
            return Err(Error::format(format!("record `{name}` carries the wrong component")));
        }
        let precision = Precision::from_code(rd.u8()?).ok_or_else(|| Error::format("unknown precision code"))?;
        let ndim = rd.count(8, "dimension")?;
        let dims_read = (0..ndim).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims_read != shape {
            return Err(Error::format(format!("record `{name}` has shape {dims_read:?}, expected {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let n_scales = rd.count(numel.max(1), "scale")?;
        let scales = (0..n_scales).map(|_| rd.array().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        let n_zp = rd.count(1, "zero point")?;
        let zero_points = (0..n_zp).map(|_| rd.array().map(i32::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        let len = rd.u64()?;
        if len != (numel * precision.bytes_per_element()) as u64 {
            return Err(Error::format(format!("record `{name}` payload length {len} does not match its shape")));
        }
        let payload = rd.bytes(len as usize)?;
        let tensor = QuantizedTensor { precision, shape: dims_read, payload, scales, zero_points };
        tensor.validate().map_err(|e| Error::format(format!("record `{name}`: {e}")))?;
        records.push(TensorRecord { name: name.clone(), component, tensor });
    }
    if rd.inner.read(&mut [0u8; 1])? != 0 {
        return Err(Error::format("trailing bytes after last record"));
    }
    Ok(Checkpoint { version, spec, seed, records })
}

/// Stored bytes per component (payload plus quantization metadata).
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub by_component: BTreeMap<Component, u64>,
    /// Sum over components.
    pub total_bytes: u64,
    /// The same parameters stored as binary32 without metadata.
    pub fp32_bytes: u64,
    /// `1 - total_bytes / fp32_bytes`.
    pub compression_ratio: f64,
    /// Length of the serialized checkpoint, framing included.
    pub file_bytes: u64,
}

pub fn size_report(ck: &Checkpoint) -> SizeReport {
    let mut by_component: BTreeMap<Component, u64> = Component::ALL.iter().map(|c| (*c, 0)).collect();
    let mut params = 0u64;
    for r in &ck.records {
        *by_component.entry(r.component).or_default() += r.tensor.stored_bytes();
        params += r.tensor.numel() as u64;
    }
    let total_bytes = by_component.values().sum();
    let fp32_bytes = 4 * params;
    let compression_ratio = if fp32_bytes == 0 { 0.0 } else { 1.0 - total_bytes as f64 / fp32_bytes as f64 };
    SizeReport { by_component, total_bytes, fp32_bytes, compression_ratio, file_bytes: ck.encoded_len() }
}
