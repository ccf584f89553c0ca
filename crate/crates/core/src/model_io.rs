//! The TIWF weight container and the raw input formats.
//!
//! TIWF layout, all integers and floats little-endian:
//!
//! ```text
//! "TIWF"  u32 version (=1)  u32 entry_count
//! per entry:
//!   u16 name_len, name (UTF-8)
//!   u8 dtype (0 = f32, 1 = u8, 2 = i32), u8 rank, u32 dims[rank]
//!   u8 has_quant [, f32 scale, i32 zero_point]
//!   u64 byte_len, payload
//! ```
//!
//! Metadata lives in ordinary entries under the `meta/` prefix:
//! `meta/arch` and `meta/source` (UTF-8 bytes), `meta/means` (3 × f32, in
//! engine channel order), `meta/channel_order` (`"RGB"` or `"BGR"`), and
//! `meta/act/<layer>` (observed `[min, max]` as 2 × f32, with the
//! activation's quantization parameters in the quant block).
//!
//! Input files are `"TIRAW001"` followed by interleaved 8-bit RGB rows, or
//! `"TIF32001"` followed by an already preprocessed planar f32 tensor.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{DType, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"TIWF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

pub const RAW_MAGIC: &[u8; 8] = b"TIRAW001";
pub const F32_MAGIC: &[u8; 8] = b"TIF32001";

/// Side length of the network input image.
pub const INPUT_SIZE: usize = 227;
pub const DEFAULT_MEANS: [f32; 3] = [104.0, 117.0, 123.0];

const META_ARCH: &str = "meta/arch";
const META_SOURCE: &str = "meta/source";
const META_MEANS: &str = "meta/means";
const META_ORDER: &str = "meta/channel_order";
const META_ACT: &str = "meta/act/";

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::U8 => 1,
        DType::I32 => 2,
    }
}

fn dtype_from_code(code: u8) -> Option<DType> {
    match code {
        0 => Some(DType::F32),
        1 => Some(DType::U8),
        2 => Some(DType::I32),
        _ => None,
    }
}

/// One named array in a weight store, kept as raw little-endian bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    dtype: DType,
    dims: Vec<u32>,
    quant: Option<QuantParams>,
    bytes: Vec<u8>,
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

impl WeightEntry {
    pub fn new(dtype: DType, dims: Vec<u32>, quant: Option<QuantParams>, bytes: Vec<u8>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Argument(format!("rank {} too large", dims.len())));
        }
        let expected = element_count(&dims)
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| Error::Size(format!("dims {dims:?} overflow")))?;
        if bytes.len() != expected {
            return Err(Error::Size(format!(
                "{} payload bytes for dims {dims:?} of {dtype:?}",
                bytes.len()
            )));
        }
        Ok(WeightEntry {
            dtype,
            dims,
            quant,
            bytes,
        })
    }

    pub fn from_f32(dims: Vec<u32>, values: &[f32]) -> Result<Self> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F32, dims, None, bytes)
    }

    pub fn from_u8(dims: Vec<u32>, values: Vec<u8>, quant: Option<QuantParams>) -> Result<Self> {
        Self::new(DType::U8, dims, quant, values)
    }

    pub fn from_i32(dims: Vec<u32>, values: &[i32]) -> Result<Self> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::I32, dims, None, bytes)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn quant(&self) -> Option<QuantParams> {
        self.quant
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len() / self.dtype.size_of()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        if self.dtype != DType::F32 {
            return Err(Error::DType {
                expected: DType::F32,
                found: self.dtype,
            });
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub fn to_i32_vec(&self) -> Result<Vec<i32>> {
        if self.dtype != DType::I32 {
            return Err(Error::DType {
                expected: DType::I32,
                found: self.dtype,
            });
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    /// The entry as a 4-D tensor; lower ranks are padded with leading 1s.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.dims.len() > 4 {
            return Err(Error::Shape(format!(
                "rank {} entry is not a 4-D tensor",
                self.dims.len()
            )));
        }
        let mut d = [1usize; 4];
        for (slot, &v) in d[4 - self.dims.len()..].iter_mut().zip(&self.dims) {
            *slot = v as usize;
        }
        let shape = Shape::new(d[0], d[1], d[2], d[3])?;
        match self.dtype {
            DType::F32 => Tensor::from_vec(shape, self.to_f32_vec()?),
            DType::U8 => Tensor::from_vec(shape, self.bytes.clone()),
            DType::I32 => Tensor::from_vec(shape, self.to_i32_vec()?),
        }
    }
}

/// Channel order of the engine's input tensor relative to the RGB bytes of
/// a raw input file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChannelOrder {
    #[default]
    Rgb,
    Bgr,
}

/// How raw bytes become an input tensor: `x = byte − means[c]`, with `c` in
/// engine channel order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocess {
    pub means: [f32; 3],
    pub order: ChannelOrder,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            means: DEFAULT_MEANS,
            order: ChannelOrder::Rgb,
        }
    }
}

/// Named arrays plus metadata, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: IndexMap<String, WeightEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces an entry. Replacing keeps the original position.
    pub fn insert(&mut self, name: impl Into<String>, entry: WeightEntry) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Argument(format!("entry name of {} bytes too long", name.len())));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, dims: &[usize], values: &[f32]) -> Result<()> {
        let dims = dims.iter().map(|&d| d as u32).collect();
        self.insert(name, WeightEntry::from_f32(dims, values)?)
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<WeightEntry> {
        self.entries.shift_remove(name)
    }

    pub fn rename(&mut self, from: &str, to: &str) -> bool {
        match self.entries.get_index_of(from) {
            Some(i) => {
                let (_, entry) = self.entries.shift_remove_index(i).unwrap();
                self.entries.shift_insert(i, to.to_string(), entry);
                true
            }
            None => false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn string(&self, key: &str) -> Option<String> {
        self.get(key)
            .filter(|e| e.dtype == DType::U8)
            .and_then(|e| String::from_utf8(e.bytes.clone()).ok())
    }

    fn set_string(&mut self, key: &str, value: &str) -> Result<()> {
        let bytes = value.as_bytes().to_vec();
        self.insert(key, WeightEntry::from_u8(vec![bytes.len() as u32], bytes, None)?)
    }

    pub fn arch(&self) -> Option<String> {
        self.string(META_ARCH)
    }

    pub fn set_arch(&mut self, arch: &str) -> Result<()> {
        self.set_string(META_ARCH, arch)
    }

    pub fn source(&self) -> Option<String> {
        self.string(META_SOURCE)
    }

    pub fn set_source(&mut self, source: &str) -> Result<()> {
        self.set_string(META_SOURCE, source)
    }

    /// Input preprocessing recorded by the exporter, or the defaults.
    pub fn preprocess(&self) -> Preprocess {
        let mut p = Preprocess::default();
        if let Some(m) = self.get(META_MEANS).and_then(|e| e.to_f32_vec().ok()) {
            if let Ok(means) = <[f32; 3]>::try_from(m.as_slice()) {
                p.means = means;
            }
        }
        if self.string(META_ORDER).as_deref() == Some("BGR") {
            p.order = ChannelOrder::Bgr;
        }
        p
    }

    pub fn set_preprocess(&mut self, p: Preprocess) -> Result<()> {
        self.insert(META_MEANS, WeightEntry::from_f32(vec![3], &p.means)?)?;
        let order = match p.order {
            ChannelOrder::Rgb => "RGB",
            ChannelOrder::Bgr => "BGR",
        };
        self.set_string(META_ORDER, order)
    }

    /// Calibrated quantization parameters for the activation produced by
    /// `layer` (`"input"` for the network input).
    pub fn activation_params(&self, layer: &str) -> Option<QuantParams> {
        self.get(&format!("{META_ACT}{layer}")).and_then(|e| e.quant)
    }

    /// Observed `[min, max]` of an activation during calibration.
    pub fn activation_range(&self, layer: &str) -> Option<(f32, f32)> {
        let v = self.get(&format!("{META_ACT}{layer}"))?.to_f32_vec().ok()?;
        (v.len() == 2).then(|| (v[0], v[1]))
    }

    pub fn set_activation(&mut self, layer: &str, lo: f32, hi: f32, params: QuantParams) -> Result<()> {
        let bytes = [lo, hi].iter().flat_map(|v| v.to_le_bytes()).collect();
        let entry = WeightEntry::new(DType::F32, vec![2], Some(params), bytes)?;
        self.insert(format!("{META_ACT}{layer}"), entry)
    }

    pub fn has_calibration(&self) -> bool {
        self.entries.keys().any(|k| k.starts_with(META_ACT))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.entries.values().map(|e| e.bytes.len() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_code(e.dtype));
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match e.quant {
                Some(q) => {
                    out.push(1);
                    out.extend_from_slice(&q.scale.to_le_bytes());
                    out.extend_from_slice(&q.zero_point.to_le_bytes());
                }
                None => out.push(0),
            }
            out.extend_from_slice(&(e.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the TIWF header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let mut r = Reader { bytes, pos: HEADER_LEN };
        let mut store = WeightStore::new();
        for index in 0..count {
            let (name, entry) = read_entry(&mut r, index)?;
            if store.entries.contains_key(&name) {
                return Err(corrupt(&name, "duplicate entry name"));
            }
            store.entries.insert(name, entry);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {count} entries",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }
}

fn corrupt(entry: &str, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        entry: entry.to_string(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(entry, format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, entry: &str) -> Result<u8> {
        Ok(self.take(1, entry)?[0])
    }

    fn array<const N: usize>(&mut self, entry: &str) -> Result<[u8; N]> {
        Ok(self.take(N, entry)?.try_into().unwrap())
    }
}

fn read_entry(r: &mut Reader<'_>, index: u32) -> Result<(String, WeightEntry)> {
    let placeholder = format!("#{index}");
    let name_len = u16::from_le_bytes(r.array(&placeholder)?) as usize;
    let name = std::str::from_utf8(r.take(name_len, &placeholder)?)
        .map_err(|_| corrupt(&placeholder, "entry name is not UTF-8"))?
        .to_string();
    let dtype_byte = r.u8(&name)?;
    let dtype =
        dtype_from_code(dtype_byte).ok_or_else(|| corrupt(&name, format!("unknown dtype code {dtype_byte}")))?;
    let rank = r.u8(&name)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(r.array(&name)?));
    }
    let quant = match r.u8(&name)? {
        0 => None,
        1 => {
            let scale = f32::from_le_bytes(r.array(&name)?);
            let zp = i32::from_le_bytes(r.array(&name)?);
            Some(QuantParams::new(scale, zp).map_err(|e| corrupt(&name, e.to_string()))?)
        }
        flag => return Err(corrupt(&name, format!("invalid quant flag {flag}"))),
    };
    let byte_len = u64::from_le_bytes(r.array(&name)?);
    let expected = element_count(&dims).and_then(|n| n.checked_mul(dtype.size_of()));
    if expected.map(|e| e as u64) != Some(byte_len) {
        return Err(corrupt(
            &name,
            format!("payload of {byte_len} bytes does not match dims {dims:?} of {dtype:?}"),
        ));
    }
    let payload = r.take(byte_len as usize, &name)?.to_vec();
    Ok((
        name,
        WeightEntry {
            dtype,
            dims,
            quant,
            bytes: payload,
        },
    ))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::from_bytes(&fs::read(path)?)
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

/// Decodes an input file body of either kind into a `(1, 3, size, size)`
/// tensor.
pub fn decode_input(bytes: &[u8], pre: &Preprocess, size: usize) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Format("input file shorter than its magic".into()));
    }
    let (magic, payload) = bytes.split_at(8);
    let shape = Shape::new(1, 3, size, size)?;
    let plane = size * size;
    if magic == RAW_MAGIC {
        if payload.len() != 3 * plane {
            return Err(Error::Format(format!(
                "raw input holds {} bytes, expected {}",
                payload.len(),
                3 * plane
            )));
        }
        let mut out = vec![0f32; 3 * plane];
        for (c, dst) in out.chunks_mut(plane).enumerate() {
            let src_channel = match pre.order {
                ChannelOrder::Rgb => c,
                ChannelOrder::Bgr => 2 - c,
            };
            let mean = pre.means[c];
            for (px, d) in dst.iter_mut().enumerate() {
                *d = f32::from(payload[px * 3 + src_channel]) - mean;
            }
        }
        Tensor::from_vec(shape, out)
    } else if magic == F32_MAGIC {
        if payload.len() != 3 * plane * 4 {
            return Err(Error::Format(format!(
                "f32 input holds {} bytes, expected {}",
                payload.len(),
                3 * plane * 4
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, values)
    } else {
        Err(Error::Format(format!("unknown input magic {magic:?}")))
    }
}

/// Reads a 227×227 input file.
pub fn load_input(path: impl AsRef<Path>, pre: &Preprocess) -> Result<Tensor> {
    decode_input(&fs::read(path)?, pre, INPUT_SIZE)
}

/// `"TIRAW001"` file body from interleaved RGB bytes.
pub fn encode_raw_input(rgb: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + rgb.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(rgb);
    out
}

/// `"TIF32001"` file body from a planar tensor.
pub fn encode_f32_input(t: &Tensor) -> Result<Vec<u8>> {
    let data = t.as_f32()?;
    let mut out = Vec::with_capacity(8 + data.len() * 4);
    out.extend_from_slice(F32_MAGIC);
    out.extend(data.iter().flat_map(|v| v.to_le_bytes()));
    Ok(out)
}
