//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "VNIRCKPT"
//! version  u32
//! count    u32      number of sections
//! table    count x { name_len u16, name, kind u8, bits u8, offset u64, length u64, crc32 u32 }
//! crc32    u32      over every preceding byte
//! payload  sections at their absolute offsets
//! ```
//!
//! All integers and floats are little-endian. See `docs/checkpoint-format.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compress::{dequantize, QuantHead, QuantTensor, QuantizedStore};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::SessionSource;
use crate::error::{Error, Result};
use crate::model::{Head, Layout, Model, ParameterStore};
use crate::subnet::{pack_masks, unpack_masks, SessionMaskSet};

pub const MAGIC: &[u8; 8] = b"VNIRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SectionKind {
    Toml = 0,
    /// IEEE-754 values, `bits` 32 or 64.
    Float = 1,
    /// `min: f64`, `scale: f64`, then codes of `bits` 4, 8 or 16.
    Quantized = 2,
    /// Bit-packed session masks.
    Mask = 3,
}

impl SectionKind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => SectionKind::Toml,
            1 => SectionKind::Float,
            2 => SectionKind::Quantized,
            3 => SectionKind::Mask,
            _ => return Err(Error::Checkpoint(format!("unknown section kind {v}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionEntry {
    pub name: String,
    pub kind: SectionKind,
    pub bits: u8,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

/// What the checkpoint remembers about one finished session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SessionSource>,
    pub frames: usize,
    /// Transfer-matrix row measured right after this session finished:
    /// PSNR of sessions `0..=s`.
    #[serde(default)]
    pub psnr: Vec<f64>,
    #[serde(default)]
    pub ms_ssim: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoredParams {
    Dense(ParameterStore),
    Quantized(QuantizedStore),
}

impl StoredParams {
    pub fn to_dense(&self) -> ParameterStore {
        match self {
            StoredParams::Dense(p) => p.clone(),
            StoredParams::Quantized(q) => dequantize(q),
        }
    }

    pub fn quant_bits(&self) -> Option<u32> {
        match self {
            StoredParams::Dense(_) => None,
            StoredParams::Quantized(q) => Some(q.bits),
        }
    }
}

/// Everything needed to decode every finished session and to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: StoredParams,
    pub masks: SessionMaskSet,
    pub sessions: Vec<SessionRecord>,
    /// Final scores of the last session, if kept.
    pub scores: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant_bits: Option<u32>,
    has_scores: bool,
    #[serde(default, rename = "session")]
    sessions: Vec<SessionRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: &TrainConfig, sessions: Vec<SessionRecord>) -> Self {
        Self {
            model: model.config().clone(),
            train: train.clone(),
            params: StoredParams::Dense(model.params.clone()),
            masks: model.masks.clone(),
            sessions,
            scores: None,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_parts(self.model.clone(), self.params.to_dense(), Some(self.masks.clone()))
    }

    pub fn session_count(&self) -> usize {
        self.masks.session_count()
    }

    pub fn frame_counts(&self) -> Vec<usize> {
        self.sessions.iter().map(|s| s.frames).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write then rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = Layout::new(&self.model);
        self.check(&layout)?;
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            quant_bits: self.params.quant_bits(),
            has_scores: self.scores.is_some(),
            sessions: self.sessions.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let mut sections: Vec<(String, SectionKind, u8, Vec<u8>)> = vec![("header".into(), SectionKind::Toml, 0, text.into_bytes())];
        match &self.params {
            StoredParams::Dense(p) => {
                for (spec, t) in layout.specs.iter().zip(&p.trunk) {
                    let (bits, data) = encode_floats(t);
                    sections.push((format!("trunk.{}", spec.name), SectionKind::Float, bits, data));
                }
                for (s, h) in p.heads.iter().enumerate() {
                    for (part, v) in [("weight", &h.weight), ("bias", &h.bias)] {
                        let (bits, data) = encode_floats(v);
                        sections.push((format!("head.{s}.{part}"), SectionKind::Float, bits, data));
                    }
                }
            }
            StoredParams::Quantized(q) => {
                for (spec, t) in layout.specs.iter().zip(&q.trunk) {
                    sections.push(encode_quant(format!("trunk.{}", spec.name), t));
                }
                for (s, h) in q.heads.iter().enumerate() {
                    sections.push(encode_quant(format!("head.{s}.weight"), &h.weight));
                    sections.push(encode_quant(format!("head.{s}.bias"), &h.bias));
                }
            }
        }
        for s in 0..self.masks.session_count() {
            sections.push((format!("masks.{s}"), SectionKind::Mask, 1, pack_masks(self.masks.session(s)?)));
        }
        if let Some(scores) = &self.scores {
            for (spec, t) in layout.specs.iter().zip(scores) {
                sections.push((format!("scores.{}", spec.name), SectionKind::Float, 64, f64_bytes(t)));
            }
        }

        let table_len: usize = sections.iter().map(|(n, ..)| 2 + n.len() + 1 + 1 + 8 + 8 + 4).sum();
        let mut offset = (8 + 4 + 4 + table_len + 4) as u64;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, kind, bits, data) in &sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*kind as u8);
            out.push(*bits);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(data).to_le_bytes());
            offset += data.len() as u64;
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        for (.., data) in &sections {
            out.extend_from_slice(data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (table, sections) = read_table(bytes)?;
        let get = |name: &str| -> Result<(&SectionEntry, &[u8])> {
            table
                .iter()
                .zip(&sections)
                .find(|(e, _)| e.name == name)
                .map(|(e, d)| (e, *d))
                .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
        };

        let (_, raw) = get("header")?;
        let text = std::str::from_utf8(raw).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.model.validate()?;
        let layout = Layout::new(&header.model);
        let sizes = layout.sizes();
        let head_len = header.model.head_channels * header.model.trunk_channels();
        let head_bias = header.model.head_channels;
        let n_sessions = header.sessions.len();

        let params = match header.quant_bits {
            None => {
                let trunk = layout
                    .specs
                    .iter()
                    .map(|spec| {
                        let (e, d) = get(&format!("trunk.{}", spec.name))?;
                        decode_floats(e, d, spec.len())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let heads = (0..n_sessions)
                    .map(|s| {
                        let (e, d) = get(&format!("head.{s}.weight"))?;
                        let weight = decode_floats(e, d, head_len)?;
                        let (e, d) = get(&format!("head.{s}.bias"))?;
                        let bias = decode_floats(e, d, head_bias)?;
                        Ok(Head { weight, bias })
                    })
                    .collect::<Result<Vec<_>>>()?;
                StoredParams::Dense(ParameterStore { trunk, heads })
            }
            Some(bits) => {
                let trunk = layout
                    .specs
                    .iter()
                    .map(|spec| {
                        let (e, d) = get(&format!("trunk.{}", spec.name))?;
                        decode_quant(e, d, spec.len())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let heads = (0..n_sessions)
                    .map(|s| {
                        let (e, d) = get(&format!("head.{s}.weight"))?;
                        let weight = decode_quant(e, d, head_len)?;
                        let (e, d) = get(&format!("head.{s}.bias"))?;
                        let bias = decode_quant(e, d, head_bias)?;
                        Ok(QuantHead { weight, bias })
                    })
                    .collect::<Result<Vec<_>>>()?;
                StoredParams::Quantized(QuantizedStore { bits, trunk, heads })
            }
        };

        let mut masks = SessionMaskSet::new(sizes.clone());
        for s in 0..n_sessions {
            let (e, d) = get(&format!("masks.{s}"))?;
            if e.kind != SectionKind::Mask {
                return Err(Error::Checkpoint(format!("section `{}` is not a mask section", e.name)));
            }
            let session = unpack_masks(d, &sizes).map_err(|err| Error::Checkpoint(format!("section `{}`: {err}", e.name)))?;
            masks.push_session(session)?;
        }
        let scores = if header.has_scores {
            Some(
                layout
                    .specs
                    .iter()
                    .map(|spec| {
                        let (e, d) = get(&format!("scores.{}", spec.name))?;
                        decode_floats(e, d, spec.len())
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let ckpt = Checkpoint { model: header.model, train: header.train, params, masks, sessions: header.sessions, scores };
        ckpt.check(&layout)?;
        Ok(ckpt)
    }

    fn check(&self, layout: &Layout) -> Result<()> {
        let n = self.masks.session_count();
        if self.sessions.len() != n {
            return Err(Error::Checkpoint(format!("{} session records for {n} mask sets", self.sessions.len())));
        }
        let (trunk_lens, heads): (Vec<usize>, usize) = match &self.params {
            StoredParams::Dense(p) => (p.trunk.iter().map(Vec::len).collect(), p.heads.len()),
            StoredParams::Quantized(q) => (q.trunk.iter().map(QuantTensor::len).collect(), q.heads.len()),
        };
        if trunk_lens != layout.sizes() {
            return Err(Error::Checkpoint("trunk tensors do not match the model config".into()));
        }
        if heads != n {
            return Err(Error::Checkpoint(format!("{heads} heads for {n} sessions")));
        }
        if let Some(s) = &self.scores {
            if s.iter().map(Vec::len).collect::<Vec<_>>() != layout.sizes() {
                return Err(Error::Checkpoint("score tensors do not match the model config".into()));
            }
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated file: {what}")));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn read_table(bytes: &[u8]) -> Result<(Vec<SectionEntry>, Vec<&[u8]>)> {
    let truncated = |what: &str| Error::Checkpoint(format!("truncated file: {what}"));
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut cur = Cursor { bytes, pos: 8 };
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let count = u32::from_le_bytes(cur.take(4, "section count")?.try_into().unwrap()) as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2, "section table")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len, "section table")?.to_vec())
            .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?;
        let kind = SectionKind::from_u8(cur.take(1, "section table")?[0])?;
        let bits = cur.take(1, "section table")?[0];
        let offset = u64::from_le_bytes(cur.take(8, "section table")?.try_into().unwrap());
        let length = u64::from_le_bytes(cur.take(8, "section table")?.try_into().unwrap());
        let crc32 = u32::from_le_bytes(cur.take(4, "section table")?.try_into().unwrap());
        table.push(SectionEntry { name, kind, bits, offset, length, crc32 });
    }
    let table_end = cur.pos;
    let stored = u32::from_le_bytes(cur.take(4, "table checksum")?.try_into().unwrap());
    if crc32fast::hash(&bytes[..table_end]) != stored {
        return Err(Error::Checksum("section table".into()));
    }
    let mut data = Vec::with_capacity(table.len());
    for e in &table {
        let end = e.offset.checked_add(e.length).filter(|&end| end <= bytes.len() as u64);
        let Some(end) = end else {
            return Err(truncated(&format!("section `{}` extends past the end", e.name)));
        };
        let d = &bytes[e.offset as usize..end as usize];
        if crc32fast::hash(d) != e.crc32 {
            return Err(Error::Checksum(e.name.clone()));
        }
        data.push(d);
    }
    Ok((table, data))
}

/// Lists a checkpoint's sections without decoding them.
pub fn section_table(bytes: &[u8]) -> Result<Vec<SectionEntry>> {
    Ok(read_table(bytes)?.0)
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// `f32` when every value survives the narrowing exactly, else `f64`.
fn encode_floats(v: &[f64]) -> (u8, Vec<u8>) {
    if v.iter().all(|&x| (x as f32 as f64).to_bits() == x.to_bits()) {
        (32, v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect())
    } else {
        (64, f64_bytes(v))
    }
}

fn decode_floats(e: &SectionEntry, d: &[u8], len: usize) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::Checkpoint(format!("section `{}`: {msg}", e.name));
    if e.kind != SectionKind::Float {
        return Err(bad("expected float data".into()));
    }
    let width = match e.bits {
        32 => 4,
        64 => 8,
        b => return Err(bad(format!("unsupported float width {b}"))),
    };
    if d.len() != len * width {
        return Err(bad(format!("{} bytes for {len} values", d.len())));
    }
    Ok(if width == 4 {
        d.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    } else {
        d.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    })
}

fn encode_quant(name: String, t: &QuantTensor) -> (String, SectionKind, u8, Vec<u8>) {
    match t {
        QuantTensor::Raw(v) => {
            let (bits, data) = encode_floats(v);
            (name, SectionKind::Float, bits, data)
        }
        QuantTensor::Affine { bits, min, scale, codes } => {
            let mut data = Vec::new();
            data.extend_from_slice(&min.to_le_bytes());
            data.extend_from_slice(&scale.to_le_bytes());
            match bits {
                4 => data.extend(codes.chunks(2).map(|p| (p[0] as u8) | ((*p.get(1).unwrap_or(&0) as u8) << 4))),
                8 => data.extend(codes.iter().map(|&c| c as u8)),
                _ => data.extend(codes.iter().flat_map(|&c| (c as u16).to_le_bytes())),
            }
            (name, SectionKind::Quantized, *bits as u8, data)
        }
    }
}

fn decode_quant(e: &SectionEntry, d: &[u8], len: usize) -> Result<QuantTensor> {
    if e.kind == SectionKind::Float {
        return Ok(QuantTensor::Raw(decode_floats(e, d, len)?));
    }
    let bad = |msg: String| Error::Checkpoint(format!("section `{}`: {msg}", e.name));
    if e.kind != SectionKind::Quantized {
        return Err(bad("expected quantized data".into()));
    }
    let bits = e.bits as u32;
    let code_bytes = match bits {
        4 => len.div_ceil(2),
        8 => len,
        16 => 2 * len,
        b => return Err(bad(format!("unsupported code width {b}"))),
    };
    if d.len() != 16 + code_bytes {
        return Err(bad(format!("{} bytes for {len} codes", d.len())));
    }
    let min = f64::from_le_bytes(d[..8].try_into().unwrap());
    let scale = f64::from_le_bytes(d[8..16].try_into().unwrap());
    let body = &d[16..];
    let codes: Vec<u32> = match bits {
        4 => (0..len).map(|i| ((body[i / 2] >> (4 * (i % 2))) & 0xF) as u32).collect(),
        8 => body.iter().map(|&b| b as u32).collect(),
        _ => body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect(),
    };
    if bits == 4 && len % 2 == 1 && body[len / 2] >> 4 != 0 {
        return Err(bad("non-zero padding nibble".into()));
    }
    Ok(QuantTensor::Affine { bits, min, scale, codes })
}
