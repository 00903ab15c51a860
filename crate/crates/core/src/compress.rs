//! Post-training uniform quantization and model size accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Head, Model, ParameterStore};
use crate::subnet::SessionMaskSet;

pub const SUPPORTED_BITS: [u32; 4] = [4, 8, 16, 32];

pub fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit width must be one of {SUPPORTED_BITS:?}, got {bits}")))
    }
}

/// One tensor after quantization. 32 bits keeps the values untouched.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantTensor {
    Raw(Vec<f64>),
    /// Value `i` decodes to `min + scale * codes[i]`.
    Affine { bits: u32, min: f64, scale: f64, codes: Vec<u32> },
}

impl QuantTensor {
    pub fn quantize(values: &[f64], bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cannot quantize {v}")));
        }
        if bits == 32 {
            return Ok(QuantTensor::Raw(values.to_vec()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let levels = ((1u64 << bits) - 1) as f64;
        if values.is_empty() || max == min {
            let min = if values.is_empty() { 0.0 } else { min };
            return Ok(QuantTensor::Affine { bits, min, scale: 0.0, codes: vec![0; values.len()] });
        }
        let scale = (max - min) / levels;
        let codes = values.iter().map(|&v| ((v - min) / scale).round().clamp(0.0, levels) as u32).collect();
        Ok(QuantTensor::Affine { bits, min, scale, codes })
    }

    pub fn dequantize(&self) -> Vec<f64> {
        match self {
            QuantTensor::Raw(v) => v.clone(),
            QuantTensor::Affine { min, scale, codes, .. } => codes.iter().map(|&c| min + scale * c as f64).collect(),
        }
    }

    pub fn bits(&self) -> u32 {
        match self {
            QuantTensor::Raw(_) => 32,
            QuantTensor::Affine { bits, .. } => *bits,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            QuantTensor::Raw(v) => v.len(),
            QuantTensor::Affine { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Half a quantization step: the worst-case reconstruction error.
    pub fn error_bound(&self) -> f64 {
        match self {
            QuantTensor::Raw(_) => 0.0,
            QuantTensor::Affine { scale, .. } => scale / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantHead {
    pub weight: QuantTensor,
    pub bias: QuantTensor,
}

/// A parameter store with every trunk and head tensor quantized
/// independently. Masks are not touched.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedStore {
    pub bits: u32,
    pub trunk: Vec<QuantTensor>,
    pub heads: Vec<QuantHead>,
}

pub fn quantize(params: &ParameterStore, bits: u32) -> Result<QuantizedStore> {
    check_bits(bits)?;
    let trunk = params.trunk.iter().map(|t| QuantTensor::quantize(t, bits)).collect::<Result<_>>()?;
    let heads = params
        .heads
        .iter()
        .map(|h| Ok(QuantHead { weight: QuantTensor::quantize(&h.weight, bits)?, bias: QuantTensor::quantize(&h.bias, bits)? }))
        .collect::<Result<_>>()?;
    Ok(QuantizedStore { bits, trunk, heads })
}

pub fn dequantize(q: &QuantizedStore) -> ParameterStore {
    ParameterStore {
        trunk: q.trunk.iter().map(QuantTensor::dequantize).collect(),
        heads: q.heads.iter().map(|h| Head { weight: h.weight.dequantize(), bias: h.bias.dequantize() }).collect(),
    }
}

/// The model with its parameters replaced by their quantized reconstruction.
pub fn quantize_model(model: &Model, bits: u32) -> Result<Model> {
    let q = quantize(&model.params, bits)?;
    Model::from_parts(model.config().clone(), dequantize(&q), Some(model.masks.clone()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BppMode {
    /// One bit per mask entry.
    #[default]
    Exact,
    /// Mask bits rounded up to whole bytes per tensor, as stored on disk.
    Padded,
}

/// Bit totals behind a bits-per-pixel figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBreakdown {
    pub bits: u32,
    /// Weights first selected by each session; reuse is not charged again.
    pub owned_weights: Vec<usize>,
    pub weight_bits: u64,
    pub mask_bits: u64,
    pub head_bits: u64,
    pub pixels: u64,
}

impl SizeBreakdown {
    pub fn total_bits(&self) -> u64 {
        self.weight_bits + self.mask_bits + self.head_bits
    }

    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / self.pixels as f64
    }
}

/// Charges each session its newly owned weights, its masks and its head at
/// `bits` per value, over `pixels` decoded pixels.
pub fn size_breakdown(
    masks: &SessionMaskSet,
    head_params: &[usize],
    bits: u32,
    pixels: u64,
    mode: BppMode,
) -> Result<SizeBreakdown> {
    check_bits(bits)?;
    if pixels == 0 {
        return Err(Error::Empty("no pixels to charge the model against".into()));
    }
    let sessions = masks.session_count();
    let mut owned_weights = Vec::with_capacity(sessions);
    for s in 0..sessions {
        let before = masks.cumulative_before(s)?;
        let owned: usize = masks
            .session(s)?
            .iter()
            .zip(&before)
            .map(|(m, b)| m.bits().iter().zip(b.bits()).filter(|&(&x, &y)| x && !y).count())
            .sum();
        owned_weights.push(owned);
    }
    let per_session_mask: u64 = masks
        .sizes()
        .iter()
        .map(|&n| match mode {
            BppMode::Exact => n as u64,
            BppMode::Padded => n.div_ceil(8) as u64 * 8,
        })
        .sum();
    let weight_bits = owned_weights.iter().map(|&n| n as u64).sum::<u64>() * bits as u64;
    let head_bits = head_params.iter().map(|&n| n as u64).sum::<u64>() * bits as u64;
    Ok(SizeBreakdown {
        bits,
        owned_weights,
        weight_bits,
        mask_bits: per_session_mask * sessions as u64,
        head_bits,
        pixels,
    })
}

/// Size of a trained model relative to `frame_counts[s] * H * W` decoded pixels.
pub fn model_size(model: &Model, bits: u32, frame_counts: &[usize], mode: BppMode) -> Result<SizeBreakdown> {
    if frame_counts.len() != model.session_count() {
        return Err(Error::UnknownSession { session: frame_counts.len(), available: model.session_count() });
    }
    let [_, h, w] = model.output_shape();
    let pixels = frame_counts.iter().map(|&t| (t * h * w) as u64).sum();
    let heads: Vec<usize> = model.params.heads.iter().map(Head::param_count).collect();
    size_breakdown(&model.masks, &heads, bits, pixels, mode)
}

pub fn bpp(model: &Model, bits: u32, frame_counts: &[usize]) -> Result<f64> {
    Ok(model_size(model, bits, frame_counts, BppMode::Exact)?.bpp())
}
