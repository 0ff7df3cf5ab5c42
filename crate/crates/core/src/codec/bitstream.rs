//! The `.rudd` dataset container.
//!
//! Layout (little-endian):
//!
//! ```text
//! header   "RUDD" u16 version
//!          u32 K  u32 N  u16 H  u16 W  u8 L  u16 C  u32 slice_size
//!          u8 decoder_id  u16 D1  u16 D2  u16 entropy_width  u8 entropy_depth
//!          f64 Q_e  f64 Q_d
//! slices   for each slice of `slice_size` consecutive samples:
//!            u32 len, entropy-net weights payload
//!            u32 len, decoder weights payload
//!            per sample: u32 len, latent payload
//! labels   ceil(log2 K) bits per label, MSB first, zero-padded to a byte
//! trailer  u32 CRC32 of everything above
//! ```
//!
//! A weights payload is an f32 prior scale followed by the range-coded integers
//! under a zero-mean discretized Laplace of that scale. A latent payload is the
//! range-coded codes in scale-major raster order, each under the parameters
//! predicted by the slice's quantized entropy network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::LaplaceCodingModel;
use super::range_coder::{RangeDecoder, RangeEncoder};
use super::rates::hard_label_bits;
use crate::decoder::{DecoderConfig, DecoderWeights, CUSTOM_ID, PRESETS};
use crate::entropy_model::{context_indices, predict_params, EntropyNetConfig, EntropyNetWeights, QuantizedWeights};
use crate::error::{invalid, Error, Result};
use crate::latents::{pyramid_dims, PyramidDims, QuantizedPyramid};

pub const MAGIC: &[u8; 4] = b"RUDD";
pub const VERSION: u16 = 1;
/// Fixed header size in bytes.
pub const HEADER_BYTES: usize = 49;
const LEN_BYTES: usize = 4;
const CRC_BYTES: usize = 4;

/// Everything stored in a bitstream: quantized latents, labels and network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContent {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub slice_size: usize,
    pub entropy: EntropyNetConfig,
    pub decoder: DecoderConfig,
    pub step_e: f64,
    pub step_d: f64,
    pub latents: Vec<QuantizedPyramid>,
    pub labels: Vec<u32>,
    /// Quantized entropy-net weights (integer multiples of `step_e`), one vector per slice.
    pub entropy_weights: Vec<Vec<i32>>,
    /// Quantized decoder weights (integer multiples of `step_d`), one vector per slice.
    pub decoder_weights: Vec<Vec<i32>>,
}

impl DatasetContent {
    pub fn scales(&self) -> usize {
        self.decoder.latent_channels
    }

    pub fn num_slices(&self) -> usize {
        self.latents.len().div_ceil(self.slice_size.max(1))
    }

    /// Sample index range of slice `s`.
    pub fn slice_range(&self, s: usize) -> std::ops::Range<usize> {
        let lo = s * self.slice_size;
        lo..(lo + self.slice_size).min(self.latents.len())
    }

    pub fn dims(&self) -> Result<PyramidDims> {
        pyramid_dims(self.height, self.width, self.scales())
    }

    pub fn entropy_net(&self, s: usize) -> Result<EntropyNetWeights<f64>> {
        let q = QuantizedWeights { step: self.step_e, ints: self.entropy_weights[s].clone() };
        EntropyNetWeights::from_flat(self.entropy, &q.values())
    }

    pub fn decoder_net(&self, s: usize) -> Result<DecoderWeights<f64>> {
        let q = QuantizedWeights { step: self.step_d, ints: self.decoder_weights[s].clone() };
        DecoderWeights::from_flat(self.decoder, &q.values())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        let n = self.latents.len();
        let fits = |v: usize, max: u64| (v as u64) <= max;
        if !fits(self.num_classes, u32::MAX as u64)
            || !fits(n, u32::MAX as u64)
            || !fits(self.height, u16::MAX as u64)
            || !fits(self.width, u16::MAX as u64)
            || !fits(self.scales(), u8::MAX as u64)
            || !fits(self.entropy.context, u16::MAX as u64)
            || !fits(self.entropy.width, u16::MAX as u64)
            || !fits(self.entropy.depth, u8::MAX as u64)
            || !fits(self.decoder.d1, u16::MAX as u64)
            || !fits(self.decoder.d2, u16::MAX as u64)
            || !fits(self.slice_size, u32::MAX as u64)
        {
            return Err(invalid("dataset field exceeds its on-disk width"));
        }
        if self.num_classes == 0 || n == 0 || self.slice_size == 0 {
            return Err(invalid("dataset needs classes, samples and a positive slice size"));
        }
        if self.labels.len() != n {
            return Err(invalid(format!("{} labels for {n} samples", self.labels.len())));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y as usize >= self.num_classes) {
            return Err(invalid(format!("label {y} outside {} classes", self.num_classes)));
        }
        if self.latents.iter().any(|q| q.dims != dims) {
            return Err(invalid("latent pyramid dimensions disagree with the header"));
        }
        let slices = self.num_slices();
        if self.entropy_weights.len() != slices || self.decoder_weights.len() != slices {
            return Err(invalid(format!("expected weights for {slices} slices")));
        }
        if self.entropy_weights.iter().any(|w| w.len() != self.entropy.param_count())
            || self.decoder_weights.iter().any(|w| w.len() != self.decoder.param_count())
        {
            return Err(invalid("weight vector length disagrees with the network config"));
        }
        if !(self.step_e > 0.0 && self.step_e.is_finite() && self.step_d > 0.0 && self.step_d.is_finite()) {
            return Err(invalid("quantization steps must be positive and finite"));
        }
        Ok(())
    }
}

/// Split of a stream's bits by what they pay for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    /// Latent codes.
    pub explicit_bits: u64,
    /// Entropy-net and decoder weights.
    pub implicit_bits: u64,
    pub implicit_entropy_bits: u64,
    pub implicit_decoder_bits: u64,
    pub label_bits: u64,
    /// Header, length prefixes and CRC.
    pub header_bits: u64,
    pub total_bits: u64,
    pub num_classes: usize,
}

impl BitAllocation {
    pub fn bpc(&self) -> f64 {
        self.total_bits as f64 / self.num_classes.max(1) as f64
    }

    pub fn explicit_fraction(&self) -> f64 {
        self.explicit_bits as f64 / self.total_bits.max(1) as f64
    }

    pub fn implicit_fraction(&self) -> f64 {
        self.implicit_bits as f64 / self.total_bits.max(1) as f64
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_classes": self.num_classes,
            "total_bits": self.total_bits,
            "bpc": self.bpc(),
            "explicit_bits": self.explicit_bits,
            "implicit_bits": self.implicit_bits,
            "implicit": {
                "entropy_net_bits": self.implicit_entropy_bits,
                "decoder_bits": self.implicit_decoder_bits,
            },
            "label_bits": self.label_bits,
            "header_bits": self.header_bits,
            "explicit_fraction": self.explicit_fraction(),
            "implicit_fraction": self.implicit_fraction(),
        })
    }
}

fn encode_weights(ints: &[i32], step: f64) -> Result<Vec<u8>> {
    let q = QuantizedWeights { step, ints: ints.to_vec() };
    let scale = q.prior_scale();
    let model = LaplaceCodingModel::new(0.0, scale as f64)?;
    let mut enc = RangeEncoder::new();
    for &k in ints {
        model.encode(&mut enc, k)?;
    }
    let mut out = scale.to_le_bytes().to_vec();
    out.extend(enc.finish());
    Ok(out)
}

fn decode_weights(payload: &[u8], count: usize) -> Result<Vec<i32>> {
    if payload.len() < 4 {
        return Err(Error::Truncated("weights payload"));
    }
    let scale = f32::from_le_bytes(payload[..4].try_into().unwrap());
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Format(format!("weights prior scale {scale}")));
    }
    let model = LaplaceCodingModel::new(0.0, scale as f64)?;
    let mut dec = RangeDecoder::new(&payload[4..])?;
    (0..count).map(|_| model.decode(&mut dec)).collect()
}

fn encode_latents(q: &QuantizedPyramid, net: &EntropyNetWeights<f64>) -> Result<Vec<u8>> {
    let c = net.config.context;
    let idx = context_indices(&q.dims, c);
    let mut ctx = vec![0.0; c];
    let mut enc = RangeEncoder::new();
    for (m, &z) in q.values.iter().enumerate() {
        for (slot, &i) in ctx.iter_mut().zip(&idx[m * c..(m + 1) * c]) {
            *slot = if i < 0 { 0.0 } else { q.values[i as usize] as f64 };
        }
        let p = predict_params(&ctx, net)?;
        LaplaceCodingModel::new(p.mu, p.scale)?.encode(&mut enc, z)?;
    }
    Ok(enc.finish())
}

fn decode_latents(payload: &[u8], dims: &PyramidDims, net: &EntropyNetWeights<f64>) -> Result<QuantizedPyramid> {
    let c = net.config.context;
    let idx = context_indices(dims, c);
    let mut values = Vec::with_capacity(dims.total());
    let mut ctx = vec![0.0; c];
    let mut dec = RangeDecoder::new(payload)?;
    for m in 0..dims.total() {
        for (slot, &i) in ctx.iter_mut().zip(&idx[m * c..(m + 1) * c]) {
            *slot = if i < 0 { 0.0 } else { values[i as usize] as f64 };
        }
        let p = predict_params(&ctx, net)?;
        values.push(LaplaceCodingModel::new(p.mu, p.scale)?.decode(&mut dec)?);
    }
    QuantizedPyramid::new(dims.clone(), values)
}

struct SliceBytes {
    entropy: Vec<u8>,
    decoder: Vec<u8>,
    latents: Vec<Vec<u8>>,
}

fn put_payload(out: &mut Vec<u8>, payload: &[u8]) -> Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| invalid("payload exceeds 4 GiB"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(payload);
    Ok(())
}

fn write_header(out: &mut Vec<u8>, d: &DatasetContent) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(d.latents.len() as u32).to_le_bytes());
    out.extend_from_slice(&(d.height as u16).to_le_bytes());
    out.extend_from_slice(&(d.width as u16).to_le_bytes());
    out.push(d.scales() as u8);
    out.extend_from_slice(&(d.entropy.context as u16).to_le_bytes());
    out.extend_from_slice(&(d.slice_size as u32).to_le_bytes());
    out.push(d.decoder.id());
    out.extend_from_slice(&(d.decoder.d1 as u16).to_le_bytes());
    out.extend_from_slice(&(d.decoder.d2 as u16).to_le_bytes());
    out.extend_from_slice(&(d.entropy.width as u16).to_le_bytes());
    out.push(d.entropy.depth as u8);
    out.extend_from_slice(&d.step_e.to_le_bytes());
    out.extend_from_slice(&d.step_d.to_le_bytes());
}

fn pack_labels(labels: &[u32], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; (labels.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &y in labels {
        for b in (0..bits).rev() {
            if (y >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

fn unpack_labels(data: &[u8], n: usize, bits: u32) -> Vec<u32> {
    let mut pos = 0usize;
    (0..n)
        .map(|_| {
            let mut y = 0u32;
            for _ in 0..bits {
                y = (y << 1) | ((data[pos / 8] >> (7 - pos % 8)) & 1) as u32;
                pos += 1;
            }
            y
        })
        .collect()
}

/// Serializes a dataset; returns the bytes and their bit allocation.
pub fn encode_dataset(d: &DatasetContent) -> Result<(Vec<u8>, BitAllocation)> {
    d.validate()?;
    let slices: Vec<SliceBytes> = (0..d.num_slices())
        .into_par_iter()
        .map(|s| {
            let net = d.entropy_net(s)?;
            let latents = d.slice_range(s).map(|i| encode_latents(&d.latents[i], &net)).collect::<Result<_>>()?;
            Ok(SliceBytes {
                entropy: encode_weights(&d.entropy_weights[s], d.step_e)?,
                decoder: encode_weights(&d.decoder_weights[s], d.step_d)?,
                latents,
            })
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    write_header(&mut out, d);
    let (mut explicit, mut ent, mut dec, mut prefixes) = (0u64, 0u64, 0u64, 0u64);
    for s in &slices {
        put_payload(&mut out, &s.entropy)?;
        put_payload(&mut out, &s.decoder)?;
        ent += 8 * s.entropy.len() as u64;
        dec += 8 * s.decoder.len() as u64;
        prefixes += 2;
        for l in &s.latents {
            put_payload(&mut out, l)?;
            explicit += 8 * l.len() as u64;
            prefixes += 1;
        }
    }
    let labels = pack_labels(&d.labels, hard_label_bits(d.num_classes));
    out.extend_from_slice(&labels);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());

    let total = 8 * out.len() as u64;
    let label_bits = 8 * labels.len() as u64;
    let header_bits = 8 * (HEADER_BYTES as u64 + LEN_BYTES as u64 * prefixes + CRC_BYTES as u64);
    let alloc = BitAllocation {
        explicit_bits: explicit,
        implicit_bits: ent + dec,
        implicit_entropy_bits: ent,
        implicit_decoder_bits: dec,
        label_bits,
        header_bits,
        total_bits: total,
        num_classes: d.num_classes,
    };
    debug_assert_eq!(explicit + ent + dec + label_bits + header_bits, total);
    Ok((out, alloc))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "header")?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, "header")?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, "header")?.try_into().unwrap()))
    }
    fn payload(&mut self, what: &'static str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
}

/// Parsed header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamHeader {
    pub num_classes: usize,
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub slice_size: usize,
    pub entropy: EntropyNetConfig,
    pub decoder: DecoderConfig,
    pub step_e: f64,
    pub step_d: f64,
}

fn check_crc(data: &[u8]) -> Result<&[u8]> {
    if data.len() < HEADER_BYTES + CRC_BYTES {
        return Err(Error::Truncated("stream"));
    }
    let (body, tail) = data.split_at(data.len() - CRC_BYTES);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    Ok(body)
}

fn read_header(r: &mut Reader<'_>) -> Result<StreamHeader> {
    if r.take(4, "header")? != MAGIC {
        return Err(Error::Format("not a RUDD stream (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported stream version {version}")));
    }
    let num_classes = r.u32("header")? as usize;
    let num_samples = r.u32("header")? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let scales = r.u8()? as usize;
    let context = r.u16()? as usize;
    let slice_size = r.u32("header")? as usize;
    let id = r.u8()?;
    let d1 = r.u16()? as usize;
    let d2 = r.u16()? as usize;
    let ew = r.u16()? as usize;
    let ed = r.u8()? as usize;
    let step_e = r.f64()?;
    let step_d = r.f64()?;
    let decoder = DecoderConfig::new(scales, d1, d2).map_err(|e| Error::Format(e.to_string()))?;
    if id != CUSTOM_ID && PRESETS.get(id as usize).map(|p| (p.1, p.2)) != Some((d1, d2)) {
        return Err(Error::Format(format!("decoder id {id} disagrees with widths {d1}/{d2}")));
    }
    let entropy = EntropyNetConfig::new(context, ew, ed).map_err(|e| Error::Format(e.to_string()))?;
    if num_classes == 0 || num_samples == 0 || slice_size == 0 {
        return Err(Error::Format("empty dataset header".into()));
    }
    Ok(StreamHeader { num_classes, num_samples, height, width, slice_size, entropy, decoder, step_e, step_d })
}

/// Reads only the header (after checking the CRC).
pub fn read_stream_header(data: &[u8]) -> Result<StreamHeader> {
    let body = check_crc(data)?;
    read_header(&mut Reader { data: body, pos: 0 })
}

/// Parses and fully decodes a stream; also returns its bit allocation.
pub fn decode_dataset(data: &[u8]) -> Result<(DatasetContent, BitAllocation)> {
    let body = check_crc(data)?;
    let mut r = Reader { data: body, pos: 0 };
    let h = read_header(&mut r)?;
    let dims = pyramid_dims(h.height, h.width, h.decoder.latent_channels).map_err(|e| Error::Format(e.to_string()))?;

    let num_slices = h.num_samples.div_ceil(h.slice_size);
    let mut raw = Vec::with_capacity(num_slices);
    let (mut explicit, mut ent, mut dec, mut prefixes) = (0u64, 0u64, 0u64, 0u64);
    for s in 0..num_slices {
        let e = r.payload("entropy-net payload")?;
        let d = r.payload("decoder payload")?;
        ent += 8 * e.len() as u64;
        dec += 8 * d.len() as u64;
        prefixes += 2;
        let count = (h.num_samples - s * h.slice_size).min(h.slice_size);
        let lat = (0..count)
            .map(|_| {
                let p = r.payload("latent payload")?;
                explicit += 8 * p.len() as u64;
                prefixes += 1;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        raw.push((e, d, lat));
    }
    let bits = hard_label_bits(h.num_classes);
    let label_bytes = (h.num_samples * bits as usize).div_ceil(8);
    let labels = unpack_labels(r.take(label_bytes, "label section")?, h.num_samples, bits);
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }

    let decoded: Vec<(Vec<i32>, Vec<i32>, Vec<QuantizedPyramid>)> = raw
        .into_par_iter()
        .map(|(e, d, lat)| {
            let ew = decode_weights(e, h.entropy.param_count())?;
            let dw = decode_weights(d, h.decoder.param_count())?;
            let q = QuantizedWeights { step: h.step_e, ints: ew.clone() };
            let net = EntropyNetWeights::from_flat(h.entropy, &q.values())?;
            let pyramids = lat.iter().map(|p| decode_latents(p, &dims, &net)).collect::<Result<_>>()?;
            Ok((ew, dw, pyramids))
        })
        .collect::<Result<_>>()?;

    let mut content = DatasetContent {
        num_classes: h.num_classes,
        height: h.height,
        width: h.width,
        slice_size: h.slice_size,
        entropy: h.entropy,
        decoder: h.decoder,
        step_e: h.step_e,
        step_d: h.step_d,
        latents: Vec::with_capacity(h.num_samples),
        labels,
        entropy_weights: Vec::with_capacity(num_slices),
        decoder_weights: Vec::with_capacity(num_slices),
    };
    for (ew, dw, lat) in decoded {
        content.entropy_weights.push(ew);
        content.decoder_weights.push(dw);
        content.latents.extend(lat);
    }
    content.validate().map_err(|e| Error::Format(e.to_string()))?;

    let total = 8 * data.len() as u64;
    let alloc = BitAllocation {
        explicit_bits: explicit,
        implicit_bits: ent + dec,
        implicit_entropy_bits: ent,
        implicit_decoder_bits: dec,
        label_bits: 8 * label_bytes as u64,
        header_bits: 8 * (HEADER_BYTES as u64 + LEN_BYTES as u64 * prefixes + CRC_BYTES as u64),
        total_bits: total,
        num_classes: h.num_classes,
    };
    Ok((content, alloc))
}
