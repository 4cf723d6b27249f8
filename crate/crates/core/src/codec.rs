//! Binary formats for model weights (`AEW1`) and latent codes (`AEL1`), and
//! compression-ratio accounting. All integers and floats are little-endian.
//!
//! ```text
//! AEW1: magic[4] version:u16 count:u32
//!       { name_len:u16 name[name_len] rank:u8 extent:u32 × rank value:f32 × Π extents } × count
//! AEL1: magic[4] version:u16 dtype:u8 c:u32 h:u32 w:u32
//!       [min:f32 scale:f32 when dtype = 1] payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{self, Half, LatentCode, ModelParams, IMAGE_CHANNELS, LATENT_CHANNELS};
use crate::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"AEW1";
pub const LATENT_MAGIC: &[u8; 4] = b"AEL1";
pub const FORMAT_VERSION: u16 = 1;

/// Header bytes of a float32 latent file.
pub const LATENT_HEADER_F32: usize = 4 + 2 + 1 + 12;
/// Header bytes of a quantized latent file (adds min and scale).
pub const LATENT_HEADER_U8: usize = LATENT_HEADER_F32 + 8;

const MAX_RANK: usize = 8;

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected \"{}\"",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u16("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported version {v}, expected {FORMAT_VERSION}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes after declared content", self.remaining()),
            ));
        }
        Ok(())
    }
}

fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes named tensors in the given order.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Config("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
        if t.shape().len() > MAX_RANK {
            return Err(Error::Config(format!("tensor `{name}` has rank {} > {MAX_RANK}", t.shape().len())));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Config(format!("extent {e} of `{name}` exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        push_f32s(&mut out, t.data());
    }
    Ok(out)
}

/// Parses an `AEW1` buffer. Every size is checked against the bytes actually
/// present before anything is allocated for it.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    r.version()?;
    let count_at = r.pos;
    let count = r.u32("tensor count")? as usize;
    // Smallest possible entry: empty name, rank 0, one value.
    if count > r.remaining() / (2 + 1 + 4) + 1 {
        return Err(Error::format(
            count_at,
            format!("tensor count {count} cannot fit in {} remaining bytes", r.remaining()),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| Error::format(name_at, format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank_at = r.pos;
        let rank = r.u8("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::format(rank_at, format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let at = r.pos;
            let e = r.u32("extent")? as usize;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::format(at, format!("extents of `{name}` overflow")))?;
            shape.push(e);
        }
        let data_at = r.pos;
        let byte_len = numel
            .checked_mul(4)
            .ok_or_else(|| Error::format(data_at, format!("extents of `{name}` overflow")))?;
        let data = f32s_from_le(r.take(byte_len, &format!("values of `{name}`"))?);
        out.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Ok(out)
}

fn canonical_rank(name: &str) -> u8 {
    match model::half_of(name) {
        Some(Half::Encoder) => 0,
        Some(Half::Decoder) => 1,
        None => 2,
    }
}

/// Encoder tensors first, then decoder, then anything else; stable within each group.
pub fn encode_weights(params: &ModelParams) -> Result<Vec<u8>> {
    let mut order: Vec<_> = params.iter().collect();
    order.sort_by_key(|(name, _)| canonical_rank(name));
    encode_tensors(order)
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelParams> {
    ModelParams::from_named(decode_tensors(bytes)?)
}

pub fn save_weights(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(params)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelParams> {
    decode_weights(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    Float32,
    /// Min-max affine quantization to one byte per element.
    Uint8,
}

impl LatentMode {
    pub fn dtype_tag(self) -> u8 {
        match self {
            LatentMode::Float32 => 0,
            LatentMode::Uint8 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LatentMode::Float32),
            1 => Some(LatentMode::Uint8),
            _ => None,
        }
    }

    pub fn element_bytes(self) -> usize {
        match self {
            LatentMode::Float32 => 4,
            LatentMode::Uint8 => 1,
        }
    }

    pub fn header_bytes(self) -> usize {
        match self {
            LatentMode::Float32 => LATENT_HEADER_F32,
            LatentMode::Uint8 => LATENT_HEADER_U8,
        }
    }
}

/// Total file length for a `c×h×w` latent.
pub fn latent_file_len(c: usize, h: usize, w: usize, mode: LatentMode) -> usize {
    mode.header_bytes() + c * h * w * mode.element_bytes()
}

/// Affine parameters `(min, scale)` with `scale = (max − min)/255`.
pub fn quantization_params(values: &[f32]) -> (f32, f32) {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !min.is_finite() || !max.is_finite() {
        return (0.0, 0.0);
    }
    (min, ((max as f64 - min as f64) / 255.0) as f32)
}

pub fn quantize(values: &[f32], min: f32, scale: f32) -> Vec<u8> {
    if scale == 0.0 {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v as f64 - min as f64) / scale as f64).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn dequantize(q: &[u8], min: f32, scale: f32) -> Vec<f32> {
    q.iter()
        .map(|&q| (min as f64 + scale as f64 * q as f64) as f32)
        .collect()
}

/// Serializes a single-image latent (`1×c×h×w`).
pub fn serialize_latent(latent: &LatentCode, mode: LatentMode) -> Result<Vec<u8>> {
    let (n, c, h, w) = latent.tensor().dims4()?;
    if n != 1 {
        return Err(Error::dim(format!("a latent file holds one image, got a batch of {n}")));
    }
    let mut out = Vec::with_capacity(latent_file_len(c, h, w, mode));
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(mode.dtype_tag());
    for d in [c, h, w] {
        let d = u32::try_from(d).map_err(|_| Error::dim(format!("latent extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    let values = latent.tensor().data();
    match mode {
        LatentMode::Float32 => push_f32s(&mut out, values),
        LatentMode::Uint8 => {
            let (min, scale) = quantization_params(values);
            out.extend_from_slice(&min.to_le_bytes());
            out.extend_from_slice(&scale.to_le_bytes());
            out.extend_from_slice(&quantize(values, min, scale));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentFile {
    pub mode: LatentMode,
    pub latent: LatentCode,
}

pub fn deserialize_latent_file(bytes: &[u8]) -> Result<LatentFile> {
    let mut r = Reader::new(bytes);
    r.magic(LATENT_MAGIC)?;
    r.version()?;
    let tag_at = r.pos;
    let tag = r.u8("dtype")?;
    let mode = LatentMode::from_tag(tag)
        .ok_or_else(|| Error::format(tag_at, format!("unknown dtype tag {tag}")))?;
    let dims_at = r.pos;
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if c != LATENT_CHANNELS || h == 0 || w == 0 {
        return Err(Error::format(
            dims_at,
            format!("latent dims {c}×{h}×{w}; expected {LATENT_CHANNELS} channels and non-zero extents"),
        ));
    }
    let numel = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format(dims_at, "latent extents overflow"))?;
    let data = match mode {
        LatentMode::Float32 => {
            let at = r.pos;
            let len = numel.checked_mul(4).ok_or_else(|| Error::format(at, "latent extents overflow"))?;
            f32s_from_le(r.take(len, "float32 payload")?)
        }
        LatentMode::Uint8 => {
            let min = r.f32("min")?;
            let scale = r.f32("scale")?;
            dequantize(r.take(numel, "uint8 payload")?, min, scale)
        }
    };
    r.finish()?;
    Ok(LatentFile {
        mode,
        latent: LatentCode::new(Tensor::new(vec![1, c, h, w], data)?)?,
    })
}

pub fn deserialize_latent(bytes: &[u8]) -> Result<LatentCode> {
    Ok(deserialize_latent_file(bytes)?.latent)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionRatios {
    /// Input element count over latent element count.
    pub element_ratio: f64,
    /// Input payload bytes over latent payload bytes.
    pub byte_ratio: f64,
}

/// Ratios for an `H×W×3` input. Element counts come from the architecture;
/// byte counts are whatever the caller measured on the wire or on disk.
pub fn compression_ratio(
    input_shape: (usize, usize, usize),
    latent_payload_bytes: usize,
    input_payload_bytes: usize,
) -> Result<CompressionRatios> {
    let (h, w, c) = input_shape;
    if c != IMAGE_CHANNELS {
        return Err(Error::dim(format!("expected {IMAGE_CHANNELS} input channels, found {c}")));
    }
    if latent_payload_bytes == 0 {
        return Err(Error::dim("latent payload is empty"));
    }
    Ok(CompressionRatios {
        element_ratio: model::element_ratio(h, w)?,
        byte_ratio: input_payload_bytes as f64 / latent_payload_bytes as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(h: usize, w: usize, seed: u64) -> LatentCode {
        LatentCode::new(Tensor::uniform(&[1, 64, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
    }

    #[test]
    fn weights_roundtrip_bit_exact() {
        let p = model::init_params(5);
        let bytes = encode_weights(&p).unwrap();
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back.names(), p.names());
        for (a, b) in back.tensors().iter().zip(p.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn weights_reject_damage() {
        let bytes = encode_weights(&model::init_params(0)).unwrap();
        let err = decode_weights(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = decode_weights(&bad).unwrap_err();
        assert!(err.to_string().contains("\"AEW1\""), "{err}");

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_weights(&extra), Err(Error::Format { .. })));

        // One tensor claiming (2^32−1)² elements; rejected before any allocation.
        let mut huge = Vec::new();
        huge.extend_from_slice(WEIGHTS_MAGIC);
        huge.extend_from_slice(&1u16.to_le_bytes());
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&1u16.to_le_bytes());
        huge.push(b'x');
        huge.push(2);
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_weights(&huge).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == 22), "{err}");
    }

    #[test]
    fn float_latent_roundtrip() {
        let e = latent(16, 16, 1);
        let bytes = serialize_latent(&e, LatentMode::Float32).unwrap();
        assert_eq!(bytes.len(), latent_file_len(64, 16, 16, LatentMode::Float32));
        assert_eq!(deserialize_latent(&bytes).unwrap(), e);
    }

    #[test]
    fn constant_latent_quantizes_exactly() {
        let e = LatentCode::new(Tensor::full(&[1, 64, 2, 2], 0.37)).unwrap();
        let bytes = serialize_latent(&e, LatentMode::Uint8).unwrap();
        assert_eq!(bytes.len(), LATENT_HEADER_U8 + 256);
        assert_eq!(deserialize_latent(&bytes).unwrap(), e);
    }

    #[test]
    fn latent_rejects_damage() {
        let bytes = serialize_latent(&latent(2, 2, 3), LatentMode::Uint8).unwrap();
        assert!(deserialize_latent(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(7);
        assert!(deserialize_latent(&extra).is_err());
        let mut tag = bytes.clone();
        tag[6] = 9;
        assert!(matches!(deserialize_latent(&tag), Err(Error::Format { offset: 6, .. })));
        assert!(serialize_latent(
            &LatentCode::new(Tensor::zeros(&[2, 64, 1, 1])).unwrap(),
            LatentMode::Float32
        )
        .is_err());
    }

    #[test]
    fn ratios() {
        let r = compression_ratio((256, 256, 3), 65536, 196608).unwrap();
        assert_eq!(r.element_ratio, 12.0);
        assert_eq!(r.byte_ratio, 3.0);
        let u8_len = latent_file_len(64, 16, 16, LatentMode::Uint8);
        let r = compression_ratio((256, 256, 3), u8_len, 196608).unwrap();
        assert!((r.byte_ratio - 12.0).abs() < 0.05, "{}", r.byte_ratio);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn quantization_error_bound(h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let e = latent(h, w, seed);
            let back = deserialize_latent(&serialize_latent(&e, LatentMode::Uint8).unwrap()).unwrap();
            let v = e.tensor().data();
            let min = v.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let bound = (max - min) / 510.0 + 1e-7;
            for (a, b) in v.iter().zip(back.tensor().data()) {
                prop_assert!(((*a as f64) - (*b as f64)).abs() <= bound);
            }
        }
    }
}
