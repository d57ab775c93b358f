//! On-disk formats: `IGRD` images, binary P5 masks and `DMWT` weights.
//!
//! All integers are little-endian `u32`; all sample values little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::model::DenoiserModel;
use crate::nn::{Architecture, Network, Params, Tensor};
use crate::schedule::ScheduleSpec;

pub const IMAGE_MAGIC: &[u8; 4] = b"IGRD";
pub const IMAGE_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"DMWT";
pub const WEIGHTS_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                Error::Format(format!("{}: truncated at byte {} (wanted {n} more)", self.what, self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes =
            self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!("{}: bad magic bytes", self.what)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

pub fn encode_image(img: &ImageGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * img.data().len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    put_u32(&mut out, img.height());
    put_u32(&mut out, img.width());
    put_u32(&mut out, img.channels());
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_image(buf: &[u8]) -> Result<ImageGrid> {
    let mut r = Reader::new(buf, "image");
    r.magic(IMAGE_MAGIC)?;
    let version = r.u32()?;
    if version != IMAGE_VERSION {
        return Err(Error::Format(format!("image: unsupported version {version}")));
    }
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!("image: degenerate shape {h}x{w}x{c}")));
    }
    let n =
        h.checked_mul(w).and_then(|v| v.checked_mul(c)).ok_or_else(|| Error::Format("image: size overflow".into()))?;
    let data = r.f32s(n)?;
    r.finish()?;
    ImageGrid::new(h, w, c, data.into_iter().map(f64::from).collect()).map_err(|e| Error::Format(format!("image: {e}")))
}

pub fn encode_mask(m: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.data().iter().map(|&v| if v == 1 { 255 } else { 0 }));
    out
}

/// Parses a binary PGM whose samples are all 0 or the declared maxval.
pub fn decode_mask(buf: &[u8]) -> Result<Mask> {
    let bad = |m: &str| Error::Format(format!("mask: {m}"));
    if buf.get(..2) != Some(b"P5") {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&buf[start..pos]).unwrap().parse().map_err(|_| bad("malformed header number"))?;
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    let body = &buf[pos..];
    if body.len() != w * h {
        return Err(bad(&format!("expected {} samples, found {}", w * h, body.len())));
    }
    let data = body
        .iter()
        .map(|&v| match v as usize {
            0 => Ok(0),
            m if m == maxval => Ok(1),
            other => Err(bad(&format!("non-binary sample {other}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(h, w, data)
}

/// The JSON header of a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsDescriptor {
    pub architecture: Architecture,
    pub schedule: ScheduleSpec,
    pub normalization: Normalization,
}

/// Model-space value = `scale * file-space value + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { scale: 2.0, offset: -1.0 }
    }
}

pub fn encode_weights(model: &DenoiserModel) -> Result<Vec<u8>> {
    let DenoiserModel::Network { net, schedule } = model else {
        return Err(Error::Unsupported("only network models have weights".into()));
    };
    let spec = schedule
        .spec()
        .ok_or_else(|| Error::Unsupported("schedule built from explicit betas cannot be stored".into()))?;
    let desc = WeightsDescriptor {
        architecture: net.architecture().clone(),
        schedule: spec,
        normalization: Normalization::default(),
    };
    let json = serde_json::to_vec(&desc).expect("descriptor serializes");
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    for (name, t) in net.params().iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(buf: &[u8]) -> Result<DenoiserModel> {
    let mut r = Reader::new(buf, "weights");
    r.magic(WEIGHTS_MAGIC)?;
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("weights: unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let desc: WeightsDescriptor =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("weights descriptor: {e}")))?;
    if desc.normalization != Normalization::default() {
        return Err(Error::Format(format!("weights: unsupported normalization {:?}", desc.normalization)));
    }
    let mut named = Vec::new();
    while r.pos < buf.len() {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("weights: tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("weights: size overflow".into()))?;
        let data = r.f32s(count)?;
        named.push((name, Tensor::new(shape, data)));
    }
    r.finish()?;
    let params = Params::new(&desc.architecture, named)?;
    let net = Network::from_params(desc.architecture, params)?;
    Ok(DenoiserModel::network(net, desc.schedule.build()?))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    decode_image(&read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_image(path: &Path, img: &ImageGrid) -> Result<()> {
    write(path, &encode_image(img))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write(path, &encode_mask(m))
}

pub fn read_weights(path: &Path) -> Result<DenoiserModel> {
    decode_weights(&read(path)?)
}

pub fn write_weights(path: &Path, model: &DenoiserModel) -> Result<()> {
    write(path, &encode_weights(model)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianPrior;
    use crate::nn::MlpSpec;
    use crate::schedule::NoiseSchedule;

    #[test]
    fn image_round_trip_and_layout() {
        let img = ImageGrid::from_fn(2, 3, 2, |y, x, c| (y * 3 + x) as f64 * 0.125 + c as f64 * 0.5);
        let bytes = encode_image(&img);
        assert_eq!(&bytes[..4], b"IGRD");
        assert_eq!(&bytes[4..20], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 4 * 12);
        assert_eq!(&bytes[24..28], &0.5f32.to_le_bytes());
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_image(&back), bytes);
        assert!(decode_image(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_image(&extra).is_err());
        let mut nan = bytes.clone();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_image(&nan).is_err());
    }

    #[test]
    fn mask_round_trip() {
        let m = Mask::from_fn(3, 5, |y, x| (x + y) % 3 == 0);
        let bytes = encode_mask(&m);
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(decode_mask(&bytes).unwrap(), m);
        let commented = b"P5 # made by hand\n2 1\n# max\n1\n\x00\x01".to_vec();
        assert_eq!(decode_mask(&commented).unwrap().count(), 1);
        assert!(decode_mask(b"P5\n2 1\n255\n\x00\x07").is_err());
        assert!(decode_mask(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_mask(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn weights_round_trip_is_byte_identical() {
        let arch = Architecture::Mlp(MlpSpec { hidden: 4, layers: 1, time_dim: 4, embed_dim: 4, image_channels: 2 });
        let sched = NoiseSchedule::cosine(1000, 0.008).unwrap();
        let model = DenoiserModel::network(Network::init(arch, 5).unwrap(), sched);
        let bytes = encode_weights(&model).unwrap();
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode_weights(&back).unwrap(), bytes);
        assert!(decode_weights(&bytes[..bytes.len() - 2]).is_err());
        let analytic = DenoiserModel::analytic(GaussianPrior::standard(2), NoiseSchedule::cosine(10, 0.008).unwrap());
        assert!(matches!(encode_weights(&analytic), Err(Error::Unsupported(_))));
    }
}
