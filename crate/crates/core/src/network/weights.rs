//! TXW1 weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! "TXW1"
//! u32            layer count
//! 3 x f64        channel means (R, G, B)
//! per layer:
//!   u8           kind (0 = conv + activation, 1 = pool)
//!   u16, bytes   UTF-8 name
//!   conv only:   u32 out, u32 in, u32 kh, u32 kw,
//!                out*in*kh*kw f32 weights, out f32 biases
//! ```

use crate::error::{Error, Result};

use super::{ConvLayer, FeatureNetwork, LayerKind, LayerSpec};

const MAGIC: &[u8; 4] = b"TXW1";
const KIND_CONV: u8 = 0;
const KIND_POOL: u8 = 1;

pub(super) fn encode(net: &FeatureNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for m in net.channel_means() {
        out.extend_from_slice(&m.to_le_bytes());
    }
    for layer in net.layers() {
        let kind = match layer.kind {
            LayerKind::Conv(_) => KIND_CONV,
            LayerKind::Pool => KIND_POOL,
        };
        out.push(kind);
        out.extend_from_slice(&(layer.name.len() as u16).to_le_bytes());
        out.extend_from_slice(layer.name.as_bytes());
        if let LayerKind::Conv(c) = &layer.kind {
            for d in [c.out_channels, c.in_channels, c.kh, c.kw] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &w in c.weights.iter().chain(&c.biases) {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what}: size overflow")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<FeatureNetwork> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let count = r.u32("layer count")? as usize;
    let mut means = [0.0; 3];
    for m in &mut means {
        *m = r.f64("channel means")?;
    }
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let kind = r.u8("layer kind")?;
        let name_len = r.u16("layer name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "layer name")?)
            .map_err(|_| Error::Format(format!("layer {i}: name is not UTF-8")))?
            .to_string();
        let kind = match kind {
            KIND_CONV => {
                let out = r.u32(&name)? as usize;
                let inp = r.u32(&name)? as usize;
                let kh = r.u32(&name)? as usize;
                let kw = r.u32(&name)? as usize;
                let n = out
                    .checked_mul(inp)
                    .and_then(|v| v.checked_mul(kh))
                    .and_then(|v| v.checked_mul(kw))
                    .ok_or_else(|| Error::Format(format!("{name}: size overflow")))?;
                let weights = r.f32_vec(n, &name)?;
                let biases = r.f32_vec(out, &name)?;
                LayerKind::Conv(ConvLayer::new(out, inp, kh, kw, weights, biases)?)
            }
            KIND_POOL => LayerKind::Pool,
            k => return Err(Error::Format(format!("layer {name}: unknown kind {k}"))),
        };
        layers.push(LayerSpec { name, kind });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    FeatureNetwork::new(layers, means)
}
