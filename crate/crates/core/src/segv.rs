//! SEGV1 dataset files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SEGV1\0"                      6 bytes
//! sample count                   u32
//! per sample:
//!   id length                    u32
//!   id                           UTF-8 bytes
//!   height, width                u32, u32
//!   image                        height·width f64
//!   mask                         height·width u8 (0 or 1)
//! ```

use std::fs;
use std::path::Path;

use crate::data::{Mask, SegSample};
use crate::error::{HlfdError, Result};
use crate::tensor::Tensor;

pub const SEGV_MAGIC: &[u8; 6] = b"SEGV1\0";

pub fn encode_segv(samples: &[SegSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SEGV_MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        if s.image.shape()[0] != 1 {
            return Err(HlfdError::invalid("SEGV1 stores single-channel images only"));
        }
        let (h, w) = s.size();
        out.extend_from_slice(&(s.id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.id.as_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.mask.labels);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    sample: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(HlfdError::Truncated { index: self.sample });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_segv(bytes: &[u8]) -> Result<Vec<SegSample>> {
    if bytes.len() < SEGV_MAGIC.len() || &bytes[..SEGV_MAGIC.len()] != SEGV_MAGIC {
        return Err(HlfdError::BadMagic { expected: "SEGV1" });
    }
    let mut r = Reader {
        buf: bytes,
        pos: SEGV_MAGIC.len(),
        sample: 0,
    };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        r.sample = index;
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| HlfdError::Malformed(format!("sample {index}: id is not UTF-8")))?
            .to_owned();
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        if h == 0 || w == 0 {
            return Err(HlfdError::Malformed(format!("sample {index}: empty image")));
        }
        let n = h.checked_mul(w).ok_or_else(|| HlfdError::Malformed(format!("sample {index}: size overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or(HlfdError::Truncated { index })?)?;
        let image: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let labels = r.take(n)?.to_vec();
        if let Some(&label) = labels.iter().find(|&&l| l > 1) {
            return Err(HlfdError::InvalidLabel { index, label });
        }
        out.push(SegSample {
            image: Tensor::new(vec![1, h, w], image)?,
            mask: Mask::new(h, w, labels)?,
            id,
        });
    }
    if r.pos != bytes.len() {
        return Err(HlfdError::Malformed(format!(
            "{} trailing bytes after {count} samples",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_segv(path: &Path, samples: &[SegSample]) -> Result<()> {
    fs::write(path, encode_segv(samples)?)?;
    Ok(())
}

pub fn load_segv(path: &Path) -> Result<Vec<SegSample>> {
    decode_segv(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn dataset() -> Vec<SegSample> {
        synth_generate(&SynthConfig {
            count: 4,
            size: (8, 8),
            blob_radius: (1.5, 3.0),
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_bitwise() {
        let d = dataset();
        let bytes = encode_segv(&d).unwrap();
        let back = decode_segv(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_segv(&back).unwrap(), bytes);
    }

    #[test]
    fn error_kinds() {
        let mut bytes = encode_segv(&dataset()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_segv(&bad), Err(HlfdError::BadMagic { .. })));

        // cut inside the third sample: header 10 bytes, each sample 4+id+8+64*9
        let per = 4 + "synth-00000".len() + 8 + 64 * 9;
        let cut = 10 + 2 * per + 20;
        assert!(matches!(decode_segv(&bytes[..cut]), Err(HlfdError::Truncated { index: 2 })));

        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(matches!(
            decode_segv(&bytes),
            Err(HlfdError::InvalidLabel { index: 3, label: 7 })
        ));
    }
}
