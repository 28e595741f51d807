//! HLFDCKPT1 network checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HLFDCKPT1\0"                          10 bytes
//! metadata:
//!   kind                                 u8 (0 teacher, 1 student)
//!   num_mid, num_classes, in_channels    u32 ×3
//!   height, width                        u32 ×2
//!   seed                                 u64
//!   block count, channels per block      u32, u32 ×count
//! manifest:
//!   parameter count                      u32
//!   per parameter: name length, name, ndim, dims (u64 each), data offset (u64)
//! data:
//!   every parameter as f64, at its offset from the start of this section
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{HlfdError, Result};
use crate::nets::{AnyNet, NetConfig, NetKind, SegNet};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 10] = b"HLFDCKPT1\0";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| HlfdError::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(net: &dyn SegNet) -> Result<Vec<u8>> {
    let cfg = net.config();
    let mut out = CKPT_MAGIC.to_vec();
    out.push(match net.kind() {
        NetKind::Teacher => 0,
        NetKind::Student => 1,
    });
    for v in [cfg.num_mid, cfg.num_classes, cfg.in_channels, cfg.input_size.0, cfg.input_size.1] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    put_u32(&mut out, cfg.encoder_channels.len())?;
    for &c in &cfg.encoder_channels {
        put_u32(&mut out, c)?;
    }

    let params = net.params();
    put_u32(&mut out, params.len())?;
    let mut offset = 0u64;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    for t in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(HlfdError::TruncatedCheckpoint(format!("while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the network described by the metadata block and fills in the
/// stored parameters. The manifest must match that network exactly.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<AnyNet> {
    if bytes.len() < CKPT_MAGIC.len() || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(HlfdError::BadMagic { expected: "HLFDCKPT1" });
    }
    let mut r = Reader {
        buf: bytes,
        pos: CKPT_MAGIC.len(),
    };
    let kind = match r.take(1, "metadata")?[0] {
        0 => NetKind::Teacher,
        1 => NetKind::Student,
        k => return Err(HlfdError::Malformed(format!("unknown network kind {k}"))),
    };
    let num_mid = r.u32("metadata")?;
    let num_classes = r.u32("metadata")?;
    let in_channels = r.u32("metadata")?;
    let input_size = (r.u32("metadata")?, r.u32("metadata")?);
    let seed = r.u64("metadata")?;
    let blocks = r.u32("metadata")?;
    if blocks > 64 {
        return Err(HlfdError::Malformed(format!("{blocks} encoder blocks")));
    }
    let encoder_channels = (0..blocks).map(|_| r.u32("metadata")).collect::<Result<Vec<_>>>()?;
    let cfg = NetConfig {
        encoder_channels,
        num_mid,
        num_classes,
        in_channels,
        input_size,
        seed,
    };
    let mut net = AnyNet::build(kind, &cfg).map_err(|e| HlfdError::Malformed(format!("bad metadata: {e}")))?;

    let count = r.u32("manifest")?;
    let expected = net.as_net().params().len();
    if count != expected {
        return Err(HlfdError::Malformed(format!("{count} parameters, network has {expected}")));
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u32("manifest")?;
        let name = std::str::from_utf8(r.take(len, "manifest")?)
            .map_err(|_| HlfdError::Malformed(format!("parameter {i}: name is not UTF-8")))?
            .to_owned();
        let ndim = r.u32("manifest")?;
        if ndim > 8 {
            return Err(HlfdError::Malformed(format!("parameter {name}: {ndim} dims")));
        }
        let dims = (0..ndim)
            .map(|_| r.u64("manifest").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64("manifest")?;
        entries.push((name, dims, offset));
    }
    let data = &bytes[r.pos..];
    let params = net.as_net_mut().params_mut();
    let mut expected_offset = 0u64;
    for (i, (name, dims, offset)) in entries.into_iter().enumerate() {
        if name != params.names[i] || dims != params.tensors[i].shape() {
            return Err(HlfdError::Malformed(format!(
                "parameter {i}: {name} {dims:?} does not match {} {:?}",
                params.names[i],
                params.tensors[i].shape()
            )));
        }
        if offset != expected_offset {
            return Err(HlfdError::Malformed(format!("parameter {name}: offset {offset}, expected {expected_offset}")));
        }
        let n = params.tensors[i].numel();
        let start = offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(HlfdError::TruncatedCheckpoint(format!("data for parameter {name}")));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.tensors[i] = Tensor::new(dims, values)?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != data.len() {
        return Err(HlfdError::Malformed(format!(
            "{} trailing bytes",
            data.len() - expected_offset as usize
        )));
    }
    Ok(net)
}

pub fn save_checkpoint(path: &Path, net: &dyn SegNet) -> Result<()> {
    fs::write(path, encode_checkpoint(net)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyNet> {
    decode_checkpoint(&fs::read(path)?)
}

/// Lower-case hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the encoded checkpoint of `net`.
pub fn param_hash(net: &dyn SegNet) -> Result<String> {
    Ok(sha256_hex(&encode_checkpoint(net)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_student, build_teacher};

    fn small(seed: u64) -> NetConfig {
        NetConfig {
            encoder_channels: vec![2, 3, 4, 5],
            input_size: (16, 16),
            seed,
            ..NetConfig::teacher()
        }
    }

    #[test]
    fn round_trip_bitwise() {
        let t = build_teacher(&small(3)).unwrap();
        let bytes = encode_checkpoint(&t).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.as_net().params(), t.params());
        assert_eq!(back.as_net().config(), t.config());
        assert_eq!(encode_checkpoint(back.as_net()).unwrap(), bytes);

        let s = build_student(&small(4)).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&s).unwrap()).unwrap();
        assert!(back.clone().into_teacher().is_err());
        assert_eq!(back.into_student().unwrap().params(), s.params());
    }

    #[test]
    fn restores_modified_weights() {
        let mut s = build_student(&small(5)).unwrap();
        s.params_mut().tensors[0].data_mut()[0] = 1234.5;
        let back = decode_checkpoint(&encode_checkpoint(&s).unwrap()).unwrap();
        assert_eq!(back.as_net().params().tensors[0].data()[0], 1234.5);
    }

    #[test]
    fn error_kinds() {
        let bytes = encode_checkpoint(&build_student(&small(6)).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        assert!(matches!(decode_checkpoint(&bad), Err(HlfdError::BadMagic { .. })));
        for cut in [5, 20, 60, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(HlfdError::TruncatedCheckpoint(_)) | Err(HlfdError::BadMagic { .. })),
                "cut {cut}"
            );
        }
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(HlfdError::TruncatedCheckpoint(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(HlfdError::Malformed(_))));
    }

    #[test]
    fn hash_tracks_parameters() {
        let a = build_student(&small(7)).unwrap();
        let mut b = a.clone();
        assert_eq!(param_hash(&a).unwrap(), param_hash(&b).unwrap());
        b.params_mut().tensors[1].data_mut()[0] += 1e-12;
        assert_ne!(param_hash(&a).unwrap(), param_hash(&b).unwrap());
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
