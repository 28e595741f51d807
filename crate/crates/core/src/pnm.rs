//! Binary PGM heatmaps and PPM mask overlays.

use crate::data::Mask;
use crate::error::{HlfdError, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(HlfdError::shape("pnm", format!("expected a single plane, got {:?}", t.shape()))),
    }
}

/// 8-bit P5 image of values in [0, 1].
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(map)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// 8-bit P6 image: the grayscale image with mask pixels tinted green.
pub fn encode_overlay_ppm(image: &Tensor, mask: &Mask) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(image)?;
    if (h, w) != (mask.height, mask.width) {
        return Err(HlfdError::shape("pnm", "image and mask sizes differ"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (&v, &l) in image.data().iter().zip(&mask.labels) {
        let gray = to_byte(v);
        if l != 0 {
            let dim = gray / 2;
            out.extend_from_slice(&[dim, dim.saturating_add(128), dim]);
        } else {
            out.extend_from_slice(&[gray, gray, gray]);
        }
    }
    Ok(out)
}
