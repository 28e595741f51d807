//! Browser bindings: synthetic samples, intensity windowing and a single
//! distillation-loss evaluation on freshly initialized networks.

use hlfd_core::data::{synth_generate, window_hu, SegSample, SynthConfig};
use hlfd_core::graph::Graph;
use hlfd_core::losses::{hlfd_total, DistillConfig};
use hlfd_core::metrics::{focal_dice_loss, FocalDiceConfig};
use hlfd_core::nets::{build_student, build_teacher, forward_taps, NetConfig, ParamMode};
use hlfd_core::tensor::Tensor;
use wasm_bindgen::prelude::*;

/// Demo images are shown on a pseudo-HU scale: intensity 0 maps to −200, 1 to 300.
pub const HU_RANGE: (f64, f64) = (-200.0, 300.0);

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn sample(seed: u64, size: usize, contrast: f64, noise: f64) -> Result<SegSample, JsError> {
    let cfg = SynthConfig {
        count: 1,
        size: (size, size),
        intensity_contrast: contrast,
        noise_sigma: noise,
        blob_radius: (size as f64 / 20.0, size as f64 / 5.0),
        seed,
        ..SynthConfig::default()
    };
    let mut v = synth_generate(&cfg).map_err(err)?;
    Ok(v.remove(0))
}

fn gray_rgba(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// RGBA pixels of one synthetic image with its mask tinted green.
#[wasm_bindgen]
pub fn sample_rgba(seed: u64, size: usize, contrast: f64, noise: f64) -> Result<Vec<u8>, JsError> {
    let s = sample(seed, size, contrast, noise)?;
    let mut px = gray_rgba(s.image.data());
    for (p, &l) in px.chunks_mut(4).zip(&s.mask.labels) {
        if l == 1 {
            p[0] /= 2;
            p[1] = p[1] / 2 + 127;
            p[2] /= 2;
        }
    }
    Ok(px)
}

/// The same image after clamping to the HU window [lo, hi].
#[wasm_bindgen]
pub fn windowed_rgba(seed: u64, size: usize, contrast: f64, noise: f64, lo: f64, hi: f64) -> Result<Vec<u8>, JsError> {
    let s = sample(seed, size, contrast, noise)?;
    let (a, b) = HU_RANGE;
    let hu = s.image.map(|v| a + (b - a) * v);
    let w = window_hu(&hu, lo, hi).map_err(err)?;
    Ok(gray_rgba(w.data()))
}

/// Loss terms for a batch of two samples under untrained seeded networks,
/// ordered l_seg, l_ufd, l_ifd, l_upd, l_ipd, l_f, l_p, l_h.
#[wasm_bindgen]
pub fn loss_breakdown(seed: u64, size: usize, beta: f64, lambda: f64) -> Result<Vec<f64>, JsError> {
    let samples: Vec<SegSample> = (0..2).map(|i| sample(seed + i, size, 0.3, 0.1)).collect::<Result<_, _>>()?;
    let net = |channels: Vec<usize>| NetConfig {
        encoder_channels: channels,
        input_size: (size, size),
        seed,
        ..NetConfig::teacher()
    };
    let teacher = build_teacher(&net(vec![8, 16, 32, 64])).map_err(err)?;
    let student = build_student(&net(vec![4, 8, 16, 32])).map_err(err)?;

    let mut data = Vec::with_capacity(2 * size * size);
    for s in &samples {
        data.extend_from_slice(s.image.data());
    }
    let x = Tensor::new(vec![2, 1, size, size], data).map_err(err)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (t, _) = forward_taps(&teacher, &mut g, xv, ParamMode::Frozen).map_err(err)?;
    let (s, _) = forward_taps(&student, &mut g, xv, ParamMode::Trainable).map_err(err)?;
    let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
    let l_seg = focal_dice_loss(&mut g, s.logits, &masks, &FocalDiceConfig::default()).map_err(err)?;
    let cfg = DistillConfig {
        beta,
        lambda,
        ..DistillConfig::default()
    };
    let (_, b) = hlfd_total(
        &mut g,
        l_seg,
        (&s.features, &s.predictions),
        (&t.features, &t.predictions),
        &cfg,
    )
    .map_err(err)?;
    Ok(vec![b.l_seg, b.l_ufd, b.l_ifd, b.l_upd, b.l_ipd, b.l_f, b.l_p, b.l_h])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_is_rgba_sized() {
        let px = sample_rgba(3, 32, 0.3, 0.1).unwrap();
        assert_eq!(px.len(), 32 * 32 * 4);
        assert!(px.chunks(4).any(|p| p[1] > p[0]));
    }

    #[test]
    fn full_window_matches_plain_gray() {
        let a = windowed_rgba(1, 32, 0.3, 0.1, HU_RANGE.0, HU_RANGE.1).unwrap();
        let s = sample(1, 32, 0.3, 0.1).unwrap();
        assert_eq!(a, gray_rgba(s.image.data()));
    }

    #[test]
    fn breakdown_combines() {
        let b = loss_breakdown(0, 32, 0.9, 0.1).unwrap();
        assert!((b[7] - (b[0] + 0.9 * b[5] + 0.1 * b[6])).abs() < 1e-12);
        let z = loss_breakdown(0, 32, 0.0, 0.0).unwrap();
        assert_eq!(z[7], z[0]);
    }
}
