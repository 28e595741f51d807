//! Segmentation samples, the synthetic blob generator, CT windowing and the
//! mask-safe augmentation policy.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{HlfdError, Result};
use crate::tensor::Tensor;

/// Integer label map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(HlfdError::shape(
                "mask",
                format!("{height}x{width} needs {} labels, got {}", height * width, labels.len()),
            ));
        }
        Ok(Mask { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground() as f64 / self.labels.len() as f64
    }

    /// Block-downsamples by `factor`; a cell is foreground when at least half
    /// of its pixels are.
    pub fn downsample(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(HlfdError::invalid(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut fg = 0;
                for dy in 0..factor {
                    let row = (y * factor + dy) * self.width + x * factor;
                    fg += self.labels[row..row + factor].iter().filter(|&&l| l != 0).count();
                }
                out.push(u8::from(2 * fg >= factor * factor));
            }
        }
        Mask::new(h, w, out)
    }
}

/// One image with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// 1×H×W, values in [0, 1].
    pub image: Tensor,
    pub mask: Mask,
    pub id: String,
}

impl SegSample {
    pub fn new(image: Tensor, mask: Mask, id: impl Into<String>) -> Result<Self> {
        let s = SegSample {
            image,
            mask,
            id: id.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape != [1, self.mask.height, self.mask.width] {
            return Err(HlfdError::shape(
                "sample",
                format!("image {shape:?} vs mask {}x{}", self.mask.height, self.mask.width),
            ));
        }
        if let Some(&l) = self.mask.labels.iter().find(|&&l| l > 1) {
            return Err(HlfdError::invalid(format!("label {l} in sample {}", self.id)));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(HlfdError::invalid(format!("image values outside [0,1] in sample {}", self.id)));
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.height, self.mask.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub size: (usize, usize),
    pub blobs_per_image: (usize, usize),
    pub blob_radius: (f64, f64),
    pub intensity_contrast: f64,
    pub noise_sigma: f64,
    pub background_texture_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 600,
            size: (64, 64),
            blobs_per_image: (1, 3),
            blob_radius: (3.0, 12.0),
            intensity_contrast: 0.3,
            noise_sigma: 0.1,
            background_texture_scale: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (bmin, bmax) = self.blobs_per_image;
        let (rmin, rmax) = self.blob_radius;
        if self.size.0 < 4 || self.size.1 < 4 {
            return Err(HlfdError::invalid("synthetic images must be at least 4x4"));
        }
        if bmin == 0 || bmin > bmax {
            return Err(HlfdError::invalid("blobs_per_image must satisfy 1 <= min <= max"));
        }
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(HlfdError::invalid("blob_radius must satisfy 0 < min <= max"));
        }
        if self.noise_sigma < 0.0 || self.background_texture_scale < 0.0 || self.intensity_contrast <= 0.0 {
            return Err(HlfdError::invalid("noise, texture scale must be >= 0 and contrast > 0"));
        }
        Ok(())
    }
}

const BACKGROUND_BASE: f64 = 0.35;
const MAX_RESAMPLES: usize = 1000;

fn smooth_background(h: usize, w: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // A few low-frequency plane waves, normalized so the field stays within
    // BACKGROUND_BASE ± scale.
    const WAVES: usize = 4;
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            (
                rng.random_range(0.5..2.5) / h as f64,
                rng.random_range(-2.0..2.0) / w as f64,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.3).sum();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (2.0 * PI * (fy * y as f64 + fx * x as f64) + ph).cos())
                .sum();
            out.push(BACKGROUND_BASE + scale * v / total);
        }
    }
    out
}

fn draw_blob_mask(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Mask {
    let (h, w) = cfg.size;
    let (bmin, bmax) = cfg.blobs_per_image;
    let (rmin, rmax) = cfg.blob_radius;
    let mut mask = Mask::zeros(h, w);
    for _ in 0..rng.random_range(bmin..=bmax) {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = if rmin == rmax { rmin } else { rng.random_range(rmin..rmax) };
        let rx = if rmin == rmax { rmin } else { rng.random_range(rmin..rmax) };
        let theta = rng.random_range(0.0..PI);
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                if u * u + v * v <= 1.0 {
                    mask.labels[y * w + x] = 1;
                }
            }
        }
    }
    mask
}

/// Smooth background plus brighter elliptical blobs plus pixel noise, clamped
/// to [0, 1]. Masks are resampled until the foreground fraction lies in (0, ½).
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    let (h, w) = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut mask = draw_blob_mask(cfg, &mut rng);
        let mut tries = 0;
        while !(mask.foreground() > 0 && 2 * mask.foreground() < h * w) {
            tries += 1;
            if tries > MAX_RESAMPLES {
                return Err(HlfdError::invalid(
                    "blob settings never give a foreground fraction in (0, 0.5)",
                ));
            }
            mask = draw_blob_mask(cfg, &mut rng);
        }
        let bg = smooth_background(h, w, cfg.background_texture_scale, &mut rng);
        let image: Vec<f64> = bg
            .iter()
            .zip(&mask.labels)
            .map(|(&b, &l)| {
                let noise = if cfg.noise_sigma > 0.0 {
                    cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (b + f64::from(l) * cfg.intensity_contrast + noise).clamp(0.0, 1.0)
            })
            .collect();
        let image = Tensor::new(vec![1, h, w], image)?;
        out.push(SegSample::new(image, mask, format!("synth-{i:05}"))?);
    }
    Ok(out)
}

/// Liver soft-tissue window in Hounsfield units.
pub const LIVER_WINDOW: (f64, f64) = (-40.0, 160.0);
/// Kidney window in Hounsfield units.
pub const KIDNEY_WINDOW: (f64, f64) = (-200.0, 300.0);

/// `clamp((raw − lo) / (hi − lo), 0, 1)`.
pub fn window_hu(raw: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) {
        return Err(HlfdError::invalid(format!("window lo {lo} must be below hi {hi}")));
    }
    let span = hi - lo;
    Ok(raw.map(|v| ((v - lo) / span).clamp(0.0, 1.0)))
}

/// One of the eight symmetries of the square: `rotation` quarter turns
/// counter-clockwise, preceded by a horizontal flip when `flip` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub rotation: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rotation: 0, flip: false };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|i| Dihedral {
            rotation: i % 4,
            flip: i >= 4,
        })
    }

    /// Source pixel for output pixel `(y, x)` in an `n×n` grid.
    fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (mut sy, mut sx) = (y, x);
        for _ in 0..self.rotation {
            // inverse of one counter-clockwise quarter turn
            (sy, sx) = (sx, n - 1 - sy);
        }
        if self.flip {
            sx = n - 1 - sx;
        }
        (sy, sx)
    }

    fn apply_plane<T: Copy>(self, src: &[T], n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = self.source(y, x, n);
                out.push(src[sy * n + sx]);
            }
        }
        out
    }

    /// Applies the transform to image and mask alike.
    pub fn apply(self, sample: &SegSample) -> Result<SegSample> {
        let (h, w) = sample.size();
        if self == Dihedral::IDENTITY {
            return Ok(sample.clone());
        }
        if h != w {
            return Err(HlfdError::shape("augment", format!("non-square sample {h}x{w}")));
        }
        let c = sample.image.shape()[0];
        let mut img = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            img.extend(self.apply_plane(&sample.image.data()[ch * h * w..(ch + 1) * h * w], h));
        }
        Ok(SegSample {
            image: Tensor::new(sample.image.shape().to_vec(), img)?,
            mask: Mask::new(h, w, self.apply_plane(&sample.mask.labels, h))?,
            id: sample.id.clone(),
        })
    }
}

/// Random right-angle rotation and optional flip, drawn uniformly from the
/// eight dihedral transforms. No intensity noise is added.
pub fn augment<R: Rng + ?Sized>(sample: &SegSample, rng: &mut R) -> Result<SegSample> {
    let i: u8 = rng.random_range(0..8);
    Dihedral {
        rotation: i % 4,
        flip: i >= 4,
    }
    .apply(sample)
}

/// Seeded shuffle, then the first `round(len·train_fraction)` samples train.
pub fn split(samples: &[SegSample], train_fraction: f64, seed: u64) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(HlfdError::invalid(format!("train fraction {train_fraction} not in (0,1)")));
    }
    let n_train = (samples.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == samples.len() {
        return Err(HlfdError::invalid(format!(
            "split of {} samples at {train_fraction} leaves one side empty",
            samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = idx[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(count: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            count,
            size: (32, 32),
            blob_radius: (2.0, 6.0),
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_is_seeded_and_valid() {
        let a = synth_generate(&small_cfg(20, 5)).unwrap();
        let b = synth_generate(&small_cfg(20, 5)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let f = s.mask.foreground_fraction();
            assert!(f > 0.0 && f < 0.5);
            s.validate().unwrap();
        }
        let c = synth_generate(&small_cfg(20, 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_high_contrast_threshold_recovers_mask() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            intensity_contrast: 1.0,
            ..small_cfg(10, 3)
        };
        for s in synth_generate(&cfg).unwrap() {
            let bg_max = s
                .image
                .data()
                .iter()
                .zip(&s.mask.labels)
                .filter(|(_, &l)| l == 0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let rec: Vec<u8> = s.image.data().iter().map(|&v| u8::from(v > bg_max)).collect();
            assert_eq!(rec, s.mask.labels);
        }
    }

    #[test]
    fn hu_windows() {
        let raw = Tensor::new(vec![4], vec![-40.0, 160.0, 300.0, 60.0]).unwrap();
        let w = window_hu(&raw, LIVER_WINDOW.0, LIVER_WINDOW.1).unwrap();
        assert_eq!(w.data(), &[0.0, 1.0, 1.0, 0.5]);
        let k = window_hu(&Tensor::scalar(50.0), KIDNEY_WINDOW.0, KIDNEY_WINDOW.1).unwrap();
        assert_eq!(k.item(), 0.5);
        assert!(window_hu(&raw, 10.0, 10.0).is_err());
    }

    #[test]
    fn dihedral_group_structure() {
        let s = &synth_generate(&small_cfg(1, 8)).unwrap()[0];
        assert_eq!(&Dihedral::IDENTITY.apply(s).unwrap(), s);
        let rot = Dihedral { rotation: 1, flip: false };
        let mut r = s.clone();
        for _ in 0..4 {
            r = rot.apply(&r).unwrap();
        }
        assert_eq!(&r, s);
        let flip = Dihedral { rotation: 0, flip: true };
        assert_eq!(&flip.apply(&flip.apply(s).unwrap()).unwrap(), s);
        for t in Dihedral::all() {
            let a = t.apply(s).unwrap();
            assert_eq!(a.mask.foreground(), s.mask.foreground());
        }
        // the eight transforms are distinct on a generic image
        let outs: Vec<_> = Dihedral::all().map(|t| t.apply(s).unwrap().image).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn rotation_rejects_non_square() {
        let s = SegSample::new(Tensor::zeros(&[1, 2, 4]), Mask::zeros(2, 4), "r").unwrap();
        assert!(Dihedral { rotation: 1, flip: false }.apply(&s).is_err());
    }

    #[test]
    fn split_ratio_and_disjointness() {
        let samples: Vec<SegSample> = (0..210)
            .map(|i| SegSample::new(Tensor::zeros(&[1, 2, 2]), Mask::zeros(2, 2), format!("s{i}")).unwrap())
            .collect();
        let (tr, te) = split(&samples, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (168, 42));
        let mut ids: Vec<_> = tr.iter().chain(&te).map(|s| s.id.clone()).collect();
        ids.sort();
        let mut all: Vec<_> = samples.iter().map(|s| s.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
        let (tr2, _) = split(&samples, 0.8, 1).unwrap();
        assert_eq!(tr, tr2);
        assert!(split(&samples[..1], 0.5, 1).is_err());
        assert!(split(&samples, 1.0, 1).is_err());
    }

    #[test]
    fn downsample_majority() {
        let m = Mask::new(2, 4, vec![1, 1, 0, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(m.downsample(2).unwrap().labels, vec![1, 0]);
    }
}
