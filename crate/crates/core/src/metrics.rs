//! Supervised focal-dice objective and the DSC / RVD evaluation metrics.

use crate::data::Mask;
use crate::error::{HlfdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FOREGROUND: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalDiceConfig {
    pub gamma: f64,
    pub smooth: f64,
}

impl Default for FocalDiceConfig {
    fn default() -> Self {
        FocalDiceConfig { gamma: 2.0, smooth: 1.0 }
    }
}

/// One-hot N×K×H×W encoding of the batch's masks.
fn one_hot(masks: &[&Mask], k: usize, h: usize, w: usize) -> Result<Tensor> {
    let plane = h * w;
    let mut out = vec![0.0; masks.len() * k * plane];
    for (b, m) in masks.iter().enumerate() {
        if (m.height, m.width) != (h, w) {
            return Err(HlfdError::shape(
                "focal_dice_loss",
                format!("mask {}x{} vs logits {h}x{w}", m.height, m.width),
            ));
        }
        for (p, &l) in m.labels.iter().enumerate() {
            let l = l as usize;
            if l >= k {
                return Err(HlfdError::invalid(format!("label {l} out of range for {k} classes")));
            }
            out[(b * k + l) * plane + p] = 1.0;
        }
    }
    Tensor::new(vec![masks.len(), k, h, w], out)
}

/// Mean focal cross-entropy `−(1−p_true)^γ·ln p_true` plus soft Dice loss on
/// the foreground channel, `1 − (2Σpg + s)/(Σp + Σg + s)`, over the batch.
pub fn focal_dice_loss(g: &mut Graph, logits: Var, masks: &[&Mask], cfg: &FocalDiceConfig) -> Result<Var> {
    let (n, k, h, w) = g.value(logits).dims4("focal_dice_loss")?;
    if masks.len() != n {
        return Err(HlfdError::shape(
            "focal_dice_loss",
            format!("{} masks for batch of {n}", masks.len()),
        ));
    }
    let onehot = g.constant(one_hot(masks, k, h, w)?);
    let logp = g.log_softmax_channels(logits)?;
    let probs = g.softmax_channels(logits)?;

    let lp = g.mul(logp, onehot)?;
    let logp_true = g.sum_channels(lp)?;
    let pp = g.mul(probs, onehot)?;
    let p_true = g.sum_channels(pp)?;
    let neg = g.scale(p_true, -1.0)?;
    let miss = g.add_scalar(neg, 1.0)?;
    let weight = g.pow_scalar(miss, cfg.gamma)?;
    let wl = g.mul(weight, logp_true)?;
    let focal_mean = g.mean(wl)?;
    let focal = g.scale(focal_mean, -1.0)?;

    let fg = g.select_channel(probs, FOREGROUND)?;
    let gt = g.select_channel(onehot, FOREGROUND)?;
    let inter = g.mul(fg, gt)?;
    let inter = g.sum(inter)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, cfg.smooth)?;
    let sp = g.sum(fg)?;
    let sg = g.sum(gt)?;
    let den = g.add(sp, sg)?;
    let den = g.add_scalar(den, cfg.smooth)?;
    let ratio = g.div_per_sample(num, den)?;
    let neg_ratio = g.scale(ratio, -1.0)?;
    let dice = g.add_scalar(neg_ratio, 1.0)?;

    g.add(focal, dice)
}

fn check_pair(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(HlfdError::shape(
            op,
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`, and 1 when both masks are empty.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_pair("dsc", pred, gt)?;
    let inter = pred
        .labels
        .iter()
        .zip(&gt.labels)
        .filter(|(&p, &g)| p != 0 && g != 0)
        .count();
    let total = pred.foreground() + gt.foreground();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// `(|P| − |G|) / |G|`.
pub fn rvd(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_pair("rvd", pred, gt)?;
    let g = gt.foreground();
    if g == 0 {
        return Err(HlfdError::EmptyGroundTruth);
    }
    Ok((pred.foreground() as f64 - g as f64) / g as f64)
}

/// Foreground where the foreground class strictly beats every other class;
/// ties go to background. Accepts K×H×W or 1×K×H×W.
pub fn binarize(prob_map: &Tensor) -> Result<Mask> {
    let (k, h, w) = match *prob_map.shape() {
        [k, h, w] | [1, k, h, w] => (k, h, w),
        _ => return Err(HlfdError::shape("binarize", format!("{:?}", prob_map.shape()))),
    };
    if k <= FOREGROUND {
        return Err(HlfdError::shape("binarize", "need a foreground channel"));
    }
    let d = prob_map.data();
    let plane = h * w;
    let labels = (0..plane)
        .map(|p| {
            let fg = d[FOREGROUND * plane + p];
            let wins = (0..k).filter(|&c| c != FOREGROUND).all(|c| fg > d[c * plane + p]);
            u8::from(wins)
        })
        .collect();
    Mask::new(h, w, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub id: String,
    pub dsc: f64,
    /// `None` when the ground truth is empty.
    pub rvd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub dsc: f64,
    pub rvd: f64,
    /// Samples left out of the RVD mean because their ground truth is empty.
    pub rvd_excluded: usize,
    pub per_sample: Vec<SampleScore>,
}

impl EvalResult {
    pub fn from_scores(per_sample: Vec<SampleScore>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(HlfdError::invalid("no samples to aggregate"));
        }
        let dsc = mean(per_sample.iter().map(|s| s.dsc));
        let rvds: Vec<f64> = per_sample.iter().filter_map(|s| s.rvd).collect();
        let rvd = if rvds.is_empty() { f64::NAN } else { mean(rvds.iter().copied()) };
        Ok(EvalResult {
            dsc,
            rvd,
            rvd_excluded: per_sample.len() - rvds.len(),
            per_sample,
        })
    }
}

/// Arithmetic mean, summed in sorted order so the result does not depend on
/// the order of the inputs.
pub fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.windows(2).all(|p| p[0] == p[1]) {
        return v.first().copied().unwrap_or(f64::NAN);
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for a single value.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values.iter().copied());
    let ss = mean(values.iter().map(|v| (v - m) * (v - m))) * values.len() as f64;
    (ss / (values.len() - 1) as f64).sqrt()
}
