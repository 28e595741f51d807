//! Gradient-weighted class activation maps over encoder taps.

use crate::data::Mask;
use crate::error::{HlfdError, Result};
use crate::graph::Graph;
use crate::kernels;
use crate::nets::{forward_taps, ParamMode, SegNet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapSelector {
    Early,
    Late,
}

impl TapSelector {
    pub fn as_str(self) -> &'static str {
        match self {
            TapSelector::Early => "early",
            TapSelector::Late => "late",
        }
    }
}

/// Heatmap over the selected tap of a single image (1×C×H×W), resized to the
/// input size with values in [0, 1].
///
/// The score is the mean `target_class` logit over all pixels. Channel
/// weights are the spatial means of d(score)/d(tap).
pub fn gradcam<N: SegNet + ?Sized>(net: &N, x: &Tensor, tap: TapSelector, target_class: usize) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4("gradcam")?;
    if n != 1 {
        return Err(HlfdError::shape("gradcam", "expects a single image"));
    }
    let mut g = Graph::new();
    // Gradients flow back to the input so that every tap lies on the path.
    let xv = g.param(x.clone());
    let (out, _) = forward_taps(net, &mut g, xv, ParamMode::Frozen)?;
    let tap_var = match tap {
        TapSelector::Early => out.features.z_early,
        TapSelector::Late => out.features.z_late,
    };
    let cls = g.select_channel(out.logits, target_class)?;
    let score = g.mean(cls)?;
    g.backward(score)?;
    let act = g.value(tap_var).clone();
    let grad = g.grad(tap_var).unwrap_or_else(|| Tensor::zeros(act.shape()));
    let cam = cam_from(&act, &grad)?;
    let (_, _, th, tw) = act.dims4("gradcam")?;
    let up = kernels::bilinear_forward(1, th, tw, h, w, cam.data());
    Tensor::new(vec![h, w], up)
}

/// `relu(Σ_c w_c·A_c)` with `w_c` the spatial mean of the gradient, min-max
/// normalized. A constant map comes back as zeros.
pub fn cam_from(activation: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = activation.dims4("gradcam")?;
    if grad.shape() != activation.shape() {
        return Err(HlfdError::shape("gradcam", "gradient and activation shapes differ"));
    }
    let plane = h * w;
    let a = activation.data();
    let gd = grad.data();
    let mut cam = vec![0.0; plane];
    for ch in 0..c {
        let wc = gd[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        for (o, &v) in cam.iter_mut().zip(&a[ch * plane..(ch + 1) * plane]) {
            *o += wc * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        cam.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        cam.fill(0.0);
    }
    Tensor::new(vec![h, w], cam)
}

/// Mean heatmap value inside and outside the mask's foreground. Either is
/// `None` when that region is empty.
pub fn inside_outside(heatmap: &Tensor, mask: &Mask) -> Result<(Option<f64>, Option<f64>)> {
    if heatmap.numel() != mask.labels.len() {
        return Err(HlfdError::shape("inside_outside", "heatmap and mask sizes differ"));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &l) in heatmap.data().iter().zip(&mask.labels) {
        if l != 0 {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok((avg(si, ni), avg(so, no)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_channel_is_normalized_relu() {
        let act = Tensor::new(vec![1, 1, 2, 2], vec![-1.0, 0.0, 2.0, 4.0]).unwrap();
        let grad = Tensor::full(&[1, 1, 2, 2], 0.3);
        let cam = cam_from(&act, &grad).unwrap();
        assert_eq!(cam.data(), &[0.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn negative_weight_gives_zero_map() {
        let act = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let grad = Tensor::full(&[1, 1, 1, 3], -1.0);
        assert!(cam_from(&act, &grad).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_in_unit_range_at_input_size() {
        use crate::nets::{build_student, NetConfig};
        use rand::SeedableRng;
        let cfg = NetConfig {
            encoder_channels: vec![2, 3, 4],
            num_mid: 1,
            input_size: (16, 16),
            ..NetConfig::student()
        };
        let net = build_student(&cfg).unwrap();
        let x = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        for tap in [TapSelector::Early, TapSelector::Late] {
            let h = gradcam(&net, &x, tap, 1).unwrap();
            assert_eq!(h.shape(), &[16, 16]);
            assert!(h.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let two = Tensor::stack_batch(&[x.clone(), x]).unwrap();
        assert!(gradcam(&net, &two, TapSelector::Early, 1).is_err());
    }

    #[test]
    fn inside_outside_means() {
        let h = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.0, 0.25]).unwrap();
        let m = Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(inside_outside(&h, &m).unwrap(), (Some(0.75), Some(0.125)));
        assert_eq!(inside_outside(&h, &Mask::zeros(2, 2)).unwrap().0, None);
    }
}
