//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Mask;
use crate::error::{HlfdError, Result};
use crate::graph::{channel_softmax, Graph, Var};
use crate::losses::{ifd_loss, ipd_loss, ufd_loss, upd_loss, DistillConfig};
use crate::metrics::{focal_dice_loss, FocalDiceConfig};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)` over every
/// entry of every input, with numeric derivatives from central differences.
///
/// `f` builds a scalar from the given input vars on a fresh graph; it is
/// called `1 + 2·Σ numel` times.
pub fn gradcheck<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    if !g.value(root).is_scalar() {
        return Err(HlfdError::shape("gradcheck", "function must return a scalar"));
    }
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        for k in 0..probe[i].numel() {
            let orig = probe[i].data()[k];
            probe[i].data_mut()[k] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Relative-error bound every suite entry must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < SUITE_TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Sums `x` against fixed weights so every input entry gets a distinct
/// upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(x, w)?;
    g.sum(p)
}

/// Random values with magnitude at least 0.2 and random sign, which keeps
/// finite differences away from kinks at zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let signs = Tensor::randn(shape, 1.0, rng);
    let mags = Tensor::randn(shape, 1.0, rng);
    let data = signs
        .data()
        .iter()
        .zip(mags.data())
        .map(|(s, m)| s.signum() * (0.2 + m.abs()))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("same shape")
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    away_from_zero(shape, rng).map(f64::abs)
}

fn unary(name: &'static str, x: Tensor, op: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> (&'static str, Build, Vec<Tensor>) {
    (
        name,
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = op(g, v[0])?;
            weighted_sum(g, y, 99)
        }),
        vec![x],
    )
}

/// Central-difference checks of every differentiable op and of the five
/// training losses on seeded inputs no larger than 2×4×8×8.
pub fn standard_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let x = away_from_zero(&[2, 3, 6, 6], r);
    let mut checks: Vec<(&'static str, Build, Vec<Tensor>)> = vec![
        (
            "conv2d",
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                weighted_sum(g, y, 1)
            }),
            vec![x.clone(), away_from_zero(&[4, 3, 3, 3], r), away_from_zero(&[4], r)],
        ),
        (
            "conv2d_stride2",
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 0)?;
                weighted_sum(g, y, 2)
            }),
            vec![x.clone(), away_from_zero(&[2, 3, 2, 2], r), away_from_zero(&[2], r)],
        ),
        unary("max_pool2", x.clone(), |g, v| g.max_pool2(v)),
        unary("bilinear_resize_up", x.clone(), |g, v| g.bilinear_resize(v, 8, 7)),
        unary("bilinear_resize_down", x.clone(), |g, v| g.bilinear_resize(v, 3, 4)),
        (
            "concat_channels",
            Box::new(|g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                weighted_sum(g, y, 3)
            }),
            vec![x.clone(), away_from_zero(&[2, 1, 6, 6], r)],
        ),
        unary("relu", x.clone(), |g, v| g.relu(v)),
        unary("softmax_channels", x.clone(), |g, v| g.softmax_channels(v)),
        unary("log_softmax_channels", x.clone(), |g, v| g.log_softmax_channels(v)),
        unary("scale", x.clone(), |g, v| g.scale(v, -1.7)),
        unary("add_scalar", x.clone(), |g, v| g.add_scalar(v, 0.3)),
        unary("sqrt", positive(&[2, 3, 4, 4], r), |g, v| g.sqrt(v)),
        unary("ln", positive(&[2, 3, 4, 4], r), |g, v| g.ln(v)),
        unary("pow_scalar", positive(&[2, 3, 4, 4], r), |g, v| g.pow_scalar(v, 2.5)),
        unary("abs_pow", x.clone(), |g, v| g.abs_pow(v, 2.0)),
        unary("abs_pow_1.5", x.clone(), |g, v| g.abs_pow(v, 1.5)),
        unary("clamp_min", x.clone(), |g, v| g.clamp_min(v, 0.1)),
        unary("sum_channels", x.clone(), |g, v| g.sum_channels(v)),
        unary("select_channel", x.clone(), |g, v| g.select_channel(v, 1)),
        unary("sum_per_sample", x.clone(), |g, v| g.sum_per_sample(v)),
        unary("normalize_channels", positive(&[2, 3, 4, 4], r), |g, v| g.normalize_channels(v)),
        ("sum", Box::new(|g, v| g.sum(v[0])), vec![x.clone()]),
        ("mean", Box::new(|g, v| g.mean(v[0])), vec![x.clone()]),
    ];
    for (name, op) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        checks.push((
            name,
            Box::new(move |g, v| {
                let y = match op {
                    0 => g.add(v[0], v[1])?,
                    1 => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                weighted_sum(g, y, 4)
            }),
            vec![x.clone(), away_from_zero(&[2, 3, 6, 6], r)],
        ));
    }
    checks.push((
        "div_per_sample",
        Box::new(|g, v| {
            let y = g.div_per_sample(v[0], v[1])?;
            weighted_sum(g, y, 5)
        }),
        vec![x.clone(), positive(&[2, 1, 1, 1], r)],
    ));

    let cfg = DistillConfig::default();
    let zt_mid = vec![Tensor::randn(&[2, 4, 4, 4], 1.0, r), Tensor::randn(&[2, 4, 2, 2], 1.0, r)];
    let zt_late = Tensor::randn(&[2, 4, 2, 2], 1.0, r);
    let probs = |shape: &[usize], r: &mut ChaCha8Rng| channel_softmax(&Tensor::randn(shape, 1.0, r), false);
    let pt_mid = vec![probs(&[2, 2, 4, 4], r)?, probs(&[2, 2, 2, 2], r)?];
    let pt_late = probs(&[2, 2, 8, 8], r)?;
    let consts = |g: &mut Graph, ts: &[Tensor]| ts.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();
    checks.push((
        "ufd_loss",
        Box::new(move |g, v| {
            let t = consts(g, &zt_mid);
            ufd_loss(g, v[0], &t, &cfg)
        }),
        vec![Tensor::randn(&[2, 3, 8, 8], 1.0, r)],
    ));
    checks.push((
        "ifd_loss",
        Box::new(move |g, v| {
            let t = g.constant(zt_late.clone());
            ifd_loss(g, v, t, &cfg)
        }),
        vec![Tensor::randn(&[2, 4, 4, 4], 1.0, r), Tensor::randn(&[2, 4, 2, 2], 1.0, r)],
    ));
    checks.push((
        "upd_loss",
        Box::new(move |g, v| {
            let s = g.softmax_channels(v[0])?;
            let t = consts(g, &pt_mid);
            upd_loss(g, s, &t, &cfg)
        }),
        vec![Tensor::randn(&[2, 2, 8, 8], 1.0, r)],
    ));
    let late = pt_late.clone();
    checks.push((
        "ipd_loss",
        Box::new(move |g, v| {
            let s0 = g.softmax_channels(v[0])?;
            let s1 = g.softmax_channels(v[1])?;
            let t = g.constant(late.clone());
            ipd_loss(g, &[s0, s1], t, &cfg)
        }),
        vec![Tensor::randn(&[2, 2, 4, 4], 1.0, r), Tensor::randn(&[2, 2, 2, 2], 1.0, r)],
    ));
    let masks: Vec<Mask> = (0..2)
        .map(|b| {
            let labels = (0..64).map(|p| u8::from((p * 7 + b * 3) % 5 < 2)).collect();
            Mask::new(8, 8, labels)
        })
        .collect::<Result<_>>()?;
    checks.push((
        "focal_dice_loss",
        Box::new(move |g, v| {
            let refs: Vec<&Mask> = masks.iter().collect();
            focal_dice_loss(g, v[0], &refs, &FocalDiceConfig::default())
        }),
        vec![Tensor::randn(&[2, 2, 8, 8], 1.0, r)],
    ));

    checks
        .into_iter()
        .map(|(name, f, inputs)| {
            Ok(CheckResult {
                name,
                max_rel_err: gradcheck(f, &inputs)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_matches_to_rounding() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 7.5]).unwrap();
        let err = gradcheck(|g, v| g.sum(v[0]), &[x]).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn reports_non_finite_op() {
        let x = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        let err = gradcheck(
            |g, v| {
                let l = g.ln(v[0])?;
                g.sum(l)
            },
            &[x],
        )
        .unwrap_err();
        assert!(matches!(err, HlfdError::NonFinite { op: "ln" }));
    }

    #[test]
    fn standard_suite_passes() {
        let results = standard_suite(0).unwrap();
        assert!(results.len() >= 30);
        for r in &results {
            assert!(r.passed(), "{} {}", r.name, r.max_rel_err);
        }
        for name in ["ufd_loss", "ifd_loss", "upd_loss", "ipd_loss", "focal_dice_loss"] {
            assert!(results.iter().any(|r| r.name == name));
        }
    }
}
