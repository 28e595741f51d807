//! Layer-selective feedback distillation losses.
//!
//! Feature level: the teacher's unified middle representation supervises the
//! student's early tap, and the teacher's late tap supervises every student
//! middle tap. Both compare L2-normalized spatial attention maps by mean
//! squared difference.
//!
//! Pixel level: the teacher's averaged middle predictive maps supervise the
//! student's early map, and the teacher's final map supervises every student
//! middle map, by per-pixel KL(student ‖ teacher).
//!
//! Student maps are always bilinearly resized to the teacher's spatial size.
//! Teacher vars are expected to be gradient-free (frozen parameters).

use crate::error::{HlfdError, Result};
use crate::graph::{Graph, Var};
use crate::nets::{FeatureTaps, PredictiveTaps};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    /// Weight of the feature-level term.
    pub beta: f64,
    /// Weight of the pixel-level term.
    pub lambda: f64,
    pub attention_power: f64,
    pub eps: f64,
    pub kl_floor: f64,
    /// Average the per-layer feature terms over the middle layers instead of
    /// summing them.
    pub normalize_ifd: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta: 0.9,
            lambda: 0.1,
            attention_power: 2.0,
            eps: 1e-8,
            kl_floor: 1e-12,
            normalize_ifd: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return Err(HlfdError::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.attention_power > 0.0) || !(self.eps >= 0.0) || !(self.kl_floor >= 0.0) {
            return Err(HlfdError::invalid("attention_power must be > 0, eps and kl_floor >= 0"));
        }
        Ok(())
    }
}

/// Scalar values of every term of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_ufd: f64,
    pub l_ifd: f64,
    pub l_upd: f64,
    pub l_ipd: f64,
    pub l_f: f64,
    pub l_p: f64,
    pub l_h: f64,
}

fn spatial(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    g.value(v).dims4(op)
}

/// Per-pixel `Σ_c |z_c|^p`, divided per batch item by `max(‖a‖₂, eps)`.
/// Returns N×1×H×W.
pub fn attention_map(g: &mut Graph, z: Var, power: f64, eps: f64) -> Result<Var> {
    let a = g.abs_pow(z, power)?;
    let a = g.sum_channels(a)?;
    let sq = g.mul(a, a)?;
    let ss = g.sum_per_sample(sq)?;
    let norm = g.sqrt(ss)?;
    let denom = g.clamp_min(norm, eps)?;
    g.div_per_sample(a, denom)
}

/// Unnormalized attention `Σ_c |z_c|^p` as plain values, for inspection.
pub fn raw_attention(g: &mut Graph, z: Var, power: f64) -> Result<Var> {
    let a = g.abs_pow(z, power)?;
    g.sum_channels(a)
}

fn smallest_spatial(g: &Graph, maps: &[Var], op: &'static str) -> Result<(usize, usize, usize)> {
    let first = *maps
        .first()
        .ok_or_else(|| HlfdError::invalid(format!("{op}: empty list")))?;
    let (n, _, mut h, mut w) = spatial(g, first, op)?;
    for &m in maps {
        let (n2, _, h2, w2) = spatial(g, m, op)?;
        if n2 != n {
            return Err(HlfdError::shape(op, format!("batch size {n2} vs {n}")));
        }
        if h2 * w2 < h * w {
            (h, w) = (h2, w2);
        }
    }
    Ok((n, h, w))
}

/// Resizes every middle feature map to the smallest spatial size among them
/// and concatenates along channels, preserving list order.
pub fn unify_mid_features(g: &mut Graph, z_mid: &[Var]) -> Result<Var> {
    let (_, h, w) = smallest_spatial(g, z_mid, "unify_mid_features")?;
    let resized = z_mid
        .iter()
        .map(|&z| g.bilinear_resize(z, h, w))
        .collect::<Result<Vec<_>>>()?;
    g.concat_channels(&resized)
}

/// Resizes every middle predictive map to the smallest spatial size, averages
/// them and renormalizes each pixel to sum to one.
pub fn unify_mid_predictions(g: &mut Graph, p_mid: &[Var]) -> Result<Var> {
    let (_, h, w) = smallest_spatial(g, p_mid, "unify_mid_predictions")?;
    let k = g.value(p_mid[0]).shape()[1];
    let mut acc: Option<Var> = None;
    for &p in p_mid {
        if g.value(p).shape()[1] != k {
            return Err(HlfdError::shape("unify_mid_predictions", "class count differs between maps"));
        }
        let r = g.bilinear_resize(p, h, w)?;
        acc = Some(match acc {
            None => r,
            Some(a) => g.add(a, r)?,
        });
    }
    let mean = g.scale(acc.expect("nonempty"), 1.0 / p_mid.len() as f64)?;
    g.normalize_channels(mean)
}

/// Mean squared difference between normalized attention maps of a student
/// feature map (resized to the teacher's spatial size) and a teacher map.
pub fn attention_loss(g: &mut Graph, z_s: Var, z_t: Var, cfg: &DistillConfig) -> Result<Var> {
    let (ns, _, _, _) = spatial(g, z_s, "attention_loss")?;
    let (nt, _, ht, wt) = spatial(g, z_t, "attention_loss")?;
    if ns != nt {
        return Err(HlfdError::shape("attention_loss", format!("batch {ns} vs {nt}")));
    }
    let zs = g.bilinear_resize(z_s, ht, wt)?;
    let a_s = attention_map(g, zs, cfg.attention_power, cfg.eps)?;
    let a_t = attention_map(g, z_t, cfg.attention_power, cfg.eps)?;
    let d = g.sub(a_s, a_t)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Mean over pixels of `Σ_k s_k (ln(s_k + floor) − ln(t_k + floor))`, with the
/// student map resized to the teacher's spatial size.
pub fn kl_map_loss(g: &mut Graph, p_s: Var, p_t: Var, cfg: &DistillConfig) -> Result<Var> {
    let (ns, ks, _, _) = spatial(g, p_s, "kl_map_loss")?;
    let (nt, kt, ht, wt) = spatial(g, p_t, "kl_map_loss")?;
    if ks != kt {
        return Err(HlfdError::shape("kl_map_loss", format!("{ks} vs {kt} classes")));
    }
    if ns != nt {
        return Err(HlfdError::shape("kl_map_loss", format!("batch {ns} vs {nt}")));
    }
    let s = g.bilinear_resize(p_s, ht, wt)?;
    let sf = g.add_scalar(s, cfg.kl_floor)?;
    let ls = g.ln(sf)?;
    let tf = g.add_scalar(p_t, cfg.kl_floor)?;
    let lt = g.ln(tf)?;
    let diff = g.sub(ls, lt)?;
    let terms = g.mul(s, diff)?;
    let per_pixel = g.sum_channels(terms)?;
    g.mean(per_pixel)
}

/// Teacher's unified middle features → student early tap.
pub fn ufd_loss(g: &mut Graph, z_s_early: Var, z_t_mid: &[Var], cfg: &DistillConfig) -> Result<Var> {
    let unified = unify_mid_features(g, z_t_mid)?;
    attention_loss(g, z_s_early, unified, cfg)
}

/// Teacher late tap → each student middle tap, summed over layers (or
/// averaged with `normalize_ifd`).
pub fn ifd_loss(g: &mut Graph, z_s_mid: &[Var], z_t_late: Var, cfg: &DistillConfig) -> Result<Var> {
    if z_s_mid.is_empty() {
        return Err(HlfdError::invalid("ifd_loss needs at least one student middle tap"));
    }
    let mut total: Option<Var> = None;
    for &z in z_s_mid {
        let l = attention_loss(g, z, z_t_late, cfg)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.expect("nonempty");
    if cfg.normalize_ifd {
        g.scale(total, 1.0 / z_s_mid.len() as f64)
    } else {
        Ok(total)
    }
}

/// Teacher's averaged middle predictive maps → student early map.
pub fn upd_loss(g: &mut Graph, p_s_early: Var, p_t_mid: &[Var], cfg: &DistillConfig) -> Result<Var> {
    let unified = unify_mid_predictions(g, p_t_mid)?;
    kl_map_loss(g, p_s_early, unified, cfg)
}

/// Teacher final predictive map → each student middle map, averaged over layers.
pub fn ipd_loss(g: &mut Graph, p_s_mid: &[Var], p_t_late: Var, cfg: &DistillConfig) -> Result<Var> {
    if p_s_mid.is_empty() {
        return Err(HlfdError::invalid("ipd_loss needs at least one student middle map"));
    }
    let mut total: Option<Var> = None;
    for &p in p_s_mid {
        let l = kl_map_loss(g, p, p_t_late, cfg)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    g.scale(total.expect("nonempty"), 1.0 / p_s_mid.len() as f64)
}

/// Graph vars of every term, so callers can backpropagate through `l_h`.
#[derive(Clone, Copy, Debug)]
pub struct HlfdVars {
    pub l_ufd: Var,
    pub l_ifd: Var,
    pub l_upd: Var,
    pub l_ipd: Var,
    pub l_f: Var,
    pub l_p: Var,
    pub l_h: Var,
}

/// `L_H = L_seg + β·(L_UFD + L_IFD) + λ·(L_UPD + L_IPD)`.
pub fn hlfd_total(
    g: &mut Graph,
    l_seg: Var,
    student: (&FeatureTaps, &PredictiveTaps),
    teacher: (&FeatureTaps, &PredictiveTaps),
    cfg: &DistillConfig,
) -> Result<(HlfdVars, LossBreakdown)> {
    cfg.validate()?;
    let (fs, ps) = student;
    let (ft, pt) = teacher;
    let l_ufd = ufd_loss(g, fs.z_early, &ft.z_mid, cfg)?;
    let l_ifd = ifd_loss(g, &fs.z_mid, ft.z_late, cfg)?;
    let l_upd = upd_loss(g, ps.p_early, &pt.p_mid, cfg)?;
    let l_ipd = ipd_loss(g, &ps.p_mid, pt.p_late, cfg)?;
    let l_f = g.add(l_ufd, l_ifd)?;
    let l_p = g.add(l_upd, l_ipd)?;
    let wf = g.scale(l_f, cfg.beta)?;
    let wp = g.scale(l_p, cfg.lambda)?;
    let h = g.add(l_seg, wf)?;
    let l_h = g.add(h, wp)?;
    let v = |var: Var| g.value(var).item();
    let breakdown = LossBreakdown {
        l_seg: v(l_seg),
        l_ufd: v(l_ufd),
        l_ifd: v(l_ifd),
        l_upd: v(l_upd),
        l_ipd: v(l_ipd),
        l_f: v(l_f),
        l_p: v(l_p),
        l_h: v(l_h),
    };
    Ok((
        HlfdVars { l_ufd, l_ifd, l_upd, l_ipd, l_f, l_p, l_h },
        breakdown,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut rng(seed))
    }

    /// Random per-pixel distributions via a plain softmax.
    fn rand_probs(shape: &[usize], seed: u64) -> Tensor {
        let t = rand_t(shape, seed);
        crate::graph::channel_softmax(&t, false).unwrap()
    }

    // Independent plain-loop oracles.

    fn oracle_resize(t: &Tensor, oh: usize, ow: usize) -> Tensor {
        let (n, c, h, w) = t.dims4("oracle").unwrap();
        let src = |y: usize, x: usize, p: usize| t.data()[p * h * w + y * w + x];
        let coord = |o: usize, out: usize, inp: usize| {
            if out == 1 { 0.0 } else { o as f64 * (inp - 1) as f64 / (out - 1) as f64 }
        };
        let mut out = Vec::new();
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let fy = coord(oy, oh, h);
                    let fx = coord(ox, ow, w);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                    let top = src(y0, x0, p) * (1.0 - dx) + src(y0, x1, p) * dx;
                    let bot = src(y1, x0, p) * (1.0 - dx) + src(y1, x1, p) * dx;
                    out.push(top * (1.0 - dy) + bot * dy);
                }
            }
        }
        Tensor::new(vec![n, c, oh, ow], out).unwrap()
    }

    fn oracle_attention(t: &Tensor, eps: f64) -> Vec<Vec<f64>> {
        let (n, c, h, w) = t.dims4("oracle").unwrap();
        (0..n)
            .map(|b| {
                let a: Vec<f64> = (0..h * w)
                    .map(|p| (0..c).map(|ch| t.data()[(b * c + ch) * h * w + p].powi(2)).sum())
                    .collect();
                let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
                a.iter().map(|v| v / norm).collect()
            })
            .collect()
    }

    fn oracle_attention_loss(zs: &Tensor, zt: &Tensor, eps: f64) -> f64 {
        let (_, _, h, w) = zt.dims4("oracle").unwrap();
        let a = oracle_attention(&oracle_resize(zs, h, w), eps);
        let b = oracle_attention(zt, eps);
        let diffs: Vec<f64> = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).collect();
        diffs.iter().sum::<f64>() / diffs.len() as f64
    }

    fn oracle_kl(ps: &Tensor, pt: &Tensor, floor: f64) -> f64 {
        let (n, k, h, w) = pt.dims4("oracle").unwrap();
        let s = oracle_resize(ps, h, w);
        let mut total = 0.0;
        for b in 0..n {
            for p in 0..h * w {
                for c in 0..k {
                    let i = (b * k + c) * h * w + p;
                    let sv = s.data()[i];
                    total += sv * ((sv + floor).ln() - (pt.data()[i] + floor).ln());
                }
            }
        }
        total / (n * h * w) as f64
    }

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn raw_attention_of_opposite_channels() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, -1.0]).unwrap());
        let a = raw_attention(&mut g, z, 2.0).unwrap();
        assert_eq!(g.value(a).data(), &[2.0]);
    }

    #[test]
    fn constant_input_gives_uniform_attention() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(&[2, 3, 4, 5], -0.7));
        let a = attention_map(&mut g, z, 2.0, 0.0).unwrap();
        let expect = 1.0 / 20f64.sqrt();
        assert!(g.value(a).data().iter().all(|v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn attention_matches_oracle_and_is_scale_invariant() {
        let z = rand_t(&[2, 3, 4, 4], 1);
        let oracle = oracle_attention(&z, 1e-8);
        for c in [1.0, -3.0, 0.5, 10.0] {
            let mut g = Graph::new();
            let zv = g.constant(z.scale(c));
            let a = attention_map(&mut g, zv, 2.0, 0.0).unwrap();
            for (x, y) in g.value(a).data().iter().zip(oracle.iter().flatten()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unify_features_shapes_and_order() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 32, 16, 16], 1.5));
        let b = g.constant(Tensor::full(&[1, 64, 8, 8], -2.0));
        let u = unify_mid_features(&mut g, &[a, b]).unwrap();
        let t = g.value(u);
        assert_eq!(t.shape(), &[1, 96, 8, 8]);
        assert!(t.data()[..32 * 64].iter().all(|&v| v == 1.5));
        assert!(t.data()[32 * 64..].iter().all(|&v| v == -2.0));

        let z = rand_t(&[2, 3, 4, 4], 2);
        let single = g.constant(z.clone());
        let u = unify_mid_features(&mut g, &[single]).unwrap();
        assert_eq!(g.value(u), &z);
        assert!(unify_mid_features(&mut g, &[]).is_err());
    }

    #[test]
    fn unify_predictions_averages() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![0.2, 0.8]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![0.6, 0.4]).unwrap());
        let u = unify_mid_predictions(&mut g, &[a, b]).unwrap();
        let d = g.value(u).data();
        assert!((d[0] - 0.4).abs() < 1e-15 && (d[1] - 0.6).abs() < 1e-15);

        let p = rand_probs(&[2, 2, 4, 4], 3);
        let pv = g.constant(p.clone());
        let one = unify_mid_predictions(&mut g, &[pv]).unwrap();
        assert!(g.value(one).max_abs_diff(&p) < 1e-12);
        let two = unify_mid_predictions(&mut g, &[pv, pv]).unwrap();
        assert!(g.value(two).max_abs_diff(&p) < 1e-12);
        assert!(unify_mid_predictions(&mut g, &[]).is_err());
    }

    #[test]
    fn ufd_zero_at_self_and_point_masses() {
        let cfg = DistillConfig::default();
        let zt = rand_t(&[2, 4, 4, 4], 4);
        // a single channel carrying sqrt of the unified attention reproduces it
        let l = eval(|g| {
            let t = g.constant(zt.clone());
            let unified = unify_mid_features(g, &[t])?;
            let a = raw_attention(g, unified, 2.0)?;
            let s = g.sqrt(a)?;
            ufd_loss(g, s, &[t], &cfg)
        });
        assert!(l.abs() < 1e-9, "{l}");

        // two unit masses on different pixels of an M-pixel map
        let m = 16;
        let mut s = vec![0.0; m];
        let mut t = vec![0.0; m];
        s[3] = 1.0;
        t[10] = 1.0;
        let l = eval(|g| {
            let sv = g.constant(Tensor::new(vec![1, 1, 4, 4], s).unwrap());
            let tv = g.constant(Tensor::new(vec![1, 1, 4, 4], t).unwrap());
            ufd_loss(g, sv, &[tv], &cfg)
        });
        assert!((l - 2.0 / m as f64).abs() < 1e-12);
    }

    #[test]
    fn feature_losses_scale_invariant() {
        let cfg = DistillConfig::default();
        let zs = rand_t(&[2, 3, 8, 8], 5);
        let zt_mid = [rand_t(&[2, 5, 4, 4], 6), rand_t(&[2, 6, 2, 2], 7)];
        let zt_late = rand_t(&[2, 8, 2, 2], 8);
        let ufd = |c: f64| {
            eval(|g| {
                let s = g.constant(zs.scale(c));
                let t: Vec<Var> = zt_mid.iter().map(|t| g.constant(t.clone())).collect();
                ufd_loss(g, s, &t, &cfg)
            })
        };
        let ifd = |c: f64| {
            eval(|g| {
                let s = g.constant(zs.scale(c));
                let t = g.constant(zt_late.clone());
                ifd_loss(g, &[s, s], t, &cfg)
            })
        };
        let (u0, i0) = (ufd(1.0), ifd(1.0));
        for c in [0.5, 2.0, 10.0, -1.0] {
            assert!((ufd(c) - u0).abs() < 1e-10);
            assert!((ifd(c) - i0).abs() < 1e-10);
        }
    }

    #[test]
    fn ifd_sums_and_matches_oracle() {
        let mut cfg = DistillConfig::default();
        let mids = [rand_t(&[2, 3, 8, 8], 9), rand_t(&[2, 4, 4, 4], 10), rand_t(&[2, 2, 2, 2], 11)];
        let late = rand_t(&[2, 6, 4, 4], 12);
        let run = |cfg: &DistillConfig, mids: &[Tensor]| {
            eval(|g| {
                let s: Vec<Var> = mids.iter().map(|t| g.constant(t.clone())).collect();
                let t = g.constant(late.clone());
                ifd_loss(g, &s, t, cfg)
            })
        };
        let oracle: f64 = mids.iter().map(|m| oracle_attention_loss(m, &late, cfg.eps)).sum();
        assert!((run(&cfg, &mids) - oracle).abs() < 1e-12);

        let single = run(&cfg, &mids[..1]);
        let copies = [mids[0].clone(), mids[0].clone(), mids[0].clone()];
        assert!((run(&cfg, &copies) - 3.0 * single).abs() < 1e-12);
        cfg.normalize_ifd = true;
        assert!((run(&cfg, &copies) - single).abs() < 1e-12);

        let mut g = Graph::new();
        let t = g.constant(late.clone());
        assert!(ifd_loss(&mut g, &[], t, &cfg).is_err());
        assert!(ipd_loss(&mut g, &[], t, &cfg).is_err());
    }

    #[test]
    fn ufd_matches_oracle() {
        let cfg = DistillConfig::default();
        let zs = rand_t(&[2, 3, 8, 8], 13);
        let zt_mid = [rand_t(&[2, 2, 4, 4], 14), rand_t(&[2, 3, 2, 2], 15)];
        let l = eval(|g| {
            let s = g.constant(zs.clone());
            let t: Vec<Var> = zt_mid.iter().map(|t| g.constant(t.clone())).collect();
            ufd_loss(g, s, &t, &cfg)
        });
        // unified teacher map: first mid resized to 2x2, concatenated with the second
        let r = oracle_resize(&zt_mid[0], 2, 2);
        let mut cat = Vec::new();
        for b in 0..2 {
            cat.extend_from_slice(&r.data()[b * 8..(b + 1) * 8]);
            cat.extend_from_slice(&zt_mid[1].data()[b * 12..(b + 1) * 12]);
        }
        let unified = Tensor::new(vec![2, 5, 2, 2], cat).unwrap();
        assert!((l - oracle_attention_loss(&zs, &unified, cfg.eps)).abs() < 1e-12);
    }

    #[test]
    fn kl_values_and_asymmetry() {
        let cfg = DistillConfig::default();
        let kl = |s: Vec<f64>, t: Vec<f64>| {
            eval(|g| {
                let sv = g.constant(Tensor::new(vec![1, 2, 1, 1], s).unwrap());
                let tv = g.constant(Tensor::new(vec![1, 2, 1, 1], t).unwrap());
                upd_loss(g, sv, &[tv], &cfg)
            })
        };
        assert!((kl(vec![1.0, 0.0], vec![0.5, 0.5]) - 2f64.ln()).abs() < 1e-9);
        let ab = kl(vec![0.9, 0.1], vec![0.3, 0.7]);
        let ba = kl(vec![0.3, 0.7], vec![0.9, 0.1]);
        assert!((ab - ba).abs() > 1e-3);
        assert!(kl(vec![0.3, 0.7], vec![0.3, 0.7]).abs() < 1e-12);
    }

    #[test]
    fn pixel_losses_match_oracles() {
        let cfg = DistillConfig::default();
        let ps_early = rand_probs(&[2, 2, 8, 8], 16);
        let pt_mid = [rand_probs(&[2, 2, 4, 4], 17), rand_probs(&[2, 2, 8, 8], 18)];
        let l = eval(|g| {
            let s = g.constant(ps_early.clone());
            let t: Vec<Var> = pt_mid.iter().map(|t| g.constant(t.clone())).collect();
            upd_loss(g, s, &t, &cfg)
        });
        let r = oracle_resize(&pt_mid[1], 4, 4);
        let avg: Vec<f64> = pt_mid[0].data().iter().zip(r.data()).map(|(a, b)| (a + b) / 2.0).collect();
        let avg = Tensor::new(vec![2, 2, 4, 4], avg).unwrap();
        assert!((l - oracle_kl(&ps_early, &avg, cfg.kl_floor)).abs() < 1e-12);
        assert!(l >= -1e-9);

        let ps_mid = [rand_probs(&[2, 2, 4, 4], 19), rand_probs(&[2, 2, 2, 2], 20)];
        let pt_late = rand_probs(&[2, 2, 8, 8], 21);
        let run = |mids: &[Tensor]| {
            eval(|g| {
                let s: Vec<Var> = mids.iter().map(|t| g.constant(t.clone())).collect();
                let t = g.constant(pt_late.clone());
                ipd_loss(g, &s, t, &cfg)
            })
        };
        let oracle = ps_mid.iter().map(|m| oracle_kl(m, &pt_late, cfg.kl_floor)).sum::<f64>() / 2.0;
        assert!((run(&ps_mid) - oracle).abs() < 1e-12);
        let copies = [ps_mid[0].clone(), ps_mid[0].clone(), ps_mid[0].clone()];
        assert!((run(&copies) - run(&ps_mid[..1])).abs() < 1e-12);

        let same = eval(|g| {
            let t = g.constant(pt_late.clone());
            ipd_loss(g, &[t, t], t, &cfg)
        });
        assert!(same.abs() < 1e-9);
    }

    #[test]
    fn kl_rejects_class_mismatch() {
        let mut g = Graph::new();
        let s = g.constant(rand_probs(&[1, 2, 2, 2], 22));
        let t = g.constant(rand_probs(&[1, 3, 2, 2], 23));
        assert!(kl_map_loss(&mut g, s, t, &DistillConfig::default()).is_err());
        let t2 = g.constant(rand_probs(&[2, 2, 2, 2], 24));
        assert!(attention_loss(&mut g, s, t2, &DistillConfig::default()).is_err());
    }

    #[test]
    fn losses_nonnegative_on_random_inputs() {
        let cfg = DistillConfig::default();
        for seed in 0..20 {
            let zs = rand_t(&[1, 2, 4, 4], 100 + seed);
            let zt = rand_t(&[1, 3, 2, 2], 200 + seed);
            let ps = rand_probs(&[1, 2, 4, 4], 300 + seed);
            let pt = rand_probs(&[1, 2, 2, 2], 400 + seed);
            let f = eval(|g| {
                let s = g.constant(zs.clone());
                let t = g.constant(zt.clone());
                attention_loss(g, s, t, &cfg)
            });
            let p = eval(|g| {
                let s = g.constant(ps.clone());
                let t = g.constant(pt.clone());
                kl_map_loss(g, s, t, &cfg)
            });
            assert!(f >= -1e-9 && p >= -1e-9);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = DistillConfig::default();
        let zt_mid = [rand_t(&[1, 2, 4, 4], 30), rand_t(&[1, 2, 2, 2], 31)];
        let zt_late = rand_t(&[1, 3, 2, 2], 32);
        let pt_mid = [rand_probs(&[1, 2, 4, 4], 33), rand_probs(&[1, 2, 2, 2], 34)];
        let pt_late = rand_probs(&[1, 2, 4, 4], 35);
        let consts = |g: &mut Graph, ts: &[Tensor]| ts.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();

        let zs = rand_t(&[1, 2, 4, 4], 36);
        let err = gradcheck(|g, v| { let t = consts(g, &zt_mid); ufd_loss(g, v[0], &t, &cfg) }, &[zs.clone()]).unwrap();
        assert!(err < 1e-4, "ufd {err}");

        let zm = [rand_t(&[1, 2, 4, 4], 37), rand_t(&[1, 3, 2, 2], 38)];
        let err = gradcheck(
            |g, v| {
                let t = g.constant(zt_late.clone());
                ifd_loss(g, v, t, &cfg)
            },
            &zm,
        )
        .unwrap();
        assert!(err < 1e-4, "ifd {err}");

        // pixel-level losses take the student's logits through a softmax
        let logits = rand_t(&[1, 2, 4, 4], 39);
        let err = gradcheck(
            |g, v| {
                let s = g.softmax_channels(v[0])?;
                let t = consts(g, &pt_mid);
                upd_loss(g, s, &t, &cfg)
            },
            &[logits.clone()],
        )
        .unwrap();
        assert!(err < 1e-4, "upd {err}");

        let lm = [rand_t(&[1, 2, 2, 2], 40), rand_t(&[1, 2, 4, 4], 41)];
        let err = gradcheck(
            |g, v| {
                let s0 = g.softmax_channels(v[0])?;
                let s1 = g.softmax_channels(v[1])?;
                let t = g.constant(pt_late.clone());
                ipd_loss(g, &[s0, s1], t, &cfg)
            },
            &lm,
        )
        .unwrap();
        assert!(err < 1e-4, "ipd {err}");
    }

    fn taps(g: &mut Graph, seed: u64, teacher: bool) -> (FeatureTaps, PredictiveTaps) {
        let c = if teacher { 4 } else { 2 };
        let mut t = |shape: &[usize], s: u64| g.constant(rand_t(shape, seed * 100 + s));
        let f = FeatureTaps {
            z_early: t(&[2, c, 8, 8], 1),
            z_mid: vec![t(&[2, c, 4, 4], 2), t(&[2, c, 2, 2], 3)],
            z_late: t(&[2, c, 2, 2], 4),
        };
        let mut p = |shape: &[usize], s: u64| g.constant(rand_probs(shape, seed * 100 + s));
        let pr = PredictiveTaps {
            p_early: p(&[2, 2, 8, 8], 5),
            p_mid: vec![p(&[2, 2, 4, 4], 6), p(&[2, 2, 2, 2], 7)],
            p_late: p(&[2, 2, 8, 8], 8),
        };
        (f, pr)
    }

    #[test]
    fn combiner_identities() {
        let mut g = Graph::new();
        let (fs, ps) = taps(&mut g, 1, false);
        let (ft, pt) = taps(&mut g, 2, true);
        let l_seg = g.constant(Tensor::scalar(0.731));
        let cfg = DistillConfig::default();
        let (_, b) = hlfd_total(&mut g, l_seg, (&fs, &ps), (&ft, &pt), &cfg).unwrap();
        assert!((b.l_f - (b.l_ufd + b.l_ifd)).abs() < 1e-12);
        assert!((b.l_p - (b.l_upd + b.l_ipd)).abs() < 1e-12);
        assert!((b.l_h - (b.l_seg + 0.9 * b.l_f + 0.1 * b.l_p)).abs() < 1e-12);
        assert!(b.l_f > 0.0 && b.l_p > 0.0);

        let zero = DistillConfig { beta: 0.0, lambda: 0.0, ..cfg };
        let (_, b) = hlfd_total(&mut g, l_seg, (&fs, &ps), (&ft, &pt), &zero).unwrap();
        assert_eq!(b.l_h, 0.731);

        let bad = DistillConfig { beta: -1.0, ..cfg };
        assert!(hlfd_total(&mut g, l_seg, (&fs, &ps), (&ft, &pt), &bad).is_err());
        let bad = DistillConfig { lambda: f64::NAN, ..cfg };
        assert!(bad.validate().is_err());
    }
}
