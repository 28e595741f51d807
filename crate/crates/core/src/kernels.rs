//! Slice-level forward and backward kernels behind the graph ops.
//!
//! All buffers are row-major NCHW. Convolution lowers each batch item to an
//! im2col matrix and runs a dense GEMM; results for one batch item never
//! depend on the other items in the batch.

use matrixmultiply::dgemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta·c`, with optional transposition of `a` or `b`
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major (or transposed) blocks whose lengths were checked.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = g.out_h() * g.out_w();
    let kk = g.patch_len();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * p;
    let mut out = vec![0.0; g.n * out_per];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
    for n in 0..g.n {
        let img = &input[n * in_per..(n + 1) * in_per];
        let dst = &mut out[n * out_per..(n + 1) * out_per];
        for (o, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        let b: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm(g.c_out, kk, p, weight, false, b, false, 1.0, dst);
    }
    out
}

/// Accumulates input, weight and bias gradients for a convolution given the
/// upstream gradient. Any of the destination buffers may be skipped.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let p = g.out_h() * g.out_w();
    let kk = g.patch_len();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * p;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcols = vec![0.0; kk * p];
    for n in 0..g.n {
        let img = &input[n * in_per..(n + 1) * in_per];
        let dout = &grad_out[n * out_per..(n + 1) * out_per];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (o, row) in dout.chunks_exact(p).enumerate() {
                gb[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            let b: &[f64] = if pointwise {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dW[o×kk] += dout[o×p] · colsᵀ[p×kk]
            gemm(g.c_out, p, kk, dout, false, b, true, 1.0, gw);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let dst = &mut gi[n * in_per..(n + 1) * in_per];
            if pointwise {
                gemm(kk, g.c_out, p, weight, true, dout, false, 1.0, dst);
            } else {
                gemm(kk, g.c_out, p, weight, true, dout, false, 0.0, &mut dcols);
                col2im(g, &dcols, dst);
            }
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled values and, per output
/// cell, the flat input index of the window maximum (first one on ties).
pub fn max_pool2_forward(n: usize, c: usize, h: usize, w: usize, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source coordinate and the two taps used by align-corners interpolation.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    (0..out_len)
        .map(|i| {
            let src = if out_len == 1 || in_len == 1 {
                0.0
            } else {
                i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every plane with the align-corners convention. Same-size
/// resizes return an exact copy.
pub fn bilinear_forward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, input: &[f64]) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return input.to_vec();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for y in &ty {
            let r0 = &src[y.lo * w..(y.lo + 1) * w];
            let r1 = &src[y.hi * w..(y.hi + 1) * w];
            for x in &tx {
                let top = r0[x.lo] * (1.0 - x.frac) + r0[x.hi] * x.frac;
                let bot = r1[x.lo] * (1.0 - x.frac) + r1[x.hi] * x.frac;
                out.push(top * (1.0 - y.frac) + bot * y.frac);
            }
        }
    }
    out
}

/// Transpose of [`bilinear_forward`]: accumulates `grad_out` into `grad_in`.
pub fn bilinear_backward(
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    if (h, w) == (oh, ow) {
        for (d, g) in grad_in.iter_mut().zip(grad_out) {
            *d += g;
        }
        return;
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    for p in 0..planes {
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y.lo * w + x.lo] += g * (1.0 - y.frac) * (1.0 - x.frac);
                dst[y.lo * w + x.hi] += g * (1.0 - y.frac) * x.frac;
                dst[y.hi * w + x.lo] += g * y.frac * (1.0 - x.frac);
                dst[y.hi * w + x.hi] += g * y.frac * x.frac;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    /// Direct nested-loop convolution.
    fn naive_conv(g: &ConvGeom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.n * g.c_out * oh * ow];
        for n in 0..g.n {
            for o in 0..g.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * wt[((o * g.c_in + c) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        out[((n * g.c_out + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_with_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(stride, padding, k) in &[(1, 1, 3), (2, 1, 3), (2, 0, 3), (1, 0, 1), (1, 2, 5)] {
            let g = ConvGeom { n: 2, c_in: 3, h: 9, w: 7, c_out: 4, k, stride, padding };
            let x = Tensor::randn(&[2, 3, 9, 7], 1.0, &mut rng);
            let wt = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[4], 1.0, &mut rng);
            let fast = conv2d_forward(&g, x.data(), wt.data(), b.data());
            let slow = naive_conv(&g, x.data(), wt.data(), b.data());
            let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "stride {stride} pad {padding}: {err}");
        }
    }

    #[test]
    fn bilinear_transpose_identity() {
        // <R x, y> == <x, Rᵀ y>
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 3, 5], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 7, 4], 1.0, &mut rng);
        let rx = bilinear_forward(2, 3, 5, 7, 4, x.data());
        let mut rty = vec![0.0; 30];
        bilinear_backward(2, 3, 5, 7, 4, y.data(), &mut rty);
        let lhs: f64 = rx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&rty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_ties_pick_first() {
        let (v, a) = max_pool2_forward(1, 1, 2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
