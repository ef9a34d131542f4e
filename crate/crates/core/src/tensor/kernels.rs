//! Raw numeric kernels on flat slices. All are single-threaded, so results
//! are reproducible run to run.

/// `out[m,n] += op(a) * op(b)` for row-major blocks, where `op(a)` is
/// `m x k` and is stored as `k x m` when `ta` is set (likewise `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(a: &[f64], ta: bool, b: &[f64], tb: bool, out: &mut [f64], m: usize, k: usize, n: usize) {
    let sa = if ta { (1, m) } else { (k, 1) };
    let sb = if tb { (1, k) } else { (n, 1) };
    gemm_strided(a, sa, b, sb, out, m, k, n);
}

/// `out[m,n] += A * B` where `A` and `B` are read through (row, column)
/// element strides.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Input pixel feeding output `(oy, ox)` through kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// NHWC input, `[kh, kw, ci, co]` weight, NHWC output.
pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.ho * g.wo * g.co];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = &mut out[((b * g.ho + oy) * g.wo + ox) * g.co..][..g.co];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let Some((y, x)) = g.src(oy, ox, ky, kx) else { continue };
                        let px = &input[((b * g.h + y) * g.w + x) * g.ci..][..g.ci];
                        let wk = &weight[(ky * g.kw + kx) * g.ci * g.co..][..g.ci * g.co];
                        for (c, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            for (oc, &wv) in o.iter_mut().zip(&wk[c * g.co..(c + 1) * g.co]) {
                                *oc += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a conv2d with respect to its input and weight.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut gin = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = &grad_out[((b * g.ho + oy) * g.wo + ox) * g.co..][..g.co];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let Some((y, x)) = g.src(oy, ox, ky, kx) else { continue };
                        let base = ((b * g.h + y) * g.w + x) * g.ci;
                        let wbase = (ky * g.kw + kx) * g.ci * g.co;
                        for c in 0..g.ci {
                            let v = input[base + c];
                            let wk = &weight[wbase + c * g.co..][..g.co];
                            let gwk = &mut gw[wbase + c * g.co..][..g.co];
                            let mut acc = 0.0;
                            for o in 0..g.co {
                                acc += go[o] * wk[o];
                                gwk[o] += go[o] * v;
                            }
                            gin[base + c] += acc;
                        }
                    }
                }
            }
        }
    }
    (gin, gw)
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub(crate) fn gelu_d1(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub(crate) fn gelu_d2(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let s = 1.0 - t * t;
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    let ddu = GELU_C * 6.0 * GELU_A * x;
    s * (du + 0.5 * x * ddu - x * t * du * du)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivatives_match_central_differences() {
        let h = 1e-5;
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let d1 = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let d2 = (gelu_d1(x + h) - gelu_d1(x - h)) / (2.0 * h);
            assert!((d1 - gelu_d1(x)).abs() < 1e-8, "d1 at {x}");
            assert!((d2 - gelu_d2(x)).abs() < 1e-8, "d2 at {x}");
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(&a, false, &b, false, &mut c, 2, 3, 4);
        // aᵀ stored as 3x2
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(&at, true, &b, false, &mut c2, 2, 3, 4);
        // bᵀ stored as 4x3
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c3 = vec![0.0; 8];
        gemm(&a, false, &bt, true, &mut c3, 2, 3, 4);
        assert_eq!(c, c2);
        assert_eq!(c, c3);
        assert_eq!(c[0], -2.0 * 0.0 + -1.0 * 2.0 + 0.0 * 4.0);
    }
}
