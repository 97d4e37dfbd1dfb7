//! Raw slice kernels behind the graph ops.
//!
//! Every output element accumulates its terms in a fixed order that does not
//! depend on how many rows are processed together, so a row computed inside a
//! padded batch is bit-identical to the same row computed alone.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `[k×m]` and `b` as `[k×n]`.
pub fn gemm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for (arow, brow) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&av, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a` stored as `[m×k]` and `b` as `[n×k]`.
pub fn gemm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_acc(c, a, &bt, m, k, n);
}

/// Transposes a row-major `[rows×cols]` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Geometry of one 2-D convolution over a `[C×H×W]` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_pixels()
    }
}

/// Unfolds one sample into a `[patch_len × out_pixels]` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pixels = g.out_pixels();
    let mut col = vec![0.0; g.patch_len() * pixels];
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[r * pixels..(r + 1) * pixels];
                for oy in 0..g.h_out {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let x_ = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x_ < 0 || x_ >= g.w as isize {
                            continue;
                        }
                        dst[oy * g.w_out + ox] = x[(ci * g.h + y as usize) * g.w + x_ as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im_acc(dx: &mut [f64], dcol: &[f64], g: &ConvGeom) {
    let pixels = g.out_pixels();
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let src = &dcol[r * pixels..(r + 1) * pixels];
                for oy in 0..g.h_out {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let x_ = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x_ < 0 || x_ >= g.w as isize {
                            continue;
                        }
                        dx[(ci * g.h + y as usize) * g.w + x_ as usize] += src[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let want = naive(&a, &b, 2, 3, 4);

        let mut c = vec![0.0; 8];
        gemm_acc(&mut c, &a, &b, 2, 3, 4);
        assert_eq!(c, want);

        let mut c = vec![0.0; 8];
        gemm_tn_acc(&mut c, &transpose(&a, 2, 3), &b, 2, 3, 4);
        assert_eq!(c, want);

        let mut c = vec![0.0; 8];
        gemm_nt_acc(&mut c, &a, &transpose(&b, 3, 4), 2, 3, 4);
        assert_eq!(c, want);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_808_009_391_723_24).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
