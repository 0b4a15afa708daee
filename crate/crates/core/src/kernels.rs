//! Raw numeric kernels on flat slices. Convolution is lowered to im2col + gemm.

use crate::scalar::Scalar;

/// Geometry of one 2-D convolution over a single `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` for row-major operands, where
/// `op(A)` is `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.col_cols();
    let mut col = vec![T::zero(); g.col_rows() * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

pub fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            prow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `[C_in,H,W] * [C_out,C_in,k,k] -> [C_out,Ho,Wo]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let n = g.col_cols();
    let mut out = vec![T::zero(); g.c_out * n];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b[o]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let col = im2col(x, g);
    gemm(g.c_out, g.col_rows(), n, T::one(), w, false, &col, false, beta, &mut out);
    out
}

/// Gradients of a convolution. `dw` (if given) is accumulated into.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
    dw: Option<&mut [T]>,
) -> Option<Vec<T>> {
    let n = g.col_cols();
    let rows = g.col_rows();
    if let Some(dw) = dw {
        let col = im2col(x, g);
        // dW[o, r] += sum_p dY[o, p] * col[r, p]
        gemm(g.c_out, n, rows, T::one(), dy, false, &col, true, T::one(), dw);
    }
    if want_dx {
        let mut dcol = vec![T::zero(); rows * n];
        // dcol[r, p] = sum_o W[o, r] * dY[o, p]
        gemm(rows, g.c_out, n, T::one(), w, true, dy, false, T::zero(), &mut dcol);
        let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
        col2im_add(&dcol, g, &mut dx);
        Some(dx)
    } else {
        None
    }
}

/// 3x3 depthwise filter with replicate padding; output has the input's shape.
pub fn depthwise3_replicate<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: &[T; 9]) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for dy in 0..3 {
                    let sy = (y + dy).saturating_sub(1).min(h - 1);
                    for dx in 0..3 {
                        let sx = (xx + dx).saturating_sub(1).min(w - 1);
                        acc += k[dy * 3 + dx] * plane[sy * w + sx];
                    }
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`depthwise3_replicate`].
pub fn depthwise3_replicate_adjoint<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: &[T; 9],
) -> Vec<T> {
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &dy[ch * h * w..(ch + 1) * h * w];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let gv = g[y * w + xx];
                if gv == T::zero() {
                    continue;
                }
                for dy_ in 0..3 {
                    let sy = (y + dy_).saturating_sub(1).min(h - 1);
                    for dx_ in 0..3 {
                        let sx = (xx + dx_).saturating_sub(1).min(w - 1);
                        dst[sy * w + sx] += k[dy_ * 3 + dx_] * gv;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_conv(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
        let mut out = vec![0.0f32; g.c_out * g.ho * g.wo];
        for o in 0..g.c_out {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0f64;
                    for c in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w[((o * g.c_in + c) * g.k + ky) * g.k + kx] as f64
                                    * x[(c * g.h + iy as usize) * g.w + ix as usize] as f64;
                            }
                        }
                    }
                    out[(o * g.ho + oy) * g.wo + ox] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn strided_conv_matches_loops() {
        let mut rng = Rng::new(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (2, 0), (1, 0)] {
            let g = ConvGeom::new(3, 9, 7, 5, 3, stride, pad).unwrap();
            let x: Vec<f32> = (0..3 * 9 * 7).map(|_| rng.normal(0.0, 1.0)).collect();
            let w: Vec<f32> = (0..5 * 3 * 9).map(|_| rng.normal(0.0, 1.0)).collect();
            let fast = conv2d_forward(&x, &w, None, &g);
            let slow = naive_conv(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn depthwise_adjoint_identity() {
        // <K x, y> == <x, K^T y>
        let mut rng = Rng::new(5);
        let (c, h, w) = (2, 5, 6);
        let k = [0.0f32, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.normal(0.0, 1.0)).collect();
        let y: Vec<f32> = (0..c * h * w).map(|_| rng.normal(0.0, 1.0)).collect();
        let kx = depthwise3_replicate(&x, c, h, w, &k);
        let kty = depthwise3_replicate_adjoint(&y, c, h, w, &k);
        let lhs: f64 = kx.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&kty).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }
}
