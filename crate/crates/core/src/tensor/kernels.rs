//! Raw loops behind the graph ops. Matrix products go through `Scalar::gemm`.

use super::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]` (or `+=` when `accumulate`).
pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, beta, c);
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, beta, c);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Columns of the lowered input: one per (sample, output pixel).
    pub fn cols(&self) -> usize {
        self.n * self.out_plane()
    }
}

/// Lowers `x[N×C×H×W]` to a `[C·kh·kw, N·oh·ow]` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    let plane = g.out_plane();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for s in 0..g.n {
                    let xs = &x[(s * g.c + ci) * g.h * g.w..(s * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let dst = &mut row[s * plane + oy * g.ow..s * plane + (oy + 1) * g.ow];
                        if iy < 0 || iy as usize >= g.h {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &xs[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix as usize >= g.w { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx` (accumulating).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.cols();
    let plane = g.out_plane();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for s in 0..g.n {
                    let base = (s * g.c + ci) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            dx[base + iy as usize * g.w + ix as usize] += row[s * plane + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[F, N·P]` → `[N, F, P]`.
pub fn fold_channels<T: Scalar>(src: &[T], n: usize, f: usize, p: usize, dst: &mut [T]) {
    for fi in 0..f {
        for s in 0..n {
            dst[(s * f + fi) * p..(s * f + fi + 1) * p].copy_from_slice(&src[fi * n * p + s * p..fi * n * p + (s + 1) * p]);
        }
    }
}

/// `[N, F, P]` → `[F, N·P]`.
pub fn unfold_channels<T: Scalar>(src: &[T], n: usize, f: usize, p: usize, dst: &mut [T]) {
    for fi in 0..f {
        for s in 0..n {
            dst[fi * n * p + s * p..fi * n * p + (s + 1) * p].copy_from_slice(&src[(s * f + fi) * p..(s * f + fi + 1) * p]);
        }
    }
}
