//! Raw compute kernels behind the differentiable operators: matrix products,
//! patch unfolding and convolution passes over contiguous slices.

use crate::scalar::Scalar;

/// Geometry of a strided, zero-padded square-kernel convolution between an
/// image of `channels × height × width` and its column grid `out_h × out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution; `None` if the kernel does not fit.
    pub fn conv(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution seen from its (larger) output.
    pub fn transposed(
        out_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || output_pad >= stride || in_h == 0 || in_w == 0 {
            return None;
        }
        let height = ((in_h - 1) * stride + kernel + output_pad).checked_sub(2 * pad)?;
        let width = ((in_w - 1) * stride + kernel + output_pad).checked_sub(2 * pad)?;
        let geom = Self::conv(out_channels, height, width, kernel, stride, pad)?;
        (geom.out_h == in_h && geom.out_w == in_w).then_some(geom)
    }

    #[inline]
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    #[inline]
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds every kernel window of `image` into a column of `cols`.
pub fn im2col<T: Scalar>(image: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let n_cols = g.col_cols();
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * n_cols);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `image`, accumulating.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let k = g.kernel;
    let n_cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
        let a_row = &a[i * k..(i + 1) * k];
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if aik == T::zero() {
                continue;
            }
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored as `k×m`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&aki, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            if aki == T::zero() {
                continue;
            }
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` where `b` is stored as `n×k`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            *cv += dot(a_row, b_row);
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (lane, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * i + lane] * b[4 * i + lane];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        total += a[i] * b[i];
    }
    total
}

/// Forward convolution of one batch entry. `weight` is `c_out × (c_in·k·k)`.
pub fn conv_forward<T: Scalar>(
    input: &[T],
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    cols: &mut Vec<T>,
    out: &mut [T],
) {
    cols.resize(g.col_rows() * g.col_cols(), T::zero());
    im2col(input, g, cols);
    let p = g.col_cols();
    match bias {
        Some(b) => {
            for (row, &bv) in out.chunks_exact_mut(p).zip(b) {
                row.fill(bv);
            }
        }
        None => out.fill(T::zero()),
    }
    gemm_nn(c_out, g.col_rows(), p, weight, cols, out);
}

/// Gradients of a forward convolution for one batch entry, accumulated into
/// `grad_input`, `grad_weight` and `grad_bias` when present.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    input: &[T],
    g: &ConvGeom,
    weight: &[T],
    c_out: usize,
    grad_out: &[T],
    cols: &mut Vec<T>,
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let rows = g.col_rows();
    let p = g.col_cols();
    if let Some(gb) = grad_bias {
        for (slot, row) in gb.iter_mut().zip(grad_out.chunks_exact(p)) {
            *slot += row.iter().copied().sum::<T>();
        }
    }
    if let Some(gw) = grad_weight {
        cols.resize(rows * p, T::zero());
        im2col(input, g, cols);
        gemm_nt(c_out, p, rows, grad_out, cols, gw);
    }
    if let Some(gi) = grad_input {
        cols.clear();
        cols.resize(rows * p, T::zero());
        gemm_tn(rows, c_out, p, weight, grad_out, cols);
        col2im(cols, g, gi);
    }
}

/// Transposed convolution of one batch entry. `g` describes the output image;
/// `weight` is `c_in × (c_out·k·k)`.
pub fn conv_transpose_forward<T: Scalar>(
    input: &[T],
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    cols: &mut Vec<T>,
    out: &mut [T],
) {
    let rows = g.col_rows();
    let p = g.col_cols();
    cols.clear();
    cols.resize(rows * p, T::zero());
    gemm_tn(rows, c_in, p, weight, input, cols);
    let plane = g.height * g.width;
    match bias {
        Some(b) => {
            for (chunk, &bv) in out.chunks_exact_mut(plane).zip(b) {
                chunk.fill(bv);
            }
        }
        None => out.fill(T::zero()),
    }
    col2im(cols, g, out);
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<T: Scalar>(
    input: &[T],
    g: &ConvGeom,
    weight: &[T],
    c_in: usize,
    grad_out: &[T],
    cols: &mut Vec<T>,
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let rows = g.col_rows();
    let p = g.col_cols();
    let plane = g.height * g.width;
    if let Some(gb) = grad_bias {
        for (slot, chunk) in gb.iter_mut().zip(grad_out.chunks_exact(plane)) {
            *slot += chunk.iter().copied().sum::<T>();
        }
    }
    if grad_input.is_none() && grad_weight.is_none() {
        return;
    }
    cols.resize(rows * p, T::zero());
    im2col(grad_out, g, cols);
    if let Some(gi) = grad_input {
        gemm_nn(c_in, rows, p, weight, cols, gi);
    }
    if let Some(gw) = grad_weight {
        gemm_nt(c_in, p, rows, input, cols, gw);
    }
}
