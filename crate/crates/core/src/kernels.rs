//! Raw numeric kernels behind the differentiable ops: convolution (direct and
//! im2col + GEMM), nearest upsampling and instance normalization.
//!
//! Spatial tensors of rank 2 are handled as rank 3 with a unit depth axis, so
//! every kernel here works on `[C, D, H, W]` buffers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial dims of a `[C, spatial...]` shape lifted to three axes.
pub fn lift_dims(spatial: &[usize]) -> Result<[usize; 3]> {
    match *spatial {
        [h, w] => Ok([1, h, w]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Error::UnsupportedRank(spatial.len())),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub rank: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if weight.len() < 2 {
            return Err(Error::shape(
                "weight",
                format!("weight shape {weight:?} lacks channel axes"),
            ));
        }
        let rank = weight.len() - 2;
        if rank != 2 && rank != 3 {
            return Err(Error::UnsupportedRank(rank));
        }
        if input.len() != rank + 1 {
            return Err(Error::shape(
                "rank",
                format!("input {input:?} is not [C, {rank} spatial axes] for weight {weight:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "convolution stride must be >= 1".into(),
            ));
        }
        let (c_out, c_in) = (weight[0], weight[1]);
        if input[0] != c_in {
            return Err(Error::shape(
                "channel axis",
                format!("input has {} channels, weight expects {c_in}", input[0]),
            ));
        }
        if let Some(b) = bias {
            if b != [c_out] {
                return Err(Error::shape(
                    "bias",
                    format!("bias {b:?} does not match {c_out} output channels"),
                ));
            }
        }
        for axis in 0..rank {
            let (s, k) = (input[1 + axis], weight[2 + axis]);
            if k == 0 || s + 2 * padding < k {
                return Err(Error::shape(
                    format!("spatial axis {axis}"),
                    format!("kernel {k} does not fit input {s} with padding {padding}"),
                ));
            }
        }
        let in_dims = lift_dims(&input[1..])?;
        let kernel = lift_dims(&weight[2..])?;
        let (stride, pad) = if rank == 2 {
            ([1, stride, stride], [0, padding, padding])
        } else {
            ([stride; 3], [padding; 3])
        };
        let mut out_dims = [0; 3];
        for a in 0..3 {
            out_dims[a] = (in_dims[a] + 2 * pad[a] - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            rank,
            c_in,
            c_out,
            in_dims,
            kernel,
            stride,
            pad,
            out_dims,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = vec![self.c_out];
        if self.rank == 2 {
            s.extend_from_slice(&self.out_dims[1..]);
        } else {
            s.extend_from_slice(&self.out_dims);
        }
        s
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn cols_rows(&self) -> usize {
        self.c_in * self.kernel_volume()
    }

    pub fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }
}

/// Range of output positions `o` along one axis for which
/// `o * stride + k - pad` lands inside `[0, size)`.
#[inline]
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // first o with o*stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // last o with o*stride + k - pad <= size - 1
    let hi = if size + pad < k + 1 {
        0
    } else {
        ((size + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Output positions handled per GEMM call; keeps the patch matrix of one
/// tile resident in cache.
const TILE_POSITIONS: usize = 256;

/// Tiles of whole output rows, as `(first_row, end_row)` over the flattened
/// `(z, y)` row index.
fn row_tiles(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let rows = g.out_dims[0] * g.out_dims[1];
    let per = (TILE_POSITIONS / g.out_dims[2].max(1)).max(1);
    (0..rows)
        .step_by(per)
        .map(move |r| (r, (r + per).min(rows)))
}

/// Unfold the input patches of output rows `[r0, r1)` into a
/// `[C_in·kvol, (r1 − r0)·out_w]` row-major matrix.
pub fn im2col(g: &ConvGeom, input: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [_, oh, ow] = g.out_dims;
    let n = (r1 - r0) * ow;
    cols[..g.cols_rows() * n].iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..g.c_in {
        let plane = &input[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(ow, iw, kx, sw, pw);
                    let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for r in r0..r1 {
                        let (oz, oy) = (r / oh, r % oh);
                        let z = (oz * sd + kz) as isize - pd as isize;
                        let y = (oy * sh + ky) as isize - ph as isize;
                        if z < 0 || y < 0 || z >= id as isize || y >= ih as isize {
                            continue;
                        }
                        let (z, y) = (z as usize, y as usize);
                        let src = &plane[(z * ih + y) * iw..(z * ih + y + 1) * iw];
                        let out_row = &mut dst[(r - r0) * ow..(r - r0 + 1) * ow];
                        if sw == 1 {
                            let x0 = x_lo + kx - pw;
                            out_row[x_lo..x_hi].copy_from_slice(&src[x0..x0 + (x_hi - x_lo)]);
                        } else {
                            for ox in x_lo..x_hi {
                                out_row[ox] = src[ox * sw + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column tile back onto the input grid.
pub fn col2im(g: &ConvGeom, cols: &[f64], r0: usize, r1: usize, input_grad: &mut [f64]) {
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [_, oh, ow] = g.out_dims;
    let n = (r1 - r0) * ow;
    for ci in 0..g.c_in {
        let plane = &mut input_grad[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(ow, iw, kx, sw, pw);
                    let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for r in r0..r1 {
                        let (oz, oy) = (r / oh, r % oh);
                        let z = (oz * sd + kz) as isize - pd as isize;
                        let y = (oy * sh + ky) as isize - ph as isize;
                        if z < 0 || y < 0 || z >= id as isize || y >= ih as isize {
                            continue;
                        }
                        let (z, y) = (z as usize, y as usize);
                        let dst = &mut plane[(z * ih + y) * iw..(z * ih + y + 1) * iw];
                        let col_row = &src[(r - r0) * ow..(r - r0 + 1) * ow];
                        if sw == 1 {
                            let x0 = x_lo + kx - pw;
                            dst[x0..x0 + (x_hi - x_lo)]
                                .iter_mut()
                                .zip(&col_row[x_lo..x_hi])
                                .for_each(|(d, v)| *d += v);
                        } else {
                            for ox in x_lo..x_hi {
                                dst[ox * sw + kx - pw] += col_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// A strided view of a matrix operand: element `(i, j)` lives at
/// `data[i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major buffer with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `dst (m×n) = a (m×k) · b (k×n)`, or `+=` when `accumulate` is set. `dst`
/// is addressed through `(dst_rs, dst_cs)` strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    dst: &mut [f64],
    dst_rs: usize,
    dst_cs: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * dst_rs + (n - 1) * dst_cs < dst.len());
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    dst[i * dst_rs + j * dst_cs] = 0.0;
                }
            }
        }
        return;
    }
    assert!(a.max_offset(m, k) < a.data.len() && b.max_offset(k, n) < b.data.len());
    // SAFETY: the asserts above bound every address reached through the
    // given strides, and `dst` is a unique borrow distinct from `a` and `b`.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_cs as isize,
            dst_rs as isize,
            accumulate,
            a.data.as_ptr(),
            a.col_stride as isize,
            a.row_stride as isize,
            b.data.as_ptr(),
            b.col_stride as isize,
            b.row_stride as isize,
            if accumulate { 1.0 } else { 0.0 },
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Convolution through tiled im2col + GEMM.
pub fn conv_im2col(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (k, p, ow) = (g.cols_rows(), g.out_volume(), g.out_dims[2]);
    let mut out = vec![0.0; g.c_out * p];
    let mut cols = vec![0.0; k * TILE_POSITIONS.max(ow)];
    for (r0, r1) in row_tiles(g) {
        let n = (r1 - r0) * ow;
        im2col(g, input, r0, r1, &mut cols);
        // out[:, tile]ᵀ (n × C_out) = colsᵀ (n × K) · Wᵀ (K × C_out)
        gemm(
            n,
            k,
            g.c_out,
            MatRef::transposed(&cols[..k * n], n),
            MatRef::transposed(weight, k),
            &mut out[r0 * ow..],
            1,
            p,
            false,
        );
    }
    if let Some(b) = bias {
        for (co, row) in out.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

/// Gradients of [`conv_im2col`], accumulated into whichever buffers are
/// given. Patch tiles are rebuilt from the input rather than stored.
#[allow(clippy::too_many_arguments)]
pub fn conv_im2col_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let (k, p, ow) = (g.cols_rows(), g.out_volume(), g.out_dims[2]);
    if let Some(gb) = grad_bias {
        for (co, row) in grad_out.chunks_exact(p).enumerate() {
            gb[co] += row.iter().sum::<f64>();
        }
    }
    let tile = TILE_POSITIONS.max(ow);
    let mut cols = vec![0.0; if grad_weight.is_some() { k * tile } else { 0 }];
    let mut dcols = vec![0.0; if grad_input.is_some() { k * tile } else { 0 }];
    for (r0, r1) in row_tiles(g) {
        let n = (r1 - r0) * ow;
        let dout = MatRef {
            data: &grad_out[r0 * ow..],
            row_stride: p,
            col_stride: 1,
        };
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(g, input, r0, r1, &mut cols);
            // gW (C_out × K) += dOut[:, tile] (C_out × n) · colsᵀ (n × K)
            gemm(
                g.c_out,
                n,
                k,
                dout,
                MatRef::transposed(&cols[..k * n], n),
                gw,
                k,
                1,
                true,
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // dcolsᵀ (n × K) = dOut[:, tile]ᵀ (n × C_out) · W (C_out × K)
            let dout_t = MatRef {
                data: dout.data,
                row_stride: 1,
                col_stride: p,
            };
            gemm(
                n,
                g.c_out,
                k,
                dout_t,
                MatRef::row_major(weight, k),
                &mut dcols,
                1,
                n,
                false,
            );
            col2im(g, &dcols, r0, r1, gi);
        }
    }
}

/// Output columns per register block of the 3×3 path.
const LANES: usize = 8;

/// 2D, 3×3, stride 1, padding 1 and rows at least [`LANES`] wide: the shape
/// of nearly every layer, served by a register-blocked AVX-512 kernel when
/// the CPU has one.
fn is_plain_3x3(g: &ConvGeom) -> bool {
    g.rank == 2
        && g.kernel == [1, 3, 3]
        && g.stride == [1; 3]
        && g.pad == [0, 1, 1]
        && g.out_dims[2] >= LANES
        && avx512::available()
}

/// Copy `[C, h, w]` planes into `[C, h + 2, w + 2]` with a zero border.
fn pad_planes(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = vec![0.0; c * (h + 2) * pw];
    for ci in 0..c {
        for y in 0..h {
            let d = (ci * (h + 2) + y + 1) * pw + 1;
            out[d..d + w].copy_from_slice(&src[(ci * h + y) * w..][..w]);
        }
    }
    out
}

/// Repack `[C_out, C_in, 3, 3]` weights as `[C_in, tap, C_out]`. With
/// `adjoint`, produce the weights of the transposed convolution instead:
/// channels swapped and taps mirrored.
fn repack_3x3(weight: &[f64], c_in: usize, c_out: usize, adjoint: bool) -> Vec<f64> {
    let mut out = vec![0.0; weight.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for tap in 0..9 {
                let v = weight[(co * c_in + ci) * 9 + tap];
                if adjoint {
                    out[(co * 9 + 8 - tap) * c_in + ci] = v;
                } else {
                    out[(ci * 9 + tap) * c_out + co] = v;
                }
            }
        }
    }
    out
}

/// Column blocks `(x, skip)` covering a row of width `w >= LANES`: the last
/// block is shifted left to stay in bounds and its first `skip` lanes
/// repeat columns already covered.
fn lane_blocks(w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..w).step_by(LANES).map(move |x0| {
        let x = x0.min(w - LANES);
        (x, x0 - x)
    })
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{lane_blocks, LANES};

    pub fn available() -> bool {
        is_x86_feature_detected!("avx512f")
    }

    /// `out[co0..co0 + CB] += conv3x3(padded, wt)`, `wt` packed by
    /// `repack_3x3`.
    ///
    /// # Safety
    /// AVX-512F must be available; buffer sizes must match the geometry.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn block<const CB: usize>(
        c_in: usize,
        c_out: usize,
        co0: usize,
        h: usize,
        w: usize,
        padded: &[f64],
        wt: &[f64],
        out: &mut [f64],
    ) {
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let (pp, wp, op) = (padded.as_ptr(), wt.as_ptr(), out.as_mut_ptr());
        for y in 0..h {
            for (x, skip) in lane_blocks(w) {
                let mut acc = [_mm512_setzero_pd(); CB];
                for ci in 0..c_in {
                    let base = ci * plane + y * pw + x;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let v = _mm512_loadu_pd(pp.add(base + ky * pw + kx));
                            let t = wp.add((ci * 9 + ky * 3 + kx) * c_out + co0);
                            for (c, a) in acc.iter_mut().enumerate() {
                                *a = _mm512_fmadd_pd(_mm512_set1_pd(*t.add(c)), v, *a);
                            }
                        }
                    }
                }
                let mask: __mmask8 = 0xff << skip;
                for (c, a) in acc.iter().enumerate() {
                    let o = op.add(((co0 + c) * h + y) * w + x);
                    let sum = _mm512_add_pd(_mm512_loadu_pd(o), *a);
                    _mm512_mask_storeu_pd(o, mask, sum);
                }
            }
        }
    }

    pub fn accumulate(
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
        padded: &[f64],
        wt: &[f64],
        out: &mut [f64],
    ) {
        assert!(available() && w >= LANES);
        assert!(
            padded.len() >= c_in * (h + 2) * (w + 2)
                && wt.len() >= c_in * c_out * 9
                && out.len() >= c_out * h * w
        );
        let mut co0 = 0;
        while co0 < c_out {
            // SAFETY: the feature and every buffer extent were checked above;
            // the widest load ends at column x + LANES + 1 < w + 2 of a
            // padded row and the widest store at column x + LANES <= w.
            let step = unsafe {
                match c_out - co0 {
                    n if n >= 8 => {
                        block::<8>(c_in, c_out, co0, h, w, padded, wt, out);
                        8
                    }
                    n if n >= 4 => {
                        block::<4>(c_in, c_out, co0, h, w, padded, wt, out);
                        4
                    }
                    _ => {
                        block::<1>(c_in, c_out, co0, h, w, padded, wt, out);
                        1
                    }
                }
            };
            co0 += step;
        }
    }

    /// `gw[co0..co0 + CB, ci] += Σ grad_out[co] · shifted input[ci]`.
    ///
    /// # Safety
    /// AVX-512F must be available; buffer sizes must match the geometry.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn weight_block<const CB: usize>(
        c_in: usize,
        ci: usize,
        co0: usize,
        h: usize,
        w: usize,
        padded: &[f64],
        grad_out: &[f64],
        gw: &mut [f64],
    ) {
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let (pp, gp) = (padded.as_ptr(), grad_out.as_ptr());
        let mut acc = [[_mm512_setzero_pd(); 9]; CB];
        for y in 0..h {
            for (x, skip) in lane_blocks(w) {
                let mask: __mmask8 = 0xff << skip;
                let mut g = [_mm512_setzero_pd(); CB];
                for (c, gc) in g.iter_mut().enumerate() {
                    *gc = _mm512_maskz_loadu_pd(mask, gp.add(((co0 + c) * h + y) * w + x));
                }
                let base = ci * plane + y * pw + x;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = _mm512_loadu_pd(pp.add(base + ky * pw + kx));
                        for c in 0..CB {
                            acc[c][ky * 3 + kx] = _mm512_fmadd_pd(g[c], v, acc[c][ky * 3 + kx]);
                        }
                    }
                }
            }
        }
        for (c, taps) in acc.iter().enumerate() {
            for (tap, a) in taps.iter().enumerate() {
                gw[((co0 + c) * c_in + ci) * 9 + tap] += _mm512_reduce_add_pd(*a);
            }
        }
    }

    pub fn weight_grad(
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
        padded: &[f64],
        grad_out: &[f64],
        gw: &mut [f64],
    ) {
        assert!(available() && w >= LANES);
        assert!(
            padded.len() >= c_in * (h + 2) * (w + 2)
                && grad_out.len() >= c_out * h * w
                && gw.len() >= c_in * c_out * 9
        );
        for ci in 0..c_in {
            let mut co0 = 0;
            while co0 < c_out {
                // SAFETY: as in `accumulate`; masked loads stay inside the row.
                unsafe {
                    if c_out - co0 >= 2 {
                        weight_block::<2>(c_in, ci, co0, h, w, padded, grad_out, gw);
                        co0 += 2;
                    } else {
                        weight_block::<1>(c_in, ci, co0, h, w, padded, grad_out, gw);
                        co0 += 1;
                    }
                }
            }
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod avx512 {
    pub fn available() -> bool {
        false
    }

    pub fn accumulate(_: usize, _: usize, _: usize, _: usize, _: &[f64], _: &[f64], _: &mut [f64]) {
        unreachable!("no AVX-512 on this target")
    }

    pub fn weight_grad(
        _: usize,
        _: usize,
        _: usize,
        _: usize,
        _: &[f64],
        _: &[f64],
        _: &mut [f64],
    ) {
        unreachable!("no AVX-512 on this target")
    }
}

/// Convolution forward pass, picking the fastest kernel for the geometry.
pub fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    if !is_plain_3x3(g) {
        return conv_im2col(g, input, weight, bias);
    }
    let [_, h, w] = g.in_dims;
    let padded = pad_planes(input, g.c_in, h, w);
    let wt = repack_3x3(weight, g.c_in, g.c_out, false);
    let mut out = vec![0.0; g.c_out * h * w];
    if let Some(b) = bias {
        for (co, row) in out.chunks_exact_mut(h * w).enumerate() {
            row.fill(b[co]);
        }
    }
    avx512::accumulate(g.c_in, g.c_out, h, w, &padded, &wt, &mut out);
    out
}

/// Gradients of [`conv_forward`], accumulated into whichever buffers are
/// given.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    if !is_plain_3x3(g) {
        return conv_im2col_backward(
            g,
            input,
            weight,
            grad_out,
            grad_input,
            grad_weight,
            grad_bias,
        );
    }
    let [_, h, w] = g.in_dims;
    if let Some(gb) = grad_bias {
        for (co, row) in grad_out.chunks_exact(h * w).enumerate() {
            gb[co] += row.iter().sum::<f64>();
        }
    }
    if let Some(gw) = grad_weight {
        let padded = pad_planes(input, g.c_in, h, w);
        avx512::weight_grad(g.c_in, g.c_out, h, w, &padded, grad_out, gw);
    }
    if let Some(gi) = grad_input {
        let padded = pad_planes(grad_out, g.c_out, h, w);
        let wt = repack_3x3(weight, g.c_in, g.c_out, true);
        avx512::accumulate(g.c_out, g.c_in, h, w, &padded, &wt, gi);
    }
}

/// Plain nested-loop cross-correlation.
pub fn conv_direct(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [od, oh, ow] = g.out_dims;
    let [pd, ph, pw] = g.pad.map(|v| v as isize);
    let mut out = vec![0.0; g.c_out * g.out_volume()];
    for co in 0..g.c_out {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..g.c_in {
                        for kz in 0..kd {
                            let z = (oz * sd + kz) as isize - pd;
                            if z < 0 || z >= id as isize {
                                continue;
                            }
                            for ky in 0..kh {
                                let y = (oy * sh + ky) as isize - ph;
                                if y < 0 || y >= ih as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let x = (ox * sw + kx) as isize - pw;
                                    if x < 0 || x >= iw as isize {
                                        continue;
                                    }
                                    let xi = ((ci * id + z as usize) * ih + y as usize) * iw
                                        + x as usize;
                                    let wi = (((co * g.c_in + ci) * kd + kz) * kh + ky) * kw + kx;
                                    acc += input[xi] * weight[wi];
                                }
                            }
                        }
                    }
                    out[((co * od + oz) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Which convolution path to run on plain tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvAlgo {
    Direct,
    Im2col,
    /// Whatever [`conv_forward`] picks.
    Auto,
}

/// Convolution on plain tensors (no tape), mostly for inference and tests.
pub fn conv_nd(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    algo: ConvAlgo,
) -> Result<Tensor> {
    let g = ConvGeom::new(
        input.shape(),
        weight.shape(),
        bias.map(|b| b.shape()),
        stride,
        padding,
    )?;
    let b = bias.map(|b| b.data());
    let out = match algo {
        ConvAlgo::Direct => conv_direct(&g, input.data(), weight.data(), b),
        ConvAlgo::Im2col => conv_im2col(&g, input.data(), weight.data(), b),
        ConvAlgo::Auto => conv_forward(&g, input.data(), weight.data(), b),
    };
    Tensor::new(g.out_shape(), out)
}

pub fn upsample_shape(shape: &[usize], factor: usize) -> Result<Vec<usize>> {
    if factor < 1 {
        return Err(Error::InvalidArgument(format!(
            "upsample factor must be >= 1, got {factor}"
        )));
    }
    if shape.len() < 3 {
        return Err(Error::UnsupportedRank(shape.len().saturating_sub(1)));
    }
    lift_dims(&shape[1..])?;
    let mut out = shape.to_vec();
    out[1..].iter_mut().for_each(|d| *d *= factor);
    Ok(out)
}

pub fn upsample_nearest(shape: &[usize], input: &[f64], factor: usize) -> Vec<f64> {
    let rank = shape.len() - 1;
    let [d, h, w] = lift_dims(&shape[1..]).expect("validated shape");
    let fz = if rank == 2 { 1 } else { factor };
    let (od, oh, ow) = (d * fz, h * factor, w * factor);
    let mut out = vec![0.0; shape[0] * od * oh * ow];
    for c in 0..shape[0] {
        for oz in 0..od {
            for oy in 0..oh {
                let src = &input[((c * d + oz / fz) * h + oy / factor) * w..][..w];
                let dst = &mut out[((c * od + oz) * oh + oy) * ow..][..ow];
                for (ox, v) in dst.iter_mut().enumerate() {
                    *v = src[ox / factor];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each replicated block.
pub fn upsample_nearest_backward(
    in_shape: &[usize],
    grad_out: &[f64],
    factor: usize,
    grad_in: &mut [f64],
) {
    let rank = in_shape.len() - 1;
    let [d, h, w] = lift_dims(&in_shape[1..]).expect("validated shape");
    let fz = if rank == 2 { 1 } else { factor };
    let (od, oh, ow) = (d * fz, h * factor, w * factor);
    for c in 0..in_shape[0] {
        for oz in 0..od {
            for oy in 0..oh {
                let src = &grad_out[((c * od + oz) * oh + oy) * ow..][..ow];
                let dst = &mut grad_in[((c * d + oz / fz) * h + oy / factor) * w..][..w];
                for (ox, v) in src.iter().enumerate() {
                    dst[ox / factor] += v;
                }
            }
        }
    }
}

/// Per-channel normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn instance_norm(
    channels: usize,
    x: &[f64],
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Vec<f64>, NormCache) {
    let n = x.len() / channels;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let xs = &x[c * n..(c + 1) * n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[c] = is;
        for i in 0..n {
            let h = (xs[i] - mean) * is;
            xhat[c * n + i] = h;
            y[c * n + i] = scale[c] * h + shift[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward(
    channels: usize,
    cache: &NormCache,
    scale: &[f64],
    grad_out: &[f64],
    grad_x: Option<&mut [f64]>,
    grad_scale: Option<&mut [f64]>,
    grad_shift: Option<&mut [f64]>,
) {
    let n = grad_out.len() / channels;
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for c in 0..channels {
        let dy = &grad_out[c * n..(c + 1) * n];
        let xh = &cache.xhat[c * n..(c + 1) * n];
        sum_dy[c] = dy.iter().sum();
        sum_dy_xhat[c] = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
    }
    if let Some(gs) = grad_scale {
        gs.iter_mut().zip(&sum_dy_xhat).for_each(|(g, v)| *g += v);
    }
    if let Some(gb) = grad_shift {
        gb.iter_mut().zip(&sum_dy).for_each(|(g, v)| *g += v);
    }
    if let Some(gx) = grad_x {
        let nf = n as f64;
        for c in 0..channels {
            let k = scale[c] * cache.inv_std[c] / nf;
            let dy = &grad_out[c * n..(c + 1) * n];
            let xh = &cache.xhat[c * n..(c + 1) * n];
            let out = &mut gx[c * n..(c + 1) * n];
            for i in 0..n {
                out[i] += k * (nf * dy[i] - sum_dy[c] - xh[i] * sum_dy_xhat[c]);
            }
        }
    }
}
