//! 3D convolution kernels (im2col + GEMM), processed in bounded column chunks.
//!
//! All kernels operate on a single batch item. Column matrices have one row per
//! `(input channel, kd, kh, kw)` tap and one column per output voxel.

use std::ops::Range;

use super::Element;

/// Target number of output voxels per im2col chunk.
/// Elements per im2col block; keeps the block resident in L2.
const CHUNK_ELEMS: usize = 1 << 17;

pub fn conv_output_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || n + 2 * padding < k {
        return None;
    }
    Some((n + 2 * padding - k) / stride + 1)
}

pub fn conv_transpose_output_extent(
    n: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if n == 0 || stride == 0 {
        return None;
    }
    let full = (n - 1) * stride + k;
    (full > 2 * padding).then(|| full - 2 * padding)
}

/// Geometry of a forward convolution `input -> output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output rows (flattened `od * H' + oh`) per chunk.
    fn rows_per_chunk(&self) -> usize {
        (CHUNK_ELEMS / self.taps().max(1) / self.output[2].max(1)).max(1)
    }

    fn chunks(&self) -> impl Iterator<Item = Range<usize>> {
        let total = self.output[0] * self.output[1];
        let step = self.rows_per_chunk();
        (0..total)
            .step_by(step)
            .map(move |start| start..(start + step).min(total))
    }

    /// Valid `ow` range for a kernel column offset, as `(lo, hi)`.
    fn valid_ow(&self, kw: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kw as isize - self.pad as isize;
        let w = self.input[2] as isize;
        let wo = self.output[2] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if w - 1 - off < 0 {
            0
        } else {
            ((w - 1 - off) / s + 1).min(wo)
        };
        (lo.min(wo) as usize, hi.max(0) as usize)
    }

    fn input_row(&self, row: usize, kd: usize, kh: usize) -> Option<usize> {
        let ho = self.output[1];
        let (od, oh) = (row / ho, row % ho);
        let id = (od * self.stride + kd) as isize - self.pad as isize;
        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
        let [d, h, w] = self.input;
        if id < 0 || ih < 0 || id >= d as isize || ih >= h as isize {
            return None;
        }
        Some((id as usize * h + ih as usize) * w)
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, rows: Range<usize>, cols: &mut [T]) {
    let wo = g.output[2];
    let n = rows.len() * wo;
    let k = g.k;
    let plane = g.in_spatial();
    for ci in 0..g.cin {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let r = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[r * n..(r + 1) * n];
                    let (lo, hi) = g.valid_ow(kw);
                    for (j, row) in rows.clone().enumerate() {
                        let seg = &mut dst[j * wo..(j + 1) * wo];
                        let base = match g.input_row(row, kd, kh) {
                            Some(b) if lo < hi => b,
                            _ => {
                                seg.fill(T::zero());
                                continue;
                            }
                        };
                        seg[..lo].fill(T::zero());
                        seg[hi..].fill(T::zero());
                        let first = base + lo * g.stride + kw - g.pad;
                        if g.stride == 1 {
                            seg[lo..hi].copy_from_slice(&xc[first..first + (hi - lo)]);
                        } else {
                            for (i, v) in seg[lo..hi].iter_mut().enumerate() {
                                *v = xc[first + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back into input layout.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, rows: Range<usize>, dx: &mut [T]) {
    let wo = g.output[2];
    let n = rows.len() * wo;
    let k = g.k;
    let plane = g.in_spatial();
    for ci in 0..g.cin {
        let xc = &mut dx[ci * plane..(ci + 1) * plane];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let r = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &cols[r * n..(r + 1) * n];
                    let (lo, hi) = g.valid_ow(kw);
                    if lo >= hi {
                        continue;
                    }
                    for (j, row) in rows.clone().enumerate() {
                        let Some(base) = g.input_row(row, kd, kh) else {
                            continue;
                        };
                        let seg = &src[j * wo + lo..j * wo + hi];
                        let first = base + lo * g.stride + kw - g.pad;
                        if g.stride == 1 {
                            for (d, s) in xc[first..first + seg.len()].iter_mut().zip(seg) {
                                *d += *s;
                            }
                        } else {
                            for (i, s) in seg.iter().enumerate() {
                                xc[first + i * g.stride] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[cout, P] = W[cout, taps] · cols(x)`. Overwrites `out`.
pub(crate) fn conv_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let p = g.out_spatial() as isize;
    let taps = g.taps();
    if g.is_pointwise() {
        unsafe {
            T::gemm(
                g.cout,
                taps,
                p as usize,
                T::one(),
                w.as_ptr(),
                taps as isize,
                1,
                x.as_ptr(),
                p,
                1,
                T::zero(),
                out.as_mut_ptr(),
                p,
                1,
            );
        }
        return;
    }
    let mut cols = Vec::new();
    for rows in g.chunks() {
        let c0 = rows.start * g.output[2];
        let n = rows.len() * g.output[2];
        cols.resize(taps * n, T::zero());
        im2col(x, g, rows, &mut cols);
        unsafe {
            T::gemm(
                g.cout,
                taps,
                n,
                T::one(),
                w.as_ptr(),
                taps as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr().add(c0),
                p,
                1,
            );
        }
    }
}

/// `dw[cout, taps] += dy[cout, P] · cols(x)ᵀ`.
pub(crate) fn conv_backward_weight<T: Element>(x: &[T], dy: &[T], g: &ConvGeom, dw: &mut [T]) {
    let p = g.out_spatial() as isize;
    let taps = g.taps();
    if g.is_pointwise() {
        unsafe {
            T::gemm(
                g.cout,
                p as usize,
                taps,
                T::one(),
                dy.as_ptr(),
                p,
                1,
                x.as_ptr(),
                1,
                p,
                T::one(),
                dw.as_mut_ptr(),
                taps as isize,
                1,
            );
        }
        return;
    }
    let mut cols = Vec::new();
    for rows in g.chunks() {
        let c0 = rows.start * g.output[2];
        let n = rows.len() * g.output[2];
        cols.resize(taps * n, T::zero());
        im2col(x, g, rows, &mut cols);
        unsafe {
            T::gemm(
                g.cout,
                n,
                taps,
                T::one(),
                dy.as_ptr().add(c0),
                p,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                T::one(),
                dw.as_mut_ptr(),
                taps as isize,
                1,
            );
        }
    }
}

/// `dx += col2im(Wᵀ · dy)`.
pub(crate) fn conv_backward_input<T: Element>(dy: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_spatial() as isize;
    let taps = g.taps();
    if g.is_pointwise() {
        unsafe {
            T::gemm(
                taps,
                g.cout,
                p as usize,
                T::one(),
                w.as_ptr(),
                1,
                taps as isize,
                dy.as_ptr(),
                p,
                1,
                T::one(),
                dx.as_mut_ptr(),
                p,
                1,
            );
        }
        return;
    }
    let mut cols = Vec::new();
    for rows in g.chunks() {
        let c0 = rows.start * g.output[2];
        let n = rows.len() * g.output[2];
        cols.resize(taps * n, T::zero());
        unsafe {
            T::gemm(
                taps,
                g.cout,
                n,
                T::one(),
                w.as_ptr(),
                1,
                taps as isize,
                dy.as_ptr().add(c0),
                p,
                1,
                T::zero(),
                cols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        col2im(&cols, g, rows, dx);
    }
}
