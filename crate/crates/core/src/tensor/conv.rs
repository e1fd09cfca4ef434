//! im2col + GEMM convolution kernels.
//!
//! Images are processed in fixed-size chunks so that one GEMM sees many output
//! columns. The chunk size depends only on the problem shape, never on the
//! thread count, and partial weight gradients are reduced in chunk order: the
//! result is bit-identical however rayon schedules the chunks.

use rayon::prelude::*;

use super::Scalar;

/// Target number of GEMM columns per chunk.
const CHUNK_COLUMNS: usize = 4096;

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn images_per_chunk(&self) -> usize {
        (CHUNK_COLUMNS / self.pixels().max(1)).clamp(1, self.n.max(1))
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let per = self.images_per_chunk();
        (0..self.n).step_by(per).map(|start| (start, (start + per).min(self.n))).collect()
    }
}

/// Writes the patches of images `[start, end)` into `col` as a
/// `[patch, (end-start)·pixels]` row-major matrix.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeometry, start: usize, end: usize, col: &mut [S]) {
    let p = g.pixels();
    let cols = (end - start) * p;
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for (local, img) in (start..end).enumerate() {
                    let src = &x[(img * g.cin + ci) * plane..(img * g.cin + ci + 1) * plane];
                    let dst = &mut dst_row[local * p..(local + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if iy < 0 || iy as usize >= g.h {
                            out_row.iter_mut().for_each(|v| *v = S::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *v = if ix < 0 || ix as usize >= g.w { S::zero() } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `[patch, (end-start)·pixels]` matrix back onto the input
/// layout of images `[start, end)`; `dx` covers exactly those images.
fn col2im<S: Scalar>(col: &[S], g: &ConvGeometry, start: usize, end: usize, dx: &mut [S]) {
    let p = g.pixels();
    let cols = (end - start) * p;
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for local in 0..(end - start) {
                    let dst = &mut dx[(local * g.cin + ci) * plane..(local * g.cin + ci + 1) * plane];
                    let src = &src_row[local * p..(local + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst_row[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<S: Scalar>(x: &[S], weight: &[S], g: &ConvGeometry) -> Vec<S> {
    let k = g.patch();
    let p = g.pixels();
    let chunks = g.chunks();
    let pieces: Vec<Vec<S>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let cols = (end - start) * p;
            let mut col = vec![S::zero(); k * cols];
            im2col(x, g, start, end, &mut col);
            let mut out = vec![S::zero(); g.cout * cols];
            S::gemm(
                g.cout,
                k,
                cols,
                S::one(),
                weight,
                (k as isize, 1),
                &col,
                (cols as isize, 1),
                S::zero(),
                &mut out,
                (cols as isize, 1),
            );
            // [cout, local·p] -> [local, cout, p]
            let mut reordered = vec![S::zero(); cols * g.cout];
            for local in 0..(end - start) {
                for co in 0..g.cout {
                    let src = &out[co * cols + local * p..co * cols + (local + 1) * p];
                    reordered[(local * g.cout + co) * p..(local * g.cout + co + 1) * p].copy_from_slice(src);
                }
            }
            reordered
        })
        .collect();
    pieces.concat()
}

pub(crate) struct ConvGrads<S> {
    pub dx: Option<Vec<S>>,
    pub dw: Option<Vec<S>>,
}

pub(crate) fn conv_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    dout: &[S],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<S> {
    let k = g.patch();
    let p = g.pixels();
    let chunks = g.chunks();
    let pieces: Vec<(Option<Vec<S>>, Option<Vec<S>>)> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let cols = (end - start) * p;
            // [local, cout, p] -> [cout, local·p]
            let mut dmat = vec![S::zero(); g.cout * cols];
            for local in 0..(end - start) {
                let img = start + local;
                for co in 0..g.cout {
                    let src = &dout[(img * g.cout + co) * p..(img * g.cout + co + 1) * p];
                    dmat[co * cols + local * p..co * cols + (local + 1) * p].copy_from_slice(src);
                }
            }
            let dw = need_dw.then(|| {
                let mut col = vec![S::zero(); k * cols];
                im2col(x, g, start, end, &mut col);
                let mut dw = vec![S::zero(); g.cout * k];
                // dW = dmat · colᵀ
                S::gemm(
                    g.cout,
                    cols,
                    k,
                    S::one(),
                    &dmat,
                    (cols as isize, 1),
                    &col,
                    (1, cols as isize),
                    S::zero(),
                    &mut dw,
                    (k as isize, 1),
                );
                dw
            });
            let dx = need_dx.then(|| {
                let mut dcol = vec![S::zero(); k * cols];
                // dcol = Wᵀ · dmat
                S::gemm(
                    k,
                    g.cout,
                    cols,
                    S::one(),
                    weight,
                    (1, k as isize),
                    &dmat,
                    (cols as isize, 1),
                    S::zero(),
                    &mut dcol,
                    (cols as isize, 1),
                );
                let mut dx = vec![S::zero(); (end - start) * g.cin * g.h * g.w];
                col2im(&dcol, g, start, end, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.n * g.cin * g.h * g.w));
    let mut dw_all = need_dw.then(|| vec![S::zero(); g.cout * k]);
    for (dx, dw) in pieces {
        if let (Some(all), Some(part)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&part);
        }
        if let (Some(all), Some(part)) = (dw_all.as_mut(), dw) {
            for (a, b) in all.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    ConvGrads { dx: dx_all, dw: dw_all }
}
