//! 2-D convolution on CPU via im2col and GEMM, with hand-written backward
//! passes. candle's direct CPU kernels are several times slower at the sizes
//! used here.

use candle_core::{bail, CpuStorage, CustomOp2, Layout, Shape, Tensor};
use ndarray::{s, Array2, ArrayView2, ArrayView3, ArrayViewMut2, LinalgScalar};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
struct Geom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.ci * self.h * self.w
    }

    /// Input index feeding output index `o` at kernel offset `kx`.
    fn src(&self, o: usize, kx: usize, limit: usize) -> Option<usize> {
        (o * self.stride + kx).checked_sub(self.pad).filter(|&i| i < limit)
    }

    /// Output indices `lo..hi` whose input at offset `kx` lies inside
    /// `0..limit`, for `n` outputs.
    fn span(&self, kx: usize, limit: usize, n: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = (limit + self.pad).saturating_sub(kx).div_ceil(self.stride).min(n);
        (lo.min(hi), hi)
    }
}

fn im2col<T: LinalgScalar>(x: &[T], g: &Geom, mut col: ArrayViewMut2<T>) {
    let k = g.k;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = g.span(kx, g.w, g.wo);
                let first = (lo * g.stride + kx).saturating_sub(g.pad);
                let mut row = col.row_mut((c * k + ky) * k + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        dst.fill(T::zero());
                        continue;
                    };
                    let line = &plane[iy * g.w..(iy + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                    } else {
                        for (d, &v) in dst[lo..hi].iter_mut().zip(line[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: LinalgScalar>(col: ArrayView2<T>, g: &Geom, x: &mut [T]) {
    let k = g.k;
    for c in 0..g.ci {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = g.span(kx, g.w, g.wo);
                let first = (lo * g.stride + kx).saturating_sub(g.pad);
                let row = col.row((c * k + ky) * k + kx);
                let row = row.as_slice().expect("standard layout");
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                    let line = &mut plane[iy * g.w + first..(iy + 1) * g.w];
                    for (d, &v) in line.iter_mut().step_by(g.stride).zip(src) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Columns for the whole batch, `(ci*k*k, b*ho*wo)`.
fn batch_cols<T: LinalgScalar>(x: &[T], g: &Geom) -> Array2<T> {
    let n = g.cols();
    let mut col = Array2::zeros((g.rows(), g.b * n));
    for (i, xb) in x.chunks(g.in_len()).enumerate() {
        im2col(xb, g, col.slice_mut(s![.., i * n..(i + 1) * n]));
    }
    col
}

/// `(b, co, n)` data as a `(co, b*n)` matrix.
fn channels_first<T: LinalgScalar>(data: &[T], g: &Geom) -> Array2<T> {
    let v = ArrayView3::from_shape((g.b, g.co, g.cols()), data).expect("grad shape");
    let t = v.permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
    t.into_shape_with_order((g.co, g.b * g.cols())).expect("contiguous")
}

fn forward<T: LinalgScalar>(x: &[T], wt: &[T], g: &Geom) -> Vec<T> {
    let wm = ArrayView2::from_shape((g.co, g.rows()), wt).expect("weight shape");
    let col = batch_cols(x, g);
    let y = wm.dot(&col);
    let y = y.view().into_shape_with_order((g.co, g.b, g.cols())).expect("contiguous");
    y.permuted_axes([1, 0, 2]).as_standard_layout().into_owned().into_raw_vec_and_offset().0
}

fn grad_input<T: LinalgScalar>(gr: &[T], wt: &[T], g: &Geom) -> Vec<T> {
    let wm = ArrayView2::from_shape((g.co, g.rows()), wt).expect("weight shape");
    let col = wm.t().dot(&channels_first(gr, g));
    let n = g.cols();
    let mut dx = vec![T::zero(); g.b * g.in_len()];
    for (i, db) in dx.chunks_mut(g.in_len()).enumerate() {
        col2im(col.slice(s![.., i * n..(i + 1) * n]), g, db);
    }
    dx
}

fn grad_weight<T: LinalgScalar>(x: &[T], gr: &[T], g: &Geom) -> Vec<T> {
    let dw = channels_first(gr, g).dot(&batch_cols(x, g).t());
    dw.as_standard_layout().into_owned().into_raw_vec_and_offset().0
}

fn contiguous<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("conv kernels need contiguous inputs"),
    }
}

/// Runs `f` on matching f32 or f64 storages.
macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                CpuStorage::F64($body)
            }
            _ => bail!("conv kernels support matching f32 or f64 inputs"),
        }
    };
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> candle_core::Result<usize> {
    match (size + 2 * pad).checked_sub(k) {
        Some(n) => Ok(n / stride + 1),
        None => bail!("conv input {size} smaller than kernel {k}"),
    }
}

/// `y = conv(x, w)`; inputs `(b, ci, h, w)` and `(co, ci, k, k)`.
struct Conv {
    stride: usize,
    pad: usize,
}

/// `dx` from `dy` and `w`; this is also the transposed convolution.
struct ConvGradInput {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

/// `dw` from `x` and `dy`.
struct ConvGradWeight {
    stride: usize,
    pad: usize,
    k: usize,
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ci, h, w) = dims4(l1)?;
        let (co, ci2, k, k2) = dims4(l2)?;
        if ci != ci2 || k != k2 {
            bail!("conv weight {:?} does not fit input {:?}", l2.dims(), l1.dims());
        }
        let (ho, wo) = (out_size(h, k, self.stride, self.pad)?, out_size(w, k, self.stride, self.pad)?);
        let g = Geom { b, ci, h, w, co, k, stride: self.stride, pad: self.pad, ho, wo };
        let out = dispatch!(s1, l1, s2, l2, |x, wt| forward(x, wt, &g));
        Ok((out, Shape::from((b, co, ho, wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let dx = grad.apply_op2_no_bwd(w, &ConvGradInput { stride: self.stride, pad: self.pad, h, w: wd })?;
        let dw = x.apply_op2_no_bwd(&grad, &ConvGradWeight { stride: self.stride, pad: self.pad, k: w.dim(2)? })?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, co, ho, wo) = dims4(l1)?;
        let (co2, ci, k, _) = dims4(l2)?;
        if co != co2 || out_size(self.h, k, self.stride, self.pad)? != ho || out_size(self.w, k, self.stride, self.pad)? != wo {
            bail!("transposed conv shapes do not line up: {:?} {:?}", l1.dims(), l2.dims());
        }
        let g = Geom { b, ci, h: self.h, w: self.w, co, k, stride: self.stride, pad: self.pad, ho, wo };
        let out = dispatch!(s1, l1, s2, l2, |gr, wt| grad_input(gr, wt, &g));
        Ok((out, Shape::from((b, ci, self.h, self.w))))
    }

    fn bwd(&self, dy: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let d_dy = grad.apply_op2_no_bwd(w, &Conv { stride: self.stride, pad: self.pad })?;
        let dw = grad.apply_op2_no_bwd(dy, &ConvGradWeight { stride: self.stride, pad: self.pad, k: w.dim(2)? })?;
        Ok((Some(d_dy), Some(dw)))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ci, h, w) = dims4(l1)?;
        let (b2, co, ho, wo) = dims4(l2)?;
        let k = self.k;
        if b != b2 || out_size(h, k, self.stride, self.pad)? != ho || out_size(w, k, self.stride, self.pad)? != wo {
            bail!("weight gradient shapes do not line up: {:?} {:?}", l1.dims(), l2.dims());
        }
        let g = Geom { b, ci, h, w, co, k, stride: self.stride, pad: self.pad, ho, wo };
        let out = dispatch!(s1, l1, s2, l2, |x, gr| grad_weight(x, gr, &g));
        Ok((out, Shape::from((co, ci, k, k))))
    }
}

/// Square-kernel convolution, no dilation or groups.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, Conv { stride, pad })?)
}

/// Transposed convolution with weight `(in, out, k, k)` and no output
/// padding.
pub(crate) fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, _, h, wd) = x.dims4()?;
    let k = w.dim(2)?;
    let size = |n: usize| ((n - 1) * stride + k).checked_sub(2 * pad);
    let (Some(oh), Some(ow)) = (size(h), size(wd)) else {
        return Err(candle_core::Error::Msg("transposed conv output would be empty".into()).into());
    };
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, ConvGradInput { stride, pad, h: oh, w: ow })?)
}

/// Nearest-neighbour resize. Exact doubling goes through a broadcast, whose
/// backward is a plain sum.
pub(crate) fn upsample_nearest(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if th == 2 * h && tw == 2 * w {
        return Ok(x
            .reshape((b, c, h, 1, w, 1))?
            .broadcast_as((b, c, h, 2, w, 2))?
            .reshape((b, c, th, tw))?);
    }
    Ok(x.upsample_nearest2d(th, tw)?)
}
