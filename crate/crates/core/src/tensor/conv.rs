//! 2-D convolution, its adjoint (transposed convolution) and the weight
//! gradient, as three mutually-differentiable operations.
//!
//! Kernels are im2col + GEMM, one sample at a time and single-threaded, so
//! results are bitwise reproducible. Weight gradients accumulate over samples
//! in index order.
//!
//! Layouts: inputs `(N, C, H, W)`, conv weights `(C_out, C_in, k, k)`.
//! `conv_transpose2d` takes the weight of the convolution it is the adjoint
//! of, i.e. `(C_in_of_transpose, C_out_of_transpose, k, k)`.

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// `floor((size + 2 pad - k) / stride) + 1`, or `None` when the kernel does
/// not fit in the padded input.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if k == 0 || stride == 0 || size + 2 * pad < k {
        return None;
    }
    Some((size + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn ckk(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.c_out * self.ohw()
    }
}

/// Writes sample `x`'s patches into columns `off..off + ohw` of a
/// `ckk x ld` column matrix.
fn im2col<T: Float>(x: &[T], g: &Geom, cols: &mut [T], ld: usize, off: usize) {
    let (k, s, p, ow) = (g.k, g.s, g.p as isize, g.ow);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((c * k + kh) * k + kw) * ld + off;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    let iy = (oy * s + kh) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 && kw as isize >= p && (ow - 1 + kw) as isize - p < g.w as isize {
                        let x0 = (kw as isize - p) as usize;
                        dst.copy_from_slice(&src[x0..x0 + ow]);
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kw) as isize - p;
                        *d = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns `off..off + ohw` into `x`.
fn col2im_add<T: Float>(cols: &[T], g: &Geom, x: &mut [T], ld: usize, off: usize) {
    let (k, s, p, ow) = (g.k, g.s, g.p as isize, g.ow);
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((c * k + kh) * k + kw) * ld + off;
                for oy in 0..g.oh {
                    let iy = (oy * s + kh) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s + kw) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Upper bound on column-matrix elements; batches are processed in chunks
/// of whole samples that fit.
const COLS_BUDGET: usize = 1 << 21;

fn chunks(g: &Geom) -> impl Iterator<Item = (usize, usize)> {
    let per = (COLS_BUDGET / (g.ckk() * g.ohw()).max(1)).clamp(1, g.n.max(1));
    let n = g.n;
    (0..n).step_by(per).map(move |i| (i, per.min(n - i)))
}

/// `(nb, c, ohw)` sample-major block to `(c, nb * ohw)` channel-major.
fn to_channel_major<T: Float>(src: &[T], nb: usize, c: usize, ohw: usize, dst: &mut [T]) {
    for i in 0..nb {
        for ch in 0..c {
            let from = &src[(i * c + ch) * ohw..(i * c + ch + 1) * ohw];
            dst[ch * nb * ohw + i * ohw..ch * nb * ohw + (i + 1) * ohw].copy_from_slice(from);
        }
    }
}

fn to_sample_major<T: Float>(src: &[T], nb: usize, c: usize, ohw: usize, dst: &mut [T]) {
    for i in 0..nb {
        for ch in 0..c {
            let from = &src[ch * nb * ohw + i * ohw..ch * nb * ohw + (i + 1) * ohw];
            dst[(i * c + ch) * ohw..(i * c + ch + 1) * ohw].copy_from_slice(from);
        }
    }
}

/// Stride-1 layers with few channels on one side: shifted row updates beat
/// building a column matrix that the GEMM would barely reuse.
fn use_direct(g: &Geom) -> bool {
    g.s == 1 && g.c_in.min(g.c_out) <= 4
}

/// Output positions `lo..hi` along one axis whose tap at kernel offset
/// `kk` lands inside `0..len`.
fn tap_span(out: usize, kk: usize, p: usize, len: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kk);
    let hi = (len + p).saturating_sub(kk).min(out);
    (lo, hi.max(lo))
}

/// Visits `(kh, kw, oy_span, ox_span)` for every kernel tap of a stride-1 geometry.
fn for_each_tap(g: &Geom, mut f: impl FnMut(usize, usize, (usize, usize), (usize, usize))) {
    for kh in 0..g.k {
        let ys = tap_span(g.oh, kh, g.p, g.h);
        for kw in 0..g.k {
            f(kh, kw, ys, tap_span(g.ow, kw, g.p, g.w));
        }
    }
}

fn direct_forward<T: Float>(x: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (hw, ohw, kk) = (g.h * g.w, g.ohw(), g.k * g.k);
    let mut out = vec![T::zero(); g.n * g.out_len()];
    for i in 0..g.n {
        for co in 0..g.c_out {
            let y = &mut out[(i * g.c_out + co) * ohw..][..ohw];
            for ci in 0..g.c_in {
                let plane = &x[(i * g.c_in + ci) * hw..][..hw];
                let wk = &w[(co * g.c_in + ci) * kk..][..kk];
                for_each_tap(g, |kh, kw, (y0, y1), (x0, x1)| {
                    let wv = wk[kh * g.k + kw];
                    for oy in y0..y1 {
                        let src = &plane[(oy + kh - g.p) * g.w + x0 + kw - g.p..][..x1 - x0];
                        let dst = &mut y[oy * g.ow + x0..oy * g.ow + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + wv * s;
                        }
                    }
                });
            }
        }
    }
    out
}

fn direct_input_grad<T: Float>(gy: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (hw, ohw, kk) = (g.h * g.w, g.ohw(), g.k * g.k);
    let mut gx = vec![T::zero(); g.n * g.in_len()];
    for i in 0..g.n {
        for ci in 0..g.c_in {
            let plane = &mut gx[(i * g.c_in + ci) * hw..][..hw];
            for co in 0..g.c_out {
                let up = &gy[(i * g.c_out + co) * ohw..][..ohw];
                let wk = &w[(co * g.c_in + ci) * kk..][..kk];
                for_each_tap(g, |kh, kw, (y0, y1), (x0, x1)| {
                    let wv = wk[kh * g.k + kw];
                    for oy in y0..y1 {
                        let dst = &mut plane[(oy + kh - g.p) * g.w + x0 + kw - g.p..][..x1 - x0];
                        for (d, &s) in dst.iter_mut().zip(&up[oy * g.ow + x0..oy * g.ow + x1]) {
                            *d = *d + wv * s;
                        }
                    }
                });
            }
        }
    }
    gx
}

fn direct_weight_grad<T: Float>(x: &[T], gy: &[T], g: &Geom) -> Vec<T> {
    let (hw, ohw, kk) = (g.h * g.w, g.ohw(), g.k * g.k);
    let mut gw = vec![T::zero(); g.c_out * g.ckk()];
    for i in 0..g.n {
        for co in 0..g.c_out {
            let up = &gy[(i * g.c_out + co) * ohw..][..ohw];
            for ci in 0..g.c_in {
                let plane = &x[(i * g.c_in + ci) * hw..][..hw];
                let wk = &mut gw[(co * g.c_in + ci) * kk..][..kk];
                for_each_tap(g, |kh, kw, (y0, y1), (x0, x1)| {
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let src = &plane[(oy + kh - g.p) * g.w + x0 + kw - g.p..][..x1 - x0];
                        for (&a, &b) in src.iter().zip(&up[oy * g.ow + x0..oy * g.ow + x1]) {
                            acc = acc + a * b;
                        }
                    }
                    wk[kh * g.k + kw] = wk[kh * g.k + kw] + acc;
                });
            }
        }
    }
    gw
}

fn forward_kernel<T: Float>(x: &[T], w: &[T], g: &Geom) -> Vec<T> {
    if use_direct(g) {
        return direct_forward(x, w, g);
    }
    let mut out = vec![T::zero(); g.n * g.out_len()];
    for (i0, nb) in chunks(g) {
        let ld = nb * g.ohw();
        let mut cols = vec![T::zero(); g.ckk() * ld];
        for j in 0..nb {
            let i = i0 + j;
            im2col(&x[i * g.in_len()..(i + 1) * g.in_len()], g, &mut cols, ld, j * g.ohw());
        }
        let mut y = vec![T::zero(); g.c_out * ld];
        T::gemm(g.c_out, g.ckk(), ld, w, false, &cols, false, &mut y, false);
        to_sample_major(&y, nb, g.c_out, g.ohw(), &mut out[i0 * g.out_len()..(i0 + nb) * g.out_len()]);
    }
    out
}

/// Adjoint of [`forward_kernel`] in its input.
fn input_grad_kernel<T: Float>(gy: &[T], w: &[T], g: &Geom) -> Vec<T> {
    if use_direct(g) {
        return direct_input_grad(gy, w, g);
    }
    let mut gx = vec![T::zero(); g.n * g.in_len()];
    for (i0, nb) in chunks(g) {
        let ld = nb * g.ohw();
        let mut gyc = vec![T::zero(); g.c_out * ld];
        to_channel_major(&gy[i0 * g.out_len()..(i0 + nb) * g.out_len()], nb, g.c_out, g.ohw(), &mut gyc);
        let mut cols = vec![T::zero(); g.ckk() * ld];
        T::gemm(g.ckk(), g.c_out, ld, w, true, &gyc, false, &mut cols, false);
        for j in 0..nb {
            let i = i0 + j;
            col2im_add(&cols, g, &mut gx[i * g.in_len()..(i + 1) * g.in_len()], ld, j * g.ohw());
        }
    }
    gx
}

fn weight_grad_kernel<T: Float>(x: &[T], gy: &[T], g: &Geom) -> Vec<T> {
    if use_direct(g) {
        return direct_weight_grad(x, gy, g);
    }
    let mut gw = vec![T::zero(); g.c_out * g.ckk()];
    for (n, (i0, nb)) in chunks(g).enumerate() {
        let ld = nb * g.ohw();
        let mut cols = vec![T::zero(); g.ckk() * ld];
        for j in 0..nb {
            let i = i0 + j;
            im2col(&x[i * g.in_len()..(i + 1) * g.in_len()], g, &mut cols, ld, j * g.ohw());
        }
        let mut gyc = vec![T::zero(); g.c_out * ld];
        to_channel_major(&gy[i0 * g.out_len()..(i0 + nb) * g.out_len()], nb, g.c_out, g.ohw(), &mut gyc);
        T::gemm(g.c_out, ld, g.ckk(), &gyc, false, &cols, true, &mut gw, n > 0);
    }
    gw
}

fn geometry_error(msg: String) -> Error {
    Error::InvalidArgument(msg)
}

fn square_kernel<T: Float>(w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match w.shape() {
        &[a, b, k, k2] if k == k2 => Ok((a, b, k)),
        s => Err(Error::InvalidShape(s.to_vec(), "expected square kernel (C_out, C_in, k, k)")),
    }
}

impl<T: Float> Tensor<T> {
    /// Zero-padded 2-D convolution (cross-correlation) without bias.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let (n, c_in, h, w) = self.dims4()?;
        let (c_out, wc_in, k) = square_kernel(weight)?;
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (Some(oh), Some(ow)) = (
            conv_output_size(h, k, stride, pad),
            conv_output_size(w, k, stride, pad),
        ) else {
            return Err(geometry_error(format!(
                "kernel {k} (stride {stride}, pad {pad}) does not fit input {h}x{w}"
            )));
        };
        let g = Geom { n, c_in, h, w, c_out, k, s: stride, p: pad, oh, ow };
        let out = forward_kernel(self.data(), weight.data(), &g);
        let (x, wt) = (self.clone(), weight.clone());
        Ok(Tensor::record(
            "conv2d",
            out,
            vec![n, c_out, oh, ow],
            vec![self.clone(), weight.clone()],
            move |gy, needs| {
                Ok(vec![
                    if needs[0] {
                        Some(gy.conv_transpose2d(&wt, stride, pad, Some((h, w)))?)
                    } else {
                        None
                    },
                    if needs[1] {
                        Some(x.conv2d_weight_grad(gy, k, stride, pad)?)
                    } else {
                        None
                    },
                ])
            },
        ))
    }

    /// Transposed convolution, defined as the adjoint of [`Tensor::conv2d`]
    /// with the same weight, stride and padding. `out_hw` defaults to
    /// `((H - 1) s - 2p + k, (W - 1) s - 2p + k)` and must map back to the
    /// input size under the forward convolution.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
        out_hw: Option<(usize, usize)>,
    ) -> Result<Tensor<T>> {
        let (n, c_y, oh, ow) = self.dims4()?;
        let (wc_y, c_x, k) = square_kernel(weight)?;
        if wc_y != c_y {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(geometry_error("stride must be positive".into()));
        }
        let (h, w) = match out_hw {
            Some(hw) => hw,
            None => {
                let full = |d: usize| ((d - 1) * stride + k).checked_sub(2 * pad);
                match (full(oh), full(ow)) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
                    _ => {
                        return Err(geometry_error(format!(
                            "transposed conv output collapses for input {oh}x{ow}"
                        )))
                    }
                }
            }
        };
        if conv_output_size(h, k, stride, pad) != Some(oh)
            || conv_output_size(w, k, stride, pad) != Some(ow)
        {
            return Err(geometry_error(format!(
                "output {h}x{w} is not consistent with input {oh}x{ow} (k {k}, s {stride}, p {pad})"
            )));
        }
        let g = Geom { n, c_in: c_x, h, w, c_out: c_y, k, s: stride, p: pad, oh, ow };
        let out = input_grad_kernel(self.data(), weight.data(), &g);
        let (y, wt) = (self.clone(), weight.clone());
        Ok(Tensor::record(
            "conv_transpose2d",
            out,
            vec![n, c_x, h, w],
            vec![self.clone(), weight.clone()],
            move |gz, needs| {
                Ok(vec![
                    if needs[0] { Some(gz.conv2d(&wt, stride, pad)?) } else { None },
                    if needs[1] {
                        Some(gz.conv2d_weight_grad(&y, k, stride, pad)?)
                    } else {
                        None
                    },
                ])
            },
        ))
    }

    /// Gradient of `<gy, conv2d(self, W)>` with respect to `W`, as an operation.
    pub(crate) fn conv2d_weight_grad(
        &self,
        gy: &Tensor<T>,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (n, c_in, h, w) = self.dims4()?;
        let (gn, c_out, oh, ow) = gy.dims4()?;
        if gn != n
            || conv_output_size(h, k, stride, pad) != Some(oh)
            || conv_output_size(w, k, stride, pad) != Some(ow)
        {
            return Err(Error::ShapeMismatch {
                op: "conv2d_weight_grad",
                lhs: self.shape().to_vec(),
                rhs: gy.shape().to_vec(),
            });
        }
        let g = Geom { n, c_in, h, w, c_out, k, s: stride, p: pad, oh, ow };
        let out = weight_grad_kernel(self.data(), gy.data(), &g);
        let (x, gyt) = (self.clone(), gy.clone());
        Ok(Tensor::record(
            "conv2d_weight_grad",
            out,
            vec![c_out, c_in, k, k],
            vec![self.clone(), gy.clone()],
            move |gw, needs| {
                Ok(vec![
                    if needs[0] {
                        Some(gyt.conv_transpose2d(gw, stride, pad, Some((h, w)))?)
                    } else {
                        None
                    },
                    if needs[1] { Some(x.conv2d(gw, stride, pad)?) } else { None },
                ])
            },
        ))
    }
}
