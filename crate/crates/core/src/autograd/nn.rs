//! Convolution and dense layers (im2col + GEMM).

use super::{BackwardCtx, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1, "same" zero padding for an odd kernel `k` at dilation `d`.
    pub const fn same(k: usize, d: usize) -> Self {
        Self::new(1, d * (k - 1) / 2, d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeSpec {
    pub stride: usize,
    pub padding: usize,
}

/// Below this many output positions per image, a convolution folds the batch
/// into one GEMM instead of one GEMM per image.
const BATCHED_COLS: usize = 256;

/// `[o, b·n]` to `[b, o, n]`.
fn unfold_batch<T: Copy>(flat: &[T], out: &mut [T], b: usize, o: usize, n: usize) {
    for bi in 0..b {
        for oc in 0..o {
            let src = (oc * b + bi) * n;
            out[(bi * o + oc) * n..][..n].copy_from_slice(&flat[src..src + n]);
        }
    }
}

/// `[b, o, n]` to `[o, b·n]`.
fn fold_batch<T: Copy>(g: &[T], flat: &mut [T], b: usize, o: usize, n: usize) {
    for bi in 0..b {
        for oc in 0..o {
            let dst = (oc * b + bi) * n;
            flat[dst..dst + n].copy_from_slice(&g[(bi * o + oc) * n..][..n]);
        }
    }
}

/// Geometry of a convolution seen from its (dense) input side.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec) -> Result<Self> {
        let Conv2dSpec {
            stride,
            padding: pad,
            dilation: dil,
        } = spec;
        if stride == 0 || dil == 0 {
            return Err(Error::validation("conv stride and dilation must be >= 1"));
        }
        let span_h = dil * (kh - 1) + 1;
        let span_w = dil * (kw - 1) + 1;
        if h + 2 * pad < span_h || w + 2 * pad < span_w {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input (pad {pad}) smaller than {span_h}x{span_w} kernel span"),
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            dil,
            ho: (h + 2 * pad - span_h) / stride + 1,
            wo: (w + 2 * pad - span_w) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output positions `o` in `[lo, hi)` whose input index `o*stride + off`
    /// lands inside `[0, len)`.
    #[inline]
    fn valid_range(off: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
        let s = stride as isize;
        let lo = if off >= 0 {
            0
        } else {
            (((-off) + s - 1) / s).min(out as isize)
        };
        let hi = if off >= len as isize {
            0
        } else {
            ((len as isize - 1 - off) / s + 1).min(out as isize)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }

    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        self.im2col_with(&self.taps(), x, col, self.col_cols(), 0);
    }

    /// `im2col` restricted to `taps`, into columns `off..off + ho·wo` of a
    /// matrix with row stride `ld`. Row `c·taps.len() + t` holds tap `t` of
    /// channel `c`. Padding taps are never written, so `col` must hold zeros
    /// there; the padded positions are the same for every image of a given
    /// geometry.
    /// Input offsets and valid output window of every kernel tap, row-major
    /// over `(ki, kj)`.
    fn taps(&self) -> Vec<Tap> {
        let mut taps = Vec::with_capacity(self.kh * self.kw);
        for ki in 0..self.kh {
            let offy = (ki * self.dil) as isize - self.pad as isize;
            let (ylo, yhi) = Self::valid_range(offy, self.stride, self.h, self.ho);
            for kj in 0..self.kw {
                let offx = (kj * self.dil) as isize - self.pad as isize;
                let (xlo, xhi) = Self::valid_range(offx, self.stride, self.w, self.wo);
                taps.push(Tap {
                    offy,
                    offx,
                    ylo,
                    yhi,
                    xlo,
                    xhi,
                });
            }
        }
        taps
    }

    fn im2col_with<T: Element>(&self, taps: &[Tap], x: &[T], col: &mut [T], ld: usize, off: usize) {
        let n = self.col_cols();
        let plane_len = self.h * self.w;
        for (c, plane) in x.chunks_exact(plane_len).take(self.c).enumerate() {
            for (t, tap) in taps.iter().enumerate() {
                let row = (c * taps.len() + t) * ld + off;
                let dst = &mut col[row..row + n];
                for oy in tap.ylo..tap.yhi {
                    let iy = ((oy * self.stride) as isize + tap.offy) as usize;
                    let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                    let d = &mut dst[oy * self.wo + tap.xlo..oy * self.wo + tap.xhi];
                    if self.stride == 1 && !d.is_empty() {
                        let ix0 = (tap.xlo as isize + tap.offx) as usize;
                        let src = &src_row[ix0..ix0 + d.len()];
                        if d.len() < 16 {
                            // a memcpy call costs more than a handful of moves
                            for (a, &v) in d.iter_mut().zip(src) {
                                *a = v;
                            }
                        } else {
                            d.copy_from_slice(src);
                        }
                    } else {
                        for (ox, a) in (tap.xlo..tap.xhi).zip(d) {
                            *a = src_row[((ox * self.stride) as isize + tap.offx) as usize];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of a column buffer back onto the input plane stack.
    fn col2im<T: Element>(&self, col: &[T], x: &mut [T]) {
        self.col2im_with(&self.taps(), col, x, self.col_cols(), 0);
    }

    fn col2im_with<T: Element>(&self, taps: &[Tap], col: &[T], x: &mut [T], ld: usize, off: usize) {
        let n = self.col_cols();
        let plane_len = self.h * self.w;
        for (c, plane) in x.chunks_exact_mut(plane_len).take(self.c).enumerate() {
            for (t, tap) in taps.iter().enumerate() {
                let row = (c * taps.len() + t) * ld + off;
                let src = &col[row..row + n];
                for oy in tap.ylo..tap.yhi {
                    let iy = ((oy * self.stride) as isize + tap.offy) as usize;
                    let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                    let s = &src[oy * self.wo + tap.xlo..oy * self.wo + tap.xhi];
                    if self.stride == 1 && !s.is_empty() {
                        let ix0 = (tap.xlo as isize + tap.offx) as usize;
                        for (a, &v) in dst_row[ix0..ix0 + s.len()].iter_mut().zip(s) {
                            *a = *a + v;
                        }
                    } else {
                        for (ox, &v) in (tap.xlo..tap.xhi).zip(s) {
                            let ix = ((ox * self.stride) as isize + tap.offx) as usize;
                            dst_row[ix] = dst_row[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    offy: isize,
    offx: isize,
    ylo: usize,
    yhi: usize,
    xlo: usize,
    xhi: usize,
}

impl Tap {
    /// Whether the tap reads at least one input pixel.
    fn is_live(&self) -> bool {
        self.ylo < self.yhi && self.xlo < self.xhi
    }
}

/// Columns `live` of every row of the `o×(c·k)` weight matrix, channel-major.
fn gather_taps<T: Copy>(wt: &[T], o: usize, c: usize, k: usize, live: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(o * c * live.len());
    for row in wt.chunks_exact(k).take(o * c) {
        out.extend(live.iter().map(|&t| row[t]));
    }
    out
}

/// Inverse of [`gather_taps`]: accumulates compact columns into `dw`.
fn scatter_taps<T: Element>(compact: &[T], dw: &mut [T], k: usize, live: &[usize]) {
    for (row, src) in dw.chunks_exact_mut(k).zip(compact.chunks_exact(live.len())) {
        for (&t, &v) in live.iter().zip(src) {
            row[t] = row[t] + v;
        }
    }
}

fn check_bias<T: Element>(bias: &Option<Var<'_, T>>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(
                op,
                format!("bias {:?} for {channels} channels", b.shape()),
            ));
        }
    }
    Ok(())
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn channel_bias_grad<T: Element>(g: &[T], channels: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        let s: T = chunk.iter().copied().sum();
        db[i % channels] = db[i % channels] + s;
    }
    Tensor::from_parts(vec![channels], db)
}

impl<'g, T: Element> Var<'g, T> {
    /// 2-D convolution, zero padding. `weight` is `O×C×kh×kw`, `bias` is `[O]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, spec: Conv2dSpec) -> Result<Var<'g, T>> {
        let (b, c, h, w) = self.dims4()?;
        let ws = weight.shape();
        let [o, wc, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight rank {}", ws.len())));
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        check_bias(&bias, o, "conv2d")?;
        let geom = Geom::new(c, h, w, kh, kw, spec)?;
        // taps that only ever read zero padding contribute nothing
        let all = geom.taps();
        let live: Vec<usize> = (0..all.len()).filter(|&t| all[t].is_live()).collect();
        let taps: Vec<Tap> = live.iter().map(|&t| all[t]).collect();
        let pruned = live.len() < all.len();
        let k = kh * kw;
        let (rows, cols) = (c * taps.len(), geom.col_cols());
        let (xv, wv) = (self.value(), weight.value());
        let wmat = if pruned {
            gather_taps(wv.data(), o, c, k, &live)
        } else {
            Vec::new()
        };
        let wref: &[T] = if pruned { &wmat } else { wv.data() };
        let in_plane = c * h * w;
        let out_plane = o * cols;
        let mut out = vec![T::zero(); b * out_plane];
        let batched = b > 1 && cols < BATCHED_COLS;
        if batched {
            let ld = b * cols;
            let mut col = vec![T::zero(); rows * ld];
            for bi in 0..b {
                geom.im2col_with(
                    &taps,
                    &xv.data()[bi * in_plane..(bi + 1) * in_plane],
                    &mut col,
                    ld,
                    bi * cols,
                );
            }
            let mut flat = vec![T::zero(); o * ld];
            gemm(
                MatRef::new(wref, o, rows),
                MatRef::new(&col, rows, ld),
                T::zero(),
                &mut flat,
            );
            unfold_batch(&flat, &mut out, b, o, cols);
        }
        let mut col = vec![T::zero(); if geom.is_pointwise() || batched { 0 } else { rows * cols }];
        for bi in (0..b).filter(|_| !batched) {
            let xb = &xv.data()[bi * in_plane..(bi + 1) * in_plane];
            let colref: &[T] = if geom.is_pointwise() {
                xb
            } else {
                geom.im2col_with(&taps, xb, &mut col, cols, 0);
                &col
            };
            gemm(
                MatRef::new(wref, o, rows),
                MatRef::new(colref, rows, cols),
                T::zero(),
                &mut out[bi * out_plane..(bi + 1) * out_plane],
            );
        }
        if let Some(bias) = &bias {
            add_channel_bias(&mut out, bias.value().data(), cols);
        }

        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (x, wt) = (ctx.inputs[0], ctx.inputs[1]);
            let g = ctx.grad.data();
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
            // weight gradient over live taps only, scattered back at the end
            let mut dwc = ctx.needs[1].then(|| vec![T::zero(); o * rows]);
            let wmat = if pruned {
                gather_taps(wt.data(), o, c, k, &live)
            } else {
                Vec::new()
            };
            let wref: &[T] = if pruned { &wmat } else { wt.data() };
            if batched {
                let ld = b * cols;
                let mut gflat = vec![T::zero(); o * ld];
                fold_batch(g, &mut gflat, b, o, cols);
                if let Some(dw) = dwc.as_mut() {
                    let mut col = vec![T::zero(); rows * ld];
                    for bi in 0..b {
                        geom.im2col_with(
                            &taps,
                            &x.data()[bi * in_plane..(bi + 1) * in_plane],
                            &mut col,
                            ld,
                            bi * cols,
                        );
                    }
                    gemm(MatRef::new(&gflat, o, ld), MatRef::t(&col, rows, ld), T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let mut col = vec![T::zero(); rows * ld];
                    gemm(
                        MatRef::t(wref, o, rows),
                        MatRef::new(&gflat, o, ld),
                        T::zero(),
                        &mut col,
                    );
                    for bi in 0..b {
                        geom.col2im_with(&taps, &col, &mut dx[bi * in_plane..(bi + 1) * in_plane], ld, bi * cols);
                    }
                }
            }
            let unbatched_len = if batched { 0 } else { rows * cols };
            let (mut col, mut dcol) = (vec![T::zero(); unbatched_len], vec![T::zero(); unbatched_len]);
            for bi in (0..b).filter(|_| !batched) {
                let gb = &g[bi * out_plane..(bi + 1) * out_plane];
                let xb = &x.data()[bi * in_plane..(bi + 1) * in_plane];
                if let Some(dw) = dwc.as_mut() {
                    let colref: &[T] = if geom.is_pointwise() {
                        xb
                    } else {
                        geom.im2col_with(&taps, xb, &mut col, cols, 0);
                        &col
                    };
                    gemm(MatRef::new(gb, o, cols), MatRef::t(colref, rows, cols), T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[bi * in_plane..(bi + 1) * in_plane];
                    if geom.is_pointwise() {
                        gemm(MatRef::t(wref, o, rows), MatRef::new(gb, o, cols), T::zero(), dxb);
                    } else {
                        gemm(MatRef::t(wref, o, rows), MatRef::new(gb, o, cols), T::zero(), &mut dcol);
                        geom.col2im_with(&taps, &dcol, dxb, cols, 0);
                    }
                }
            }
            let dw = dwc.map(|dwc| {
                if pruned {
                    let mut dw = vec![T::zero(); wt.len()];
                    scatter_taps(&dwc, &mut dw, k, &live);
                    dw
                } else {
                    dwc
                }
            });
            let mut res = vec![
                dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(wt.shape().to_vec(), d)),
            ];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| channel_bias_grad(g, o, cols)));
            }
            res
        });
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let value = Tensor::from_parts(vec![b, o, geom.ho, geom.wo], out);
        Ok(self.graph.op(value, &parents, backward))
    }

    /// Transposed 2-D convolution. `weight` is `I×O×kh×kw`; output size is
    /// `(H-1)·stride - 2·padding + kh`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: ConvTransposeSpec,
    ) -> Result<Var<'g, T>> {
        let (b, ci, hi, wi) = self.dims4()?;
        let ws = weight.shape();
        let [wi_c, o, kh, kw] = ws[..] else {
            return Err(Error::shape("conv_transpose2d", format!("weight rank {}", ws.len())));
        };
        if wi_c != ci {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {ci} channels, weight expects {wi_c}"),
            ));
        }
        check_bias(&bias, o, "conv_transpose2d")?;
        let (s, p) = (spec.stride, spec.padding);
        let ho = ((hi - 1) * s + kh)
            .checked_sub(2 * p)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding exceeds output"))?;
        let wo = ((wi - 1) * s + kw)
            .checked_sub(2 * p)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding exceeds output"))?;
        let geom = Geom::new(o, ho, wo, kh, kw, Conv2dSpec::new(s, p, 1))?;
        debug_assert_eq!((geom.ho, geom.wo), (hi, wi));
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_plane = ci * cols;
        let out_plane = o * ho * wo;
        let (xv, wv) = (self.value(), weight.value());
        let mut out = vec![T::zero(); b * out_plane];
        let mut col = vec![T::zero(); rows * cols];
        for bi in 0..b {
            let xb = &xv.data()[bi * in_plane..(bi + 1) * in_plane];
            gemm(
                MatRef::t(wv.data(), ci, rows),
                MatRef::new(xb, ci, cols),
                T::zero(),
                &mut col,
            );
            geom.col2im(&col, &mut out[bi * out_plane..(bi + 1) * out_plane]);
        }
        if let Some(bias) = &bias {
            add_channel_bias(&mut out, bias.value().data(), ho * wo);
        }

        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (x, wt) = (ctx.inputs[0], ctx.inputs[1]);
            let g = ctx.grad.data();
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
            let mut dw = ctx.needs[1].then(|| vec![T::zero(); wt.len()]);
            let mut gcol = vec![T::zero(); rows * cols];
            for bi in 0..b {
                geom.im2col(&g[bi * out_plane..(bi + 1) * out_plane], &mut gcol);
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        MatRef::new(wt.data(), ci, rows),
                        MatRef::new(&gcol, rows, cols),
                        T::zero(),
                        &mut dx[bi * in_plane..(bi + 1) * in_plane],
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[bi * in_plane..(bi + 1) * in_plane];
                    gemm(MatRef::new(xb, ci, cols), MatRef::t(&gcol, rows, cols), T::one(), dw);
                }
            }
            let mut res = vec![
                dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(wt.shape().to_vec(), d)),
            ];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| channel_bias_grad(g, o, ho * wo)));
            }
            res
        });
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let value = Tensor::from_parts(vec![b, o, ho, wo], out);
        Ok(self.graph.op(value, &parents, backward))
    }

    /// Depthwise convolution, stride 1, zero padding `pad`. `weight` is `C×1×k×k`.
    pub fn depthwise_conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, pad: usize) -> Result<Var<'g, T>> {
        let (b, c, h, w) = self.dims4()?;
        let ws = weight.shape();
        let [wc, 1, kh, kw] = ws[..] else {
            return Err(Error::shape("depthwise_conv2d", format!("weight {ws:?}")));
        };
        if wc != c {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input has {c} channels, weight has {wc}"),
            ));
        }
        check_bias(&bias, c, "depthwise_conv2d")?;
        let geom = Geom::new(1, h, w, kh, kw, Conv2dSpec::new(1, pad, 1))?;
        let (ho, wo) = (geom.ho, geom.wo);
        let (xv, wv) = (self.value(), weight.value());
        let mut out = vec![T::zero(); b * c * ho * wo];
        let taps = geom.taps();
        for p in 0..b * c {
            let ch = p % c;
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (t, tap) in taps.iter().enumerate() {
                let k = wv.data()[ch * kh * kw + t];
                for oy in tap.ylo..tap.yhi {
                    let iy = (oy as isize + tap.offy) as usize;
                    let ix0 = (tap.xlo as isize + tap.offx) as usize;
                    let srow = &src[iy * w + ix0..][..tap.xhi - tap.xlo];
                    for (d, &v) in dst[oy * wo + tap.xlo..oy * wo + tap.xhi].iter_mut().zip(srow) {
                        *d = *d + k * v;
                    }
                }
            }
        }
        if let Some(bias) = &bias {
            add_channel_bias(&mut out, bias.value().data(), ho * wo);
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (x, wt) = (ctx.inputs[0], ctx.inputs[1]);
            let g = ctx.grad.data();
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
            let mut dw = ctx.needs[1].then(|| vec![T::zero(); wt.len()]);
            for p in 0..b * c {
                let ch = p % c;
                let src = &x.data()[p * h * w..(p + 1) * h * w];
                let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                for (t, tap) in taps.iter().enumerate() {
                    let widx = ch * kh * kw + t;
                    let k = wt.data()[widx];
                    let mut acc = T::zero();
                    for oy in tap.ylo..tap.yhi {
                        let iy = (oy as isize + tap.offy) as usize;
                        for ox in tap.xlo..tap.xhi {
                            let ix = (ox as isize + tap.offx) as usize;
                            let gv = gp[oy * wo + ox];
                            acc = acc + gv * src[iy * w + ix];
                            if let Some(dx) = dx.as_mut() {
                                let i = p * h * w + iy * w + ix;
                                dx[i] = dx[i] + gv * k;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] = dw[widx] + acc;
                    }
                }
            }
            let mut res = vec![
                dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(wt.shape().to_vec(), d)),
            ];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| channel_bias_grad(g, c, ho * wo)));
            }
            res
        });
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let value = Tensor::from_parts(vec![b, c, ho, wo], out);
        Ok(self.graph.op(value, &parents, backward))
    }

    /// Dense layer: `x` is `B×in`, `weight` is `out×in`, `bias` is `[out]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let xs = self.shape();
        let ws = weight.shape();
        let (&[bsz, din], &[dout, win]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape("linear", format!("x {xs:?}, weight {ws:?}")));
        };
        if din != win {
            return Err(Error::shape("linear", format!("x {xs:?}, weight {ws:?}")));
        }
        check_bias(&bias, dout, "linear")?;
        let (xv, wv) = (self.value(), weight.value());
        let mut out = vec![T::zero(); bsz * dout];
        gemm(
            MatRef::new(xv.data(), bsz, din),
            MatRef::t(wv.data(), dout, din),
            T::zero(),
            &mut out,
        );
        if let Some(bias) = &bias {
            let bv = bias.value();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv.data()).for_each(|(v, &b)| *v = *v + b);
            }
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (x, wt) = (ctx.inputs[0], ctx.inputs[1]);
            let g = ctx.grad.data();
            let dx = ctx.needs[0].then(|| {
                let mut d = vec![T::zero(); bsz * din];
                gemm(
                    MatRef::new(g, bsz, dout),
                    MatRef::new(wt.data(), dout, din),
                    T::zero(),
                    &mut d,
                );
                Tensor::from_parts(vec![bsz, din], d)
            });
            let dw = ctx.needs[1].then(|| {
                let mut d = vec![T::zero(); dout * din];
                gemm(
                    MatRef::t(g, bsz, dout),
                    MatRef::new(x.data(), bsz, din),
                    T::zero(),
                    &mut d,
                );
                Tensor::from_parts(vec![dout, din], d)
            });
            let mut res = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| {
                    let mut d = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    Tensor::from_parts(vec![dout], d)
                }));
            }
            res
        });
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self
            .graph
            .op(Tensor::from_parts(vec![bsz, dout], out), &parents, backward))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::super::Graph;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    /// Direct-summation convolution oracle.
    #[allow(clippy::needless_range_loop)]
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], spec: Conv2dSpec) -> Tensor<f64> {
        let (b, c, h, ww) = x.dims4().unwrap();
        let [o, _, kh, kw] = w.shape()[..] else { unreachable!() };
        let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
        let ho = ((h as isize + 2 * p - d * (kh as isize - 1) - 1) / s + 1) as usize;
        let wo = ((ww as isize + 2 * p - d * (kw as isize - 1) - 1) / s + 1) as usize;
        let mut out = Tensor::zeros(&[b, o, ho, wo]);
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[oc];
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = oy as isize * s - p + ki as isize * d;
                                    let ix = ox as isize * s - p + kj as isize * d;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < ww {
                                        acc += x.at4(bi, ic, iy as usize, ix as usize) * w.at4(oc, ic, ki, kj);
                                    }
                                }
                            }
                        }
                        out.set4(bi, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_for_various_geometries() {
        let specs = [
            (3, Conv2dSpec::new(1, 1, 1)),
            (3, Conv2dSpec::new(2, 1, 1)),
            (3, Conv2dSpec::new(1, 3, 3)),
            (4, Conv2dSpec::new(2, 1, 1)),
            (1, Conv2dSpec::new(1, 0, 1)),
            (3, Conv2dSpec::new(1, 0, 2)),
            (3, Conv2dSpec::new(1, 8, 8)),
            (3, Conv2dSpec::new(1, 10, 10)),
            (3, Conv2dSpec::new(2, 5, 5)),
        ];
        for (i, &(k, spec)) in specs.iter().enumerate() {
            let x = rnd(&[2, 3, 7, 9], i as u64);
            let w = rnd(&[4, 3, k, k], 100 + i as u64);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let g = Graph::<f64>::new();
            let y = g
                .constant(x.clone())
                .conv2d(
                    g.constant(w.clone()),
                    Some(g.constant(Tensor::new(vec![4], bias.to_vec()).unwrap())),
                    spec,
                )
                .unwrap();
            let want = naive_conv(&x, &w, &bias, spec);
            assert_eq!(y.shape(), want.shape());
            assert!(y.value().max_abs_diff(&want) < 1e-12, "spec {spec:?}");
        }
    }

    #[test]
    fn conv2d_batched_and_per_image_paths_match_naive() {
        // 5x5 maps fold the batch into one GEMM, 17x17 maps run one GEMM per image
        for (side, seed) in [(5, 1), (17, 2)] {
            let x = rnd(&[3, 2, side, side], seed);
            let w = rnd(&[4, 2, 3, 3], seed + 10);
            let bias = [0.5, 0.0, -0.5, 1.0];
            let spec = Conv2dSpec::new(1, 1, 1);
            let g = Graph::<f64>::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let y = xv
                .conv2d(wv, Some(g.constant(Tensor::new(vec![4], bias.to_vec()).unwrap())), spec)
                .unwrap();
            assert!(
                y.value().max_abs_diff(&naive_conv(&x, &w, &bias, spec)) < 1e-12,
                "side {side}"
            );
            // gradient of sum(y) w.r.t. x counts the weight taps that reach each pixel
            let grads = g.backward(y.sum()).unwrap();
            let dx = grads.get(xv).unwrap();
            let ones = Tensor::<f64>::full(&[1, 2, side, side], 1.0);
            for bi in 0..3 {
                let g1 = Graph::<f64>::new();
                let xi = g1.leaf(ones.clone());
                let yi = xi.conv2d(g1.constant(w.clone()), None, spec).unwrap();
                let want = g1.backward(yi.sum()).unwrap().get(xi).unwrap().clone();
                let plane = 2 * side * side;
                let got = &dx.data()[bi * plane..(bi + 1) * plane];
                let diff = got
                    .iter()
                    .zip(want.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-12, "side {side} image {bi}");
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for the same weights (bias-free).
        let spec = Conv2dSpec::new(2, 1, 1);
        let x = rnd(&[1, 3, 8, 8], 1);
        let w = rnd(&[5, 3, 4, 4], 2);
        let g = Graph::<f64>::new();
        let cx = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, spec).unwrap();
        let y = rnd(&cx.shape(), 3);
        let ty = g
            .constant(y.clone())
            .conv_transpose2d(g.constant(w), None, ConvTransposeSpec { stride: 2, padding: 1 })
            .unwrap();
        assert_eq!(ty.shape(), vec![1, 3, 8, 8]);
        let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.value().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 4, 3, 3]));
        assert!(x.conv2d(w, None, Conv2dSpec::same(3, 1)).is_err());
    }

    #[test]
    fn gradcheck_conv2d_strided_dilated() {
        let x = rnd(&[2, 2, 6, 5], 4);
        let w = rnd(&[3, 2, 3, 3], 5);
        let b = rnd(&[3], 6);
        // dilation 6 on a 6x5 map leaves only the centre tap live
        for spec in [
            Conv2dSpec::new(2, 1, 1),
            Conv2dSpec::new(1, 2, 2),
            Conv2dSpec::new(1, 0, 1),
            Conv2dSpec::new(1, 6, 6),
        ] {
            check(
                &[x.clone(), w.clone(), b.clone()],
                |g, v| {
                    let y = v[0].conv2d(v[1], Some(v[2]), spec).unwrap();
                    let p = g.constant(rnd(&y.shape(), 7));
                    y.mul(p).unwrap().sum()
                },
                1e-6,
            );
        }
    }

    #[test]
    fn gradcheck_pointwise_conv() {
        let x = rnd(&[2, 3, 3, 4], 8);
        let w = rnd(&[2, 3, 1, 1], 9);
        check(
            &[x, w],
            |g, v| {
                let y = v[0].conv2d(v[1], None, Conv2dSpec::new(1, 0, 1)).unwrap();
                y.mul(g.constant(rnd(&y.shape(), 10))).unwrap().sum()
            },
            1e-6,
        );
    }

    #[test]
    fn gradcheck_conv_transpose() {
        let x = rnd(&[2, 3, 3, 3], 11);
        let w = rnd(&[3, 2, 4, 4], 12);
        let b = rnd(&[2], 13);
        check(
            &[x, w, b],
            |g, v| {
                let y = v[0]
                    .conv_transpose2d(v[1], Some(v[2]), ConvTransposeSpec { stride: 2, padding: 1 })
                    .unwrap();
                assert_eq!(y.shape(), vec![2, 2, 6, 6]);
                y.mul(g.constant(rnd(&y.shape(), 14))).unwrap().sum()
            },
            1e-6,
        );
    }

    #[test]
    fn depthwise_matches_grouped_naive() {
        let x = rnd(&[2, 3, 5, 6], 15);
        let w = rnd(&[3, 1, 3, 3], 16);
        let g = Graph::<f64>::new();
        let y = g
            .constant(x.clone())
            .depthwise_conv2d(g.constant(w.clone()), None, 1)
            .unwrap();
        for ch in 0..3 {
            let xs = Tensor::from_fn(&[2, 1, 5, 6], |i| {
                let (b, r) = (i / 30, i % 30);
                x.data()[(b * 3 + ch) * 30 + r]
            });
            let ws = Tensor::new(vec![1, 1, 3, 3], w.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
            let want = naive_conv(&xs, &ws, &[0.0], Conv2dSpec::same(3, 1));
            for b in 0..2 {
                for k in 0..30 {
                    let got = y.value().data()[(b * 3 + ch) * 30 + k];
                    assert!((got - want.data()[b * 30 + k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradcheck_depthwise_and_linear() {
        let x = rnd(&[2, 3, 4, 4], 17);
        let w = rnd(&[3, 1, 3, 3], 18);
        let b = rnd(&[3], 19);
        let lw = rnd(&[2, 3], 20);
        let lb = rnd(&[2], 21);
        check(
            &[x, w, b, lw, lb],
            |g, v| {
                let y = v[0].depthwise_conv2d(v[1], Some(v[2]), 1).unwrap();
                let gap = y.mean_hw().unwrap().reshape(&[2, 3]).unwrap();
                let z = gap.linear(v[3], Some(v[4])).unwrap();
                y.mul(g.constant(rnd(&y.shape(), 22)))
                    .unwrap()
                    .sum()
                    .add(z.mul(g.constant(rnd(&[2, 2], 23))).unwrap().sum())
                    .unwrap()
            },
            1e-6,
        );
    }
}
