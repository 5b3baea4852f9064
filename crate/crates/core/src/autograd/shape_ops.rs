use super::{BackwardCtx, Var};
use crate::error::{Error, Result};
use crate::freq_ops::reflect_index;
use crate::tensor::{lit, numel, Element, Tensor};

/// Copies `[outer, len_src, inner]` blocks of `src` into `dst` at offset `at`
/// along the middle axis (of length `len_dst`).
fn copy_axis_block<T: Copy>(
    src: &[T],
    dst: &mut [T],
    outer: usize,
    inner: usize,
    len_src: usize,
    len_dst: usize,
    at: usize,
) {
    for o in 0..outer {
        let s = &src[o * len_src * inner..(o + 1) * len_src * inner];
        let d0 = (o * len_dst + at) * inner;
        dst[d0..d0 + len_src * inner].copy_from_slice(s);
    }
}

/// Source row/col and weights for bilinear sampling (half-pixel centers).
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane of a `B×C×H×W` tensor (no gradient).
pub fn resize_bilinear_tensor<T: Element>(x: &Tensor<T>, ho: usize, wo: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 || ho == 0 || wo == 0 {
        return Err(Error::validation("resize: empty spatial dims"));
    }
    let ty = bilinear_taps(ho, h);
    let tx = bilinear_taps(wo, w);
    let src = x.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    for p in 0..b * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (lit::<T>(ly), lit::<T>(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (lit::<T>(lx), lit::<T>(1.0 - lx));
                dst[oy * wo + ox] = hy * (hx * plane[y0 * w + x0] + lx * plane[y0 * w + x1])
                    + ly * (hx * plane[y1 * w + x0] + lx * plane[y1 * w + x1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

/// Maps element `(b, c, y, x)` of an image batch onto the patch batch index.
#[inline]
fn patch_offsets(
    (b, c, h, w): (usize, usize, usize, usize),
    gh: usize,
    gw: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let (ph, pw) = (h / gh, w / gw);
    (0..b * c * h * w).map(move |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = (i / (w * h)) % c;
        let bi = i / (w * h * c);
        let (py, px) = (y / ph, x / pw);
        let pb = (bi * gh + py) * gw + px;
        let j = ((pb * c + ch) * ph + (y % ph)) * pw + (x % pw);
        (i, j)
    })
}

impl<'g, T: Element> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        if numel(shape) != v.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", v.shape(), shape)));
        }
        let value = (*v).clone().reshape(shape)?;
        let backward = Box::new(|ctx: &BackwardCtx<'_, T>| {
            vec![Some(
                ctx.grad.clone().reshape(ctx.inputs[0].shape()).expect("same numel"),
            )]
        });
        Ok(self.graph.op(value, &[self], backward))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = vec![T::zero(); numel(&out_shape)];
        let mut at = 0;
        let mut lens = Vec::with_capacity(values.len());
        for v in &values {
            let len = v.shape()[axis];
            copy_axis_block(v.data(), &mut data, outer, inner, len, total, at);
            lens.push(len);
            at += len;
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let g = ctx.grad.data();
            let mut start = 0;
            lens.iter()
                .zip(&ctx.needs)
                .zip(&ctx.inputs)
                .map(|((&len, &need), input)| {
                    let s = start;
                    start += len;
                    need.then(|| {
                        let mut d = vec![T::zero(); outer * len * inner];
                        for o in 0..outer {
                            let src = &g[(o * total + s) * inner..(o * total + s + len) * inner];
                            d[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                        }
                        Tensor::from_parts(input.shape().to_vec(), d)
                    })
                })
                .collect()
        });
        Ok(first.graph.op(Tensor::from_parts(out_shape, data), parts, backward))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = vec![T::zero(); outer * full * inner];
            copy_axis_block(ctx.grad.data(), &mut g, outer, inner, len, full, start);
            vec![Some(Tensor::from_parts(shape.clone(), g))]
        });
        Ok(self.graph.op(Tensor::from_parts(out_shape, data), &[self], backward))
    }

    /// Global average pool: `B×C×H×W → B×C×1×1`.
    pub fn mean_hw(self) -> Result<Var<'g, T>> {
        let (b, c, h, w) = self.dims4()?;
        let v = self.value();
        let hw = h * w;
        let inv = lit::<T>(1.0 / hw as f64);
        let data: Vec<T> = v
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = Vec::with_capacity(b * c * hw);
            for &gv in ctx.grad.data() {
                g.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(Tensor::from_parts(vec![b, c, h, w], g))]
        });
        Ok(self
            .graph
            .op(Tensor::from_parts(vec![b, c, 1, 1], data), &[self], backward))
    }

    /// Softmax over axis 1 of a `B×n×…` tensor, max-subtracted.
    pub fn softmax_axis1(self) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("softmax", format!("rank {} < 2", shape.len())));
        }
        let (b, n) = (shape[0], shape[1]);
        let s = numel(&shape[2..]);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for si in 0..s {
                let at = |k: usize| (bi * n + k) * s + si;
                let m = (0..n).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut gx = vec![T::zero(); y.len()];
            for bi in 0..b {
                for si in 0..s {
                    let at = |k: usize| (bi * n + k) * s + si;
                    let dot: T = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), gx))]
        });
        Ok(self.graph.op(Tensor::from_parts(shape, out), &[self], backward))
    }

    /// Splits each image into a `gh×gw` grid: `B×C×H×W → (B·gh·gw)×C×(H/gh)×(W/gw)`,
    /// patches in row-major order per image.
    pub fn to_patches(self, gh: usize, gw: usize) -> Result<Var<'g, T>> {
        let (b, c, h, w) = self.dims4()?;
        if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
            return Err(Error::validation(format!(
                "patch grid {gh}x{gw} does not divide {h}x{w}"
            )));
        }
        let dims = (b, c, h, w);
        let v = self.value();
        let mut out = vec![T::zero(); v.len()];
        for (i, j) in patch_offsets(dims, gh, gw) {
            out[j] = v.data()[i];
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = vec![T::zero(); ctx.grad.len()];
            for (i, j) in patch_offsets(dims, gh, gw) {
                g[i] = ctx.grad.data()[j];
            }
            vec![Some(Tensor::from_parts(vec![b, c, h, w], g))]
        });
        let shape = vec![b * gh * gw, c, h / gh, w / gw];
        Ok(self.graph.op(Tensor::from_parts(shape, out), &[self], backward))
    }

    /// Inverse of [`Var::to_patches`].
    pub fn from_patches(self, gh: usize, gw: usize) -> Result<Var<'g, T>> {
        let (bp, c, ph, pw) = self.dims4()?;
        if gh == 0 || gw == 0 || bp % (gh * gw) != 0 {
            return Err(Error::validation(format!("{bp} patches do not fill a {gh}x{gw} grid")));
        }
        let dims = (bp / (gh * gw), c, ph * gh, pw * gw);
        let v = self.value();
        let mut out = vec![T::zero(); v.len()];
        for (i, j) in patch_offsets(dims, gh, gw) {
            out[i] = v.data()[j];
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = vec![T::zero(); ctx.grad.len()];
            for (i, j) in patch_offsets(dims, gh, gw) {
                g[j] = ctx.grad.data()[i];
            }
            vec![Some(Tensor::from_parts(vec![bp, c, ph, pw], g))]
        });
        let shape = vec![dims.0, dims.1, dims.2, dims.3];
        Ok(self.graph.op(Tensor::from_parts(shape, out), &[self], backward))
    }

    /// Reflect padding by `pad` on every spatial side.
    pub fn pad_reflect(self, pad: usize) -> Result<Var<'g, T>> {
        let (b, c, h, w) = self.dims4()?;
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let rows: Vec<usize> = (0..ho).map(|y| reflect_index(y as isize - pad as isize, h)).collect();
        let cols: Vec<usize> = (0..wo).map(|x| reflect_index(x as isize - pad as isize, w)).collect();
        let v = self.value();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            let plane = &v.data()[p * h * w..(p + 1) * h * w];
            for &y in &rows {
                out.extend(cols.iter().map(|&x| plane[y * w + x]));
            }
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = vec![T::zero(); b * c * h * w];
            let gd = ctx.grad.data();
            for p in 0..b * c {
                for (oy, &y) in rows.iter().enumerate() {
                    for (ox, &x) in cols.iter().enumerate() {
                        let idx = p * h * w + y * w + x;
                        g[idx] = g[idx] + gd[(p * ho + oy) * wo + ox];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![b, c, h, w], g))]
        });
        Ok(self
            .graph
            .op(Tensor::from_parts(vec![b, c, ho, wo], out), &[self], backward))
    }

    /// Bilinear resize with half-pixel centers (no antialiasing).
    pub fn resize_bilinear(self, ho: usize, wo: usize) -> Result<Var<'g, T>> {
        let (b, c, h, w) = self.dims4()?;
        if (h, w) == (ho, wo) {
            return Ok(self);
        }
        let value = resize_bilinear_tensor(&self.value(), ho, wo)?;
        let ty = bilinear_taps(ho, h);
        let tx = bilinear_taps(wo, w);
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let gd = ctx.grad.data();
            let mut g = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let dst = &mut g[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let (ly, hy) = (lit::<T>(ly), lit::<T>(1.0 - ly));
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let (lx, hx) = (lit::<T>(lx), lit::<T>(1.0 - lx));
                        let gv = gd[(p * ho + oy) * wo + ox];
                        dst[y0 * w + x0] = dst[y0 * w + x0] + gv * hy * hx;
                        dst[y0 * w + x1] = dst[y0 * w + x1] + gv * hy * lx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + gv * ly * hx;
                        dst[y1 * w + x1] = dst[y1 * w + x1] + gv * ly * lx;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![b, c, h, w], g))]
        });
        Ok(self.graph.op(value, &[self], backward))
    }

    /// 2×2 average pooling with stride 2 (trailing odd row/col dropped).
    pub fn avg_pool2(self) -> Result<Var<'g, T>> {
        let (b, c, h, w) = self.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::validation(format!("avg_pool2 on {h}x{w}")));
        }
        let q = lit::<T>(0.25);
        let v = self.value();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            let s = &v.data()[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for x in 0..wo {
                    let i = 2 * y * w + 2 * x;
                    out.push((s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * q);
                }
            }
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = vec![T::zero(); b * c * h * w];
            let gd = ctx.grad.data();
            for p in 0..b * c {
                for y in 0..ho {
                    for x in 0..wo {
                        let gv = gd[(p * ho + y) * wo + x] * q;
                        let i = p * h * w + 2 * y * w + 2 * x;
                        g[i] = gv;
                        g[i + 1] = gv;
                        g[i + w] = gv;
                        g[i + w + 1] = gv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![b, c, h, w], g))]
        });
        Ok(self
            .graph
            .op(Tensor::from_parts(vec![b, c, ho, wo], out), &[self], backward))
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

    fn probe_sum<'g>(g: &'g Graph<f64>, v: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
        let p = g.constant(rnd(&v.shape(), seed));
        v.mul(p).unwrap().sum()
    }

    #[test]
    fn patches_roundtrip_exact() {
        let g = Graph::<f64>::new();
        let x = g.constant(rnd(&[2, 3, 8, 12], 1));
        let p = x.to_patches(2, 3).unwrap();
        assert_eq!(p.shape(), vec![12, 3, 4, 4]);
        let back = p.from_patches(2, 3).unwrap();
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn patches_row_major_quadrants() {
        let g = Graph::<f64>::new();
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| {
            let (y, x) = (i / 4, i % 4);
            [[1.0, 2.0], [3.0, 4.0]][y / 2][x / 2]
        });
        let p = g.constant(x).to_patches(2, 2).unwrap().value();
        for (k, want) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert!(p.data()[k * 4..(k + 1) * 4].iter().all(|v| v == want));
        }
    }

    #[test]
    fn to_patches_rejects_indivisible() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 6, 6]));
        assert!(x.to_patches(4, 4).is_err());
    }

    #[test]
    fn softmax_stable_and_normalized() {
        let g = Graph::<f64>::new();
        let l = g.constant(Tensor::new(vec![1, 3], vec![1000.0, 0.0, 0.0]).unwrap());
        let w = l.softmax_axis1().unwrap().value();
        assert!((w.data()[0] - 1.0).abs() < 1e-9 && w.data()[1] < 1e-9);
        let l = g.constant(Tensor::new(vec![1, 3], vec![2f64.ln(), 0.0, 0.0]).unwrap());
        let w = l.softmax_axis1().unwrap().value();
        assert!((w.data()[0] - 0.5).abs() < 1e-15);
        assert!((w.data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn resize_same_size_is_identity_and_upsample_of_constant_is_constant() {
        let x = rnd(&[1, 2, 5, 7], 2);
        assert_eq!(resize_bilinear_tensor(&x, 5, 7).unwrap(), x);
        let c = Tensor::<f64>::full(&[1, 1, 3, 3], 0.25);
        let up = resize_bilinear_tensor(&c, 8, 5).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gradcheck_shape_ops() {
        let a = rnd(&[2, 3, 4, 4], 3);
        let b = rnd(&[2, 2, 4, 4], 4);
        check(
            &[a, b],
            |g, v| {
                let cat = Var::concat(&[v[0], v[1]], 1).unwrap();
                let n = cat.narrow(1, 1, 3).unwrap();
                let p = n.to_patches(2, 2).unwrap().scale(1.5).from_patches(2, 2).unwrap();
                let r = p.pad_reflect(2).unwrap().resize_bilinear(5, 7).unwrap();
                let a = p.avg_pool2().unwrap();
                let m = p.mean_hw().unwrap().reshape(&[2, 3]).unwrap().softmax_axis1().unwrap();
                probe_sum(g, r, 10)
                    .add(probe_sum(g, a, 11))
                    .unwrap()
                    .add(probe_sum(g, m, 12))
                    .unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn gradcheck_spatial_softmax() {
        let a = rnd(&[2, 3, 2, 2], 5);
        check(&[a], |g, v| probe_sum(g, v[0].softmax_axis1().unwrap(), 6), 1e-6);
    }
}
