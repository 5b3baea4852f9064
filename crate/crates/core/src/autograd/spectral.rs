//! Differentiable 2-D FFT. A spectrum is a single `2×B×C×H×W` node holding
//! the real plane stack followed by the imaginary one, so per-channel scaling
//! is an ordinary broadcast multiply by a `1×B×C×1×1` factor.

use super::{BackwardCtx, Var};
use crate::error::{Error, Result};
use crate::freq_ops::fft2_planes;
use crate::tensor::{lit, Element, Tensor};

fn split<T: Element>(t: &Tensor<T>) -> (&[T], &[T]) {
    let half = t.len() / 2;
    t.data().split_at(half)
}

fn spectrum_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape[..] {
        [2, b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape("spectrum", format!("expected 2×B×C×H×W, got {shape:?}"))),
    }
}

impl<'g, T: Element> Var<'g, T> {
    /// Unnormalized forward FFT of a real `B×C×H×W` tensor.
    pub fn fft2(self) -> Result<Var<'g, T>> {
        let (b, c, h, w) = self.dims4()?;
        let v = self.value();
        if !v.all_finite() {
            return Err(Error::validation("fft2: input contains non-finite values"));
        }
        let (re, mut im) = fft2_planes(v.data(), None, h, w, false);
        let mut data = re;
        data.append(&mut im);
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (gr, gi) = split(ctx.grad);
            let neg: Vec<T> = gi.iter().map(|&v| -v).collect();
            let (dx, _) = fft2_planes(gr, Some(&neg), h, w, false);
            vec![Some(Tensor::from_parts(vec![b, c, h, w], dx))]
        });
        Ok(self
            .graph
            .op(Tensor::from_parts(vec![2, b, c, h, w], data), &[self], backward))
    }

    /// Normalized inverse FFT of a `2×B×C×H×W` spectrum, keeping the real part.
    pub fn ifft2_real(self) -> Result<Var<'g, T>> {
        let (b, c, h, w) = spectrum_dims(&self.shape())?;
        let v = self.value();
        let (re, im) = split(&v);
        let (out, _) = fft2_planes(re, Some(im), h, w, true);
        let scale = lit::<T>(1.0 / (h * w) as f64);
        let out = out.into_iter().map(|x| x * scale).collect();
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (gr, mut gi) = fft2_planes(ctx.grad.data(), None, h, w, false);
            let mut g = gr;
            g.append(&mut gi);
            g.iter_mut().for_each(|x| *x = *x * scale);
            vec![Some(Tensor::from_parts(vec![2, b, c, h, w], g))]
        });
        Ok(self
            .graph
            .op(Tensor::from_parts(vec![b, c, h, w], out), &[self], backward))
    }

    /// Magnitude `sqrt(re² + im²)` of a spectrum; subgradient 0 at the origin.
    pub fn complex_abs(self) -> Result<Var<'g, T>> {
        let (b, c, h, w) = spectrum_dims(&self.shape())?;
        let v = self.value();
        let (re, im) = split(&v);
        let mag: Vec<T> = re.iter().zip(im).map(|(&r, &i)| r.hypot(i)).collect();
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (re, im) = split(ctx.inputs[0]);
            let n = re.len();
            let mut g = vec![T::zero(); 2 * n];
            for k in 0..n {
                let m = ctx.output.data()[k];
                if m > T::zero() {
                    let gk = ctx.grad.data()[k] / m;
                    g[k] = gk * re[k];
                    g[n + k] = gk * im[k];
                }
            }
            vec![Some(Tensor::from_parts(vec![2, b, c, h, w], g))]
        });
        Ok(self
            .graph
            .op(Tensor::from_parts(vec![b, c, h, w], mag), &[self], backward))
    }
}
