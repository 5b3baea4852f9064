//! Deterministic frequency-domain primitives: 2-D FFT/IFFT over the spatial
//! axes of `B×C×H×W` tensors, spectrum magnitude and a one-level Haar DWT.
//!
//! Conventions: the forward FFT is unnormalized, the inverse carries the
//! `1/(H·W)` factor. The Haar transform uses block averages, so for a 2×2
//! block `(a b; c d)`:
//!
//! ```text
//! LL = (a + b + c + d) / 4      LH = (a + b - c - d) / 4
//! HL = (a - b + c - d) / 4      HH = (a - b - c + d) / 4
//! ```
//!
//! which makes the summed band energy exactly a quarter of the input energy.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor};

/// Complex spectrum of a real `B×C×H×W` tensor, kept as separate planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<T: Element = f32> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

/// One-level Haar decomposition. `padded` records whether a reflected
/// row/column was appended to make the input even.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands<T: Element = f32> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    pub padded: (bool, bool),
}

impl<T: Element> WaveletBands<T> {
    /// Bands concatenated channel-wise in `LL, LH, HL, HH` order: `B×4C×H/2×W/2`.
    pub fn stacked(&self) -> Tensor<T> {
        let (b, c, h, w) = self.ll.dims4().expect("bands are rank 4");
        let plane = c * h * w;
        let mut data = Vec::with_capacity(4 * b * plane);
        for bi in 0..b {
            for band in [&self.ll, &self.lh, &self.hl, &self.hh] {
                data.extend_from_slice(&band.data()[bi * plane..(bi + 1) * plane]);
            }
        }
        Tensor::from_parts(vec![b, 4 * c, h, w], data)
    }
}

fn check_finite<T: Element>(t: &Tensor<T>, op: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::validation(format!("{op}: input contains non-finite values")));
    }
    Ok(())
}

/// Unnormalized 2-D DFT over the trailing two axes of every `h×w` plane.
///
/// `im` may be omitted for real input. When `inverse` is set the twiddle
/// sign flips; no scaling is applied either way.
pub(crate) fn fft2_planes<T: Element>(
    re: &[T],
    im: Option<&[T]>,
    h: usize,
    w: usize,
    inverse: bool,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    assert!(hw > 0 && re.len().is_multiple_of(hw), "fft2 plane geometry");
    let planes = re.len() / hw;
    let mut buf: Vec<Complex<T>> = match im {
        Some(im) => re.iter().zip(im).map(|(&r, &i)| Complex::new(r, i)).collect(),
        None => re.iter().map(|&r| Complex::new(r, T::zero())).collect(),
    };

    let mut planner = FftPlanner::<T>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };

    let scratch_len = row.get_inplace_scratch_len().max(col.get_inplace_scratch_len());
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); scratch_len];

    if w > 1 {
        row.process_with_scratch(&mut buf, &mut scratch);
    }
    if h > 1 {
        let mut tr = vec![Complex::new(T::zero(), T::zero()); buf.len()];
        for p in 0..planes {
            let src = &buf[p * hw..(p + 1) * hw];
            let dst = &mut tr[p * hw..(p + 1) * hw];
            for y in 0..h {
                for x in 0..w {
                    dst[x * h + y] = src[y * w + x];
                }
            }
        }
        col.process_with_scratch(&mut tr, &mut scratch);
        for p in 0..planes {
            let src = &tr[p * hw..(p + 1) * hw];
            let dst = &mut buf[p * hw..(p + 1) * hw];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[x * h + y];
                }
            }
        }
    }
    buf.into_iter().map(|c| (c.re, c.im)).unzip()
}

/// Per-channel 2-D DFT (unnormalized forward convention).
pub fn fft2<T: Element>(f: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (_, _, h, w) = f.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::validation("fft2: spatial dims must be >= 1"));
    }
    check_finite(f, "fft2")?;
    let (re, im) = fft2_planes(f.data(), None, h, w, false);
    Ok(ComplexSpectrum {
        re: Tensor::from_parts(f.shape().to_vec(), re),
        im: Tensor::from_parts(f.shape().to_vec(), im),
    })
}

/// Normalized inverse DFT returning the real part and the largest discarded
/// imaginary magnitude.
pub fn ifft2_with_residue<T: Element>(s: &ComplexSpectrum<T>) -> Result<(Tensor<T>, T)> {
    if s.re.shape() != s.im.shape() {
        return Err(Error::shape(
            "ifft2",
            format!("re {:?} vs im {:?}", s.re.shape(), s.im.shape()),
        ));
    }
    let (_, _, h, w) = s.re.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::validation("ifft2: spatial dims must be >= 1"));
    }
    let (re, im) = fft2_planes(s.re.data(), Some(s.im.data()), h, w, true);
    let scale = T::one() / lit::<T>((h * w) as f64);
    let residue = im.iter().fold(T::zero(), |m, &v| m.max((v * scale).abs()));
    let out = re.into_iter().map(|v| v * scale).collect();
    Ok((Tensor::from_parts(s.re.shape().to_vec(), out), residue))
}

/// Normalized inverse DFT; the (numerically negligible for spectra of real
/// inputs) imaginary part is discarded.
pub fn ifft2<T: Element>(s: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    ifft2_with_residue(s).map(|(x, _)| x)
}

/// Element-wise `sqrt(re² + im²)`.
pub fn spectrum_magnitude<T: Element>(s: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    s.re.zip_map(&s.im, |r, i| r.hypot(i))
}

/// Reflect index into `[0, n)` without repeating the edge sample. Indices far
/// outside the range fold back periodically; `n == 1` always maps to 0.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// One-level Haar DWT with the averaging convention described in the module
/// docs. Odd spatial sizes are reflect-padded by one row/column first.
pub fn dwt_haar<T: Element>(f: &Tensor<T>) -> Result<WaveletBands<T>> {
    let (b, c, h, w) = f.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::validation(format!(
            "dwt_haar: spatial size {h}x{w} is below the 2x2 minimum"
        )));
    }
    let (hp, wp) = (h + h % 2, w + w % 2);
    let (ho, wo) = (hp / 2, wp / 2);
    let src = f.data();
    let at = |plane: usize, y: usize, x: usize| -> T {
        let yy = reflect_index(y as isize, h);
        let xx = reflect_index(x as isize, w);
        src[plane * h * w + yy * w + xx]
    };
    let quarter = lit::<T>(0.25);
    let n = b * c * ho * wo;
    let (mut ll, mut lh, mut hl, mut hh) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for plane in 0..b * c {
        for i in 0..ho {
            for j in 0..wo {
                let a = at(plane, 2 * i, 2 * j);
                let bb = at(plane, 2 * i, 2 * j + 1);
                let cc = at(plane, 2 * i + 1, 2 * j);
                let d = at(plane, 2 * i + 1, 2 * j + 1);
                ll.push((a + bb + cc + d) * quarter);
                lh.push((a + bb - cc - d) * quarter);
                hl.push((a - bb + cc - d) * quarter);
                hh.push((a - bb - cc + d) * quarter);
            }
        }
    }
    let shape = vec![b, c, ho, wo];
    Ok(WaveletBands {
        ll: Tensor::from_parts(shape.clone(), ll),
        lh: Tensor::from_parts(shape.clone(), lh),
        hl: Tensor::from_parts(shape.clone(), hl),
        hh: Tensor::from_parts(shape, hh),
        padded: (h % 2 == 1, w % 2 == 1),
    })
}
