//! Training objective: smooth L1, MS-SSIM, a fixed-feature perceptual term
//! and a least-squares adversarial term against a patch discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Bound, ParamLayout, ParamStore};
use crate::tensor::{Element, Tensor};

pub const SMOOTH_L1_DELTA: f64 = 1.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Classical five-scale MS-SSIM exponents; fewer scales use a renormalized prefix.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const DEFAULT_MS_SSIM_SCALES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub msssim: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            msssim: 1.0,
            perceptual: 0.5,
            adversarial: 0.0005,
        }
    }
}

impl LossWeights {
    /// Progressive loss presets: `l1`, `l1+msssim`, `l1+msssim+per`, `full`.
    pub fn preset(name: &str) -> Result<Self> {
        let full = Self::default();
        let w = match name {
            "l1" => Self {
                msssim: 0.0,
                perceptual: 0.0,
                adversarial: 0.0,
                ..full
            },
            "l1+msssim" => Self {
                perceptual: 0.0,
                adversarial: 0.0,
                ..full
            },
            "l1+msssim+per" => Self {
                adversarial: 0.0,
                ..full
            },
            "full" => full,
            _ => {
                return Err(Error::validation(format!(
                    "unknown loss preset `{name}` (l1|l1+msssim|l1+msssim+per|full)"
                )))
            }
        };
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!(
                    "loss.{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("l1", self.l1),
            ("msssim", self.msssim),
            ("perceptual", self.perceptual),
            ("adversarial", self.adversarial),
        ]
    }
}

/// Raw (unweighted) component values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub l1: f64,
    pub msssim: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub msssim: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
    pub d_loss: f64,
}

/// Weighted sum of the four components. Any non-finite component aborts.
pub fn joint_loss(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("l1", c.l1),
        ("msssim", c.msssim),
        ("perceptual", c.perceptual),
        ("adversarial", c.adversarial),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.into() });
        }
    }
    let total = w.l1 * c.l1 + w.msssim * c.msssim + w.perceptual * c.perceptual + w.adversarial * c.adversarial;
    Ok(LossReport {
        l1: c.l1,
        msssim: c.msssim,
        perceptual: c.perceptual,
        adversarial: c.adversarial,
        total,
        d_loss: 0.0,
    })
}

/// Mean smooth L1 with `δ = 1`.
pub fn smooth_l1<'g, T: Element>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    pred.smooth_l1(target, SMOOTH_L1_DELTA)
}

/// Normalized 1-D Gaussian.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn window_kernel<T: Element>(c: usize) -> Tensor<T> {
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let k = SSIM_WINDOW;
    Tensor::from_fn(&[c, 1, k, k], |i| {
        let (y, x) = ((i / k) % k, i % k);
        T::from_lit(g[y] * g[x])
    })
}

/// Exponents for `scales` levels, renormalized to sum to 1.
pub fn ms_ssim_weights(scales: usize) -> Result<Vec<f64>> {
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::validation(format!(
            "MS-SSIM scales must be in 1..=5, got {scales}"
        )));
    }
    let w = &MS_SSIM_WEIGHTS[..scales];
    let s: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / s).collect())
}

/// Smallest side accepted by an MS-SSIM pyramid of `scales` levels.
pub fn ms_ssim_min_size(scales: usize) -> usize {
    SSIM_WINDOW << (scales.max(1) - 1)
}

/// Per-channel luminance and contrast-structure maps (valid windows).
fn ssim_maps<'g, T: Element>(x: Var<'g, T>, y: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let c = x.dims4()?.1;
    let g = x.graph();
    let win = g.constant(window_kernel(c));
    let blur = |v: Var<'g, T>| v.depthwise_conv2d(win, None, 0);
    let (mx, my) = (blur(x)?, blur(y)?);
    let (mx2, my2, mxy) = (mx.square(), my.square(), mx.mul(my)?);
    let sxx = blur(x.square())?.sub(mx2)?;
    let syy = blur(y.square())?.sub(my2)?;
    let sxy = blur(x.mul(y)?)?.sub(mxy)?;
    let cs = sxy.scale(2.0).offset(SSIM_C2).div(sxx.add(syy)?.offset(SSIM_C2))?;
    let lum = mxy.scale(2.0).offset(SSIM_C1).div(mx2.add(my2)?.offset(SSIM_C1))?;
    Ok((lum, cs))
}

/// `1 − MS-SSIM` over `scales` levels (2× average pooling between levels),
/// averaged over batch and channels.
pub fn ms_ssim_loss<'g, T: Element>(pred: Var<'g, T>, target: Var<'g, T>, scales: usize) -> Result<Var<'g, T>> {
    let weights = ms_ssim_weights(scales)?;
    let (b, c, h, w) = pred.dims4()?;
    if target.shape() != pred.shape() {
        return Err(Error::shape(
            "ms_ssim_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let min = ms_ssim_min_size(scales);
    if h < min || w < min {
        return Err(Error::validation(format!(
            "MS-SSIM with {scales} scales needs images of at least {min}×{min}, got {h}×{w}"
        )));
    }
    let (mut x, mut y) = (pred, target);
    let mut prod: Option<Var<'g, T>> = None;
    for (j, &wj) in weights.iter().enumerate() {
        if j > 0 {
            x = x.avg_pool2()?;
            y = y.avg_pool2()?;
        }
        let (lum, cs) = ssim_maps(x, y)?;
        let term = if j + 1 == scales { lum.mul(cs)? } else { cs };
        let v = term.mean_hw()?.relu().powf(wj);
        prod = Some(match prod {
            Some(p) => p.mul(v)?,
            None => v,
        });
    }
    let ms = prod.expect("at least one scale").reshape(&[b * c])?;
    Ok(ms.mean().neg().offset(1.0))
}

/// Fixed conv pyramid used as the perceptual feature extractor. Stages after
/// the first start with 2× average pooling; every stage ends in a ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    stages: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl PerceptualExtractor {
    pub const WIDTHS: [usize; 4] = [8, 16, 32, 32];

    /// Seed-deterministic random weights (He scaling).
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = Self::WIDTHS
            .iter()
            .map(|&cout| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::randn(&[cout, cin, 3, 3], std, &mut rng);
                cin = cout;
                (w, Tensor::zeros(&[cout]))
            })
            .collect();
        Self { stages }
    }

    /// Substitutes arbitrary 3×3 stages `(weight O×C×3×3, bias [O])`, e.g.
    /// from a pretrained classifier.
    pub fn from_stages(stages: Vec<(Tensor<f32>, Tensor<f32>)>) -> Result<Self> {
        let mut cin = 3;
        for (i, (w, b)) in stages.iter().enumerate() {
            let s = w.shape();
            if s.len() != 4 || s[1] != cin || s[2] != 3 || s[3] != 3 || b.shape() != [s[0]] {
                return Err(Error::validation(format!(
                    "perceptual stage {i}: weight {s:?}, bias {:?}",
                    b.shape()
                )));
            }
            cin = s[0];
        }
        if stages.is_empty() {
            return Err(Error::validation("perceptual extractor needs at least one stage"));
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[(Tensor<f32>, Tensor<f32>)] {
        &self.stages
    }

    /// Places the weights on `g` as constants.
    pub fn bind<'g, T: Element>(&self, g: &'g Graph<T>) -> Vec<(Var<'g, T>, Var<'g, T>)> {
        self.stages
            .iter()
            .map(|(w, b)| (g.constant(w.cast()), g.constant(b.cast())))
            .collect()
    }

    pub fn features<'g, T: Element>(stages: &[(Var<'g, T>, Var<'g, T>)], x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let mut feats = Vec::with_capacity(stages.len());
        let mut h = x;
        for (i, &(w, b)) in stages.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2()?;
            }
            h = h.conv2d(w, Some(b), Conv2dSpec::same(3, 1))?.relu();
            feats.push(h);
        }
        Ok(feats)
    }
}

/// `Σ_l mean((φ_l(pred) − φ_l(target))²)`.
pub fn perceptual_loss<'g, T: Element>(
    pred: Var<'g, T>,
    target: Var<'g, T>,
    extractor: &PerceptualExtractor,
) -> Result<Var<'g, T>> {
    let stages = extractor.bind(pred.graph());
    let (fa, fb) = (
        PerceptualExtractor::features(&stages, pred)?,
        PerceptualExtractor::features(&stages, target)?,
    );
    let mut total: Option<Var<'g, T>> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let d = a.sub(b)?.square().mean();
        total = Some(match total {
            Some(t) => t.add(d)?,
            None => d,
        });
    }
    Ok(total.expect("non-empty extractor"))
}

/// Patch discriminator: 4×4 convs with strides 2, 2, 2, 1, 1 and leaky ReLU
/// (0.2) between them; 70×70 receptive field per output unit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layout: ParamLayout,
    convs: Vec<Conv>,
}

impl Discriminator {
    pub const RECEPTIVE_FIELD: usize = 70;

    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::validation("discriminator width must be positive"));
        }
        let mut l = ParamLayout::new();
        let chans = [3, width, 2 * width, 4 * width, 4 * width, 1];
        let strides = [2, 2, 2, 1, 1];
        let convs = strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                Conv::new(
                    &mut l,
                    &format!("disc.conv{i}"),
                    chans[i],
                    chans[i + 1],
                    4,
                    Conv2dSpec::new(s, 1, 1),
                )
            })
            .collect();
        Ok(Self { layout: l, convs })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init(&self, seed: u64) -> ParamStore<f32> {
        self.layout.init(seed)
    }

    /// Smallest input side producing a non-empty score map.
    pub const MIN_SIZE: usize = 24;

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (_, _, h, w) = x.dims4()?;
        if h < Self::MIN_SIZE || w < Self::MIN_SIZE {
            return Err(Error::validation(format!(
                "discriminator needs inputs of at least {0}×{0}, got {h}×{w}",
                Self::MIN_SIZE
            )));
        }
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(p, h)?;
            if i < last {
                h = h.leaky_relu(0.2);
            }
        }
        Ok(h)
    }
}

/// `½E[(D(real) − 1)²] + ½E[D(fake)²]`.
pub fn discriminator_loss<'g, T: Element>(d_real: Var<'g, T>, d_fake: Var<'g, T>) -> Var<'g, T> {
    let real = d_real.offset(-1.0).square().mean();
    let fake = d_fake.square().mean();
    real.add(fake).expect("scalars").scale(0.5)
}

/// `½E[(D(fake) − 1)²]`.
pub fn generator_adv_loss<T: Element>(d_fake: Var<'_, T>) -> Var<'_, T> {
    d_fake.offset(-1.0).square().mean().scale(0.5)
}

/// `(g_loss, d_loss)`. The fake is detached on the discriminator side, so
/// `d_loss` never reaches generator parameters.
pub fn adversarial_losses<'g, T: Element>(
    pred: Var<'g, T>,
    target: Var<'g, T>,
    disc: &Discriminator,
    p: &Bound<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let g_loss = generator_adv_loss(disc.forward(p, pred)?);
    let d_loss = discriminator_loss(disc.forward(p, target)?, disc.forward(p, pred.detach())?);
    Ok((g_loss, d_loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut rng)
    }

    /// Smooth structured test image in [0, 1].
    fn structured(b: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[b, c, h, w], |i| {
            let (ch, y, x) = ((i / (h * w)) % c, (i / w) % h, i % w);
            0.5 + 0.4 * ((x as f64 * 0.4 + ch as f64).sin() * (y as f64 * 0.3).cos())
        })
    }

    #[test]
    fn joint_loss_examples() {
        let w = LossWeights::default();
        let ones = LossComponents {
            l1: 1.0,
            msssim: 1.0,
            perceptual: 1.0,
            adversarial: 1.0,
        };
        assert_eq!(joint_loss(&ones, &w).unwrap().total, 6.5005);
        assert_eq!(joint_loss(&LossComponents::default(), &w).unwrap().total, 0.0);

        let no_adv = LossWeights { adversarial: 0.0, ..w };
        let a = joint_loss(
            &LossComponents {
                adversarial: 3.0,
                ..ones
            },
            &no_adv,
        )
        .unwrap();
        let b = joint_loss(
            &LossComponents {
                adversarial: 70.0,
                ..ones
            },
            &no_adv,
        )
        .unwrap();
        assert_eq!(a.total, b.total);

        let err = joint_loss(
            &LossComponents {
                perceptual: f64::NAN,
                ..ones
            },
            &w,
        )
        .unwrap_err();
        assert!(err.to_string().contains("perceptual"));
    }

    #[test]
    fn joint_loss_is_linear_per_component() {
        let w = LossWeights::default();
        let base = LossComponents {
            l1: 0.3,
            msssim: 0.2,
            perceptual: 0.7,
            adversarial: 0.4,
        };
        for (k, (_, lambda)) in w.named().iter().enumerate() {
            let at = |v: f64| {
                let mut c = base;
                *[&mut c.l1, &mut c.msssim, &mut c.perceptual, &mut c.adversarial][k] = v;
                joint_loss(&c, &w).unwrap().total
            };
            let (t0, t1, t2) = (at(0.0), at(1.0), at(2.0));
            assert!(((t1 - t0) - lambda).abs() < 1e-12);
            assert!(((t2 - t1) - lambda).abs() < 1e-12);
        }
    }

    #[test]
    fn presets() {
        assert_eq!(LossWeights::preset("full").unwrap(), LossWeights::default());
        let l1 = LossWeights::preset("l1").unwrap();
        assert_eq!((l1.l1, l1.msssim, l1.perceptual, l1.adversarial), (5.0, 0.0, 0.0, 0.0));
        assert_eq!(LossWeights::preset("l1+msssim+per").unwrap().adversarial, 0.0);
        assert!(LossWeights::preset("l2").is_err());
        assert!(LossWeights { l1: -1.0, ..l1 }.validate().is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        let g = Graph::<f64>::new();
        let t = g.constant(rnd(&[2, 3, 4, 4], 1));
        assert_eq!(smooth_l1(t, t).unwrap().item(), 0.0);
        let far = g.constant(t.value().map(|v| v + 2.0));
        assert!((smooth_l1(far, t).unwrap().item() - 1.5).abs() < 1e-12);
        let near = g.constant(t.value().map(|v| v - 0.5));
        assert!((smooth_l1(near, t).unwrap().item() - 0.125).abs() < 1e-12);
    }

    /// Brute-force SSIM per channel with explicit windows, averaged.
    fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (bs, c, h, w) = a.dims4().unwrap();
        let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        let k = SSIM_WINDOW;
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..bs {
            for ch in 0..c {
                let mut sum = 0.0;
                for y in 0..=h - k {
                    for x in 0..=w - k {
                        let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for dy in 0..k {
                            for dx in 0..k {
                                let wt = g[dy] * g[dx];
                                let p = a.at4(bi, ch, y + dy, x + dx);
                                let q = b.at4(bi, ch, y + dy, x + dx);
                                mx += wt * p;
                                my += wt * q;
                                xx += wt * p * p;
                                yy += wt * q * q;
                                xy += wt * p * q;
                            }
                        }
                        let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                        sum += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    }
                }
                total += (sum / ((h - k + 1) * (w - k + 1)) as f64).max(0.0);
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ms_ssim_single_scale_matches_bruteforce() {
        let a = rnd(&[2, 3, 16, 16], 2);
        let b = a
            .zip_map(&rnd(&[2, 3, 16, 16], 3), |x, n| (0.7 * x + 0.3 * n).clamp(0.0, 1.0))
            .unwrap();
        let g = Graph::new();
        let loss = ms_ssim_loss(g.constant(a.clone()), g.constant(b.clone()), 1)
            .unwrap()
            .item();
        assert!((loss - (1.0 - ssim_oracle(&a, &b))).abs() < 1e-4);
    }

    #[test]
    fn ms_ssim_identity_ordering_and_range() {
        let t = structured(1, 3, 48, 48);
        let g = Graph::new();
        let tv = g.constant(t.clone());
        let l = |p: Tensor<f64>| ms_ssim_loss(g.constant(p), tv, 3).unwrap().item();
        assert!(l(t.clone()).abs() < 1e-12);
        let inverted = l(t.map(|v| 1.0 - v));
        let noisy = l(t
            .zip_map(&rnd(&[1, 3, 48, 48], 4), |v, n| (v + 0.05 * (n - 0.5)).clamp(0.0, 1.0))
            .unwrap());
        assert!(inverted > noisy, "{inverted} vs {noisy}");
        assert!((0.0..=1.0 + 1e-9).contains(&inverted));
        let e = ms_ssim_loss(
            g.constant(rnd(&[1, 1, 40, 40], 5)),
            g.constant(rnd(&[1, 1, 40, 40], 6)),
            3,
        )
        .unwrap_err();
        assert!(e.is_validation());
    }

    #[test]
    fn ms_ssim_weights_renormalize() {
        let w = ms_ssim_weights(3).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 0.0448 / 0.6305).abs() < 1e-15);
        assert_eq!(ms_ssim_weights(5).unwrap().len(), 5);
        assert!(ms_ssim_weights(6).is_err());
        assert_eq!(ms_ssim_min_size(3), 44);
    }

    #[test]
    fn ms_ssim_gradcheck() {
        let a = structured(1, 2, 24, 24);
        let b = rnd(&[1, 2, 24, 24], 7);
        let sel = crate::gradcheck::sample_elements(std::slice::from_ref(&a), 0.05, 1);
        let rep = crate::gradcheck::check(&[a], &sel, 1e-5, 1e-8, |g, v| {
            ms_ssim_loss(v[0], g.constant(b.clone()), 2)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn perceptual_examples() {
        let ex = PerceptualExtractor::random(3);
        let g = Graph::new();
        let a = g.constant(rnd(&[1, 3, 16, 16], 8));
        let b = g.constant(rnd(&[1, 3, 16, 16], 9));
        assert_eq!(perceptual_loss(a, a, &ex).unwrap().item(), 0.0);
        let ab = perceptual_loss(a, b, &ex).unwrap().item();
        let ba = perceptual_loss(b, a, &ex).unwrap().item();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-15);
        assert_eq!(ex, PerceptualExtractor::random(3));
    }

    /// Naive 3×3 same conv + ReLU and 2×2 mean pooling.
    fn stage_oracle(x: &Tensor<f64>, w: &Tensor<f64>, pool: bool) -> Tensor<f64> {
        let x = if pool {
            let (b, c, h, wd) = x.dims4().unwrap();
            Tensor::from_fn(&[b, c, h / 2, wd / 2], |i| {
                let (p, y, xx) = (i / (h / 2 * wd / 2), (i / (wd / 2)) % (h / 2), i % (wd / 2));
                let at = |dy, dx| x.data()[p * h * wd + (2 * y + dy) * wd + 2 * xx + dx];
                (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0
            })
        } else {
            x.clone()
        };
        let (_, c, h, wd) = x.dims4().unwrap();
        let o = w.shape()[0];
        Tensor::from_fn(&[1, o, h, wd], |i| {
            let (oc, y, xx) = (i / (h * wd), (i / wd) % h, i % wd);
            let mut acc = 0.0;
            for ic in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at4(oc, ic, ky, kx) * x.at4(0, ic, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc.max(0.0)
        })
    }

    #[test]
    fn perceptual_matches_manual_layers() {
        let ex = PerceptualExtractor::random(11);
        let (a, b) = (rnd(&[1, 3, 16, 16], 12), rnd(&[1, 3, 16, 16], 13));
        let (mut fa, mut fb, mut want) = (a.clone(), b.clone(), 0.0);
        for (i, (w, _)) in ex.stages().iter().enumerate() {
            let w = w.cast::<f64>();
            fa = stage_oracle(&fa, &w, i > 0);
            fb = stage_oracle(&fb, &w, i > 0);
            want += fa.zip_map(&fb, |p, q| (p - q) * (p - q)).unwrap().mean();
        }
        let g = Graph::new();
        let got = perceptual_loss(g.constant(a), g.constant(b), &ex).unwrap().item();
        assert!((got - want).abs() < 1e-10 * want.max(1.0));
    }

    fn constant_disc(value: f32) -> (Discriminator, ParamStore<f32>) {
        let d = Discriminator::new(4).unwrap();
        let mut s = d.init(0);
        for t in s.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        s.by_name_mut("disc.conv4.bias").unwrap().data_mut()[0] = value;
        (d, s)
    }

    #[test]
    fn adversarial_constant_discriminators() {
        let g = Graph::<f32>::new();
        let pred = g.constant(rnd(&[2, 3, 32, 32], 1).cast());
        let target = g.constant(rnd(&[2, 3, 32, 32], 2).cast());
        let (d, s) = constant_disc(1.0);
        let (gl, dl) = adversarial_losses(pred, target, &d, &s.bind(&g, false)).unwrap();
        assert_eq!((gl.item(), dl.item()), (0.0, 0.5));
        let (d, s) = constant_disc(0.0);
        let (gl, _) = adversarial_losses(pred, target, &d, &s.bind(&g, false)).unwrap();
        assert_eq!(gl.item(), 0.5);
    }

    #[test]
    fn discriminator_geometry() {
        let d = Discriminator::new(16).unwrap();
        let s = d.init(1);
        let g = Graph::<f32>::new();
        let out = d
            .forward(&s.bind(&g, false), g.constant(Tensor::zeros(&[1, 3, 64, 64])))
            .unwrap();
        assert_eq!(out.shape(), vec![1, 1, 6, 6]);
        // receptive field: 1 + Σ (k − 1) · Π(previous strides)
        let rf = [1, 2, 4, 8, 8].iter().fold(1, |acc, jump| acc + 3 * jump);
        assert_eq!(rf, Discriminator::RECEPTIVE_FIELD);
        assert!(d
            .forward(&s.bind(&g, false), g.constant(Tensor::zeros(&[1, 3, 16, 16])))
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn d_loss_does_not_reach_generator() {
        let g = Graph::<f32>::new();
        let gen_w = g.leaf(Tensor::full(&[1], 0.9));
        let base = g.constant(rnd(&[1, 3, 32, 32], 3).cast());
        let pred = base.mul(gen_w).unwrap();
        let target = g.constant(rnd(&[1, 3, 32, 32], 4).cast());
        let d = Discriminator::new(4).unwrap();
        let s = d.init(2);
        let p = s.bind(&g, true);
        let (gl, dl) = adversarial_losses(pred, target, &d, &p).unwrap();
        let grads = g.backward(dl).unwrap();
        assert!(grads.get(gen_w).is_none());
        assert!(grads.get(p.vars()[0]).is_some());
        let grads = g.backward(gl).unwrap();
        assert!(grads.get(gen_w).is_some());
    }
}
