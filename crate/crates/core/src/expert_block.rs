//! Expert bodies.
//!
//! The default expert runs a two-layer residual stack, then scales its
//! channels by a blend of a visual descriptor (pooled features) and a
//! frequency descriptor (pooled FFT magnitude). The blend is applied once to
//! the spectrum and once, after a depthwise conv, to the visual features.
//! [`PlainBlock`] is the ablation stand-in without any attention.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv, DwConv, Linear};
use crate::params::{Bound, Init, ParamId, ParamLayout};
use crate::tensor::Element;

/// Gain of the second conv in each residual layer; keeps the initial
/// residual branch small so deep stacks start near identity.
const RESIDUAL_GAIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct ResidualLayer {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResidualLayer {
    fn new(l: &mut ParamLayout, name: &str, c: usize) -> Self {
        Self {
            conv1: Conv::same(l, &format!("{name}.conv1"), c, c, 3),
            conv2: Conv::with_gain(
                l,
                &format!("{name}.conv2"),
                c,
                c,
                3,
                crate::autograd::Conv2dSpec::same(3, 1),
                RESIDUAL_GAIN,
            ),
        }
    }

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let r = self.conv1.forward(p, x)?.relu();
        x.add(self.conv2.forward(p, r)?)
    }
}

/// One `(alpha, beta)` pair, each a learnable `[1]` tensor.
#[derive(Clone, Copy, Debug)]
pub struct BlendSite {
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl BlendSite {
    fn new(l: &mut ParamLayout, name: &str) -> Self {
        Self {
            alpha: l.add(format!("{name}.alpha"), &[1], Init::Const(1.0)),
            beta: l.add(format!("{name}.beta"), &[1], Init::Const(0.0)),
        }
    }
}

fn check_channels<T: Element>(x: Var<'_, T>, c: usize, op: &'static str) -> Result<()> {
    let (_, xc, _, _) = x.dims4()?;
    if xc != c {
        return Err(Error::validation(format!("{op}: expected {c} channels, got {xc}")));
    }
    Ok(())
}

/// Two residual layers.
pub fn residual_stack<'g, T: Element>(
    layers: &[ResidualLayer; 2],
    p: &Bound<'g, T>,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    check_channels(x, layers[0].conv1.cin, "residual_stack")?;
    layers[1].forward(p, layers[0].forward(p, x)?)
}

/// `sigmoid(linear(GAP(f)))`, shape `B×C`.
pub fn channel_descriptor<'g, T: Element>(f: Var<'g, T>, lin: &Linear, p: &Bound<'g, T>) -> Result<Var<'g, T>> {
    let (b, c, _, _) = f.dims4()?;
    let pooled = f.mean_hw()?.reshape(&[b, c])?;
    Ok(lin.forward(p, pooled)?.sigmoid())
}

/// Scales channel `i` of `f` by `alpha·ws[i] + beta·wf[i]`.
///
/// `f` is either a `B×C×H×W` map or a `2×B×C×H×W` spectrum; in the latter
/// case real and imaginary planes get the same factor.
pub fn blend_attention<'g, T: Element>(
    f: Var<'g, T>,
    ws: Var<'g, T>,
    wf: Var<'g, T>,
    alpha: Var<'g, T>,
    beta: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let fs = f.shape();
    let (b, c) = match fs[..] {
        [b, c, _, _] | [2, b, c, _, _] => (b, c),
        _ => return Err(Error::shape("blend_attention", format!("features {fs:?}"))),
    };
    if ws.shape() != [b, c] || wf.shape() != [b, c] {
        return Err(Error::shape(
            "blend_attention",
            format!("features {fs:?}, ws {:?}, wf {:?}", ws.shape(), wf.shape()),
        ));
    }
    let factor = ws.mul(alpha)?.add(wf.mul(beta)?)?;
    let factor = if fs.len() == 5 {
        factor.reshape(&[1, b, c, 1, 1])?
    } else {
        factor.reshape(&[b, c, 1, 1])?
    };
    f.mul(factor)
}

#[derive(Clone, Debug)]
pub struct Ifib {
    pub channels: usize,
    pub residual: [ResidualLayer; 2],
    pub visual: Linear,
    pub freq: Linear,
    pub dw: DwConv,
    pub spectral_site: BlendSite,
    pub visual_site: BlendSite,
}

impl Ifib {
    pub fn new(l: &mut ParamLayout, name: &str, c: usize) -> Self {
        Self {
            channels: c,
            residual: [
                ResidualLayer::new(l, &format!("{name}.res0"), c),
                ResidualLayer::new(l, &format!("{name}.res1"), c),
            ],
            visual: Linear::new(l, &format!("{name}.visual"), c, c),
            freq: Linear::new(l, &format!("{name}.freq"), c, c),
            dw: DwConv::new(l, &format!("{name}.dw"), c, 3),
            spectral_site: BlendSite::new(l, &format!("{name}.site1")),
            visual_site: BlendSite::new(l, &format!("{name}.site2")),
        }
    }

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let r = residual_stack(&self.residual, p, x)?;
        let spectrum = r.fft2()?;
        let ws = channel_descriptor(r, &self.visual, p)?;
        let wf = channel_descriptor(spectrum.complex_abs()?, &self.freq, p)?;
        let site = |s: BlendSite| (p.get(s.alpha), p.get(s.beta));
        let (a1, b1) = site(self.spectral_site);
        let v = blend_attention(spectrum, ws, wf, a1, b1)?.ifft2_real()?;
        let v = self.dw.forward(p, v)?;
        let (a2, b2) = site(self.visual_site);
        x.add(blend_attention(v, ws, wf, a2, b2)?)
    }
}

/// Residual stack plus a pointwise conv-relu-conv, with no attention.
/// Parameter count is within a few percent of [`Ifib`] at the same width.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    pub residual: [ResidualLayer; 2],
    pub pw1: Conv,
    pub pw2: Conv,
}

impl PlainBlock {
    pub fn new(l: &mut ParamLayout, name: &str, c: usize) -> Self {
        Self {
            residual: [
                ResidualLayer::new(l, &format!("{name}.res0"), c),
                ResidualLayer::new(l, &format!("{name}.res1"), c),
            ],
            pw1: Conv::same(l, &format!("{name}.pw1"), c, c, 1),
            pw2: Conv::with_gain(
                l,
                &format!("{name}.pw2"),
                c,
                c,
                1,
                crate::autograd::Conv2dSpec::same(1, 1),
                RESIDUAL_GAIN,
            ),
        }
    }

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let r = residual_stack(&self.residual, p, x)?;
        let h = self.pw1.forward(p, r)?.relu();
        r.add(self.pw2.forward(p, h)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    #[default]
    Ifib,
    Plain,
}

impl std::fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExpertKind::Ifib => "ifib",
            ExpertKind::Plain => "plain",
        })
    }
}

impl std::str::FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ifib" => Ok(ExpertKind::Ifib),
            "plain" => Ok(ExpertKind::Plain),
            _ => Err(Error::validation(format!("unknown expert block `{s}` (ifib|plain)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Expert {
    Ifib(Ifib),
    Plain(PlainBlock),
}

impl Expert {
    pub fn new(kind: ExpertKind, l: &mut ParamLayout, name: &str, c: usize) -> Self {
        match kind {
            ExpertKind::Ifib => Expert::Ifib(Ifib::new(l, name, c)),
            ExpertKind::Plain => Expert::Plain(PlainBlock::new(l, name, c)),
        }
    }

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            Expert::Ifib(b) => b.forward(p, x),
            Expert::Plain(b) => b.forward(p, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::freq_ops;
    use crate::gradcheck;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    fn block(c: usize) -> (Ifib, ParamLayout) {
        let mut l = ParamLayout::new();
        let b = Ifib::new(&mut l, "e", c);
        (b, l)
    }

    fn set(store: &mut ParamStore<f64>, name: &str, v: f64) {
        store.by_name_mut(name).unwrap().data_mut().fill(v);
    }

    /// Naive same-padded 3×3 conv on one image.
    fn conv3(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (_, c, h, wd) = x.dims4().unwrap();
        let o = w.shape()[0];
        let mut out = Tensor::zeros(&[1, o, h, wd]);
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at4(oc, ic, ky, kx) * x.at4(0, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set4(0, oc, y, xx, acc);
                }
            }
        }
        out
    }

    #[test]
    fn residual_stack_zero_convs_zero_input() {
        let (b, l) = block(4);
        let mut s = l.init(0).cast::<f64>();
        for t in s.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let g = Graph::new();
        let p = s.bind(&g, false);
        let x = g.constant(Tensor::zeros(&[2, 4, 6, 6]));
        let y = residual_stack(&b.residual, &p, x).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 6, 6]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_stack_matches_layerwise_oracle() {
        let (b, l) = block(3);
        let s = l.init(5).cast::<f64>();
        let x = rnd(&[1, 3, 5, 6], 1);
        let g = Graph::new();
        let p = s.bind(&g, false);
        let got = residual_stack(&b.residual, &p, g.constant(x.clone())).unwrap().value();
        let mut want = x;
        for r in 0..2 {
            let w = |n: &str| s.by_name(&format!("e.res{r}.{n}")).unwrap();
            let h = conv3(&want, w("conv1.weight"), w("conv1.bias")).map(|v| v.max(0.0));
            let o = conv3(&h, w("conv2.weight"), w("conv2.bias"));
            want = want.zip_map(&o, |a, b| a + b).unwrap();
        }
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn residual_stack_rejects_channel_mismatch() {
        let (b, l) = block(4);
        let s = l.init(0);
        let g = Graph::new();
        let p = s.bind(&g, false);
        let err = residual_stack(&b.residual, &p, g.constant(Tensor::zeros(&[1, 3, 4, 4]))).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn channel_descriptor_cases() {
        let mut l = ParamLayout::new();
        let lin = Linear::new(&mut l, "lin", 2, 2);
        let mut s = l.init(3).cast::<f64>();
        let g = Graph::new();
        let p = s.bind(&g, false);
        let w = channel_descriptor(g.constant(Tensor::zeros(&[1, 2, 3, 3])), &lin, &p).unwrap();
        assert!(w.value().data().iter().all(|&v| v == 0.5));

        // constant channels (1, -2): sigmoid(W·[1,-2] + b)
        s.by_name_mut("lin.weight")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.5, 0.25, -1.0, 2.0]);
        s.by_name_mut("lin.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.1, 0.0]);
        let g = Graph::new();
        let p = s.bind(&g, false);
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| if i < 9 { 1.0 } else { -2.0 });
        let w = channel_descriptor(g.constant(x), &lin, &p).unwrap().value();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((w.data()[0] - sig(0.5 - 0.5 + 0.1)).abs() < 1e-12);
        assert!((w.data()[1] - sig(-1.0 - 4.0)).abs() < 1e-12);

        let g = Graph::new();
        let p = s.bind(&g, false);
        let w = channel_descriptor(g.constant(rnd(&[4, 2, 5, 5], 9).map(|v| v * 10.0)), &lin, &p).unwrap();
        assert!(w.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn blend_attention_degenerate_cases() {
        let g = Graph::<f64>::new();
        let f = g.constant(rnd(&[2, 3, 4, 4], 1));
        let ws = g.constant(rnd(&[2, 3], 2).map(|v| 0.5 + 0.4 * v));
        let wf = g.constant(rnd(&[2, 3], 3).map(|v| 0.5 + 0.4 * v));
        let s = |v: f64| g.constant(Tensor::full(&[1], v));
        let scaled = |w: Var<'_, f64>| f.mul(w.reshape(&[2, 3, 1, 1]).unwrap()).unwrap().value();

        let visual = blend_attention(f, ws, wf, s(1.0), s(0.0)).unwrap().value();
        assert!(visual.max_abs_diff(&scaled(ws)) < 1e-15);
        let zero = blend_attention(f, ws, wf, s(0.0), s(0.0)).unwrap().value();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let half = blend_attention(f, ws, ws, s(0.5), s(0.5)).unwrap().value();
        assert!(half.max_abs_diff(&scaled(ws)) < 1e-15);
    }

    #[test]
    fn spectral_scaling_keeps_real_output() {
        let x = rnd(&[2, 3, 8, 6], 4);
        let mut s = freq_ops::fft2(&x).unwrap();
        for (i, (r, m)) in s.re.data_mut().iter_mut().zip(s.im.data_mut()).enumerate() {
            let k = 0.3 + (i / 48) as f64 * 0.1;
            *r *= k;
            *m *= k;
        }
        let (_, residue) = freq_ops::ifft2_with_residue(&s).unwrap();
        assert!(residue < 1e-5);
    }

    #[test]
    fn ifib_shape_and_zero_blend_identity() {
        let (b, l) = block(4);
        let mut s = l.init(2).cast::<f64>();
        for site in ["site1", "site2"] {
            set(&mut s, &format!("e.{site}.alpha"), 0.0);
        }
        let g = Graph::new();
        let p = s.bind(&g, false);
        let x = rnd(&[2, 4, 8, 8], 3);
        let y = b.forward(&p, g.constant(x.clone())).unwrap().value();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(*y, x);
    }

    #[test]
    fn ifib_is_affine_in_alpha() {
        let (b, l) = block(4);
        let base = l.init(6).cast::<f64>();
        let x = rnd(&[1, 4, 8, 8], 7);
        let run = |a: f64| {
            let mut s = base.clone();
            set(&mut s, "e.site2.alpha", a);
            set(&mut s, "e.site2.beta", 0.3);
            let g = Graph::new();
            let p = s.bind(&g, false);
            b.forward(&p, g.constant(x.clone())).unwrap().value().as_ref().clone()
        };
        let (y0, y1, y2) = (run(0.0), run(1.0), run(2.0));
        let pred = y1.zip_map(&y0, |a, b| 2.0 * a - b).unwrap();
        assert!(pred.max_abs_diff(&y2) < 1e-10);
    }

    #[test]
    fn ifib_gradcheck() {
        let (b, l) = block(4);
        let mut s = l.init(11).cast::<f64>();
        // open the frequency gate so beta and the freq linear matter
        set(&mut s, "e.site1.beta", 0.7);
        set(&mut s, "e.site2.beta", -0.4);
        let x = rnd(&[1, 4, 8, 8], 12);
        let proj = rnd(&[1, 4, 8, 8], 13);
        let mut tensors = s.tensors().to_vec();
        tensors.push(x);
        let sel = gradcheck::sample_elements(&tensors, 0.1, 1);
        let n = s.len();
        let rep = gradcheck::check(&tensors, &sel, 1e-4, 1e-7, |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let y = b.forward(&p, v[n])?;
            Ok(y.mul(g.constant(proj.clone()))?.sum())
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    #[test]
    fn plain_block_param_count_matches_ifib() {
        for c in [16, 32, 64] {
            let (_, li) = block(c);
            let mut lp = ParamLayout::new();
            PlainBlock::new(&mut lp, "p", c);
            assert_eq!(li.count(), 38 * c * c + 16 * c + 4);
            assert_eq!(lp.count(), 38 * c * c + 6 * c);
            let ratio = lp.count() as f64 / li.count() as f64;
            assert!((ratio - 1.0).abs() < 0.05);
        }
    }
}
