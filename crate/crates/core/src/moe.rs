//! Expert mixing at image, patch and pixel granularity, plus the dilated
//! attention module (DAM) used at every U-Net stage and after patch stitching.

use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::expert_block::{Expert, ExpertKind};
use crate::layers::{Conv, Linear};
use crate::params::{Bound, ParamLayout};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Image,
    Patch,
    Pixel,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Image => "image",
            Granularity::Patch => "patch",
            Granularity::Pixel => "pixel",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Granularity::Image),
            "patch" => Ok(Granularity::Patch),
            "pixel" => Ok(Granularity::Pixel),
            _ => Err(Error::validation(format!(
                "unknown granularity `{s}` (image|patch|pixel)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub gh: usize,
    pub gw: usize,
}

impl PatchGrid {
    pub fn new(gh: usize, gw: usize) -> Result<Self> {
        if gh == 0 || gw == 0 {
            return Err(Error::validation("patch grid dimensions must be positive"));
        }
        Ok(Self { gh, gw })
    }

    pub fn count(&self) -> usize {
        self.gh * self.gw
    }

    /// Pixel size of one patch for an `h×w` map.
    pub fn patch_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.gh) || !w.is_multiple_of(self.gw) {
            return Err(Error::validation(format!(
                "{h}×{w} map is not divisible by a {}×{} patch grid",
                self.gh, self.gw
            )));
        }
        Ok((h / self.gh, w / self.gw))
    }
}

/// Row-major list of patches, each `B×C×ph×pw`.
pub fn partition_patches<T: Element>(f: &Tensor<T>, g: PatchGrid) -> Result<Vec<Tensor<T>>> {
    let (b, c, h, w) = f.dims4()?;
    let (ph, pw) = g.patch_size(h, w)?;
    let mut out = Vec::with_capacity(g.count());
    for py in 0..g.gh {
        for px in 0..g.gw {
            let mut data = Vec::with_capacity(b * c * ph * pw);
            for plane in f.data().chunks(h * w) {
                for y in py * ph..(py + 1) * ph {
                    data.extend_from_slice(&plane[y * w + px * pw..y * w + (px + 1) * pw]);
                }
            }
            out.push(Tensor::new(vec![b, c, ph, pw], data)?);
        }
    }
    Ok(out)
}

/// Exact inverse of [`partition_patches`].
pub fn stitch_patches<T: Element>(patches: &[Tensor<T>], g: PatchGrid) -> Result<Tensor<T>> {
    if patches.len() != g.count() {
        return Err(Error::validation(format!(
            "expected {} patches for a {}×{} grid, got {}",
            g.count(),
            g.gh,
            g.gw,
            patches.len()
        )));
    }
    let (b, c, ph, pw) = patches[0].dims4()?;
    if patches.iter().any(|p| p.shape() != patches[0].shape()) {
        return Err(Error::validation("patches have differing shapes"));
    }
    let (h, w) = (ph * g.gh, pw * g.gw);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for (i, p) in patches.iter().enumerate() {
        let (py, px) = (i / g.gw, i % g.gw);
        for (plane, src) in out.data_mut().chunks_mut(h * w).zip(p.data().chunks(ph * pw)) {
            for y in 0..ph {
                let row = (py * ph + y) * w + px * pw;
                plane[row..row + pw].copy_from_slice(&src[y * pw..(y + 1) * pw]);
            }
        }
    }
    Ok(out)
}

fn check_outs<'g, T: Element>(
    outs: &[Var<'g, T>],
    w: Var<'g, T>,
    op: &'static str,
) -> Result<(usize, usize, usize, usize)> {
    let Some(first) = outs.first() else {
        return Err(Error::validation(format!("{op}: no expert outputs")));
    };
    let dims = first.dims4()?;
    if outs.iter().any(|o| o.shape() != first.shape()) {
        return Err(Error::validation(format!("{op}: expert outputs differ in shape")));
    }
    let ws = w.shape();
    if ws.len() != 4 || ws[0] != dims.0 || ws[1] != outs.len() {
        return Err(Error::validation(format!(
            "{op}: {} outputs of {:?} vs weights {ws:?}",
            outs.len(),
            first.shape()
        )));
    }
    Ok(dims)
}

fn weighted_sum<'g, T: Element>(outs: &[Var<'g, T>], w: Var<'g, T>) -> Result<Var<'g, T>> {
    let mut acc: Option<Var<'g, T>> = None;
    for (i, &o) in outs.iter().enumerate() {
        let term = o.mul(w.narrow(1, i, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// `Σᵢ wᵢ·outᵢ` with `B×n×1×1` weights.
pub fn mix_image<'g, T: Element>(outs: &[Var<'g, T>], w: Var<'g, T>) -> Result<Var<'g, T>> {
    check_outs(outs, w, "mix_image")?;
    if w.shape()[2..] != [1, 1] {
        return Err(Error::validation(format!(
            "mix_image: weights {:?} are not B×n×1×1",
            w.shape()
        )));
    }
    weighted_sum(outs, w)
}

/// Per-pixel convex combination with `B×n×H×W` weights.
pub fn mix_pixel<'g, T: Element>(outs: &[Var<'g, T>], w: Var<'g, T>) -> Result<Var<'g, T>> {
    let (_, _, h, wd) = check_outs(outs, w, "mix_pixel")?;
    if w.shape()[2..] != [h, wd] {
        return Err(Error::validation(format!(
            "mix_pixel: weights {:?} do not match {h}×{wd} outputs",
            w.shape()
        )));
    }
    weighted_sum(outs, w)
}

/// Experts sharing one width at one granularity.
#[derive(Clone, Debug)]
pub struct ExpertSet {
    pub level: Granularity,
    pub experts: Vec<Expert>,
}

impl ExpertSet {
    pub fn new(
        l: &mut ParamLayout,
        name: &str,
        level: Granularity,
        kind: ExpertKind,
        c: usize,
        n: usize,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation(format!("{name}: expert count must be at least 1")));
        }
        let experts = (0..n)
            .map(|i| Expert::new(kind, l, &format!("{name}.expert{i}"), c))
            .collect();
        Ok(Self { level, experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn run<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        self.experts.iter().map(|e| e.forward(p, x)).collect()
    }
}

/// Dilated group (rates 1–4) with conv-relu residual, channel attention and
/// pixel attention; shape preserving.
#[derive(Clone, Debug)]
pub struct Dam {
    pub channels: usize,
    pub branches: [Conv; 4],
    pub fuse: Conv,
    pub ca1: Linear,
    pub ca2: Linear,
    pub pa1: Conv,
    pub pa2: Conv,
}

impl Dam {
    pub fn new(l: &mut ParamLayout, name: &str, c: usize) -> Result<Self> {
        if c < 4 || !c.is_multiple_of(4) {
            return Err(Error::validation(format!(
                "DAM width must be a positive multiple of 4, got {c}"
            )));
        }
        let branch = |l: &mut ParamLayout, r: usize| {
            Conv::new(l, &format!("{name}.dil{r}"), c, c / 4, 3, Conv2dSpec::same(3, r))
        };
        let mid = (c / 8).max(1);
        Ok(Self {
            channels: c,
            branches: [branch(l, 1), branch(l, 2), branch(l, 3), branch(l, 4)],
            fuse: Conv::same(l, &format!("{name}.fuse"), c, c, 3),
            ca1: Linear::new(l, &format!("{name}.ca1"), c, mid),
            ca2: Linear::new(l, &format!("{name}.ca2"), mid, c),
            pa1: Conv::same(l, &format!("{name}.pa1"), c, mid, 1),
            pa2: Conv::same(l, &format!("{name}.pa2"), mid, 1, 1),
        })
    }

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.local(p, x)?;
        let gate = self.channel_gate(p, y)?;
        self.finish(p, x, y, gate)
    }

    /// Dilated group plus conv-relu residual.
    fn local<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let c = x.dims4()?.1;
        if c != self.channels {
            return Err(Error::validation(format!(
                "DAM expects {} channels, got {c}",
                self.channels
            )));
        }
        let parts = self
            .branches
            .iter()
            .map(|b| b.forward(p, x))
            .collect::<Result<Vec<_>>>()?;
        let y = Var::concat(&parts, 1)?;
        y.add(self.fuse.forward(p, y)?.relu())
    }

    /// `B×C×1×1` channel attention; the only non-local part of the module.
    fn channel_gate<'g, T: Element>(&self, p: &Bound<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
        let (b, c, _, _) = y.dims4()?;
        let h = self.ca1.forward(p, y.mean_hw()?.reshape(&[b, c])?)?.relu();
        self.ca2.forward(p, h)?.sigmoid().reshape(&[b, c, 1, 1])
    }

    fn finish<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        y: Var<'g, T>,
        gate: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let y = y.mul(gate)?;
        let h = self.pa1.forward(p, y)?.relu();
        let pa = self.pa2.forward(p, h)?.sigmoid();
        x.add(y.mul(pa)?)
    }
}

/// Patch-level mixing: every expert runs on every patch, weights select per
/// patch, patches are stitched back and `dam` heals the seams.
pub fn mix_patch<'g, T: Element>(
    f: Var<'g, T>,
    set: &ExpertSet,
    p: &Bound<'g, T>,
    w: Var<'g, T>,
    grid: PatchGrid,
    dam: &Dam,
) -> Result<Var<'g, T>> {
    let (b, _, h, wd) = f.dims4()?;
    grid.patch_size(h, wd)?;
    if w.shape() != [b, set.len(), grid.gh, grid.gw] {
        return Err(Error::validation(format!(
            "mix_patch: weights {:?} do not match {} experts on a {}×{} grid",
            w.shape(),
            set.len(),
            grid.gh,
            grid.gw
        )));
    }
    let patches = f.to_patches(grid.gh, grid.gw)?;
    let outs = set.run(p, patches)?;
    let wp = w.to_patches(grid.gh, grid.gw)?;
    let mixed = mix_image(&outs, wp)?.from_patches(grid.gh, grid.gw)?;
    dam.forward(p, mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    fn weights(b: usize, vals: &[f64]) -> Tensor<f64> {
        let n = vals.len();
        Tensor::from_fn(&[b, n, 1, 1], |i| vals[i % n])
    }

    #[test]
    fn mix_image_examples() {
        let g = Graph::<f64>::new();
        let outs: Vec<_> = (0..3).map(|s| g.constant(rnd(&[2, 4, 5, 5], s))).collect();
        let sel = mix_image(&outs, g.constant(weights(2, &[1.0, 0.0, 0.0])))
            .unwrap()
            .value();
        assert_eq!(*sel, *outs[0].value());

        let same = vec![outs[1]; 3];
        let m = mix_image(&same, g.constant(weights(2, &[0.2, 0.5, 0.3])))
            .unwrap()
            .value();
        assert!(m.max_abs_diff(&outs[1].value()) < 1e-15);

        let pair = [
            g.constant(Tensor::zeros(&[1, 2, 3, 3])),
            g.constant(Tensor::full(&[1, 2, 3, 3], 1.0)),
        ];
        let m = mix_image(&pair, g.constant(weights(1, &[0.25, 0.75]))).unwrap().value();
        assert!(m.data().iter().all(|&v| v == 0.75));

        assert!(mix_image(&outs[..2], g.constant(weights(2, &[0.3, 0.3, 0.4]))).is_err());
        assert!(mix_image(&outs, g.constant(Tensor::full(&[2, 3, 5, 5], 1.0 / 3.0))).is_err());
        assert!(mix_image(&[], g.constant(weights(2, &[1.0]))).is_err());
    }

    #[test]
    fn partition_and_stitch() {
        let f = rnd(&[2, 3, 8, 12], 1);
        let one = partition_patches(&f, PatchGrid::new(1, 1).unwrap()).unwrap();
        assert_eq!(one, vec![f.clone()]);
        let g = PatchGrid::new(2, 3).unwrap();
        assert_eq!(stitch_patches(&partition_patches(&f, g).unwrap(), g).unwrap(), f);

        let quad = Tensor::from_fn(&[1, 1, 4, 4], |i| {
            let (y, x) = (i / 4, i % 4);
            [[1.0, 2.0], [3.0, 4.0]][y / 2][x / 2]
        });
        let ps = partition_patches(&quad, PatchGrid::new(2, 2).unwrap()).unwrap();
        for (k, p) in ps.iter().enumerate() {
            assert!(p.data().iter().all(|&v| v == (k + 1) as f64));
        }
        assert!(partition_patches(&f, PatchGrid::new(3, 3).unwrap())
            .unwrap_err()
            .is_validation());
        assert!(stitch_patches(&ps[..3], PatchGrid::new(2, 2).unwrap())
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn var_patches_agree_with_tensor_patches() {
        let f = rnd(&[2, 3, 8, 8], 2);
        let grid = PatchGrid::new(2, 4).unwrap();
        let g = Graph::new();
        let batched = g.constant(f.clone()).to_patches(2, 4).unwrap().value();
        let list = partition_patches(&f, grid).unwrap();
        // batch index is b·G + patch
        for bi in 0..2 {
            for (k, p) in list.iter().enumerate() {
                let want = p.batch_slice(bi, 1).unwrap();
                let got = batched.batch_slice(bi * grid.count() + k, 1).unwrap();
                assert_eq!(want, got);
            }
        }
    }

    #[test]
    fn mix_pixel_examples() {
        let g = Graph::<f64>::new();
        let pair = [
            g.constant(Tensor::zeros(&[1, 2, 3, 5])),
            g.constant(Tensor::full(&[1, 2, 3, 5], 1.0)),
        ];
        let ramp = |x: usize| x as f64 / 4.0;
        let w = Tensor::from_fn(&[1, 2, 3, 5], |i| {
            let x = i % 5;
            if i < 15 {
                1.0 - ramp(x)
            } else {
                ramp(x)
            }
        });
        let m = mix_pixel(&pair, g.constant(w)).unwrap().value();
        for (i, &v) in m.data().iter().enumerate() {
            assert!((v - ramp(i % 5)).abs() < 1e-15);
        }

        let outs: Vec<_> = (0..3).map(|s| g.constant(rnd(&[2, 2, 4, 4], s + 10))).collect();
        let onehot = Tensor::from_fn(&[2, 3, 4, 4], |i| {
            let (n, px) = ((i / 16) % 3, i % 16);
            if px % 3 == n {
                1.0
            } else {
                0.0
            }
        });
        let m = mix_pixel(&outs, g.constant(onehot)).unwrap().value();
        for b in 0..2 {
            for c in 0..2 {
                for px in 0..16 {
                    let idx = (b * 2 + c) * 16 + px;
                    assert_eq!(m.data()[idx], outs[px % 3].value().data()[idx]);
                }
            }
        }

        let wi = weights(2, &[0.2, 0.3, 0.5]);
        let wp = Tensor::from_fn(&[2, 3, 4, 4], |i| [0.2, 0.3, 0.5][(i / 16) % 3]);
        let a = mix_image(&outs, g.constant(wi)).unwrap().value();
        let b = mix_pixel(&outs, g.constant(wp)).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-15);
        assert!(mix_pixel(&outs, g.constant(Tensor::full(&[2, 3, 2, 2], 1.0 / 3.0))).is_err());
    }

    #[test]
    fn mixing_is_convex_and_linear() {
        let g = Graph::<f64>::new();
        let a: Vec<_> = (0..3).map(|s| rnd(&[1, 2, 4, 4], s + 20)).collect();
        let b: Vec<_> = (0..3).map(|s| rnd(&[1, 2, 4, 4], s + 30)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = g
            .constant(Tensor::<f64>::rand_uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng))
            .softmax_axis1()
            .unwrap();
        let va: Vec<_> = a.iter().map(|t| g.constant(t.clone())).collect();
        let vb: Vec<_> = b.iter().map(|t| g.constant(t.clone())).collect();
        let vs: Vec<_> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| g.constant(x.zip_map(y, |p, q| 2.0 * p - 3.0 * q).unwrap()))
            .collect();
        let ma = mix_pixel(&va, w).unwrap().value();
        let mb = mix_pixel(&vb, w).unwrap().value();
        let ms = mix_pixel(&vs, w).unwrap().value();
        let sup = ma.zip_map(&mb, |p, q| 2.0 * p - 3.0 * q).unwrap();
        assert!(sup.max_abs_diff(&ms) < 1e-12);
        assert!(ma.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    fn dam_fixture(c: usize, seed: u64) -> (Dam, crate::params::ParamStore<f64>) {
        let mut l = ParamLayout::new();
        let d = Dam::new(&mut l, "dam", c).unwrap();
        (d, l.init(seed).cast())
    }

    #[test]
    fn dam_preserves_shape_and_rejects_bad_width() {
        let (d, s) = dam_fixture(8, 1);
        let g = Graph::new();
        let p = s.bind(&g, false);
        for (h, w) in [(8, 8), (9, 13), (16, 10)] {
            let y = d.forward(&p, g.constant(rnd(&[2, 8, h, w], 2))).unwrap();
            assert_eq!(y.shape(), vec![2, 8, h, w]);
        }
        assert!(d
            .forward(&p, g.constant(rnd(&[1, 4, 8, 8], 3)))
            .unwrap_err()
            .is_validation());
        assert!(Dam::new(&mut ParamLayout::new(), "x", 6).unwrap_err().is_validation());
    }

    #[test]
    fn dam_local_path_respects_receptive_field() {
        // radius: dilation 4 (4 px) then the 3×3 fuse conv (1 px); the
        // 1×1 attention convs add none. Channel attention pools globally,
        // so it is held fixed at the unperturbed value for the probe.
        let radius = 5;
        let (d, s) = dam_fixture(8, 4);
        let x = rnd(&[1, 8, 24, 24], 5);
        let mut xp = x.clone();
        let (cy, cx) = (11, 13);
        xp.set4(0, 3, cy, cx, xp.at4(0, 3, cy, cx) + 1.0);
        let g = Graph::new();
        let p = s.bind(&g, false);
        let gate = d.channel_gate(&p, d.local(&p, g.constant(x.clone())).unwrap()).unwrap();
        let run = |t: &Tensor<f64>| {
            let xv = g.constant(t.clone());
            d.finish(&p, xv, d.local(&p, xv).unwrap(), gate).unwrap().value()
        };
        let (y0, y1) = (run(&x), run(&xp));
        let mut inside_changed = false;
        for c in 0..8 {
            for y in 0..24 {
                for xx in 0..24 {
                    let delta = (y0.at4(0, c, y, xx) - y1.at4(0, c, y, xx)).abs();
                    let dist = (y as isize - cy as isize).abs().max((xx as isize - cx as isize).abs());
                    if dist > radius {
                        assert_eq!(delta, 0.0, "change at ({y},{xx}) outside radius");
                    } else if delta > 0.0 {
                        inside_changed = true;
                    }
                }
            }
        }
        assert!(inside_changed);
        assert!(radius <= 1 + 2 + 3 + 4);
    }

    #[test]
    fn dam_gradcheck() {
        let (d, s) = dam_fixture(8, 6);
        let x = rnd(&[1, 8, 16, 16], 7);
        let proj = rnd(&[1, 8, 16, 16], 8);
        let mut tensors = s.tensors().to_vec();
        tensors.push(x);
        let sel = gradcheck::sample_elements(&tensors, 0.05, 2);
        let n = s.len();
        let rep = gradcheck::check(&tensors, &sel, 1e-5, 1e-7, |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            Ok(d.forward(&p, v[n])?.mul(g.constant(proj.clone()))?.sum())
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    fn patch_fixture() -> (ExpertSet, Dam, crate::params::ParamStore<f64>) {
        let mut l = ParamLayout::new();
        let set = ExpertSet::new(&mut l, "slot", Granularity::Patch, ExpertKind::Ifib, 4, 3).unwrap();
        let dam = Dam::new(&mut l, "seam", 4).unwrap();
        (set, dam, l.init(9).cast())
    }

    #[test]
    fn mix_patch_one_hot_equals_patchwise_expert_then_dam() {
        let (set, dam, s) = patch_fixture();
        let grid = PatchGrid::new(2, 2).unwrap();
        let g = Graph::new();
        let p = s.bind(&g, false);
        let f = g.constant(rnd(&[2, 4, 8, 8], 10));
        let w = g.constant(Tensor::from_fn(
            &[2, 3, 2, 2],
            |i| if (i / 4) % 3 == 1 { 1.0 } else { 0.0 },
        ));
        let got = mix_patch(f, &set, &p, w, grid, &dam).unwrap().value();
        let direct = set.experts[1].forward(&p, f.to_patches(2, 2).unwrap()).unwrap();
        let want = dam.forward(&p, direct.from_patches(2, 2).unwrap()).unwrap().value();
        assert_eq!(*got, *want);

        let uniform = g.constant(Tensor::full(&[2, 3, 2, 2], 1.0 / 3.0));
        let same = ExpertSet {
            level: Granularity::Patch,
            experts: vec![set.experts[0].clone(); 3],
        };
        assert_eq!(
            mix_patch(f, &same, &p, uniform, grid, &dam).unwrap().shape(),
            vec![2, 4, 8, 8]
        );
        assert!(mix_patch(f, &set, &p, uniform, PatchGrid::new(4, 4).unwrap(), &dam).is_err());
    }

    #[test]
    fn mix_patch_gradcheck() {
        let (set, dam, s) = patch_fixture();
        let grid = PatchGrid::new(2, 2).unwrap();
        let x = rnd(&[1, 4, 16, 16], 11);
        let logits = rnd(&[1, 3, 2, 2], 12);
        let proj = rnd(&[1, 4, 16, 16], 13);
        let mut tensors = s.tensors().to_vec();
        tensors.push(x);
        tensors.push(logits);
        let sel = gradcheck::sample_elements(&tensors, 0.03, 3);
        let n = s.len();
        let rep = gradcheck::check(&tensors, &sel, 1e-5, 1e-7, |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let w = v[n + 1].softmax_axis1()?;
            Ok(mix_patch(v[n], &set, &p, w, grid, &dam)?
                .mul(g.constant(proj.clone()))?
                .sum())
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }
}
