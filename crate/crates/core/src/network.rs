//! The restoration network: a three-level U-Net with a DAM after every
//! resampling stage and three expert slots.
//!
//! ```text
//! x ─ stem(c/2) ─ down1(c)+DAM ─ slot0 ─ down2(2c)+DAM ─ slot1 ─ down3(4c)+DAM
//!                                                                     │
//! out ← head ← slot2 ← DAM ← skip ← up1(c/2) ← DAM ← skip ← up2(c) ← DAM ← skip ← up3(2c)
//! ```
//!
//! Slot `i` runs at the granularity `config.order[i]` with
//! `config.experts[i]` experts. The router of every slot sees the frequency
//! code of the input's Haar bands, resized to the slot resolution.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, ConvTransposeSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::expert_block::ExpertKind;
use crate::freq_ops::dwt_haar;
use crate::layers::{Conv, ConvT};
use crate::moe::{mix_image, mix_patch, mix_pixel, Dam, ExpertSet, Granularity, PatchGrid};
use crate::params::{Bound, ParamLayout, ParamStore};
use crate::router::{route_image, route_patch, route_pixel, FreqEncoder, ImageHead, PixelHead, RouterKind};
use crate::tensor::{Element, Tensor};

/// Spatial sizes must be multiples of this (three stride-2 stages).
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Expert count per slot, in slot order.
    pub experts: [usize; 3],
    /// Granularity per slot, in slot order.
    pub order: [Granularity; 3],
    pub patch_grid: PatchGrid,
    pub freq_channels: usize,
    pub router: RouterKind,
    pub expert_block: ExpertKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            experts: [3, 3, 3],
            order: [Granularity::Image, Granularity::Patch, Granularity::Pixel],
            patch_grid: PatchGrid { gh: 4, gw: 4 },
            freq_channels: 8,
            router: RouterKind::Far,
            expert_block: ExpertKind::Ifib,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c < 8 || !c.is_multiple_of(8) {
            return Err(Error::validation(format!(
                "model.base_channels must be a positive multiple of 8, got {c}"
            )));
        }
        if let Some(i) = self.experts.iter().position(|&n| n == 0) {
            return Err(Error::validation(format!("model.experts: slot {i} has zero experts")));
        }
        if self.freq_channels == 0 {
            return Err(Error::validation("model.freq_channels must be positive"));
        }
        PatchGrid::new(self.patch_grid.gh, self.patch_grid.gw)?;
        Ok(())
    }

    /// Channel width at slot `i`.
    pub fn slot_channels(&self, i: usize) -> usize {
        let c = self.base_channels;
        [c, 2 * c, c / 2][i]
    }

    /// Downsampling factor of slot `i` relative to the input.
    pub fn slot_stride(i: usize) -> usize {
        [2, 4, 1][i]
    }

    /// Checks that an `h×w` input can pass through this network.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::validation(format!(
                "input is {h}×{w}; height and width must be positive multiples of {SIZE_MULTIPLE}"
            )));
        }
        for (i, &level) in self.order.iter().enumerate() {
            if level == Granularity::Patch {
                let s = Self::slot_stride(i);
                self.patch_grid
                    .patch_size(h / s, w / s)
                    .map_err(|e| Error::validation(format!("slot {i} ({}×{} features): {e}", h / s, w / s)))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum SlotRouter {
    Image(ImageHead),
    Patch(ImageHead),
    Pixel(PixelHead),
}

#[derive(Clone, Debug)]
struct Slot {
    level: Granularity,
    experts: ExpertSet,
    router: SlotRouter,
    /// Seam-healing DAM, patch level only.
    seam: Option<Dam>,
}

impl Slot {
    fn new(l: &mut ParamLayout, i: usize, cfg: &ModelConfig) -> Result<Self> {
        let name = format!("slot{i}");
        let c = cfg.slot_channels(i);
        let n = cfg.experts[i];
        let level = cfg.order[i];
        let code = if cfg.router == RouterKind::Far {
            cfg.freq_channels
        } else {
            0
        };
        let experts = ExpertSet::new(l, &name, level, cfg.expert_block, c, n)?;
        let rname = format!("{name}.router");
        let router = match level {
            Granularity::Image => SlotRouter::Image(ImageHead::new(cfg.router, l, &rname, c, code, n)?),
            Granularity::Patch => SlotRouter::Patch(ImageHead::new(cfg.router, l, &rname, c, code, n)?),
            Granularity::Pixel => SlotRouter::Pixel(PixelHead::new(cfg.router, l, &rname, c, code, n)),
        };
        let seam = match level {
            Granularity::Patch => Some(Dam::new(l, &format!("{name}.seam"), c)?),
            _ => None,
        };
        Ok(Self {
            level,
            experts,
            router,
            seam,
        })
    }

    fn one_hot<T: Element>(&self, b: usize, k: usize, grid: PatchGrid, h: usize, w: usize) -> Result<Tensor<T>> {
        let n = self.experts.len();
        if k >= n {
            return Err(Error::validation(format!(
                "forced expert {k} out of range for {n} experts"
            )));
        }
        let (gh, gw) = match self.level {
            Granularity::Image => (1, 1),
            Granularity::Patch => (grid.gh, grid.gw),
            Granularity::Pixel => (h, w),
        };
        let plane = gh * gw;
        Ok(Tensor::from_fn(&[b, n, gh, gw], |i| {
            if (i / plane) % n == k {
                T::one()
            } else {
                T::zero()
            }
        }))
    }

    fn forward<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        f: Var<'g, T>,
        code: Option<Var<'g, T>>,
        grid: PatchGrid,
        force: Option<usize>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (b, _, h, w) = f.dims4()?;
        let d = code.map(|c| c.resize_bilinear(h, w)).transpose()?;
        let weights = match (force, &self.router) {
            (Some(k), _) => f.graph().constant(self.one_hot(b, k, grid, h, w)?),
            (None, SlotRouter::Image(head)) => route_image(head, p, f, d)?,
            (None, SlotRouter::Patch(head)) => route_patch(head, p, f, d, grid)?,
            (None, SlotRouter::Pixel(head)) => route_pixel(head, p, f, d)?,
        };
        let out = match self.level {
            Granularity::Image => mix_image(&self.experts.run(p, f)?, weights)?,
            Granularity::Pixel => mix_pixel(&self.experts.run(p, f)?, weights)?,
            Granularity::Patch => {
                let seam = self.seam.as_ref().expect("patch slot has a seam DAM");
                mix_patch(f, &self.experts, p, weights, grid, seam)?
            }
        };
        Ok((out, weights))
    }
}

/// Expert weights recorded during one forward pass, in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace<T: Element = f32> {
    pub slots: Vec<(Granularity, Tensor<T>)>,
}

impl<T: Element> RoutingTrace<T> {
    /// Weights of the first slot at `level`.
    pub fn level(&self, level: Granularity) -> Option<&Tensor<T>> {
        self.slots.iter().find(|(l, _)| *l == level).map(|(_, t)| t)
    }

    pub fn image_w(&self) -> Option<&Tensor<T>> {
        self.level(Granularity::Image)
    }

    pub fn patch_w(&self) -> Option<&Tensor<T>> {
        self.level(Granularity::Patch)
    }

    pub fn pixel_w(&self) -> Option<&Tensor<T>> {
        self.level(Granularity::Pixel)
    }
}

/// Per-slot routing override: `Some(k)` replaces the router with a one-hot
/// selection of expert `k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub force: [Option<usize>; 3],
}

impl ForwardOptions {
    pub fn force_all(k: usize) -> Self {
        Self { force: [Some(k); 3] }
    }
}

/// Output of [`Network::forward`] on a graph.
pub struct ForwardOutput<'g, T: Element> {
    pub restored: Var<'g, T>,
    pub weights: [Var<'g, T>; 3],
}

impl<T: Element> ForwardOutput<'_, T> {
    pub fn trace(&self, order: &[Granularity; 3]) -> RoutingTrace<T> {
        RoutingTrace {
            slots: order
                .iter()
                .zip(&self.weights)
                .map(|(&l, w)| (l, w.value().as_ref().clone()))
                .collect(),
        }
    }
}

/// Segments of the forward pass in execution order. The head is not a
/// stage: it always runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Code,
    Stem,
    Enc1,
    Slot0,
    Enc2,
    Slot1,
    Enc3,
    Dec3,
    Dec2,
    Dec1,
    Slot2,
    Head,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Code,
        Stage::Stem,
        Stage::Enc1,
        Stage::Slot0,
        Stage::Enc2,
        Stage::Slot1,
        Stage::Enc3,
        Stage::Dec3,
        Stage::Dec2,
        Stage::Dec1,
        Stage::Slot2,
        Stage::Head,
    ];

    /// First stage that reads the parameter `name`.
    pub fn of_param(name: &str) -> Option<Stage> {
        Some(match name.split('.').next()? {
            "freq" => Stage::Code,
            "stem" => Stage::Stem,
            "enc1" => Stage::Enc1,
            "slot0" => Stage::Slot0,
            "enc2" => Stage::Enc2,
            "slot1" => Stage::Slot1,
            "enc3" => Stage::Enc3,
            "dec3" => Stage::Dec3,
            "dec2" => Stage::Dec2,
            "dec1" => Stage::Dec1,
            "slot2" => Stage::Slot2,
            "head" => Stage::Head,
            _ => return None,
        })
    }

    /// [`Stage::of_param`] for every name, failing on unknown names.
    pub fn of_params(names: &[String]) -> Result<Vec<Stage>> {
        names
            .iter()
            .map(|n| Stage::of_param(n).ok_or_else(|| Error::validation(format!("parameter {n} belongs to no stage"))))
            .collect()
    }
}

/// Outputs of every stage of one forward pass.
#[derive(Clone, Debug)]
pub struct StageCache<T> {
    outputs: Vec<Vec<Rc<Tensor<T>>>>,
}

impl<T> Default for StageCache<T> {
    fn default() -> Self {
        Self {
            outputs: vec![Vec::new(); Stage::ALL.len()],
        }
    }
}

/// Replays cached stages or runs and records them.
struct Stager<'c, T> {
    resume: Option<(&'c StageCache<T>, Stage)>,
    record: Option<StageCache<T>>,
}

impl<T> Default for Stager<'_, T> {
    fn default() -> Self {
        Self {
            resume: None,
            record: None,
        }
    }
}

impl<T: Element> Stager<'_, T> {
    fn run<'g>(
        &mut self,
        g: &'g Graph<T>,
        stage: Stage,
        f: impl FnOnce() -> Result<Vec<Var<'g, T>>>,
    ) -> Result<Vec<Var<'g, T>>> {
        if let Some((cache, from)) = self.resume {
            if stage < from {
                return Ok(cache.outputs[stage as usize]
                    .iter()
                    .map(|t| g.constant_rc(Rc::clone(t)))
                    .collect());
            }
        }
        let out = f()?;
        if let Some(rec) = self.record.as_mut() {
            rec.outputs[stage as usize] = out.iter().map(|v| v.value()).collect();
        }
        Ok(out)
    }

    fn run_n<'g, const N: usize>(
        &mut self,
        g: &'g Graph<T>,
        stage: Stage,
        f: impl FnOnce() -> Result<[Var<'g, T>; N]>,
    ) -> Result<[Var<'g, T>; N]> {
        let out = self.run(g, stage, || Ok(f()?.to_vec()))?;
        out.try_into()
            .map_err(|_| Error::validation(format!("stage cache has no {stage:?} outputs")))
    }
}

/// Architecture built from a [`ModelConfig`]; owns the parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    layout: ParamLayout,
    stem: Conv,
    down: [Conv; 3],
    enc_dam: [Dam; 3],
    up: [ConvT; 3],
    skip: [Conv; 3],
    dec_dam: [Dam; 3],
    head: Conv,
    freq: Option<FreqEncoder>,
    slots: [Slot; 3],
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let l = &mut ParamLayout::new();
        let s2 = Conv2dSpec::new(2, 1, 1);
        let t2 = ConvTransposeSpec { stride: 2, padding: 1 };
        let stem = Conv::same(l, "stem", 3, c / 2, 3);
        let freq = (config.router == RouterKind::Far).then(|| FreqEncoder::new(l, "freq", config.freq_channels));
        let down = [
            Conv::new(l, "enc1.down", c / 2, c, 3, s2),
            Conv::new(l, "enc2.down", c, 2 * c, 3, s2),
            Conv::new(l, "enc3.down", 2 * c, 4 * c, 3, s2),
        ];
        let enc_dam = [
            Dam::new(l, "enc1.dam", c)?,
            Dam::new(l, "enc2.dam", 2 * c)?,
            Dam::new(l, "enc3.dam", 4 * c)?,
        ];
        let slots = [
            Slot::new(l, 0, config)?,
            Slot::new(l, 1, config)?,
            Slot::new(l, 2, config)?,
        ];
        let up = [
            ConvT::new(l, "dec3.up", 4 * c, 2 * c, 4, t2),
            ConvT::new(l, "dec2.up", 2 * c, c, 4, t2),
            ConvT::new(l, "dec1.up", c, c / 2, 4, t2),
        ];
        let skip = [
            Conv::same(l, "dec3.skip", 4 * c, 2 * c, 1),
            Conv::same(l, "dec2.skip", 2 * c, c, 1),
            Conv::same(l, "dec1.skip", c, c / 2, 1),
        ];
        let dec_dam = [
            Dam::new(l, "dec3.dam", 2 * c)?,
            Dam::new(l, "dec2.dam", c)?,
            Dam::new(l, "dec1.dam", c / 2)?,
        ];
        let head = Conv::same(l, "head", c / 2, 3, 3);
        Ok(Self {
            config: config.clone(),
            layout: std::mem::take(l),
            stem,
            down,
            enc_dam,
            up,
            skip,
            dec_dam,
            head,
            freq,
            slots,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init(&self, seed: u64) -> ParamStore<f32> {
        self.layout.init(seed)
    }

    /// Forward on a graph. `x` is `B×3×H×W` with `H, W` multiples of 8.
    pub fn forward<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'g, T>> {
        self.forward_staged(p, x, opts, &mut Stager::default())
    }

    /// [`forward`](Self::forward) that also returns every stage output.
    pub fn forward_recording<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        opts: ForwardOptions,
    ) -> Result<(ForwardOutput<'g, T>, StageCache<T>)> {
        let mut stager = Stager {
            resume: None,
            record: Some(StageCache::default()),
        };
        let out = self.forward_staged(p, x, opts, &mut stager)?;
        Ok((out, stager.record.unwrap_or_default()))
    }

    /// Forward that takes the outputs of stages before `from` from `cache`
    /// instead of computing them. Equals [`forward`](Self::forward) bitwise
    /// when `cache` was recorded on the same input and options with
    /// parameters that agree on everything read before `from`.
    pub fn forward_from<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        opts: ForwardOptions,
        cache: &StageCache<T>,
        from: Stage,
    ) -> Result<ForwardOutput<'g, T>> {
        let mut stager = Stager {
            resume: Some((cache, from)),
            record: None,
        };
        self.forward_staged(p, x, opts, &mut stager)
    }

    fn forward_staged<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        opts: ForwardOptions,
        st: &mut Stager<'_, T>,
    ) -> Result<ForwardOutput<'g, T>> {
        let (_, ch, h, w) = x.dims4()?;
        if ch != 3 {
            return Err(Error::validation(format!(
                "expected a 3-channel image, got {ch} channels"
            )));
        }
        self.config.check_input(h, w)?;
        let xv = x.value();
        if !xv.all_finite() {
            return Err(Error::validation("input contains non-finite values"));
        }
        let g = x.graph();
        let grid = self.config.patch_grid;
        let code = st
            .run(g, Stage::Code, || match &self.freq {
                Some(enc) => {
                    let bands = g.constant(dwt_haar(&xv)?.stacked());
                    Ok(vec![enc.features(p, bands)?])
                }
                None => Ok(Vec::new()),
            })?
            .first()
            .copied();

        let [s0] = st.run_n(g, Stage::Stem, || Ok([self.stem.forward(p, x)?.relu()]))?;
        let [e1] = st.run_n(g, Stage::Enc1, || {
            Ok([self.enc_dam[0].forward(p, self.down[0].forward(p, s0)?.relu())?])
        })?;
        let [e1, w0] = st.run_n(g, Stage::Slot0, || {
            let (e, w) = self.slots[0].forward(p, e1, code, grid, opts.force[0])?;
            Ok([e, w])
        })?;
        let [e2] = st.run_n(g, Stage::Enc2, || {
            Ok([self.enc_dam[1].forward(p, self.down[1].forward(p, e1)?.relu())?])
        })?;
        let [e2, w1] = st.run_n(g, Stage::Slot1, || {
            let (e, w) = self.slots[1].forward(p, e2, code, grid, opts.force[1])?;
            Ok([e, w])
        })?;
        let [mut d] = st.run_n(g, Stage::Enc3, || {
            Ok([self.enc_dam[2].forward(p, self.down[2].forward(p, e2)?.relu())?])
        })?;

        for (i, (skip, stage)) in [(e2, Stage::Dec3), (e1, Stage::Dec2), (s0, Stage::Dec1)]
            .into_iter()
            .enumerate()
        {
            let prev = d;
            [d] = st.run_n(g, stage, || {
                let u = self.up[i].forward(p, prev)?.relu();
                let fused = self.skip[i].forward(p, Var::concat(&[u, skip], 1)?)?;
                Ok([self.dec_dam[i].forward(p, fused)?])
            })?;
        }
        let [d, w2] = st.run_n(g, Stage::Slot2, || {
            let (d, w) = self.slots[2].forward(p, d, code, grid, opts.force[2])?;
            Ok([d, w])
        })?;
        let restored = self.head.forward(p, d)?.sigmoid();
        Ok(ForwardOutput {
            restored,
            weights: [w0, w1, w2],
        })
    }

    /// Inference without gradients.
    pub fn run<T: Element>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        opts: ForwardOptions,
    ) -> Result<(Tensor<T>, RoutingTrace<T>)> {
        self.layout.check(params)?;
        let g = Graph::new();
        let p = params.bind(&g, false);
        let out = self.forward(&p, g.constant(x.clone()), opts)?;
        let trace = out.trace(&self.config.order);
        Ok((out.restored.value().as_ref().clone(), trace))
    }
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let net = Network::new(cfg)?;
    Ok(ModelParams {
        config: cfg.clone(),
        params: net.init(seed),
    })
}

/// Exact number of learnable scalars.
pub fn count_params(p: &ModelParams) -> usize {
    p.params.count()
}

/// Scalar counts grouped by the first component of the parameter name.
pub fn param_groups(p: &ModelParams) -> BTreeMap<String, usize> {
    let mut groups = BTreeMap::new();
    for (name, t) in p.params.iter() {
        let key = name.split('.').next().unwrap_or(name).to_string();
        *groups.entry(key).or_insert(0) += t.len();
    }
    groups
}

impl ModelParams {
    pub fn network(&self) -> Result<Network> {
        let net = Network::new(&self.config)?;
        net.layout.check(&self.params)?;
        Ok(net)
    }

    pub fn restore(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, RoutingTrace<f32>)> {
        self.network()?.run(&self.params, x, ForwardOptions::default())
    }

    /// The network with one expert per slot, taking expert `k[i]` of slot `i`
    /// and every shared parameter from `self`.
    pub fn single_expert(&self, k: [usize; 3]) -> Result<ModelParams> {
        let mut cfg = self.config.clone();
        cfg.experts = [1, 1, 1];
        let mut out = init_model(&cfg, 0)?;
        for (i, &ki) in k.iter().enumerate() {
            if ki >= self.config.experts[i] {
                return Err(Error::validation(format!("slot {i} has no expert {ki}")));
            }
        }
        let renamed: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .filter_map(|(name, t)| {
                let slot = (0..3).find(|&i| name.starts_with(&format!("slot{i}.expert")));
                match slot {
                    Some(i) => {
                        let prefix = format!("slot{i}.expert{}.", k[i]);
                        name.strip_prefix(&prefix)
                            .map(|rest| (format!("slot{i}.expert0.{rest}"), t.clone()))
                    }
                    None => Some((name.to_string(), t.clone())),
                }
            })
            .collect();
        out.params.copy_matching(&ParamStore::from_named(renamed));
        Ok(out)
    }
}
