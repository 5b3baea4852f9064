//! Expert gating.
//!
//! A small conv encoder turns the Haar bands of the network input into a
//! frequency code, which is resized to each expert level and concatenated
//! with that level's features before the routing head. The `Mlp` router kind
//! drops the frequency code and gates on the features alone.

use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, Linear};
use crate::moe::PatchGrid;
use crate::params::{Bound, ParamLayout};
use crate::tensor::Element;

/// Initial gate gain; small logits give near-uniform starting weights.
const GATE_GAIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    /// Features fused with the frequency code.
    #[default]
    Far,
    /// Features only.
    Mlp,
}

impl std::fmt::Display for RouterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RouterKind::Far => "far",
            RouterKind::Mlp => "mlp",
        })
    }
}

impl std::str::FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "far" => Ok(RouterKind::Far),
            "mlp" => Ok(RouterKind::Mlp),
            _ => Err(Error::validation(format!("unknown router `{s}` (far|mlp)"))),
        }
    }
}

/// Conv encoder over the 12 stacked Haar bands (4 bands × RGB).
#[derive(Clone, Debug)]
pub struct FreqEncoder {
    pub conv1: Conv,
    pub conv2: Conv,
    pub channels: usize,
}

impl FreqEncoder {
    pub const IN_CHANNELS: usize = 12;

    pub fn new(l: &mut ParamLayout, name: &str, channels: usize) -> Self {
        Self {
            conv1: Conv::same(l, &format!("{name}.conv1"), Self::IN_CHANNELS, channels, 3),
            conv2: Conv::same(l, &format!("{name}.conv2"), channels, channels, 3),
            channels,
        }
    }

    /// Code at band resolution; `bands` is `B×12×H/2×W/2`.
    pub fn features<'g, T: Element>(&self, p: &Bound<'g, T>, bands: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.conv1.forward(p, bands)?.relu();
        self.conv2.forward(p, h)
    }

    /// Code bilinearly resized to `target`.
    pub fn encode<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        bands: Var<'g, T>,
        target: (usize, usize),
    ) -> Result<Var<'g, T>> {
        self.features(p, bands)?.resize_bilinear(target.0, target.1)
    }
}

/// Softmax over the expert axis (axis 1).
pub fn softmax_gate<T: Element>(g: Var<'_, T>) -> Result<Var<'_, T>> {
    if !g.value().all_finite() {
        return Err(Error::validation("softmax_gate: non-finite logits"));
    }
    g.softmax_axis1()
}

fn fuse<'g, T: Element>(f: Var<'g, T>, d: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
    match d {
        Some(d) => {
            let (_, _, h, w) = f.dims4()?;
            let (_, _, dh, dw) = d.dims4()?;
            if (h, w) != (dh, dw) {
                return Err(Error::shape("router", format!("features {h}×{w}, code {dh}×{dw}")));
            }
            Var::concat(&[f, d], 1)
        }
        None => Ok(f),
    }
}

/// Image-level head producing `B×n` logits.
#[derive(Clone, Debug)]
pub enum ImageHead {
    Far { conv1: Conv, conv2: Conv, gate: Linear },
    Mlp { fc: Linear, gate: Linear },
}

impl ImageHead {
    pub fn new(kind: RouterKind, l: &mut ParamLayout, name: &str, c: usize, code: usize, n: usize) -> Result<Self> {
        if c < 4 {
            return Err(Error::validation(format!(
                "image router needs at least 4 feature channels, got {c}"
            )));
        }
        let s2 = Conv2dSpec::new(2, 1, 1);
        Ok(match kind {
            RouterKind::Far => ImageHead::Far {
                conv1: Conv::new(l, &format!("{name}.conv1"), c + code, c / 2, 3, s2),
                conv2: Conv::new(l, &format!("{name}.conv2"), c / 2, c / 4, 3, s2),
                gate: Linear::with_gain(l, &format!("{name}.gate"), c / 4, n, GATE_GAIN),
            },
            RouterKind::Mlp => ImageHead::Mlp {
                fc: Linear::new(l, &format!("{name}.fc"), c, c / 4),
                gate: Linear::with_gain(l, &format!("{name}.gate"), c / 4, n, GATE_GAIN),
            },
        })
    }

    pub fn kind(&self) -> RouterKind {
        match self {
            ImageHead::Far { .. } => RouterKind::Far,
            ImageHead::Mlp { .. } => RouterKind::Mlp,
        }
    }

    pub fn logits<'g, T: Element>(&self, p: &Bound<'g, T>, f: Var<'g, T>, d: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let b = f.dims4()?.0;
        match self {
            ImageHead::Far { conv1, conv2, gate } => {
                let x = fuse(f, d)?;
                let x = conv1.forward(p, x)?.relu();
                let x = conv2.forward(p, x)?.relu();
                let c = x.dims4()?.1;
                gate.forward(p, x.mean_hw()?.reshape(&[b, c])?)
            }
            ImageHead::Mlp { fc, gate } => {
                let c = f.dims4()?.1;
                let h = fc.forward(p, f.mean_hw()?.reshape(&[b, c])?)?.relu();
                gate.forward(p, h)
            }
        }
    }
}

/// Pixel-level head producing `B×n×H×W` logits. The 3×3 conv reflect-pads so
/// a spatially constant input yields a spatially constant map.
#[derive(Clone, Debug)]
pub enum PixelHead {
    Far { conv: Conv, gate: Conv },
    Mlp { conv: Conv, gate: Conv },
}

impl PixelHead {
    pub fn new(kind: RouterKind, l: &mut ParamLayout, name: &str, c: usize, code: usize, n: usize) -> Self {
        let hidden = (c / 2).max(4);
        let gate = |l: &mut ParamLayout| {
            Conv::with_gain(
                l,
                &format!("{name}.gate"),
                hidden,
                n,
                1,
                Conv2dSpec::same(1, 1),
                GATE_GAIN,
            )
        };
        match kind {
            RouterKind::Far => PixelHead::Far {
                conv: Conv::new(
                    l,
                    &format!("{name}.conv"),
                    c + code,
                    hidden,
                    3,
                    Conv2dSpec::new(1, 0, 1),
                ),
                gate: gate(l),
            },
            RouterKind::Mlp => PixelHead::Mlp {
                conv: Conv::same(l, &format!("{name}.fc"), c, hidden, 1),
                gate: gate(l),
            },
        }
    }

    pub fn kind(&self) -> RouterKind {
        match self {
            PixelHead::Far { .. } => RouterKind::Far,
            PixelHead::Mlp { .. } => RouterKind::Mlp,
        }
    }

    pub fn logits<'g, T: Element>(&self, p: &Bound<'g, T>, f: Var<'g, T>, d: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        match self {
            PixelHead::Far { conv, gate } => {
                let x = fuse(f, d)?.pad_reflect(1)?;
                let h = conv.forward(p, x)?.relu();
                gate.forward(p, h)
            }
            PixelHead::Mlp { conv, gate } => {
                let h = conv.forward(p, f)?.relu();
                gate.forward(p, h)
            }
        }
    }
}

/// Weights `B×n×1×1`.
pub fn route_image<'g, T: Element>(
    head: &ImageHead,
    p: &Bound<'g, T>,
    f: Var<'g, T>,
    d: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let b = f.dims4()?.0;
    let g = head.logits(p, f, d)?;
    let n = g.shape()[1];
    softmax_gate(g.reshape(&[b, n, 1, 1])?)
}

/// Weights `B×n×Gh×Gw`: the image head applied to every patch of `f` and `d`.
pub fn route_patch<'g, T: Element>(
    head: &ImageHead,
    p: &Bound<'g, T>,
    f: Var<'g, T>,
    d: Option<Var<'g, T>>,
    grid: PatchGrid,
) -> Result<Var<'g, T>> {
    let (_, _, h, w) = f.dims4()?;
    grid.patch_size(h, w)?;
    let fp = f.to_patches(grid.gh, grid.gw)?;
    let dp = d.map(|d| d.to_patches(grid.gh, grid.gw)).transpose()?;
    route_image(head, p, fp, dp)?.from_patches(grid.gh, grid.gw)
}

/// Weights `B×n×H×W`.
pub fn route_pixel<'g, T: Element>(
    head: &PixelHead,
    p: &Bound<'g, T>,
    f: Var<'g, T>,
    d: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    softmax_gate(head.logits(p, f, d)?)
}
