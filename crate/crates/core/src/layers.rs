//! Parameterized layers: thin handles into a [`ParamLayout`].

use crate::autograd::{Conv2dSpec, ConvTransposeSpec, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamLayout};
use crate::tensor::Element;

fn he(fan_in: usize, gain: f64) -> Init {
    Init::He { fan_in, gain }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new(l: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize, spec: Conv2dSpec) -> Self {
        Self::with_gain(l, name, cin, cout, k, spec, 1.0)
    }

    /// Stride-1 "same" convolution with an odd kernel.
    pub fn same(l: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(l, name, cin, cout, k, Conv2dSpec::same(k, 1))
    }

    pub fn with_gain(
        l: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        gain: f64,
    ) -> Self {
        let weight = l.add(format!("{name}.weight"), &[cout, cin, k, k], he(cin * k * k, gain));
        let bias = l.add(format!("{name}.bias"), &[cout], Init::Const(0.0));
        Self {
            weight,
            bias,
            spec,
            cin,
            cout,
        }
    }

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(p.get(self.weight), Some(p.get(self.bias)), self.spec)
    }
}

/// Transposed convolution; weight is `cin×cout×k×k`.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvTransposeSpec,
}

impl ConvT {
    pub fn new(l: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize, spec: ConvTransposeSpec) -> Self {
        // each output pixel sees cin·(k/stride)² taps
        let fan_in = cin * (k / spec.stride.max(1)).pow(2);
        let weight = l.add(format!("{name}.weight"), &[cin, cout, k, k], he(fan_in, 1.0));
        let bias = l.add(format!("{name}.bias"), &[cout], Init::Const(0.0));
        Self { weight, bias, spec }
    }

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv_transpose2d(p.get(self.weight), Some(p.get(self.bias)), self.spec)
    }
}

/// Depthwise convolution with reflect padding.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
}

impl DwConv {
    pub fn new(l: &mut ParamLayout, name: &str, c: usize, k: usize) -> Self {
        let weight = l.add(format!("{name}.weight"), &[c, 1, k, k], he(k * k, 1.0));
        let bias = l.add(format!("{name}.bias"), &[c], Init::Const(0.0));
        Self { weight, bias, k }
    }

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.pad_reflect(self.k / 2)?
            .depthwise_conv2d(p.get(self.weight), Some(p.get(self.bias)), 0)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(l: &mut ParamLayout, name: &str, din: usize, dout: usize) -> Self {
        Self::with_gain(l, name, din, dout, 1.0)
    }

    pub fn with_gain(l: &mut ParamLayout, name: &str, din: usize, dout: usize, gain: f64) -> Self {
        let weight = l.add(format!("{name}.weight"), &[dout, din], he(din, gain));
        let bias = l.add(format!("{name}.bias"), &[dout], Init::Const(0.0));
        Self { weight, bias }
    }

    pub fn forward<'g, T: Element>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(p.get(self.weight), Some(p.get(self.bias)))
    }
}
