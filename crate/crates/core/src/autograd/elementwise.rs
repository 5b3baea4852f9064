use super::{BackwardCtx, Var};
use crate::error::{Error, Result};
use crate::tensor::{lit, numel, Element, Tensor};

/// Numpy-style broadcast of two shapes (aligned at the trailing axis).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out`, zero along broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let mut ia: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let mut ib: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    #[inline]
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b).
    #[inline]
    fn partials<T: Element>(self, a: T, b: T) -> (T, T) {
        match self {
            BinOp::Add => (T::one(), T::one()),
            BinOp::Sub => (T::one(), -T::one()),
            BinOp::Mul => (b, a),
            BinOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

fn binary<'g, T: Element>(a: Var<'g, T>, b: Var<'g, T>, op: BinOp) -> Result<Var<'g, T>> {
    let (av, bv) = (a.value(), b.value());
    let out_shape = broadcast_shape(av.shape(), bv.shape())
        .ok_or_else(|| Error::shape("broadcast", format!("{:?} vs {:?}", av.shape(), bv.shape())))?;
    let value = if av.shape() == bv.shape() {
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| op.apply(x, y)).collect();
        Tensor::from_parts(out_shape.clone(), data)
    } else {
        let sa = aligned_strides(av.shape(), &out_shape);
        let sb = aligned_strides(bv.shape(), &out_shape);
        let mut data = vec![T::zero(); numel(&out_shape)];
        let (ad, bd) = (av.data(), bv.data());
        for_each_pair(&out_shape, &sa, &sb, |o, ia, ib| data[o] = op.apply(ad[ia], bd[ib]));
        Tensor::from_parts(out_shape.clone(), data)
    };
    let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
        let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad.data();
        let mut ga = ctx.needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gb = ctx.needs[1].then(|| Tensor::zeros(y.shape()));
        if x.shape() == y.shape() {
            for (o, (&xa, &yb)) in x.data().iter().zip(y.data()).enumerate() {
                let (da, db) = op.partials(xa, yb);
                if let Some(ga) = ga.as_mut() {
                    ga.data_mut()[o] = g[o] * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb.data_mut()[o] = g[o] * db;
                }
            }
        } else {
            let out = ctx.output.shape();
            let sa = aligned_strides(x.shape(), out);
            let sb = aligned_strides(y.shape(), out);
            let (xd, yd) = (x.data(), y.data());
            for_each_pair(out, &sa, &sb, |o, ia, ib| {
                let (da, db) = op.partials(xd[ia], yd[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga.data_mut()[ia] = ga.data()[ia] + g[o] * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb.data_mut()[ib] = gb.data()[ib] + g[o] * db;
                }
            });
        }
        vec![ga, gb]
    });
    Ok(a.graph.op(value, &[a, b], backward))
}

/// Element-wise unary op with derivative expressed through input and output.
fn unary<'g, T: Element>(a: Var<'g, T>, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
    let value = a.value().map(f);
    let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
        let data = ctx
            .grad
            .data()
            .iter()
            .zip(ctx.inputs[0].data())
            .zip(ctx.output.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), data))]
    });
    a.graph.op(value, &[a], backward)
}

// fallible, so these cannot be the operator traits
#[allow(clippy::should_implement_trait)]
impl<'g, T: Element> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary(self, other, BinOp::Div)
    }

    pub fn neg(self) -> Var<'g, T> {
        unary(self, |x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = lit::<T>(s);
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn offset(self, c: f64) -> Var<'g, T> {
        let c = lit::<T>(c);
        unary(self, move |x| x + c, |_, _| T::one())
    }

    pub fn square(self) -> Var<'g, T> {
        unary(self, |x| x * x, |x, _| x + x)
    }

    pub fn relu(self) -> Var<'g, T> {
        unary(
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = lit::<T>(slope);
        unary(
            self,
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        unary(
            self,
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(self, floor: f64) -> Var<'g, T> {
        let f = lit::<T>(floor);
        unary(
            self,
            move |x| if x > f { x } else { f },
            move |x, _| if x > f { T::one() } else { T::zero() },
        )
    }

    /// `x^p` for a constant exponent; inputs are expected to be positive.
    pub fn powf(self, p: f64) -> Var<'g, T> {
        let pe = lit::<T>(p);
        unary(
            self,
            move |x| x.powf(pe),
            move |x, y| if x == T::zero() { T::zero() } else { pe * y / x },
        )
    }

    pub fn sqrt(self) -> Var<'g, T> {
        unary(
            self,
            |x| x.sqrt(),
            |_, y| {
                if y > T::zero() {
                    lit::<T>(0.5) / y
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'g, T> {
        let v = self.value();
        let value = Tensor::scalar(v.sum());
        let backward =
            Box::new(|ctx: &BackwardCtx<'_, T>| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.data()[0]))]);
        self.graph.op(value, &[self], backward)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean of `|a - b|`-based smooth L1 with transition `delta`.
    pub fn smooth_l1(self, target: Var<'g, T>, delta: f64) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("smooth_l1", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let d = lit::<T>(delta);
        let half = lit::<T>(0.5);
        let n = lit::<T>(a.len().max(1) as f64);
        let total: T = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let e = (x - y).abs();
                if e < d {
                    half * e * e / d
                } else {
                    e - half * d
                }
            })
            .sum();
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let g = ctx.grad.data()[0] / n;
            let grads: Vec<T> = ctx.inputs[0]
                .data()
                .iter()
                .zip(ctx.inputs[1].data())
                .map(|(&x, &y)| {
                    let e = x - y;
                    let de = if e.abs() < d { e / d } else { e.signum() };
                    g * de
                })
                .collect();
            let shape = ctx.inputs[0].shape().to_vec();
            let ga = ctx.needs[0].then(|| Tensor::from_parts(shape.clone(), grads.clone()));
            let gb = ctx.needs[1].then(|| Tensor::from_parts(shape, grads.iter().map(|&v| -v).collect()));
            vec![ga, gb]
        });
        Ok(self.graph.op(Tensor::scalar(total / n), &[self, target], backward))
    }
}
