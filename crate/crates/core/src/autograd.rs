//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value to a [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse recording order (a valid
//! reverse topological order, since inputs always precede outputs), sums
//! gradients across fan-out, and adds parameter gradients into the
//! [`ParamStore`]. A tape is single use: backward frees the recorded values.

use std::collections::HashMap;

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LEAKY_SLOPE: f64 = 0.2;

/// Bound applied to logits before the sigmoid in [`Tape::bce_with_logits`].
pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with slope [`LEAKY_SLOPE`].
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    T::lit(LEAKY_SLOPE) * v
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar {
        x: Var,
        s: Var,
    },
    Lerp {
        a: Var,
        b: Var,
        t: Var,
    },
    ScaleInChannels {
        w: Var,
        s: Var,
    },
    AddChannel {
        x: Var,
        b: Var,
    },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    BceLogits {
        logits: Var,
        targets: Vec<f32>,
    },
    Depthwise3 {
        x: Var,
        kernel: [T; 9],
    },
    Reshape(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<Var, Tensor<T>>,
    consumed: bool,
    track_frozen: bool,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
            consumed: false,
            track_frozen: false,
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also differentiate with respect to frozen parameters. Their gradients
    /// are accumulated into the store but the optimizer still skips them.
    pub fn tracking_frozen() -> Self {
        Self {
            track_frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(!self.consumed);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a node. Panics once backward has freed the tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert!(!self.consumed, "tape values were freed by backward");
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is kept after backward (see [`Tape::grad`]).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Gradient of a leaf created with [`Tape::input`], after backward.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v)
    }

    /// Records a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = p.trainable || self.track_frozen;
        let v = self.push(p.value.clone(), Op::Param(id), rg);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check_live()?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (c_in, h, wd) = match xs[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(invalid(format!("conv2d input must be [C,H,W], got {xs:?}"))),
        };
        let (c_out, k) = match ws[..] {
            [o, c, kh, kw] if c == c_in && kh == kw => (o, kh),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs,
                    rhs: ws,
                })
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom::new(c_in, h, wd, c_out, k, stride, padding)
            .ok_or_else(|| invalid(format!("conv2d: kernel {k} too large for {h}x{wd}")))?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[c_out, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// `W x + b` for a vector `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_live()?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (m, n) = match (&xs[..], &ws[..]) {
            ([n], [m, n2]) if n == n2 => (*m, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: xs,
                    rhs: ws,
                })
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out: Vec<T> = match b {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![T::zero(); m],
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            *o += row.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>();
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(out), Op::Linear { x, w, b }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Act(x, kind), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_live()?;
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        av.zip_map(bv, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_live()?;
        let c = T::lit(c);
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_live()?;
        let c = T::lit(c);
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        Ok(self.push(t, Op::AddScalar(a), rg))
    }

    fn scalar_of(&self, s: Var, op: &'static str) -> Result<T> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![1],
                rhs: sv.shape().to_vec(),
            });
        }
        Ok(sv.item())
    }

    /// Tensor times a single-element variable.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_live()?;
        let sv = self.scalar_of(s, "mul_scalar_var")?;
        let t = self.value(x).map(|v| v * sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulScalarVar { x, s }, rg))
    }

    /// `t * a + (1 - t) * b` with a single-element `t`.
    pub fn lerp(&mut self, a: Var, b: Var, t: Var) -> Result<Var> {
        let tv = self.scalar_of(t, "lerp")?;
        let out = self.binary(a, b, "lerp", |x, y| tv * x + (T::one() - tv) * y)?;
        let rg = self.rg(a) || self.rg(b) || self.rg(t);
        Ok(self.push(out, Op::Lerp { a, b, t }, rg))
    }

    /// Multiplies kernel `w[O, C, ...]` by `s[C]` along the input-channel axis.
    pub fn scale_in_channels(&mut self, w: Var, s: Var) -> Result<Var> {
        self.check_live()?;
        let ws = self.shape(w).to_vec();
        let ss = self.shape(s).to_vec();
        if ws.len() < 2 || ss != [ws[1]] {
            return Err(Error::ShapeMismatch {
                op: "scale_in_channels",
                lhs: ws,
                rhs: ss,
            });
        }
        let c = ws[1];
        let inner: usize = ws[2..].iter().product();
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(w).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let f = sv[i % c];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(w) || self.rg(s);
        Ok(self.push(out, Op::ScaleInChannels { w, s }, rg))
    }

    /// Adds `b[C]` to every spatial position of `x[C, H, W]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (c, h, w) = self.value(x).chw()?;
        if self.shape(b) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel",
                lhs: vec![c, h, w],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += bv[ch]);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddChannel { x, b }, rg))
    }

    /// Nearest-neighbour x2 upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (c, h, w) = self.value(x).chw()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    /// Spatial mean: `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (c, h, w) = self.value(x).chw()?;
        let src = self.value(x).data();
        let out = (0..c)
            .map(|ch| {
                let s: f64 = src[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v.as_f64()).sum();
                T::lit(s / (h * w) as f64)
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(out), Op::GlobalAvgPool(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = T::lit(self.value(x).sum());
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = T::lit(self.value(x).mean());
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let av = self.value(a);
        let bv = self.value(b);
        av.expect_same_shape(bv, "mse")?;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        let m = T::lit(s / av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets.
    /// Logits are clamped to `±LOGIT_CLAMP` first.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        self.check_live()?;
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&l, &t)| {
                let z = l.as_f64().clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                z.max(0.0) - z * t as f64 + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let loss = T::lit(total / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Fixed 3x3 filter applied to each channel, replicate padding.
    pub fn depthwise3(&mut self, x: Var, kernel: [f64; 9]) -> Result<Var> {
        self.check_live()?;
        let kernel = kernel.map(T::lit);
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::depthwise3_replicate(self.value(x).data(), c, h, w, &kernel);
        let rg = self.rg(x);
        let t = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(t, Op::Depthwise3 { x, kernel }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.check_live()?;
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        Ok(self.push(t, Op::Clamp { x, lo, hi }, rg))
    }

    /// Back-propagates from a scalar `loss`, accumulating parameter
    /// gradients into `store`. Frees the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.check_live()?;
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    self.leaf_grads.insert(Var(i), g);
                }
                Op::Param(id) => {
                    store.get_mut(id).grad.add_assign(&g)?;
                }
                Op::Conv2d { x, w, b, geom } => {
                    let mut dw = self.rg(w).then(|| vec![T::zero(); self.value(w).len()]);
                    let dx = kernels::conv2d_backward(
                        self.value(x).data(),
                        self.value(w).data(),
                        g.data(),
                        &geom,
                        self.rg(x),
                        dw.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        let t = Tensor::new(self.shape(x), dx)?;
                        self.acc(&mut grads, x, t)?;
                    }
                    if let Some(dw) = dw {
                        let t = Tensor::new(self.shape(w), dw)?;
                        self.acc(&mut grads, w, t)?;
                    }
                    if let Some(b) = b.filter(|&b| self.rg(b)) {
                        let plane = geom.ho * geom.wo;
                        let db = g
                            .data()
                            .chunks(plane)
                            .map(|c| T::lit(c.iter().map(|&v| v.as_f64()).sum::<f64>()))
                            .collect();
                        self.acc(&mut grads, b, Tensor::from_vec(db))?;
                    }
                }
                Op::Linear { x, w, b } => {
                    let gv = g.data();
                    let (m, n) = (self.shape(w)[0], self.shape(w)[1]);
                    if self.rg(x) {
                        let wv = self.value(w).data();
                        let mut dx = vec![T::zero(); n];
                        for (i, &gi) in gv.iter().enumerate() {
                            for (d, &wij) in dx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                                *d += gi * wij;
                            }
                        }
                        self.acc(&mut grads, x, Tensor::from_vec(dx))?;
                    }
                    if self.rg(w) {
                        let xv = self.value(x).data();
                        let mut dw = vec![T::zero(); m * n];
                        for (i, &gi) in gv.iter().enumerate() {
                            for (d, &xj) in dw[i * n..(i + 1) * n].iter_mut().zip(xv) {
                                *d = gi * xj;
                            }
                        }
                        let t = Tensor::new(&[m, n], dw)?;
                        self.acc(&mut grads, w, t)?;
                    }
                    if let Some(b) = b.filter(|&b| self.rg(b)) {
                        self.acc(&mut grads, b, g.clone())?;
                    }
                }
                Op::Act(x, kind) => {
                    let y = &self.nodes[i].value;
                    let xv = self.value(x);
                    let dx = match kind {
                        Activation::Relu => xv.zip_map(&g, |v, gi| if v > T::zero() { gi } else { T::zero() })?,
                        Activation::LeakyRelu => xv.zip_map(&g, |v, gi| {
                            if v > T::zero() {
                                gi
                            } else {
                                T::lit(LEAKY_SLOPE) * gi
                            }
                        })?,
                        Activation::Sigmoid => y.zip_map(&g, |s, gi| gi * s * (T::one() - s))?,
                        Activation::Tanh => y.zip_map(&g, |t, gi| gi * (T::one() - t * t))?,
                    };
                    self.acc(&mut grads, x, dx)?;
                }
                Op::Add(a, b) => {
                    if self.rg(b) {
                        self.acc(&mut grads, b, g.clone())?;
                    }
                    self.acc(&mut grads, a, g)?;
                }
                Op::Sub(a, b) => {
                    if self.rg(b) {
                        self.acc(&mut grads, b, g.map(|v| -v))?;
                    }
                    self.acc(&mut grads, a, g)?;
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let da = g.zip_map(self.value(b), |gi, bv| gi * bv)?;
                        self.acc(&mut grads, a, da)?;
                    }
                    if self.rg(b) {
                        let db = g.zip_map(self.value(a), |gi, av| gi * av)?;
                        self.acc(&mut grads, b, db)?;
                    }
                }
                Op::Scale(a, c) => {
                    self.acc(&mut grads, a, g.map(|v| v * c))?;
                }
                Op::AddScalar(a) => {
                    self.acc(&mut grads, a, g)?;
                }
                Op::MulScalarVar { x, s } => {
                    let sv = self.value(s).item();
                    if self.rg(s) {
                        let ds: f64 = g
                            .data()
                            .iter()
                            .zip(self.value(x).data())
                            .map(|(&gi, &xv)| (gi * xv).as_f64())
                            .sum();
                        let t = Tensor::full(self.shape(s), T::lit(ds));
                        self.acc(&mut grads, s, t)?;
                    }
                    if self.rg(x) {
                        self.acc(&mut grads, x, g.map(|v| v * sv))?;
                    }
                }
                Op::Lerp { a, b, t } => {
                    let tv = self.value(t).item();
                    if self.rg(t) {
                        let av = self.value(a).data();
                        let bv = self.value(b).data();
                        let dt: f64 = g
                            .data()
                            .iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&gi, (&x, &y))| (gi * (x - y)).as_f64())
                            .sum();
                        let tt = Tensor::full(self.shape(t), T::lit(dt));
                        self.acc(&mut grads, t, tt)?;
                    }
                    if self.rg(b) {
                        self.acc(&mut grads, b, g.map(|v| v * (T::one() - tv)))?;
                    }
                    if self.rg(a) {
                        self.acc(&mut grads, a, g.map(|v| v * tv))?;
                    }
                }
                Op::ScaleInChannels { w, s } => {
                    let ws = self.shape(w).to_vec();
                    let c = ws[1];
                    let inner: usize = ws[2..].iter().product();
                    if self.rg(s) {
                        let wv = self.value(w).data();
                        let mut ds = vec![0.0f64; c];
                        for (i, (gc, wc)) in g.data().chunks(inner).zip(wv.chunks(inner)).enumerate() {
                            ds[i % c] += gc.iter().zip(wc).map(|(&a, &b)| (a * b).as_f64()).sum::<f64>();
                        }
                        let t = Tensor::from_vec(ds.into_iter().map(T::lit).collect());
                        self.acc(&mut grads, s, t)?;
                    }
                    if self.rg(w) {
                        let sv = self.value(s).data().to_vec();
                        let mut dw = g;
                        for (i, chunk) in dw.data_mut().chunks_mut(inner).enumerate() {
                            let f = sv[i % c];
                            chunk.iter_mut().for_each(|v| *v *= f);
                        }
                        self.acc(&mut grads, w, dw)?;
                    }
                }
                Op::AddChannel { x, b } => {
                    if self.rg(b) {
                        let (_, h, w) = g.chw()?;
                        let db = g
                            .data()
                            .chunks(h * w)
                            .map(|c| T::lit(c.iter().map(|&v| v.as_f64()).sum::<f64>()))
                            .collect();
                        self.acc(&mut grads, b, Tensor::from_vec(db))?;
                    }
                    if self.rg(x) {
                        self.acc(&mut grads, x, g)?;
                    }
                }
                Op::Upsample2x(x) => {
                    let (c, h, w) = self.value(x).chw()?;
                    let gv = g.data();
                    let mut dx = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(ch * h + y / 2) * w + xx / 2] += gv[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    let t = Tensor::new(&[c, h, w], dx)?;
                    self.acc(&mut grads, x, t)?;
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w) = self.value(x).chw()?;
                    let inv = T::lit(1.0 / (h * w) as f64);
                    let mut dx = Vec::with_capacity(c * h * w);
                    for &gc in g.data() {
                        dx.extend(std::iter::repeat(gc * inv).take(h * w));
                    }
                    let t = Tensor::new(&[c, h, w], dx)?;
                    self.acc(&mut grads, x, t)?;
                }
                Op::Sum(x) => {
                    let t = Tensor::full(self.shape(x), g.item());
                    self.acc(&mut grads, x, t)?;
                }
                Op::Mean(x) => {
                    let n = T::lit(self.value(x).len() as f64);
                    let t = Tensor::full(self.shape(x), g.item() / n);
                    self.acc(&mut grads, x, t)?;
                }
                Op::Mse(a, b) => {
                    let n = T::lit(self.value(a).len() as f64);
                    let k = T::lit(2.0) * g.item() / n;
                    let da = self.value(a).zip_map(self.value(b), |x, y| k * (x - y))?;
                    if self.rg(b) {
                        self.acc(&mut grads, b, da.map(|v| -v))?;
                    }
                    if self.rg(a) {
                        self.acc(&mut grads, a, da)?;
                    }
                }
                Op::BceLogits { logits, targets } => {
                    let n = T::lit(targets.len() as f64);
                    let gi = g.item();
                    let lv = self.value(logits);
                    let dl: Vec<T> = lv
                        .data()
                        .iter()
                        .zip(&targets)
                        .map(|(&l, &t)| {
                            if l.as_f64().abs() > LOGIT_CLAMP {
                                T::zero()
                            } else {
                                gi * (sigmoid(l) - T::lit(t as f64)) / n
                            }
                        })
                        .collect();
                    let t = Tensor::new(lv.shape(), dl)?;
                    self.acc(&mut grads, logits, t)?;
                }
                Op::Depthwise3 { x, kernel } => {
                    let (c, h, w) = g.chw()?;
                    let dx = kernels::depthwise3_replicate_adjoint(g.data(), c, h, w, &kernel);
                    let t = Tensor::new(&[c, h, w], dx)?;
                    self.acc(&mut grads, x, t)?;
                }
                Op::Reshape(x) => {
                    let t = g.reshape(self.shape(x))?;
                    self.acc(&mut grads, x, t)?;
                }
                Op::Clamp { x, lo, hi } => {
                    let dx = self
                        .value(x)
                        .zip_map(&g, |v, gi| if v >= lo && v <= hi { gi } else { T::zero() })?;
                    self.acc(&mut grads, x, dx)?;
                }
            }
        }

        self.nodes.clear();
        self.params.clear();
        self.consumed = true;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}
