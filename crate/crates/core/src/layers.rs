//! Parameterised building blocks shared by the networks.

use crate::autograd::{Activation, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-style normal weights for a leaky-relu fan-in, zero bias.
    He,
    /// Normal weights with the given standard deviation, zero bias.
    Normal(f64),
    /// Zero weights and zero bias.
    Zero,
    /// Zero weights, bias one.
    ZeroWeightUnitBias,
}

fn he_std(fan_in: usize) -> f64 {
    let slope = crate::autograd::LEAKY_SLOPE;
    (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

fn init_pair(shape: &[usize], fan_in: usize, n_out: usize, init: Init, rng: &mut Rng) -> (Tensor, Tensor) {
    match init {
        Init::He => (Tensor::randn(shape, he_std(fan_in), rng), Tensor::zeros(&[n_out])),
        Init::Normal(std) => (Tensor::randn(shape, std, rng), Tensor::zeros(&[n_out])),
        Init::Zero => (Tensor::zeros(shape), Tensor::zeros(&[n_out])),
        Init::ZeroWeightUnitBias => (Tensor::zeros(shape), Tensor::ones(&[n_out])),
    }
}

/// `y = W x + b` on vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        trainable: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (w, b) = init_pair(&[d_out, d_in], d_in, d_out, init, rng);
        Ok(Self {
            w: store.add(format!("{name}.weight"), w, trainable)?,
            b: store.add(format!("{name}.bias"), b, trainable)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Two linear layers with a leaky ReLU between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    /// `second_init` lets the output layer start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        second_init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), d_in, d_hidden, Init::He, true, rng)?,
            second: Linear::new(store, &format!("{name}.1"), d_hidden, d_out, second_init, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.activation(h, Activation::LeakyRelu)?;
        self.second.forward(tape, store, h)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        let [a, b] = self.first.ids();
        let [c, d] = self.second.ids();
        [a, b, c, d]
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        trainable: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (w, b) = init_pair(&[c_out, c_in, k, k], c_in * k * k, c_out, init, rng);
        Ok(Self {
            w: store.add(format!("{name}.weight"), w, trainable)?,
            b: store.add(format!("{name}.bias"), b, trainable)?,
            c_in,
            c_out,
            k,
            stride,
        })
    }

    pub fn padding(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.padding())
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}
