//! Watermark-informed blending.
//!
//! A fingerprint `r = E_w(2m − 1)` drives, per convolution layer,
//!
//! * modulation `W′ = W · (s + b)` per input channel, `s = s_head(r)`, `b = A(r)`
//! * blending `y_d = α f(W′, x) + (1 − α) f(W, x)` with `α = sigmoid(alpha_raw)`
//! * quality preservation `y_i = aug(r) + λ_n ε`, `ε ~ N(0, 1)` per output cell
//!
//! and the layer output is `y = y_d + y_i`. The frozen kernel `W` and bias
//! are never trained; only the heads are. Because convolution is linear in the
//! kernel, `y_d = f(W ⊙ (α(s + b) + 1 − α), x)`, which is what baking stores.

use crate::autograd::{Activation, Tape, Var};
use crate::error::{invalid, Result};
use crate::layers::{Conv, Init, Linear, Mlp2};
use crate::params::{ParamId, ParamStore};
use crate::registry::WatermarkMessage;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `E_w`: two linear layers `d_w → d_r → d_r` with a leaky ReLU between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MappingNetwork {
    pub first: Linear,
    pub second: Linear,
    pub d_w: usize,
    pub d_r: usize,
}

impl MappingNetwork {
    pub fn new(store: &mut ParamStore, d_w: usize, d_r: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, "map.0", d_w, d_r, Init::He, true, rng)?,
            second: Linear::new(store, "map.1", d_r, d_r, Init::He, true, rng)?,
            d_w,
            d_r,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, m: &WatermarkMessage) -> Result<Var> {
        if m.len() != self.d_w {
            return Err(crate::Error::ShapeMismatch {
                op: "map_watermark",
                lhs: vec![m.len()],
                rhs: vec![self.d_w],
            });
        }
        let x = tape.constant(Tensor::from_vec(m.bits().iter().map(|&b| T::lit(2.0 * b as f64 - 1.0)).collect()));
        let h = self.first.forward(tape, store, x)?;
        let h = tape.activation(h, Activation::LeakyRelu)?;
        self.second.forward(tape, store, h)
    }

    /// `r_w` for one message, evaluated without gradient tracking.
    pub fn fingerprint(&self, store: &ParamStore, m: &WatermarkMessage) -> Result<Tensor> {
        let mut tape = Tape::new();
        let r = self.forward(&mut tape, store, m)?;
        Ok(tape.value(r).clone())
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.first.ids(), self.second.ids()].concat()
    }
}

/// Trainable heads attached to one frozen convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WibHeads {
    /// `s`: `d_r → d_r → C_in`, output layer zero-initialised.
    pub s_head: Mlp2,
    /// `b`: `d_r → C_in`, zero weights, unit bias.
    pub a: Linear,
    /// `aug`: `d_r → d_r → C_out`, output layer zero-initialised.
    pub m: Mlp2,
    pub alpha_raw: ParamId,
    pub lambda_n: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl WibHeads {
    pub fn new(store: &mut ParamStore, name: &str, d_r: usize, c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            s_head: Mlp2::new(store, &format!("{name}.s"), d_r, d_r, c_in, Init::Zero, rng)?,
            a: Linear::new(store, &format!("{name}.a"), d_r, c_in, Init::ZeroWeightUnitBias, true, rng)?,
            m: Mlp2::new(store, &format!("{name}.m"), d_r, d_r, c_out, Init::Zero, rng)?,
            alpha_raw: store.add(format!("{name}.alpha_raw"), Tensor::scalar(0.0), true)?,
            lambda_n: store.add(format!("{name}.lambda_n"), Tensor::scalar(0.0), true)?,
            c_in,
            c_out,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::with_capacity(12);
        v.extend(self.s_head.ids());
        v.extend(self.a.ids());
        v.extend(self.m.ids());
        v.push(self.alpha_raw);
        v.push(self.lambda_n);
        v
    }
}

/// How the blended convolution is evaluated. Both are the same function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlendForm {
    /// Two convolutions, `α f(W′, x) + (1 − α) f(W, x)`.
    TwoPath,
    /// One convolution with the kernel `W ⊙ (α(s + b) + 1 − α)`.
    #[default]
    Folded,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WibOptions {
    /// Replaces `sigmoid(alpha_raw)` with a constant.
    pub alpha: Option<f64>,
    pub noise: bool,
    pub aug: bool,
    pub form: BlendForm,
}

impl Default for WibOptions {
    fn default() -> Self {
        Self {
            alpha: None,
            noise: true,
            aug: true,
            form: BlendForm::Folded,
        }
    }
}

fn alpha_var<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, heads: &WibHeads, opts: &WibOptions) -> Result<Var> {
    match opts.alpha {
        Some(a) => {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid(format!("alpha override {a} outside [0, 1]")));
            }
            Ok(tape.constant(Tensor::scalar(T::lit(a))))
        }
        None => {
            let raw = tape.param(store, heads.alpha_raw);
            tape.activation(raw, Activation::Sigmoid)
        }
    }
}

/// `s + b`, the per-input-channel modulation factor.
pub fn modulation<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, heads: &WibHeads, r: Var) -> Result<Var> {
    let s = heads.s_head.forward(tape, store, r)?;
    let b = heads.a.forward(tape, store, r)?;
    tape.add(s, b)
}

/// `W′ = W · (s + b)`.
pub fn modulated_kernel<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    conv: &Conv,
    heads: &WibHeads,
    r: Var,
) -> Result<Var> {
    let sb = modulation(tape, store, heads, r)?;
    let w = tape.param(store, conv.w);
    tape.scale_in_channels(w, sb)
}

/// `y_d`, bias included once.
pub fn blended_conv<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    conv: &Conv,
    heads: &WibHeads,
    r: Var,
    x: Var,
    opts: &WibOptions,
) -> Result<Var> {
    let sb = modulation(tape, store, heads, r)?;
    let alpha = alpha_var(tape, store, heads, opts)?;
    let w = tape.param(store, conv.w);
    let bias = tape.param(store, conv.b);
    let pad = conv.padding();
    match opts.form {
        BlendForm::TwoPath => {
            let wp = tape.scale_in_channels(w, sb)?;
            let y_mod = tape.conv2d(x, wp, None, conv.stride, pad)?;
            let y_orig = tape.conv2d(x, w, None, conv.stride, pad)?;
            let y = tape.lerp(y_mod, y_orig, alpha)?;
            tape.add_channel(y, bias)
        }
        BlendForm::Folded => {
            let ones = tape.constant(Tensor::ones(&[conv.c_in]));
            let factor = tape.lerp(sb, ones, alpha)?;
            let wf = tape.scale_in_channels(w, factor)?;
            tape.conv2d(x, wf, Some(bias), conv.stride, pad)
        }
    }
}

/// `y_i` added onto `y`: per-channel `aug` and `λ_n ε`. `ε` is drawn only
/// when `noise` is given and the noise path is enabled.
pub fn add_iqp<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    heads: &WibHeads,
    r: Var,
    y: Var,
    opts: &WibOptions,
    noise: Option<&mut Rng>,
) -> Result<Var> {
    let mut y = y;
    if opts.aug {
        let aug = heads.m.forward(tape, store, r)?;
        y = tape.add_channel(y, aug)?;
    }
    if let (true, Some(rng)) = (opts.noise, noise) {
        let eps = tape.constant(Tensor::randn(tape.shape(y), 1.0, rng));
        let lam = tape.param(store, heads.lambda_n);
        let scaled = tape.mul_scalar_var(eps, lam)?;
        y = tape.add(y, scaled)?;
    }
    Ok(y)
}

/// Full layer output `y = y_d + y_i`.
#[allow(clippy::too_many_arguments)]
pub fn wib_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    conv: &Conv,
    heads: &WibHeads,
    r: Var,
    x: Var,
    opts: &WibOptions,
    noise: Option<&mut Rng>,
) -> Result<Var> {
    let y = blended_conv(tape, store, conv, heads, r, x, opts)?;
    add_iqp(tape, store, heads, r, y, opts, noise)
}

/// Plain layer with fixed tensors: `conv(x, W, bias) + aug + λ_n ε`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BakedConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub aug: ParamId,
    pub lambda_n: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl BakedConvLayer {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        noise: Option<&mut Rng>,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv2d(x, w, Some(b), 1, (self.k - 1) / 2)?;
        let aug = tape.param(store, self.aug);
        let mut y = tape.add_channel(y, aug)?;
        if let Some(rng) = noise {
            let eps = tape.constant(Tensor::randn(tape.shape(y), 1.0, rng));
            let lam = tape.param(store, self.lambda_n);
            let scaled = tape.mul_scalar_var(eps, lam)?;
            y = tape.add(y, scaled)?;
        }
        Ok(y)
    }
}

/// Folded tensors of one layer for a fixed fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub aug: Tensor,
    pub lambda_n: Tensor,
}

/// `W_folded = W ⊙ (α(s + b) + 1 − α)` along input channels, with `aug(r)`
/// and `λ_n` copied (zeroed when the corresponding path is disabled).
pub fn fold_layer(store: &ParamStore, conv: &Conv, heads: &WibHeads, r: &Tensor, opts: &WibOptions) -> Result<FoldedLayer> {
    let mut tape = Tape::new();
    let rv = tape.constant(r.clone());
    let sb = modulation(&mut tape, store, heads, rv)?;
    let alpha = alpha_var(&mut tape, store, heads, opts)?;
    let aug = heads.m.forward(&mut tape, store, rv)?;
    let alpha = tape.value(alpha).item();
    let factor: Vec<f32> = tape
        .value(sb)
        .data()
        .iter()
        .map(|&v| alpha * v + (1.0 - alpha))
        .collect();
    let mut w = store.value(conv.w).clone();
    let inner = conv.k * conv.k;
    for (i, chunk) in w.data_mut().chunks_mut(inner).enumerate() {
        let f = factor[i % conv.c_in];
        chunk.iter_mut().for_each(|v| *v *= f);
    }
    let aug = if opts.aug {
        tape.value(aug).clone()
    } else {
        Tensor::zeros(&[conv.c_out])
    };
    let lambda_n = if opts.noise {
        store.value(heads.lambda_n).clone()
    } else {
        Tensor::scalar(0.0)
    };
    Ok(FoldedLayer {
        w,
        b: store.value(conv.b).clone(),
        aug,
        lambda_n,
    })
}

/// A frozen layer without heads, folded the same way (factor one, no aug).
pub fn fold_plain(store: &ParamStore, conv: &Conv) -> FoldedLayer {
    FoldedLayer {
        w: store.value(conv.w).clone(),
        b: store.value(conv.b).clone(),
        aug: Tensor::zeros(&[conv.c_out]),
        lambda_n: Tensor::scalar(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Setup {
        store: ParamStore,
        conv: Conv,
        heads: WibHeads,
        map: MappingNetwork,
    }

    fn setup(seed: u64) -> Setup {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, "dec.0", 3, 4, 3, 1, Init::He, false, &mut rng).unwrap();
        let heads = WibHeads::new(&mut store, "wib.0", 8, 3, 4, &mut rng).unwrap();
        let map = MappingNetwork::new(&mut store, 8, 8, &mut rng).unwrap();
        Setup { store, conv, heads, map }
    }

    fn perturb(store: &mut ParamStore, ids: &[ParamId], rng: &mut Rng) {
        for &id in ids {
            let shape = store.value(id).shape().to_vec();
            let t = Tensor::randn(&shape, 0.3, rng);
            store.set_value(id, t).unwrap();
        }
    }

    #[test]
    fn init_layer_is_the_plain_convolution() {
        let s = setup(1);
        let mut rng = Rng::new(2);
        let m = crate::registry::sample_message(8, &mut rng).unwrap();
        let x = Tensor::uniform(&[3, 6, 6], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let r = s.map.forward(&mut tape, &s.store, &m).unwrap();
        let xv = tape.constant(x.clone());
        let y = wib_forward(&mut tape, &s.store, &s.conv, &s.heads, r, xv, &WibOptions::default(), Some(&mut rng)).unwrap();
        let plain = s.conv.forward(&mut tape, &s.store, xv).unwrap();
        assert_eq!(tape.value(y), tape.value(plain));
    }

    #[test]
    fn two_path_and_folded_agree() {
        let mut s = setup(3);
        let mut rng = Rng::new(4);
        perturb(&mut s.store, &s.heads.ids(), &mut rng);
        let r = Tensor::randn(&[8], 1.0, &mut rng);
        let x = Tensor::uniform(&[3, 5, 5], -1.0, 1.0, &mut rng);
        let mut outs = Vec::new();
        for form in [BlendForm::TwoPath, BlendForm::Folded] {
            let mut tape = Tape::new();
            let rv = tape.constant(r.clone());
            let xv = tape.constant(x.clone());
            let opts = WibOptions { form, ..Default::default() };
            let y = blended_conv(&mut tape, &s.store, &s.conv, &s.heads, rv, xv, &opts).unwrap();
            outs.push(tape.value(y).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]).unwrap() < 1e-5);
    }
}
