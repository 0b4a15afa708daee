//! Toy encoder, decoder (plain, WIB and baked forms) and watermark extractor.

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::layers::{Conv, Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::registry::WatermarkMessage;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wib::{self, BakedConvLayer, FoldedLayer, MappingNetwork, WibHeads, WibOptions};

pub const IMAGE_SIZE: usize = 32;
pub const LATENT_SIZE: usize = 8;
pub const DECODER_LAYERS: usize = 5;

/// Architecture hyper-parameters; stored in every checkpoint's metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_w: usize,
    pub d_r: usize,
    pub c_z: usize,
    pub extractor_width: usize,
    /// Attach heads to the first and last decoder convolutions too.
    pub wib_first_last: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_w: 16,
            d_r: 32,
            c_z: 8,
            extractor_width: 32,
            wib_first_last: true,
        }
    }
}

impl ModelConfig {
    /// `(C_in, C_out)` of each decoder convolution.
    pub fn decoder_channels(&self) -> [(usize, usize); DECODER_LAYERS] {
        [(self.c_z, 64), (64, 64), (64, 32), (32, 32), (32, 3)]
    }

    /// Whether decoder layer `i` carries WIB heads.
    pub fn has_heads(&self, i: usize) -> bool {
        self.wib_first_last || (i != 0 && i != DECODER_LAYERS - 1)
    }
}

/// Nearest-neighbour ×2 upsampling happens before these decoder layers.
const UPSAMPLE_BEFORE: [bool; DECODER_LAYERS] = [false, true, true, false, false];

fn check_image<T: Scalar>(tape: &Tape<T>, x: Var, exact: Option<usize>) -> Result<()> {
    let s = tape.shape(x);
    let ok = match (s, exact) {
        ([3, h, w], Some(n)) => *h == n && *w == n,
        ([3, h, w], None) => *h >= 8 && *w >= 8,
        _ => false,
    };
    if !ok {
        let want = match exact {
            Some(n) => format!("[3, {n}, {n}]"),
            None => "[3, H, W] with H, W >= 8".to_string(),
        };
        return Err(invalid(format!("expected image of shape {want}, got {s:?}")));
    }
    Ok(())
}

/// `3×32×32 → C_z×8×8`: two stride-2 convolutions to 32 channels, then a
/// stride-1 projection to `C_z` with tanh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub convs: [Conv; 3],
}

impl Encoder {
    pub fn new(store: &mut ParamStore, c_z: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv::new(store, "enc.0", 3, 32, 3, 2, Init::He, true, rng)?,
                Conv::new(store, "enc.1", 32, 32, 3, 2, Init::He, true, rng)?,
                Conv::new(store, "enc.2", 32, c_z, 3, 1, Init::He, true, rng)?,
            ],
        })
    }

    /// Activations after each of the three layers; the last one is `z`.
    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        check_image(tape, x, Some(IMAGE_SIZE))?;
        let mut h = x;
        let mut out = Vec::with_capacity(3);
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, store, h)?;
            let act = if i == 2 { Activation::Tanh } else { Activation::LeakyRelu };
            h = tape.activation(h, act)?;
            out.push(h);
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(*self.features(tape, store, x)?.last().unwrap())
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| c.ids()).collect()
    }
}

/// Runs the decoder layout with `layer(tape, i, x)` as the i-th convolution:
/// leaky ReLU between layers, ×2 upsampling before layers 1 and 2, tanh last.
pub fn decoder_skeleton<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    mut layer: impl FnMut(&mut Tape<T>, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let mut h = z;
    for (i, &up) in UPSAMPLE_BEFORE.iter().enumerate() {
        if up {
            h = tape.upsample2x(h)?;
        }
        h = layer(tape, i, h)?;
        let act = if i + 1 == DECODER_LAYERS {
            Activation::Tanh
        } else {
            Activation::LeakyRelu
        };
        h = tape.activation(h, act)?;
    }
    Ok(h)
}

/// The pre-trained convolutions of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decoder {
    pub convs: [Conv; DECODER_LAYERS],
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let ch = cfg.decoder_channels();
        let mut convs = Vec::with_capacity(DECODER_LAYERS);
        for (i, &(ci, co)) in ch.iter().enumerate() {
            convs.push(Conv::new(store, &format!("dec.{i}"), ci, co, 3, 1, Init::He, true, rng)?);
        }
        Ok(Self {
            convs: convs.try_into().unwrap(),
        })
    }

    fn check_latent<T: Scalar>(&self, tape: &Tape<T>, z: Var) -> Result<()> {
        let want = [self.convs[0].c_in, LATENT_SIZE, LATENT_SIZE];
        if tape.shape(z) != want {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: tape.shape(z).to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// The pre-trained decoder `𝔇(z)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        self.check_latent(tape, z)?;
        decoder_skeleton(tape, z, |tape, i, x| self.convs[i].forward(tape, store, x))
    }

    /// The fingerprinted decoder `𝔇(z, r)`; layers without heads stay plain.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_wib<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        heads: &[Option<WibHeads>],
        r: Var,
        z: Var,
        opts: &WibOptions,
        mut noise: Option<&mut Rng>,
    ) -> Result<Var> {
        self.check_latent(tape, z)?;
        let d_r = heads.iter().flatten().next().map(|h| h.s_head.first.d_in);
        if let Some(d_r) = d_r {
            if tape.shape(r) != [d_r] {
                return Err(Error::ShapeMismatch {
                    op: "decode fingerprint",
                    lhs: tape.shape(r).to_vec(),
                    rhs: vec![d_r],
                });
            }
        }
        decoder_skeleton(tape, z, |tape, i, x| match &heads[i] {
            Some(h) => wib::wib_forward(tape, store, &self.convs[i], h, r, x, opts, noise.as_deref_mut()),
            None => {
                let y = self.convs[i].forward(tape, store, x)?;
                // Consume the draws a baked layer makes so noise streams stay aligned.
                if let (true, Some(rng)) = (opts.noise, noise.as_deref_mut()) {
                    let _ = Tensor::<T>::randn(tape.shape(y), 1.0, rng);
                }
                Ok(y)
            }
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| c.ids()).collect()
    }
}

/// Four 3×3 stride-1 convolutions, global average pooling, linear to `d_w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extractor {
    pub convs: Vec<Conv>,
    pub fc: Linear,
}

impl Extractor {
    pub fn new(store: &mut ParamStore, width: usize, d_w: usize, rng: &mut Rng) -> Result<Self> {
        let mut convs = Vec::with_capacity(4);
        let mut c_in = 3;
        for i in 0..4 {
            convs.push(Conv::new(store, &format!("ext.{i}"), c_in, width, 3, 1, Init::He, true, rng)?);
            c_in = width;
        }
        let fc = Linear::new(store, "ext.fc", width, d_w, Init::Normal((1.0 / width as f64).sqrt()), true, rng)?;
        Ok(Self { convs, fc })
    }

    /// Logits for an image of any size ≥ 8×8.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, img: Var) -> Result<Var> {
        check_image(tape, img, None)?;
        let mut h = img;
        for conv in &self.convs {
            h = conv.forward(tape, store, h)?;
            h = tape.activation(h, Activation::LeakyRelu)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        self.fc.forward(tape, store, pooled)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.convs.iter().flat_map(|c| c.ids()).collect();
        v.extend(self.fc.ids());
        v
    }
}

/// Parameter handles of every network; values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub mapping: MappingNetwork,
    pub heads: Vec<Option<WibHeads>>,
    pub extractor: Extractor,
}

impl Arch {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if config.d_w < crate::registry::MIN_MESSAGE_BITS {
            return Err(invalid(format!("d_w must be at least {}", crate::registry::MIN_MESSAGE_BITS)));
        }
        let encoder = Encoder::new(store, config.c_z, &mut rng.fork())?;
        let decoder = Decoder::new(store, config, &mut rng.fork())?;
        let mut head_rng = rng.fork();
        let mapping = MappingNetwork::new(store, config.d_w, config.d_r, &mut head_rng)?;
        let mut heads = Vec::with_capacity(DECODER_LAYERS);
        for (i, &(ci, co)) in config.decoder_channels().iter().enumerate() {
            heads.push(if config.has_heads(i) {
                Some(WibHeads::new(store, &format!("wib.{i}"), config.d_r, ci, co, &mut head_rng)?)
            } else {
                None
            });
        }
        let extractor = Extractor::new(store, config.extractor_width, config.d_w, &mut rng.fork())?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            mapping,
            heads,
            extractor,
        })
    }

    /// Encoder and decoder weights: trained in pre-training, frozen afterwards.
    pub fn autoencoder_ids(&self) -> Vec<ParamId> {
        [self.encoder.ids(), self.decoder.ids()].concat()
    }

    /// Mapping network and all WIB heads.
    pub fn head_ids(&self) -> Vec<ParamId> {
        let mut v = self.mapping.ids();
        for h in self.heads.iter().flatten() {
            v.extend(h.ids());
        }
        v
    }

    /// Full fingerprinted pipeline `m → r → I_w`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_message<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        m: &WatermarkMessage,
        z: Var,
        opts: &WibOptions,
        noise: Option<&mut Rng>,
    ) -> Result<Var> {
        let r = self.mapping.forward(tape, store, m)?;
        self.decoder.forward_wib(tape, store, &self.heads, r, z, opts, noise)
    }
}

/// Which parameter groups the optimizer may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Encoder and decoder train; everything else frozen.
    Pretrain,
    /// Encoder and decoder frozen; heads, mapping and (unless frozen) extractor train.
    Wib { train_extractor: bool },
}

/// Architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Arch,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Arch::new(&mut store, config, &mut Rng::new(seed))?;
        Ok(Self { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn set_stage(&mut self, stage: Stage) {
        let ae = self.arch.autoencoder_ids();
        let heads = self.arch.head_ids();
        let ext = self.arch.extractor.ids();
        let (ae_t, heads_t, ext_t) = match stage {
            Stage::Pretrain => (true, false, false),
            Stage::Wib { train_extractor } => (false, true, train_extractor),
        };
        for id in ae {
            self.store.set_trainable(id, ae_t);
        }
        for id in heads {
            self.store.set_trainable(id, heads_t);
        }
        for id in ext {
            self.store.set_trainable(id, ext_t);
        }
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let z = self.arch.encoder.forward(&mut tape, &self.store, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode_pretrained(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let y = self.arch.decoder.forward(&mut tape, &self.store, zv)?;
        Ok(tape.value(y).clone())
    }

    pub fn fingerprint(&self, m: &WatermarkMessage) -> Result<Tensor> {
        self.arch.mapping.fingerprint(&self.store, m)
    }

    /// `𝔇(z, E_w(m))`; noise is drawn from `noise` when given.
    pub fn decode_wib(&self, z: &Tensor, m: &WatermarkMessage, opts: &WibOptions, noise: Option<&mut Rng>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let y = self.arch.decode_message(&mut tape, &self.store, m, zv, opts, noise)?;
        Ok(tape.value(y).clone())
    }

    pub fn extract(&self, image: &Tensor) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let l = self.arch.extractor.forward(&mut tape, &self.store, x)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Folds `m`'s fingerprint into a standalone decoder.
    pub fn bake(&self, m: &WatermarkMessage, opts: &WibOptions) -> Result<BakedDecoder> {
        let r = self.fingerprint(m)?;
        self.bake_fingerprint(&r, opts)
    }

    pub fn bake_fingerprint(&self, r: &Tensor, opts: &WibOptions) -> Result<BakedDecoder> {
        let mut folded = Vec::with_capacity(DECODER_LAYERS);
        for (conv, heads) in self.arch.decoder.convs.iter().zip(&self.arch.heads) {
            folded.push(match heads {
                Some(h) => wib::fold_layer(&self.store, conv, h, r, opts)?,
                None => wib::fold_plain(&self.store, conv),
            });
        }
        let encoder: Vec<(String, Tensor)> = self
            .arch
            .encoder
            .ids()
            .into_iter()
            .map(|id| {
                let p = self.store.get(id);
                (p.name.clone(), p.value.clone())
            })
            .collect();
        BakedDecoder::from_parts(self.config().clone(), encoder, folded)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "generic",
            "config": self.arch.config,
        });
        Checkpoint::from_store(&self.store, false, meta)
    }

    /// Rebuilds a model from a generic checkpoint. Every parameter must be present.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.baked {
            return Err(Error::Checkpoint("expected a generic checkpoint, found a baked one".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = Self::new(&config, 0)?;
        let loaded = ck.load_into(&mut model.store)?;
        if loaded != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint provides {loaded} of {} parameters",
                model.store.len()
            )));
        }
        Ok(model)
    }
}

/// A decoder with one user's fingerprint folded into plain convolution
/// weights, plus the pre-trained encoder used as the latent source.
#[derive(Clone, Debug)]
pub struct BakedDecoder {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub layers: Vec<BakedConvLayer>,
    pub store: ParamStore,
}

impl BakedDecoder {
    fn from_parts(config: ModelConfig, encoder: Vec<(String, Tensor)>, folded: Vec<FoldedLayer>) -> Result<Self> {
        let mut ck = Checkpoint::new(true, serde_json::json!({"kind": "baked", "config": config}));
        for (name, t) in encoder {
            ck.push(name, t)?;
        }
        for (i, f) in folded.into_iter().enumerate() {
            ck.push(format!("dec.{i}.weight"), f.w)?;
            ck.push(format!("dec.{i}.bias"), f.b)?;
            ck.push(format!("dec.{i}.aug"), f.aug)?;
            ck.push(format!("dec.{i}.lambda_n"), f.lambda_n)?;
        }
        Self::from_checkpoint(&ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if !ck.baked {
            return Err(Error::Checkpoint("expected a baked checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut store = ParamStore::new();
        let mut ids = Vec::new();
        for (name, t) in ck.tensors() {
            ids.push(store.add(name.clone(), t.clone(), true)?);
        }
        let conv_from = |store: &ParamStore, name: &str, stride: usize| -> Result<Conv> {
            let w = store.id(&format!("{name}.weight"))?;
            let s = store.value(w).shape().to_vec();
            if s.len() != 4 {
                return Err(Error::Checkpoint(format!("{name}.weight must be rank 4")));
            }
            Ok(Conv {
                w,
                b: store.id(&format!("{name}.bias"))?,
                c_in: s[1],
                c_out: s[0],
                k: s[2],
                stride,
            })
        };
        let encoder = Encoder {
            convs: [
                conv_from(&store, "enc.0", 2)?,
                conv_from(&store, "enc.1", 2)?,
                conv_from(&store, "enc.2", 1)?,
            ],
        };
        let mut layers = Vec::with_capacity(DECODER_LAYERS);
        for (i, &(ci, co)) in config.decoder_channels().iter().enumerate() {
            let c = conv_from(&store, &format!("dec.{i}"), 1)?;
            if (c.c_in, c.c_out) != (ci, co) {
                return Err(Error::Checkpoint(format!("dec.{i} has unexpected channels")));
            }
            layers.push(BakedConvLayer {
                w: c.w,
                b: c.b,
                aug: store.id(&format!("dec.{i}.aug"))?,
                lambda_n: store.id(&format!("dec.{i}.lambda_n"))?,
                c_in: ci,
                c_out: co,
                k: c.k,
            });
        }
        if ids.len() != 6 + 4 * DECODER_LAYERS {
            return Err(Error::Checkpoint("baked checkpoint has unexpected tensors".into()));
        }
        for id in encoder.ids() {
            store.set_trainable(id, false);
        }
        Ok(Self {
            config,
            encoder,
            layers,
            store,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({"kind": "baked", "config": self.config});
        Checkpoint::from_store(&self.store, true, meta)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        mut noise: Option<&mut Rng>,
    ) -> Result<Var> {
        let want = [self.layers[0].c_in, LATENT_SIZE, LATENT_SIZE];
        if tape.shape(z) != want {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: tape.shape(z).to_vec(),
                rhs: want.to_vec(),
            });
        }
        decoder_skeleton(tape, z, |tape, i, x| {
            self.layers[i].forward(tape, store, x, noise.as_deref_mut())
        })
    }

    pub fn decode(&self, z: &Tensor, noise: Option<&mut Rng>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let y = self.forward(&mut tape, &self.store, zv, noise)?;
        Ok(tape.value(y).clone())
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let z = self.encoder.forward(&mut tape, &self.store, x)?;
        Ok(tape.value(z).clone())
    }

    /// Folded kernel of decoder layer `i`.
    pub fn kernel(&self, i: usize) -> &Tensor {
        self.store.value(self.layers[i].w)
    }

    pub fn decoder_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.w, l.b, l.aug, l.lambda_n])
            .collect()
    }
}
