//! Losses, autoencoder pre-training and the joint WIB + extractor stage.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{bit_accuracy, decode_logits};
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::nets::{Encoder, Model, ModelConfig, Stage};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::registry::{sample_message, WatermarkMessage};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wib::{BlendForm, WibOptions};

/// 4-neighbour Laplacian used by the visual proxy.
pub const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// Pre-training refuses smaller corpora.
pub const MIN_PRETRAIN_IMAGES: usize = 1000;

// Stream tags mixed into the seed so each stage draws from its own sequence.
const PRETRAIN_STREAM: u64 = 0x7072_6574_7261_696e;
const WIB_STREAM: u64 = 0x7769_625f_7472_6169;

/// Single-component ablations. At most one may be set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Modulation and blending only: no noise, no aug, frozen extractor, no feature loss.
    pub dwb_only: bool,
    pub no_noise: bool,
    pub no_aug: bool,
    pub no_lpips_proxy: bool,
    pub frozen_extractor: bool,
    /// No heads on the first and last decoder convolutions.
    pub wib_inner_only: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 6] = [
        "dwb_only",
        "no_noise",
        "no_aug",
        "no_lpips_proxy",
        "frozen_extractor",
        "wib_inner_only",
    ];

    fn values(&self) -> [bool; 6] {
        [
            self.dwb_only,
            self.no_noise,
            self.no_aug,
            self.no_lpips_proxy,
            self.frozen_extractor,
            self.wib_inner_only,
        ]
    }

    /// The flags that are set, by name.
    pub fn active(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .filter_map(|(n, v)| v.then_some(*n))
            .collect()
    }

    /// Flags with exactly `name` set. Accepts dashes for underscores.
    pub fn only(name: &str) -> Result<Self> {
        let mut f = Self::default();
        match name.replace('-', "_").as_str() {
            "dwb_only" => f.dwb_only = true,
            "no_noise" => f.no_noise = true,
            "no_aug" => f.no_aug = true,
            "no_lpips_proxy" => f.no_lpips_proxy = true,
            "frozen_extractor" => f.frozen_extractor = true,
            "wib_inner_only" => f.wib_inner_only = true,
            other => {
                return Err(invalid(format!(
                    "unknown ablation '{other}', expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// WIB stage learning rate.
    pub lr: f32,
    /// Extractor learning rate in the WIB stage; `None` uses `lr`.
    pub extractor_lr: Option<f32>,
    pub pretrain_lr: f32,
    pub betas: (f32, f32),
    pub weight_decay: f32,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub wib_steps: usize,
    pub lambda_w: f32,
    pub lambda_p: f32,
    pub lambda_l: f32,
    pub d_w: usize,
    pub d_r: usize,
    pub c_z: usize,
    pub extractor_width: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            extractor_lr: None,
            pretrain_lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            batch_size: 16,
            pretrain_steps: 4000,
            wib_steps: 3000,
            lambda_w: 1.0,
            lambda_p: 0.2,
            lambda_l: 1.0,
            d_w: 16,
            d_r: 32,
            c_z: 8,
            extractor_width: 32,
            seed: 0,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_w", self.lambda_w), ("lambda_p", self.lambda_p), ("lambda_l", self.lambda_l)] {
            if !(v >= 0.0) {
                return Err(invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        let active = self.ablation.active();
        if active.len() > 1 {
            return Err(invalid(format!("ablations are exclusive, got {}", active.join(", "))));
        }
        // Optimizer hyper-parameters are checked by the optimizer itself.
        AdamW::new(self.lr, self.betas, self.weight_decay)?;
        AdamW::new(self.pretrain_lr, self.betas, self.weight_decay)?;
        if let Some(lr) = self.extractor_lr {
            AdamW::new(lr, self.betas, self.weight_decay)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_w: self.d_w,
            d_r: self.d_r,
            c_z: self.c_z,
            extractor_width: self.extractor_width,
            wib_first_last: !self.ablation.wib_inner_only,
        }
    }

    /// Layer options the ablation flags imply, for training and baking alike.
    pub fn wib_options(&self) -> WibOptions {
        let a = &self.ablation;
        WibOptions {
            alpha: None,
            noise: !(a.no_noise || a.dwb_only),
            aug: !(a.no_aug || a.dwb_only),
            form: BlendForm::Folded,
        }
    }

    pub fn train_extractor(&self) -> bool {
        !(self.ablation.frozen_extractor || self.ablation.dwb_only)
    }

    /// `λ_l`, or zero when the feature loss is ablated.
    pub fn effective_lambda_l(&self) -> f32 {
        if self.ablation.no_lpips_proxy || self.ablation.dwb_only {
            0.0
        } else {
            self.lambda_l
        }
    }
}

/// ℒ_w: mean binary cross-entropy of the extracted logits against `m`.
pub fn watermark_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, m: &WatermarkMessage) -> Result<Var> {
    tape.bce_with_logits(logits, &m.as_targets())
}

/// ℒ_v proxy: pixel MSE plus MSE of the Laplacian responses.
pub fn visual_proxy<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let pixel = tape.mse(a, b)?;
    let la = tape.depthwise3(a, LAPLACIAN)?;
    let lb = tape.depthwise3(b, LAPLACIAN)?;
    let edge = tape.mse(la, lb)?;
    tape.add(pixel, edge)
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// ℒ_l proxy against precomputed features of the reference image: mean over
/// the encoder's three layers of the feature MSE.
pub fn feature_proxy_to<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    encoder: &Encoder,
    a: Var,
    reference: &[Var],
) -> Result<Var> {
    let fa = encoder.features(tape, store, a)?;
    let terms = fa
        .iter()
        .zip(reference)
        .map(|(&x, &y)| tape.mse(x, y))
        .collect::<Result<Vec<_>>>()?;
    mean_of(tape, &terms)
}

/// ℒ_l proxy: mean feature MSE between two images under the frozen encoder.
pub fn feature_proxy<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    encoder: &Encoder,
    a: Var,
    b: Var,
) -> Result<Var> {
    let fb = encoder.features(tape, store, b)?;
    feature_proxy_to(tape, store, encoder, a, &fb)
}

/// Values of the two perceptual proxy terms for a pair of images.
pub fn perceptual_terms(model: &Model, a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let v = visual_proxy(&mut tape, av, bv)?;
    let l = feature_proxy(&mut tape, &model.store, &model.arch.encoder, av, bv)?;
    Ok((tape.value(v).item() as f64, tape.value(l).item() as f64))
}

/// ℒ_p = λ_p ℒ_v + λ_l ℒ_l.
pub fn perceptual_loss(model: &Model, a: &Tensor, b: &Tensor, lambda_p: f64, lambda_l: f64) -> Result<f64> {
    let (v, l) = perceptual_terms(model, a, b)?;
    Ok(lambda_p * v + lambda_l * l)
}

/// One logged training step; all values are batch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_w: f64,
    pub l_v_proxy: f64,
    pub l_l_proxy: f64,
    pub total: f64,
    pub bit_accuracy_batch: f64,
}

pub const LOG_HEADER: &str = "step,l_w,l_v,l_l,total,bit_acc";

impl LossBreakdown {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_w, self.l_v_proxy, self.l_l_proxy, self.total, self.bit_accuracy_batch
        )
    }
}

pub fn log_csv(rows: &[LossBreakdown]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn write_log(rows: &[LossBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(log_csv(rows).as_bytes())?;
    Ok(())
}

/// SHA-256 of every encoder/decoder tensor, keyed by name.
pub fn frozen_checksums(model: &Model) -> Vec<(String, String)> {
    model
        .arch
        .autoencoder_ids()
        .into_iter()
        .map(|id| {
            let p = model.store.get(id);
            let mut h = Sha256::new();
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
            let hex = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
            (p.name.clone(), hex)
        })
        .collect()
}

fn check_finite(stage: &'static str, step: usize, loss: f32) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { stage, step, loss })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Reconstruction MSE per step.
    pub losses: Vec<f64>,
    pub heldout_psnr: f64,
}

/// Mean reconstruction PSNR of `decode(encode(x))`.
pub fn reconstruction_psnr(model: &Model, images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(invalid("no images to evaluate"));
    }
    let mut total = 0.0;
    for img in images {
        let rec = model.decode_pretrained(&model.encode(img)?)?;
        total += metrics::psnr(&rec, img)?;
    }
    Ok(total / images.len() as f64)
}

/// Trains encoder and decoder on reconstruction MSE. `on_step(step, loss)`
/// is called after every optimizer step.
pub fn pretrain(
    model: &mut Model,
    cfg: &TrainingConfig,
    train: &[Tensor],
    heldout: &[Tensor],
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    cfg.validate()?;
    if train.len() < MIN_PRETRAIN_IMAGES {
        return Err(invalid(format!(
            "pre-training needs at least {MIN_PRETRAIN_IMAGES} images, got {}",
            train.len()
        )));
    }
    model.set_stage(Stage::Pretrain);
    let mut opt = AdamW::new(cfg.pretrain_lr, cfg.betas, cfg.weight_decay)?;
    let mut rng = Rng::new(cfg.seed ^ PRETRAIN_STREAM);
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    for step in 0..cfg.pretrain_steps {
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let x = tape.constant(train[rng.below(train.len())].clone());
            let z = model.arch.encoder.forward(&mut tape, &model.store, x)?;
            let y = model.arch.decoder.forward(&mut tape, &model.store, z)?;
            terms.push(tape.mse(y, x)?);
        }
        let loss = mean_of(&mut tape, &terms)?;
        let value = tape.value(loss).item();
        check_finite("pretrain", step, value)?;
        model.store.zero_grad();
        tape.backward(loss, &mut model.store)?;
        opt.step(&mut model.store)?;
        losses.push(value as f64);
        on_step(step, value as f64);
    }
    model.store.zero_grad();
    let heldout_psnr = if heldout.is_empty() {
        f64::NAN
    } else {
        reconstruction_psnr(model, heldout)?
    };
    Ok(PretrainReport { losses, heldout_psnr })
}

/// A fresh model for `cfg` whose encoder and decoder come from a
/// pre-training checkpoint. Heads, mapping and extractor are initialised from
/// `cfg.seed`, so the message length may differ from the pre-training run.
pub fn model_from_pretrained(ck: &Checkpoint, cfg: &TrainingConfig) -> Result<Model> {
    let mut model = Model::new(&cfg.model_config(), cfg.seed)?;
    for id in model.arch.autoencoder_ids() {
        let name = model.store.get(id).name.clone();
        let t = ck.require(&name)?;
        if t.shape() != model.store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?}, expected {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        model.store.set_value(id, t.clone())?;
    }
    Ok(model)
}

/// A latent with its frozen-decoder image and that image's encoder features.
/// All three are fixed once pre-training ends, so they are computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Tensor,
    pub original: Tensor,
    pub features: Vec<Tensor>,
}

pub fn prepare_latents(model: &Model, images: &[Tensor]) -> Result<Vec<LatentSample>> {
    images
        .iter()
        .map(|img| {
            let z = model.encode(img)?;
            let original = model.decode_pretrained(&z)?;
            let mut tape = Tape::new();
            let o = tape.constant(original.clone());
            let feats = model.arch.encoder.features(&mut tape, &model.store, o)?;
            let features = feats.iter().map(|&f| tape.value(f).clone()).collect();
            Ok(LatentSample { z, original, features })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WibReport {
    pub log: Vec<LossBreakdown>,
    pub checksums: Vec<(String, String)>,
}

/// Trains the mapping network, WIB heads and (unless ablated) the extractor
/// with a fresh random message per batch item. Encoder and decoder stay
/// frozen; any change to them is reported as [`Error::FrozenTensorChanged`].
pub fn train_wib(
    model: &mut Model,
    cfg: &TrainingConfig,
    samples: &[LatentSample],
    mut on_step: impl FnMut(&LossBreakdown),
) -> Result<WibReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(invalid("no training latents"));
    }
    if model.config() != &cfg.model_config() {
        return Err(invalid("model architecture does not match the training config"));
    }
    model.set_stage(Stage::Wib {
        train_extractor: cfg.train_extractor(),
    });
    let before = frozen_checksums(model);
    let opts = cfg.wib_options();
    let (lw, lp, ll) = (cfg.lambda_w as f64, cfg.lambda_p as f64, cfg.effective_lambda_l() as f64);
    let mut opt = AdamW::new(cfg.lr, cfg.betas, cfg.weight_decay)?;
    if let Some(lr) = cfg.extractor_lr {
        for id in model.arch.extractor.ids() {
            opt.set_lr_scale(id, lr / cfg.lr)?;
        }
    }
    let mut rng = Rng::new(cfg.seed ^ WIB_STREAM);
    let mut noise = rng.fork();
    let mut log = Vec::with_capacity(cfg.wib_steps);
    let b = cfg.batch_size as f64;
    for step in 0..cfg.wib_steps {
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(cfg.batch_size);
        let (mut s_w, mut s_v, mut s_l, mut s_acc) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let s = &samples[rng.below(samples.len())];
            let m = sample_message(cfg.d_w, &mut rng)?;
            let z = tape.constant(s.z.clone());
            let iw = model
                .arch
                .decode_message(&mut tape, &model.store, &m, z, &opts, Some(&mut noise))?;
            let logits = model.arch.extractor.forward(&mut tape, &model.store, iw)?;
            s_acc += bit_accuracy(m.bits(), &decode_logits(tape.value(logits).data()))?;
            let l_w = watermark_loss(&mut tape, logits, &m)?;
            let io = tape.constant(s.original.clone());
            let l_v = visual_proxy(&mut tape, iw, io)?;
            s_w += tape.value(l_w).item() as f64;
            s_v += tape.value(l_v).item() as f64;
            let a = tape.scale(l_w, lw)?;
            let c = tape.scale(l_v, lp)?;
            let mut total = tape.add(a, c)?;
            if ll > 0.0 {
                let reference: Vec<Var> = s.features.iter().map(|f| tape.constant(f.clone())).collect();
                let l_l = feature_proxy_to(&mut tape, &model.store, &model.arch.encoder, iw, &reference)?;
                s_l += tape.value(l_l).item() as f64;
                let d = tape.scale(l_l, ll)?;
                total = tape.add(total, d)?;
            }
            terms.push(total);
        }
        let loss = mean_of(&mut tape, &terms)?;
        let value = tape.value(loss).item();
        check_finite("wib", step, value)?;
        model.store.zero_grad();
        tape.backward(loss, &mut model.store)?;
        opt.step(&mut model.store)?;
        let row = LossBreakdown {
            step,
            l_w: s_w / b,
            l_v_proxy: s_v / b,
            l_l_proxy: s_l / b,
            total: value as f64,
            bit_accuracy_batch: s_acc / b,
        };
        on_step(&row);
        log.push(row);
    }
    model.store.zero_grad();
    let after = frozen_checksums(model);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if a != b {
            return Err(Error::FrozenTensorChanged(name.clone()));
        }
    }
    Ok(WibReport { log, checksums: after })
}

/// Held-out quality of a trained WIB model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WibEvaluation {
    pub pairs: usize,
    pub bit_accuracy: f64,
    pub psnr_to_original: f64,
}

/// Mean bit accuracy and PSNR(I_w, I_o) over `pairs` (latent, message)
/// pairs; latents cycle through `samples`, messages come from `seed`.
pub fn evaluate_wib(
    model: &Model,
    samples: &[LatentSample],
    pairs: usize,
    seed: u64,
    opts: &WibOptions,
) -> Result<WibEvaluation> {
    if samples.is_empty() || pairs == 0 {
        return Err(invalid("nothing to evaluate"));
    }
    let mut rng = Rng::new(seed);
    let mut noise = rng.fork();
    let (mut acc, mut psnr) = (0.0, 0.0);
    for i in 0..pairs {
        let s = &samples[i % samples.len()];
        let m = sample_message(model.config().d_w, &mut rng)?;
        let img = model.decode_wib(&s.z, &m, opts, Some(&mut noise))?;
        acc += bit_accuracy(m.bits(), &decode_logits(&model.extract(&img)?))?;
        psnr += metrics::psnr(&img, &s.original)?;
    }
    Ok(WibEvaluation {
        pairs,
        bit_accuracy: acc / pairs as f64,
        psnr_to_original: psnr / pairs as f64,
    })
}
