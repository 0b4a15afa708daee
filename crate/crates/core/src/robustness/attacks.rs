//! Deliberate watermark-removal attempts: decoder purification, adversarial
//! message substitution against a leaked extractor, and re-encoding through
//! a small compressive autoencoder.

use serde::{Deserialize, Serialize};

use crate::attribution::{bit_accuracy, decode_logits};
use crate::autograd::{Activation, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::layers::{Conv, Init};
use crate::metrics::psnr;
use crate::nets::{BakedDecoder, Model};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::registry::WatermarkMessage;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::LatentSample;

fn accuracy(model: &Model, img: &Tensor, m: &WatermarkMessage) -> Result<f64> {
    bit_accuracy(m.bits(), &decode_logits(&model.extract(img)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurificationConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Evaluate every this many steps (and always at step 0 and the end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PurificationConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            batch_size: 8,
            eval_every: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurificationPoint {
    pub step: usize,
    /// Mean PSNR between purified and step-0 watermarked images.
    pub psnr: f64,
    /// Mean PSNR between purified images and the frozen decoder's output.
    pub psnr_to_original: f64,
    pub bit_acc: f64,
}

/// Fine-tunes a copy of `baked` towards the frozen decoder's outputs
/// (`LatentSample::original`) with pixel MSE, recording quality and bit
/// accuracy on `eval` as it goes. Noise is off throughout so the
/// trajectory reflects weight changes only.
pub fn purification_attack(
    model: &Model,
    baked: &BakedDecoder,
    m: &WatermarkMessage,
    train: &[LatentSample],
    eval: &[LatentSample],
    cfg: &PurificationConfig,
) -> Result<Vec<PurificationPoint>> {
    if train.is_empty() || eval.is_empty() || cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(invalid("purification needs data, a positive batch size and eval interval"));
    }
    let mut attacked = baked.clone();
    let watermarked = eval
        .iter()
        .map(|s| baked.decode(&s.z, None))
        .collect::<Result<Vec<_>>>()?;
    let evaluate = |dec: &BakedDecoder, step: usize| -> Result<PurificationPoint> {
        let (mut p, mut po, mut acc) = (0.0, 0.0, 0.0);
        for (s, wm) in eval.iter().zip(&watermarked) {
            let img = dec.decode(&s.z, None)?;
            p += psnr(&img, wm)?;
            po += psnr(&img, &s.original)?;
            acc += accuracy(model, &img, m)?;
        }
        let n = eval.len() as f64;
        Ok(PurificationPoint {
            step,
            psnr: p / n,
            psnr_to_original: po / n,
            bit_acc: acc / n,
        })
    };
    let mut out = vec![evaluate(&attacked, 0)?];
    let mut opt = AdamW::new(cfg.lr, (0.9, 0.999), 0.0)?;
    let mut rng = Rng::new(cfg.seed);
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let mut total = None;
        for _ in 0..cfg.batch_size {
            let s = &train[rng.below(train.len())];
            let z = tape.constant(s.z.clone());
            let y = attacked.forward(&mut tape, &attacked.store, z, None)?;
            let target = tape.constant(s.original.clone());
            let l = tape.mse(y, target)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let loss = tape.scale(total.unwrap(), 1.0 / cfg.batch_size as f64)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                stage: "purification",
                step,
                loss: value,
            });
        }
        attacked.store.zero_grad();
        tape.backward(loss, &mut attacked.store)?;
        opt.step(&mut attacked.store)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            out.push(evaluate(&attacked, step)?);
        }
    }
    Ok(out)
}

pub fn purification_csv(points: &[PurificationPoint]) -> String {
    let mut s = String::from("step,psnr,bit_acc\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.step, p.psnr, p.bit_acc));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub steps_run: usize,
    pub accuracy_to_target: f64,
    pub accuracy_to_original: f64,
    pub psnr_to_input: f64,
}

/// Gradient descent (Adam) on pixels minimizing `‖sigmoid(logits) − t‖²`
/// for a target message `t`, stopping early once every target bit decodes.
pub fn adversarial_message_attack(
    model: &Model,
    image: &Tensor,
    original: &WatermarkMessage,
    target: &WatermarkMessage,
    steps: usize,
    lr: f64,
) -> Result<(Tensor, AdversarialReport)> {
    if original.len() != target.len() {
        return Err(invalid("original and target messages differ in length"));
    }
    let mut store: ParamStore = model.store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        store.set_trainable(id, false);
    }
    let targets = Tensor::from_vec(target.as_targets());
    let mut x = image.clone();
    let (mut mo, mut vo) = (vec![0.0f64; x.len()], vec![0.0f64; x.len()]);
    let (b1, b2) = (0.9f64, 0.999f64);
    let mut steps_run = 0;
    for t in 1..=steps {
        if accuracy(model, &x, target)? == 1.0 {
            break;
        }
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let logits = model.arch.extractor.forward(&mut tape, &store, xv)?;
        let p = tape.activation(logits, Activation::Sigmoid)?;
        let tv = tape.constant(targets.clone());
        let loss = tape.mse(p, tv)?;
        tape.backward(loss, &mut store)?;
        let g = tape.grad(xv).expect("input gradient");
        let (bc1, bc2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for (((xi, &gi), mi), vi) in x.data_mut().iter_mut().zip(g.data()).zip(&mut mo).zip(&mut vo) {
            let gi = gi as f64;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let step = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + 1e-8);
            *xi = (*xi as f64 - step).clamp(-1.0, 1.0) as f32;
        }
        steps_run = t;
    }
    let report = AdversarialReport {
        steps_run,
        accuracy_to_target: accuracy(model, &x, target)?,
        accuracy_to_original: accuracy(model, &x, original)?,
        psnr_to_input: psnr(&x, image)?,
    };
    Ok((x, report))
}

/// Bottleneck channel counts of the compressive autoencoder.
pub const BOTTLENECK_WIDTHS: [usize; 4] = [16, 8, 4, 2];

/// `3×32×32 → width×8×8 → 3×32×32`: two stride-2 convolutions down, two
/// upsample + convolution stages back up.
#[derive(Clone, Debug)]
pub struct CompressiveAutoencoder {
    pub width: usize,
    pub convs: [Conv; 4],
    pub store: ParamStore,
}

impl CompressiveAutoencoder {
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        if !BOTTLENECK_WIDTHS.contains(&width) {
            return Err(invalid(format!(
                "unknown bottleneck width {width}, expected one of {BOTTLENECK_WIDTHS:?}"
            )));
        }
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let convs = [
            Conv::new(&mut store, "cae.0", 3, 32, 3, 2, Init::He, true, &mut rng)?,
            Conv::new(&mut store, "cae.1", 32, width, 3, 2, Init::He, true, &mut rng)?,
            Conv::new(&mut store, "cae.2", width, 32, 3, 1, Init::He, true, &mut rng)?,
            Conv::new(&mut store, "cae.3", 32, 3, 3, 1, Init::He, true, &mut rng)?,
        ];
        Ok(Self { width, convs, store })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: crate::autograd::Var) -> Result<crate::autograd::Var> {
        let h = self.convs[0].forward(tape, store, x)?;
        let h = tape.activation(h, Activation::LeakyRelu)?;
        let h = self.convs[1].forward(tape, store, h)?;
        let h = tape.activation(h, Activation::Tanh)?;
        let h = tape.upsample2x(h)?;
        let h = self.convs[2].forward(tape, store, h)?;
        let h = tape.activation(h, Activation::LeakyRelu)?;
        let h = tape.upsample2x(h)?;
        let h = self.convs[3].forward(tape, store, h)?;
        tape.activation(h, Activation::Tanh)
    }

    /// Reconstruction MSE training on `images`; returns the per-step loss.
    pub fn train(&mut self, images: &[Tensor], steps: usize, lr: f32, batch_size: usize, seed: u64) -> Result<Vec<f64>> {
        if images.is_empty() || batch_size == 0 {
            return Err(invalid("autoencoder training needs images and a positive batch size"));
        }
        let mut opt = AdamW::new(lr, (0.9, 0.999), 0.0)?;
        let mut rng = Rng::new(seed);
        let mut losses = Vec::with_capacity(steps);
        let mut store = std::mem::take(&mut self.store);
        for step in 0..steps {
            let mut tape = Tape::new();
            let mut total = None;
            for _ in 0..batch_size {
                let x = tape.constant(images[rng.below(images.len())].clone());
                let y = self.forward(&mut tape, &store, x)?;
                let l = tape.mse(y, x)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let loss = tape.scale(total.unwrap(), 1.0 / batch_size as f64)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                self.store = store;
                return Err(Error::Divergence {
                    stage: "compressive autoencoder",
                    step,
                    loss: value,
                });
            }
            store.zero_grad();
            tape.backward(loss, &mut store)?;
            opt.step(&mut store)?;
            losses.push(value as f64);
        }
        store.zero_grad();
        self.store = store;
        Ok(losses)
    }

    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, &self.store, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({"kind": "compressive_autoencoder", "width": self.width});
        Checkpoint::from_store(&self.store, false, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let width = ck.meta["width"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing bottleneck width".into()))? as usize;
        let mut ae = Self::new(width, 0)?;
        if ck.load_into(&mut ae.store)? != ae.store.len() {
            return Err(Error::Checkpoint("incomplete autoencoder checkpoint".into()));
        }
        Ok(ae)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderAttackReport {
    pub width: usize,
    pub images: usize,
    /// Mean bit accuracy of the watermarked inputs.
    pub clean_bit_accuracy: f64,
    pub bit_accuracy: f64,
    /// Mean PSNR of the watermarked inputs to the frozen decoder's output.
    pub clean_psnr: f64,
    /// Mean PSNR of the reconstructions to the frozen decoder's output.
    pub psnr: f64,
}

impl AutoencoderAttackReport {
    pub fn psnr_loss(&self) -> f64 {
        self.clean_psnr - self.psnr
    }
}

/// Re-encodes one image through the autoencoder.
pub fn autoencoder_attack(ae: &CompressiveAutoencoder, image: &Tensor) -> Result<Tensor> {
    ae.reconstruct(image)
}

/// Runs [`autoencoder_attack`] over `(watermarked, original)` pairs.
pub fn autoencoder_attack_report(
    model: &Model,
    ae: &CompressiveAutoencoder,
    m: &WatermarkMessage,
    pairs: &[(Tensor, Tensor)],
) -> Result<AutoencoderAttackReport> {
    if pairs.is_empty() {
        return Err(invalid("no images to attack"));
    }
    let (mut ca, mut a, mut cp, mut p) = (0.0, 0.0, 0.0, 0.0);
    for (wm, orig) in pairs {
        let rec = autoencoder_attack(ae, wm)?;
        ca += accuracy(model, wm, m)?;
        a += accuracy(model, &rec, m)?;
        cp += psnr(wm, orig)?;
        p += psnr(&rec, orig)?;
    }
    let n = pairs.len() as f64;
    Ok(AutoencoderAttackReport {
        width: ae.width,
        images: pairs.len(),
        clean_bit_accuracy: ca / n,
        bit_accuracy: a / n,
        clean_psnr: cp / n,
        psnr: p / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelConfig;
    use crate::registry::sample_message;

    #[test]
    fn unknown_width_rejected() {
        assert!(CompressiveAutoencoder::new(3, 0).is_err());
        let ae = CompressiveAutoencoder::new(2, 0).unwrap();
        let img = crate::data::procedural_image(&mut Rng::new(1));
        assert_eq!(ae.reconstruct(&img).unwrap().shape(), [3, 32, 32]);
    }

    #[test]
    fn zero_step_adversarial_attack_is_identity() {
        let model = Model::new(&ModelConfig::default(), 1).unwrap();
        let mut rng = Rng::new(2);
        let img = crate::data::procedural_image(&mut rng);
        let m = sample_message(16, &mut rng).unwrap();
        let t = sample_message(16, &mut rng).unwrap();
        let (out, rep) = adversarial_message_attack(&model, &img, &m, &t, 0, 0.01).unwrap();
        assert_eq!(out, img);
        assert_eq!(rep.steps_run, 0);
        assert_eq!(rep.psnr_to_input, 100.0);
    }

    fn target_loss(model: &Model, img: &Tensor, t: &WatermarkMessage) -> f64 {
        let logits = model.extract(img).unwrap();
        let sig = |l: f32| 1.0 / (1.0 + (-l as f64).exp());
        logits.iter().zip(t.as_targets()).map(|(&l, y)| (sig(l) - y as f64).powi(2)).sum()
    }

    #[test]
    fn adversarial_attack_moves_towards_target() {
        let model = Model::new(&ModelConfig::default(), 1).unwrap();
        let mut rng = Rng::new(3);
        let img = crate::data::procedural_image(&mut rng);
        let m = sample_message(16, &mut rng).unwrap();
        let t = sample_message(16, &mut rng).unwrap();
        let (out, _) = adversarial_message_attack(&model, &img, &m, &t, 20, 0.002).unwrap();
        assert!(target_loss(&model, &out, &t) < target_loss(&model, &img, &t));
    }
}
