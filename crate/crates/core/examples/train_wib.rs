//! Second stage: trains the WIB heads, mapping network and extractor on top
//! of a pre-trained autoencoder, then reports held-out bit accuracy and
//! PSNR to the frozen decoder's output.
//!
//! `cargo run --release --example train_wib -- pretrained.twb [config.json] [out.twb]`
//!
//! The optional config is a `TrainingConfig` JSON; missing fields take defaults.

use std::time::Instant;

use wibmark::checkpoint::Checkpoint;
use wibmark::data::procedural_corpus;
use wibmark::training::{evaluate_wib, model_from_pretrained, prepare_latents, train_wib, TrainingConfig};

fn main() -> wibmark::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pretrained = args.first().expect("usage: train_wib pretrained.twb [config.json] [out.twb]");
    let cfg = match args.get(1) {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };

    // Encoder and decoder come from the checkpoint; heads are built fresh
    // for this run's message length.
    let mut model = model_from_pretrained(&Checkpoint::load(pretrained)?, &cfg)?;
    let train = prepare_latents(&model, &procedural_corpus(2000, cfg.seed))?;
    let heldout = prepare_latents(&model, &procedural_corpus(200, cfg.seed + 1))?;

    let start = Instant::now();
    let report = train_wib(&mut model, &cfg, &train, |row| {
        if row.step % 50 == 0 {
            println!(
                "step {:5}  l_w {:.4}  l_v {:.5}  l_l {:.5}  acc {:.3}  {:.1}s",
                row.step,
                row.l_w,
                row.l_v_proxy,
                row.l_l_proxy,
                row.bit_accuracy_batch,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let eval = evaluate_wib(&model, &heldout, 200, 99, &cfg.wib_options())?;
    println!(
        "{} steps: held-out bit accuracy {:.4}, PSNR to original {:.2} dB",
        report.log.len(),
        eval.bit_accuracy,
        eval.psnr_to_original
    );
    if let Some(path) = args.get(2) {
        model.to_checkpoint().save(path)?;
    }
    Ok(())
}
