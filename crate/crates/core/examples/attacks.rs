//! The three removal attacks against one user's baked decoder: fine-tuning
//! the decoder back towards the original images, optimising an image until
//! it decodes to another message, and re-encoding through a narrow
//! autoencoder.
//!
//! `cargo run --release --example attacks -- [wib.twb]`

mod common;

use wibmark::data::procedural_corpus;
use wibmark::registry::sample_message;
use wibmark::robustness::attacks::{
    adversarial_message_attack, autoencoder_attack_report, purification_attack, CompressiveAutoencoder,
    PurificationConfig, BOTTLENECK_WIDTHS,
};
use wibmark::Rng;

fn main() -> wibmark::Result<()> {
    let path = std::env::args().nth(1);
    let s = common::load_or_train(path.as_deref())?;
    let mut rng = Rng::new(9);
    let m = sample_message(s.cfg.d_w, &mut rng)?;
    let baked = s.model.bake(&m, &s.cfg.wib_options())?;
    let (train, eval) = s.heldout.split_at(48);

    let cfg = PurificationConfig {
        steps: 100,
        eval_every: 20,
        ..PurificationConfig::default()
    };
    println!("purification: step, PSNR to watermarked, PSNR to original, bit accuracy");
    for p in purification_attack(&s.model, &baked, &m, train, eval, &cfg)? {
        println!("  {:4} {:7.2} {:7.2} {:.3}", p.step, p.psnr, p.psnr_to_original, p.bit_acc);
    }

    let target = sample_message(s.cfg.d_w, &mut rng)?;
    let img = baked.decode(&eval[0].z, None)?;
    let (_, r) = adversarial_message_attack(&s.model, &img, &m, &target, 300, 2e-3)?;
    println!(
        "adversarial: {} steps, accuracy to target {:.3}, to original {:.3}, PSNR {:.2} dB",
        r.steps_run, r.accuracy_to_target, r.accuracy_to_original, r.psnr_to_input
    );

    let corpus = procedural_corpus(400, 21);
    let pairs = eval
        .iter()
        .map(|x| Ok((baked.decode(&x.z, None)?, x.original.clone())))
        .collect::<wibmark::Result<Vec<_>>>()?;
    for width in BOTTLENECK_WIDTHS {
        let mut ae = CompressiveAutoencoder::new(width, 4)?;
        ae.train(&corpus, 300, 1e-3, 16, 5)?;
        let r = autoencoder_attack_report(&s.model, &ae, &m, &pairs)?;
        println!(
            "autoencoder width {width:2}: bit accuracy {:.3} -> {:.3}, PSNR {:.2} -> {:.2} dB",
            r.clean_bit_accuracy, r.bit_accuracy, r.clean_psnr, r.psnr
        );
    }
    Ok(())
}
