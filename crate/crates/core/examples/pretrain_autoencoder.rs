//! Pre-trains the toy autoencoder on the procedural corpus and reports
//! held-out reconstruction PSNR.
//!
//! `cargo run --release --example pretrain_autoencoder -- [steps] [out.twb]`

use std::time::Instant;

use wibmark::data::procedural_corpus;
use wibmark::nets::Model;
use wibmark::training::{pretrain, TrainingConfig};

fn main() -> wibmark::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = TrainingConfig::default();
    if let Some(steps) = args.next() {
        cfg.pretrain_steps = steps.parse().expect("steps must be an integer");
    }
    let out = args.next();

    let train = procedural_corpus(2000, cfg.seed);
    let heldout = procedural_corpus(200, cfg.seed + 1);
    let mut model = Model::new(&cfg.model_config(), cfg.seed)?;
    let start = Instant::now();
    let report = pretrain(&mut model, &cfg, &train, &heldout, |step, loss| {
        if step % 100 == 0 {
            println!("step {step:5}  mse {loss:.5}  {:.1}s", start.elapsed().as_secs_f64());
        }
    })?;
    println!("held-out PSNR {:.2} dB after {} steps", report.heldout_psnr, cfg.pretrain_steps);
    if let Some(path) = out {
        model.to_checkpoint().save(&path)?;
        println!("wrote {path}");
    }
    Ok(())
}
