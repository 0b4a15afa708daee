//! Bakes one user's fingerprint into the decoder weights, saves the baked
//! checkpoint, reloads it and checks that it reproduces the unbaked
//! message-conditioned decoder.
//!
//! `cargo run --release --example fingerprint_bake -- [wib.twb]`

mod common;

use wibmark::checkpoint::Checkpoint;
use wibmark::metrics;
use wibmark::nets::BakedDecoder;
use wibmark::registry::sample_message;
use wibmark::wib::WibOptions;
use wibmark::Rng;

fn main() -> wibmark::Result<()> {
    let path = std::env::args().nth(1);
    let s = common::load_or_train(path.as_deref())?;
    let mut rng = Rng::new(3);
    let m = sample_message(s.cfg.d_w, &mut rng)?;
    let opts = WibOptions {
        noise: false,
        ..s.cfg.wib_options()
    };

    let baked = s.model.bake(&m, &opts)?;
    let file = std::env::temp_dir().join("wibmark-example-baked.twb");
    baked.to_checkpoint().save(&file)?;
    let reloaded = BakedDecoder::from_checkpoint(&Checkpoint::load(&file)?)?;
    println!(
        "baked decoder written to {} ({} bytes)",
        file.display(),
        std::fs::metadata(&file)?.len()
    );

    let mut worst = 0.0f64;
    for sample in s.heldout.iter().take(10) {
        let unbaked = s.model.decode_wib(&sample.z, &m, &opts, None)?;
        let from_file = reloaded.decode(&sample.z, None)?;
        worst = worst.max(metrics::linf(&unbaked, &from_file)?);
    }
    let first = &s.heldout[0];
    let img = reloaded.decode(&first.z, None)?;
    println!("max |baked - unbaked| over 10 latents: {worst:.2e}");
    println!(
        "baked output vs frozen decoder: PSNR {:.2} dB, SSIM {:.4}",
        metrics::psnr(&img, &first.original)?,
        metrics::ssim(&img, &first.original)?
    );
    Ok(())
}
