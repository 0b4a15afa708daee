//! Two users average their baked decoder weights. Bits where their messages
//! agree should survive; bits where they differ should decode to either
//! user's value about equally often.
//!
//! `cargo run --release --example collusion -- [wib.twb]`

mod common;

use wibmark::registry::sample_message;
use wibmark::robustness::collusion::{collude_models, collusion_bit_stats};
use wibmark::{Rng, Tensor};

fn main() -> wibmark::Result<()> {
    let path = std::env::args().nth(1);
    let s = common::load_or_train(path.as_deref())?;
    let mut rng = Rng::new(13);
    let (m0, m1) = (sample_message(s.cfg.d_w, &mut rng)?, sample_message(s.cfg.d_w, &mut rng)?);
    let opts = s.cfg.wib_options();
    let colluded = collude_models(&s.model.bake(&m0, &opts)?, &s.model.bake(&m1, &opts)?)?;
    let latents: Vec<Tensor> = s.heldout.iter().map(|x| x.z.clone()).collect();
    let report = collusion_bit_stats(&s.model, &colluded, &m0, &m1, &latents, latents.len(), 14)?;

    println!("messages differ in {} of {} bits", m0.hamming(&m1), s.cfg.d_w);
    println!("agreeing positions decoded correctly: {:.3}", report.agreeing_match_rate);
    let means = report.differing_position_means();
    let shown: Vec<String> = means.iter().map(|d| format!("{d:+.2}")).collect();
    println!("differing positions, mean(decoded - 0.5): {}", shown.join(" "));
    Ok(())
}
