//! Registers users, generates an image with one user's baked decoder, then
//! runs detection against that user and identification across the whole
//! registry at a global false-positive budget.
//!
//! `cargo run --release --example detect_identify -- [wib.twb]`

mod common;

use wibmark::attribution::{detect, detection_threshold, fpr_at_least, global_fpr_from, identify};
use wibmark::registry::Registry;
use wibmark::Rng;

fn main() -> wibmark::Result<()> {
    let path = std::env::args().nth(1);
    let s = common::load_or_train(path.as_deref())?;
    let k = s.cfg.d_w;
    let dir = std::env::temp_dir().join(format!("wibmark-detect-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut registry = Registry::create(dir.join("registry.jsonl"), k)?;
    let mut rng = Rng::new(11);
    for user in ["alice", "bob", "carol", "dave"] {
        registry.register_user(user, &mut rng)?;
    }
    let records = registry.records();

    let tau = detection_threshold(k, 1e-4, 1)?;
    let tau_id = detection_threshold(k, 1e-4, records.len() as u64)?;
    println!(
        "k = {k}: detection needs >= {tau} matching bits (FPR {:.2e}); identification among {} needs >= {tau_id} (global FPR {:.2e})",
        fpr_at_least(tau, k)?,
        records.len(),
        global_fpr_from(fpr_at_least(tau_id, k)?, records.len() as u64)
    );

    let bob = &records[1];
    let baked = s.model.bake(&bob.message, &s.cfg.wib_options())?;
    let mut noise = Rng::new(12);
    for sample in s.heldout.iter().take(5) {
        let img = baked.decode(&sample.z, Some(&mut noise))?;
        let d = detect(&s.model, &img, &bob.message, tau)?;
        let id = identify(&s.model, &img, records, tau_id)?;
        println!(
            "bob's image: {}/{} bits match, detected {}; best match {} ({} bits), identified {}",
            d.matched_bits, k, d.detected, id.best_user_id, id.best_score, id.identified
        );
    }
    // An image from the unwatermarked decoder should not be attributed.
    let plain = &s.heldout[0].original;
    let id = identify(&s.model, plain, records, tau_id)?;
    println!("unmarked image: best match {} ({} bits), identified {}", id.best_user_id, id.best_score, id.identified);
    Ok(())
}
