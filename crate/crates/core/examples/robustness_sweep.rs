//! Bit accuracy of one user's images under the standard benign transforms,
//! plus a few custom settings. Writes the transformed images of the first
//! latent as PNGs so they can be inspected.
//!
//! `cargo run --release --example robustness_sweep -- [wib.twb] [out_dir]`

mod common;

use wibmark::data::save_image;
use wibmark::registry::sample_message;
use wibmark::robustness::{apply_transform, robustness_sweep, standard_transforms, TransformKind, TransformSpec};
use wibmark::{Rng, Tensor};

fn main() -> wibmark::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let s = common::load_or_train(args.first().map(String::as_str))?;
    let m = sample_message(s.cfg.d_w, &mut Rng::new(5))?;
    let baked = s.model.bake(&m, &s.cfg.wib_options())?;

    let mut specs = standard_transforms();
    specs.push(TransformSpec::new(TransformKind::Crop, 0.2)?);
    specs.push(TransformSpec::new(TransformKind::Contrast, 0.7)?);
    let latents: Vec<Tensor> = s.heldout.iter().map(|x| x.z.clone()).collect();
    for row in robustness_sweep(&s.model, &baked, &m, &latents, &specs, latents.len(), 1)? {
        println!("{:<18} {:.3}", row.transform, row.bit_accuracy);
    }

    if let Some(dir) = args.get(1) {
        std::fs::create_dir_all(dir)?;
        let img = baked.decode(&latents[0], None)?;
        save_image(&img, format!("{dir}/none.png"))?;
        for spec in &specs {
            let name = spec.to_string().replace(' ', "_");
            save_image(&apply_transform(&img, spec)?, format!("{dir}/{name}.png"))?;
        }
        println!("images written to {dir}");
    }
    Ok(())
}
