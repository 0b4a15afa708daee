//! Checks the tape's reverse-mode gradients against central differences,
//! first on a small conv -> ReLU -> linear network and then on the full
//! message-conditioned decoder followed by the extractor.
//!
//! `cargo run --release --example autograd_gradcheck`

use wibmark::autograd::Activation;
use wibmark::gradcheck::{grad_check, GradCheckConfig, Objective};
use wibmark::layers::{Conv, Init, Linear};
use wibmark::nets::{Model, ModelConfig, Stage};
use wibmark::registry::{sample_message, WatermarkMessage};
use wibmark::scalar::Scalar;
use wibmark::wib::WibOptions;
use wibmark::{ParamStore, Result, Rng, Tape, Tensor, Var};

struct Small {
    conv: Conv,
    fc: Linear,
    x: Tensor,
}

impl Objective for Small {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let x = tape.constant(self.x.cast());
        let h = self.conv.forward(tape, store, x)?;
        let h = tape.activation(h, Activation::Relu)?;
        let h = tape.global_avg_pool(h)?;
        self.fc.forward(tape, store, h)
    }
}

struct Composite {
    model: Model,
    z: Tensor,
    m: WatermarkMessage,
}

impl Objective for Composite {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let opts = WibOptions {
            noise: false,
            ..WibOptions::default()
        };
        let z = tape.constant(self.z.cast());
        let img = self.model.arch.decode_message(tape, store, &self.m, z, &opts, None)?;
        self.model.arch.extractor.forward(tape, store, img)
    }
}

fn report(name: &str, r: &wibmark::gradcheck::GradCheckReport) {
    println!(
        "{name}: max relative error {:.2e} over {} coordinates ({} too small, {} at kinks)",
        r.max_rel_error, r.checked, r.skipped_small, r.skipped_kink
    );
}

fn main() -> Result<()> {
    let mut rng = Rng::new(1);
    let mut store = ParamStore::new();
    let small = Small {
        conv: Conv::new(&mut store, "conv", 3, 4, 3, 1, Init::He, true, &mut rng)?,
        fc: Linear::new(&mut store, "fc", 4, 2, Init::He, true, &mut rng)?,
        x: Tensor::uniform(&[3, 6, 6], -1.0, 1.0, &mut rng),
    };
    report("conv-relu-linear", &grad_check(&store, &GradCheckConfig::default(), &small)?);

    let mut model = Model::new(&ModelConfig::default(), 2)?;
    // Move the heads off their identity initialisation so the blend matters.
    for id in model.arch.head_ids() {
        let noise = Tensor::randn(model.store.value(id).shape(), 0.2, &mut rng);
        let v = model.store.value(id).zip_map(&noise, |a, b| a + b)?;
        model.store.set_value(id, v)?;
    }
    model.set_stage(Stage::Wib { train_extractor: true });
    let composite = Composite {
        z: Tensor::uniform(&[8, 8, 8], -1.0, 1.0, &mut rng),
        m: sample_message(16, &mut rng)?,
        model,
    };
    report("decoder+extractor", &grad_check(&composite.model.store, &GradCheckConfig::default(), &composite)?);
    Ok(())
}
