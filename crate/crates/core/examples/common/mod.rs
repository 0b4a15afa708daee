//! Shared setup for the examples: load a trained model, or train a small one
//! quickly when no checkpoint is given.

use wibmark::checkpoint::Checkpoint;
use wibmark::data::procedural_corpus;
use wibmark::nets::Model;
use wibmark::training::{model_from_pretrained, prepare_latents, pretrain, train_wib, LatentSample, TrainingConfig};

pub struct Setup {
    pub model: Model,
    pub cfg: TrainingConfig,
    pub heldout: Vec<LatentSample>,
}

/// Loads `path` (a WIB checkpoint from `train_wib` or `wibmark train`) or,
/// without one, runs a few hundred steps of both stages. The quick model is
/// only good enough to exercise the APIs; expect accuracies near chance.
pub fn load_or_train(path: Option<&str>) -> wibmark::Result<Setup> {
    let (model, cfg) = match path {
        Some(p) => {
            let model = Model::from_checkpoint(&Checkpoint::load(p)?)?;
            let cfg = TrainingConfig {
                d_w: model.config().d_w,
                ..TrainingConfig::default()
            };
            (model, cfg)
        }
        None => {
            let cfg = TrainingConfig {
                pretrain_steps: 200,
                wib_steps: 200,
                batch_size: 8,
                ..TrainingConfig::default()
            };
            eprintln!("no checkpoint given; training a small model ({} + {} steps)", cfg.pretrain_steps, cfg.wib_steps);
            let mut pre = Model::new(&cfg.model_config(), cfg.seed)?;
            pretrain(&mut pre, &cfg, &procedural_corpus(400, cfg.seed), &procedural_corpus(20, cfg.seed + 1), |_, _| {})?;
            let mut model = model_from_pretrained(&pre.to_checkpoint(), &cfg)?;
            let train = prepare_latents(&model, &procedural_corpus(400, cfg.seed))?;
            train_wib(&mut model, &cfg, &train, |_| {})?;
            (model, cfg)
        }
    };
    let heldout = prepare_latents(&model, &procedural_corpus(64, cfg.seed + 1))?;
    Ok(Setup { model, cfg, heldout })
}
