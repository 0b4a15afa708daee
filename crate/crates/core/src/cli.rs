//! Command-line front end. Every subcommand writes `manifest.json` into
//! `--out` next to its artifacts.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or validation error,
//! 4 numerical divergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attribution::{self, detection_threshold};
use crate::checkpoint::Checkpoint;
use crate::data;
use crate::error::Error;
use crate::nets::{BakedDecoder, Model};
use crate::registry::{sample_message, Registry, WatermarkMessage};
use crate::rng::Rng;
use crate::robustness::attacks::{self, CompressiveAutoencoder, PurificationConfig, BOTTLENECK_WIDTHS};
use crate::robustness::collusion::{collude_models, collusion_bit_stats};
use crate::robustness::{robustness_sweep, standard_transforms, sweep_csv};
use crate::tensor::Tensor;
use crate::training::{self, AblationFlags, TrainingConfig};

pub const SEED_ENV: &str = "TEAWIB_SEED";

/// Version string embedded in manifests.
pub const VERSION: &str = match option_env!("WIBMARK_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

// Seed offsets separating the data streams a single seed drives.
const HELDOUT_STREAM: u64 = 0x6865_6c64;
const LATENT_STREAM: u64 = 0x6c61_7465;
const NOISE_STREAM: u64 = 0x6e6f_6973;

#[derive(Debug, Parser)]
#[command(name = "wibmark", version = VERSION, about = "Fingerprinted image decoders with per-user watermarks")]
pub struct Cli {
    /// Training configuration JSON; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed. The TEAWIB_SEED environment variable takes precedence.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Registry file (JSON lines).
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    /// Input checkpoint: pre-trained for `train`, generic WIB for
    /// `fingerprint`/`detect`/`identify`/`sweep`/`attack`/`collude`, baked
    /// for `generate`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Purification,
    Adversarial,
    Autoencoder,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Write a seeded procedural corpus of 32x32 PNGs.
    GenData {
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
    /// Pre-train the encoder/decoder; writes pretrained.twb.
    Pretrain {
        /// Image directory; procedural corpus of 2000 images when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        heldout: usize,
    },
    /// Train WIB heads and extractor on a pre-trained checkpoint; writes wib.twb.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// One of dwb_only, no_noise, no_aug, no_lpips_proxy, frozen_extractor, wib_inner_only.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long, default_value_t = 200)]
        heldout: usize,
    },
    /// Register users with fresh random watermarks.
    Register {
        #[arg(long, required = true)]
        user: Vec<String>,
        #[arg(long, default_value = "")]
        note: String,
        /// Also register this many decoy users.
        #[arg(long, default_value_t = 0)]
        pad: usize,
    },
    /// Bake a user's watermark into a standalone decoder; writes <user>.baked.twb.
    Fingerprint {
        #[arg(long)]
        user: String,
    },
    /// Generate images with a baked decoder.
    Generate {
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Disable the noise path for reproducible output.
        #[arg(long)]
        deterministic: bool,
        /// Latent source images; procedural when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Test an image for one user's watermark.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, conflicts_with = "message")]
        user: Option<String>,
        /// Watermark as a 0/1 string.
        #[arg(long)]
        message: Option<String>,
        #[arg(long, default_value_t = 1e-6)]
        fpr: f64,
    },
    /// Attribute an image to the best-matching registered user.
    Identify {
        #[arg(long)]
        image: PathBuf,
        /// Global false-positive rate over all candidates.
        #[arg(long, default_value_t = 1e-6)]
        fpr: f64,
    },
    /// Bit accuracy under the standard post-processing transforms.
    Sweep {
        #[arg(long)]
        baked: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Watermark-removal attacks against a user's baked decoder.
    Attack {
        #[arg(long, value_enum)]
        kind: AttackKind,
        #[arg(long)]
        baked: PathBuf,
        #[arg(long)]
        user: String,
        /// Evaluation images.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Optimisation steps (purification, adversarial, autoencoder training).
        #[arg(long, default_value_t = 300)]
        steps: usize,
    },
    /// Average two baked decoders and measure what the extractor reads.
    Collude {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        user_a: String,
        #[arg(long)]
        user_b: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(Error::Divergence { .. }) => 4,
            CliError::Lib(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    argv: Vec<String>,
    seed: u64,
    config: &'a TrainingConfig,
    registry: Option<&'a Path>,
    checkpoint: Option<&'a Path>,
    out: &'a Path,
    command: &'a Command,
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: TrainingConfig,
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn checkpoint(&self) -> CliResult<Checkpoint> {
        match &self.cli.checkpoint {
            Some(p) => Ok(Checkpoint::load(p)?),
            None => usage("--checkpoint is required for this command"),
        }
    }

    fn model(&self) -> CliResult<Model> {
        Ok(Model::from_checkpoint(&self.checkpoint()?)?)
    }

    fn registry(&self) -> CliResult<Registry> {
        match &self.cli.registry {
            Some(p) => Ok(Registry::load(p)?),
            None => usage("--registry is required for this command"),
        }
    }

    fn message_of(&self, user: &str) -> CliResult<WatermarkMessage> {
        let reg = self.registry()?;
        let rec = reg.lookup(user).ok_or_else(|| Error::UnknownUser(user.to_string()))?;
        Ok(rec.message.clone())
    }

    /// Latents encoded from held-out procedural images (or files in `dir`).
    fn latents(&self, encode: impl Fn(&Tensor) -> crate::Result<Tensor>, n: usize, dir: Option<&Path>) -> CliResult<Vec<Tensor>> {
        let images = match dir {
            Some(d) => data::load_corpus(d)?,
            None => data::procedural_corpus(n.max(1), self.cfg.seed ^ LATENT_STREAM),
        };
        if images.is_empty() {
            return Err(Error::InvalidArgument("no latent source images".into()).into());
        }
        Ok(images.iter().map(encode).collect::<crate::Result<Vec<_>>>()?)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let s = serde_json::to_string_pretty(value).map_err(Error::from)?;
        fs::write(self.out(name), s + "\n")?;
        Ok(())
    }
}

fn resolve_config(cli: &Cli) -> CliResult<TrainingConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = match v.trim().parse() {
            Ok(s) => s,
            Err(_) => return usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")),
        };
    }
    if let Command::Train { ablation: Some(a), .. } = &cli.command {
        if !cfg.ablation.active().is_empty() {
            return usage("--ablation conflicts with ablation flags set in --config");
        }
        cfg.ablation = AblationFlags::only(a).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_training_images(dir: Option<&Path>, seed: u64) -> CliResult<Vec<Tensor>> {
    Ok(match dir {
        Some(d) => data::load_corpus(d)?,
        None => data::procedural_corpus(2000, seed),
    })
}

fn run_command(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    match &ctx.cli.command {
        Command::GenData { count } => {
            for (i, img) in data::procedural_corpus(*count, cfg.seed).iter().enumerate() {
                data::save_image(img, ctx.out(&format!("img_{i:05}.png")))?;
            }
            println!("wrote {count} images to {}", ctx.cli.out.display());
        }
        Command::Pretrain { data: dir, heldout } => {
            let train = load_training_images(dir.as_deref(), cfg.seed)?;
            let held = data::procedural_corpus(*heldout, cfg.seed ^ HELDOUT_STREAM);
            let mut model = Model::new(&cfg.model_config(), cfg.seed)?;
            let mut log = String::from("step,loss\n");
            let report = training::pretrain(&mut model, cfg, &train, &held, |step, loss| {
                log.push_str(&format!("{step},{loss}\n"));
            })?;
            fs::write(ctx.out("pretrain_log.csv"), log)?;
            let mut ck = model.to_checkpoint();
            ck.meta["training"] = serde_json::to_value(cfg).map_err(Error::from)?;
            ck.save(ctx.out("pretrained.twb"))?;
            ctx.write_json("pretrain_report.json", &serde_json::json!({"heldout_psnr": report.heldout_psnr}))?;
            println!("held-out PSNR {:.2} dB", report.heldout_psnr);
        }
        Command::Train { data: dir, heldout, .. } => {
            let mut model = training::model_from_pretrained(&ctx.checkpoint()?, cfg)?;
            let train = training::prepare_latents(&model, &load_training_images(dir.as_deref(), cfg.seed)?)?;
            let held = training::prepare_latents(&model, &data::procedural_corpus(*heldout, cfg.seed ^ HELDOUT_STREAM))?;
            let report = training::train_wib(&mut model, cfg, &train, |_| {})?;
            training::write_log(&report.log, ctx.out("train_log.csv"))?;
            let mut ck = model.to_checkpoint();
            ck.meta["training"] = serde_json::to_value(cfg).map_err(Error::from)?;
            ck.save(ctx.out("wib.twb"))?;
            let eval = training::evaluate_wib(&model, &held, *heldout.max(&1), cfg.seed ^ NOISE_STREAM, &cfg.wib_options())?;
            ctx.write_json(
                "train_report.json",
                &serde_json::json!({"evaluation": eval, "frozen_checksums": report.checksums}),
            )?;
            println!(
                "held-out bit accuracy {:.4}, PSNR to original {:.2} dB",
                eval.bit_accuracy, eval.psnr_to_original
            );
        }
        Command::Register { user, note, pad } => {
            let Some(path) = &ctx.cli.registry else {
                return usage("--registry is required for register");
            };
            let mut reg = Registry::open_or_create(path, cfg.d_w)?;
            let mut rng = Rng::new(cfg.seed ^ (reg.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut users: Vec<(String, String)> = user.iter().map(|u| (u.clone(), note.clone())).collect();
            let base = reg.len();
            users.extend((0..*pad).map(|i| (format!("decoy-{:06}", base + i), "decoy".to_string())));
            reg.register_many(&users, &mut rng)?;
            for u in user {
                let rec = reg.lookup(u).expect("just registered");
                println!("{} {}", rec.user_id, rec.message.to_binary_string());
            }
        }
        Command::Fingerprint { user } => {
            let ck = ctx.checkpoint()?;
            let model = Model::from_checkpoint(&ck)?;
            let opts = match ck.meta.get("training") {
                Some(t) => serde_json::from_value::<TrainingConfig>(t.clone()).map_err(Error::from)?.wib_options(),
                None => cfg.wib_options(),
            };
            let m = ctx.message_of(user)?;
            let baked = model.bake(&m, &opts)?;
            let path = ctx.out(&format!("{user}.baked.twb"));
            baked.to_checkpoint().save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Generate { n, deterministic, data: dir } => {
            let baked = BakedDecoder::from_checkpoint(&ctx.checkpoint()?)?;
            let latents = ctx.latents(|x| baked.encode(x), *n, dir.as_deref())?;
            let mut noise = Rng::new(cfg.seed ^ NOISE_STREAM);
            for i in 0..*n {
                let z = &latents[i % latents.len()];
                let img = baked.decode(z, (!deterministic).then_some(&mut noise))?;
                data::save_image(&img, ctx.out(&format!("gen_{i:05}.png")))?;
            }
            println!("wrote {n} images to {}", ctx.cli.out.display());
        }
        Command::Detect { image, user, message, fpr } => {
            let model = ctx.model()?;
            let m = match (user, message) {
                (Some(u), None) => ctx.message_of(u)?,
                (None, Some(bits)) => WatermarkMessage::parse_binary(bits)?,
                _ => return usage("detect needs exactly one of --user or --message"),
            };
            let tau = detection_threshold(m.len(), *fpr, 1)?;
            let verdict = attribution::detect(&model, &data::load_image(image)?, &m, tau)?;
            ctx.write_json("detect.json", &verdict)?;
            println!("{}", serde_json::to_string(&verdict).map_err(Error::from)?);
        }
        Command::Identify { image, fpr } => {
            let model = ctx.model()?;
            let reg = ctx.registry()?;
            let tau = detection_threshold(reg.message_bits(), *fpr, reg.len() as u64)?;
            let verdict = attribution::identify(&model, &data::load_image(image)?, reg.records(), tau)?;
            ctx.write_json("identify.json", &verdict)?;
            println!("{}", serde_json::to_string(&verdict).map_err(Error::from)?);
        }
        Command::Sweep { baked, user, n } => {
            let model = ctx.model()?;
            let baked = BakedDecoder::from_checkpoint(&Checkpoint::load(baked)?)?;
            let m = ctx.message_of(user)?;
            let latents = ctx.latents(|x| baked.encode(x), *n, None)?;
            let rows = robustness_sweep(&model, &baked, &m, &latents, &standard_transforms(), *n, cfg.seed ^ NOISE_STREAM)?;
            let csv = sweep_csv(&rows);
            fs::write(ctx.out("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Attack { kind, baked, user, n, steps } => {
            let model = ctx.model()?;
            let baked = BakedDecoder::from_checkpoint(&Checkpoint::load(baked)?)?;
            let m = ctx.message_of(user)?;
            run_attack(ctx, &model, &baked, &m, *kind, *n, *steps)?;
        }
        Command::Collude { a, b, user_a, user_b, n } => {
            let model = ctx.model()?;
            let da = BakedDecoder::from_checkpoint(&Checkpoint::load(a)?)?;
            let db = BakedDecoder::from_checkpoint(&Checkpoint::load(b)?)?;
            let colluded = collude_models(&da, &db)?;
            colluded.to_checkpoint().save(ctx.out("colluded.baked.twb"))?;
            let (ma, mb) = (ctx.message_of(user_a)?, ctx.message_of(user_b)?);
            let latents = ctx.latents(|x| colluded.encode(x), *n, None)?;
            let report = collusion_bit_stats(&model, &colluded, &ma, &mb, &latents, *n, cfg.seed ^ NOISE_STREAM)?;
            ctx.write_json("collusion.json", &report)?;
            println!(
                "agreeing positions match rate {:.4}, differing mean deviation {:+.4}",
                report.agreeing_match_rate, report.differing_mean
            );
        }
    }
    Ok(())
}

fn run_attack(
    ctx: &Ctx,
    model: &Model,
    baked: &BakedDecoder,
    m: &WatermarkMessage,
    kind: AttackKind,
    n: usize,
    steps: usize,
) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let images = data::procedural_corpus(n.max(1), cfg.seed ^ LATENT_STREAM);
    match kind {
        AttackKind::Purification => {
            let train = training::prepare_latents(model, &data::procedural_corpus(500, cfg.seed))?;
            let eval = training::prepare_latents(model, &images)?;
            let pcfg = PurificationConfig {
                steps,
                seed: cfg.seed,
                ..PurificationConfig::default()
            };
            let points = attacks::purification_attack(model, baked, m, &train, &eval, &pcfg)?;
            let csv = attacks::purification_csv(&points);
            fs::write(ctx.out("purification.csv"), &csv)?;
            print!("{csv}");
        }
        AttackKind::Adversarial => {
            let mut rng = Rng::new(cfg.seed);
            let mut reports = Vec::with_capacity(n);
            for img in &images {
                let wm = baked.decode(&baked.encode(img)?, None)?;
                let target = sample_message(m.len(), &mut rng)?;
                let (_, rep) = attacks::adversarial_message_attack(model, &wm, m, &target, steps, 2e-3)?;
                reports.push(rep);
            }
            let mut csv = String::from("image,steps,acc_target,acc_original,psnr\n");
            for (i, r) in reports.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{},{},{},{}\n",
                    r.steps_run, r.accuracy_to_target, r.accuracy_to_original, r.psnr_to_input
                ));
            }
            fs::write(ctx.out("adversarial.csv"), &csv)?;
            print!("{csv}");
        }
        AttackKind::Autoencoder => {
            let train = data::procedural_corpus(2000, cfg.seed);
            let pairs = images
                .iter()
                .map(|img| {
                    let z = baked.encode(img)?;
                    Ok((baked.decode(&z, None)?, model.decode_pretrained(&z)?))
                })
                .collect::<crate::Result<Vec<_>>>()?;
            let mut csv = String::from("width,bit_acc,psnr,clean_bit_acc,clean_psnr\n");
            for width in BOTTLENECK_WIDTHS {
                let mut ae = CompressiveAutoencoder::new(width, cfg.seed)?;
                ae.train(&train, steps, 1e-3, 16, cfg.seed)?;
                let r = attacks::autoencoder_attack_report(model, &ae, m, &pairs)?;
                csv.push_str(&format!(
                    "{width},{},{},{},{}\n",
                    r.bit_accuracy, r.psnr, r.clean_bit_accuracy, r.clean_psnr
                ));
            }
            fs::write(ctx.out("autoencoder.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("wibmark: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli, args: &[OsString]) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    fs::create_dir_all(&cli.out)?;
    let ctx = Ctx { cli, cfg };
    let manifest = Manifest {
        tool: "wibmark",
        version: VERSION,
        argv: args.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        seed: ctx.cfg.seed,
        config: &ctx.cfg,
        registry: cli.registry.as_deref(),
        checkpoint: cli.checkpoint.as_deref(),
        out: &cli.out,
        command: &cli.command,
    };
    ctx.write_json("manifest.json", &manifest)?;
    run_command(&ctx)
}
