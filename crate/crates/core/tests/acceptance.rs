//! End-to-end acceptance run. Every criterion is checked at its stated
//! tolerance and reported on one line; the process exits non-zero if any
//! criterion fails.
//!
//! Trained models are cached under `$CARGO_TARGET_TMPDIR/wibmark-acceptance-cache`,
//! keyed by the training config and a hash of the library sources, so a rerun
//! after an unrelated edit skips the long stages. Delete the directory to
//! force retraining.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use sha2::{Digest, Sha256};
use wibmark::attribution::{
    detect, detection_threshold, fpr_closed_form, fpr_monte_carlo,
    identify,
};
use wibmark::checkpoint::Checkpoint;
use wibmark::data::procedural_corpus;
use wibmark::gradcheck::{grad_check, GradCheckConfig, Objective};
use wibmark::metrics::{self, PSNR_CAP};
use wibmark::nets::{Model, ModelConfig, Stage};
use wibmark::registry::{sample_message, Registry, WatermarkMessage};
use wibmark::robustness::attacks::{
    adversarial_message_attack, autoencoder_attack_report, purification_attack, CompressiveAutoencoder,
    PurificationConfig, BOTTLENECK_WIDTHS,
};
use wibmark::robustness::collusion::{collude_models, collusion_bit_stats};
use wibmark::robustness::{robustness_sweep, standard_transforms, TransformKind};
use wibmark::scalar::Scalar;
use wibmark::training::{
    evaluate_wib, log_csv, model_from_pretrained, prepare_latents, pretrain, train_wib, AblationFlags,
    LatentSample, TrainingConfig, WibEvaluation,
};
use wibmark::wib::WibOptions;
use wibmark::{ParamStore, Result, Rng, Tape, Tensor, Var};

/// Sources whose behaviour decides what training produces.
const SOURCES: [&str; 14] = [
    include_str!("../src/autograd.rs"),
    include_str!("../src/checkpoint.rs"),
    include_str!("../src/data.rs"),
    include_str!("../src/kernels.rs"),
    include_str!("../src/layers.rs"),
    include_str!("../src/nets.rs"),
    include_str!("../src/optim.rs"),
    include_str!("../src/params.rs"),
    include_str!("../src/rng.rs"),
    include_str!("../src/scalar.rs"),
    include_str!("../src/tensor.rs"),
    include_str!("../src/training.rs"),
    include_str!("../src/wib.rs"),
    include_str!("../src/registry.rs"),
];

const TRAIN_IMAGES: usize = 2000;
const HELDOUT_IMAGES: usize = 200;
const D_W: usize = 48;
/// Wall-clock budget for default training on an 8-core machine.
const TRAINING_BUDGET_8_CORES_S: f64 = 30.0 * 60.0;

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: u8, name: &'static str, pass: bool, detail: String) -> Line {
    Line { id, name, pass, detail }
}

fn cache_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("wibmark-acceptance-cache");
    fs::create_dir_all(&dir).expect("cache directory");
    dir
}

fn cache_key(tag: &str, cfg: &TrainingConfig) -> String {
    let mut h = Sha256::new();
    for s in SOURCES {
        h.update(s.as_bytes());
    }
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(tag.as_bytes());
    let d = h.finalize();
    format!("{tag}-{}", d.iter().take(8).map(|b| format!("{b:02x}")).collect::<String>())
}

fn full_config() -> TrainingConfig {
    TrainingConfig {
        d_w: D_W,
        ..TrainingConfig::default()
    }
}

/// Everything the trained-model criteria share.
struct Trained {
    cfg: TrainingConfig,
    full: Model,
    heldout: Vec<LatentSample>,
    train: Vec<LatentSample>,
    pretrain_psnr: f64,
    /// Seconds spent training here, or `None` when every stage came from the cache.
    train_seconds: Option<f64>,
}

fn pretrained(cfg: &TrainingConfig) -> Result<(Checkpoint, f64, Option<f64>)> {
    let key = cache_key("pretrained", &TrainingConfig { d_w: 16, ..cfg.clone() });
    let path = cache_dir().join(format!("{key}.twb"));
    let meta = cache_dir().join(format!("{key}.json"));
    if path.exists() && meta.exists() {
        let psnr: f64 = serde_json::from_str(&fs::read_to_string(&meta)?)?;
        return Ok((Checkpoint::load(&path)?, psnr, None));
    }
    eprintln!("acceptance: pre-training ({} steps)", cfg.pretrain_steps);
    let start = Instant::now();
    let pre_cfg = TrainingConfig { d_w: 16, ..cfg.clone() };
    let mut model = Model::new(&pre_cfg.model_config(), pre_cfg.seed)?;
    let train = procedural_corpus(TRAIN_IMAGES, cfg.seed);
    let heldout = procedural_corpus(HELDOUT_IMAGES, cfg.seed + 1);
    let report = pretrain(&mut model, &pre_cfg, &train, &heldout, |_, _| {})?;
    let ck = model.to_checkpoint();
    ck.save(&path)?;
    fs::write(&meta, serde_json::to_string(&report.heldout_psnr)?)?;
    Ok((ck, report.heldout_psnr, Some(start.elapsed().as_secs_f64())))
}

fn wib_model(tag: &str, cfg: &TrainingConfig, pre: &Checkpoint, train: &[LatentSample]) -> Result<(Model, Option<f64>)> {
    let key = cache_key(tag, cfg);
    let path = cache_dir().join(format!("{key}.twb"));
    if path.exists() {
        return Ok((Model::from_checkpoint(&Checkpoint::load(&path)?)?, None));
    }
    eprintln!("acceptance: training {tag} ({} steps)", cfg.wib_steps);
    let start = Instant::now();
    let mut model = model_from_pretrained(pre, cfg)?;
    let report = train_wib(&mut model, cfg, train, |r| {
        if r.step % 500 == 0 {
            eprintln!("  {tag} step {} l_w {:.4} acc {:.3}", r.step, r.l_w, r.bit_accuracy_batch);
        }
    })?;
    fs::write(cache_dir().join(format!("{key}.csv")), log_csv(&report.log))?;
    model.to_checkpoint().save(&path)?;
    Ok((model, Some(start.elapsed().as_secs_f64())))
}

fn trained() -> Result<Trained> {
    let cfg = full_config();
    let (pre, pretrain_psnr, t_pre) = pretrained(&cfg)?;
    let probe = model_from_pretrained(&pre, &cfg)?;
    let train = prepare_latents(&probe, &procedural_corpus(TRAIN_IMAGES, cfg.seed))?;
    let heldout = prepare_latents(&probe, &procedural_corpus(HELDOUT_IMAGES, cfg.seed + 1))?;
    let (full, t_wib) = wib_model("full", &cfg, &pre, &train)?;
    let train_seconds = match (t_pre, t_wib) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
    };
    Ok(Trained {
        cfg,
        full,
        heldout,
        train,
        pretrain_psnr,
        train_seconds,
    })
}

// 1

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

fn autodiff() -> Result<Line> {
    let start = Instant::now();
    let mut model = Model::new(&ModelConfig::default(), 21)?;
    let mut rng = Rng::new(22);
    // Heads off their identity initialisation so every path carries gradient.
    for id in model.arch.head_ids() {
        let v = model.store.value(id).zip_map(&Tensor::randn(model.store.value(id).shape(), 0.2, &mut rng), |a, b| a + b)?;
        model.store.set_value(id, v)?;
    }
    model.set_stage(Stage::Wib { train_extractor: true });
    let obj = Composite {
        z: Tensor::uniform(&[8, 8, 8], -1.0, 1.0, &mut rng),
        m: sample_message(16, &mut rng)?,
        model,
    };
    let report = grad_check(&obj.model.store, &GradCheckConfig::default(), &obj)?;
    let secs = start.elapsed().as_secs_f64();
    let pass = report.max_rel_error < 1e-3 && report.checked > 0 && secs < 120.0;
    Ok(line(
        1,
        "autodiff correctness",
        pass,
        format!(
            "max rel error {:.2e} over {} coordinates (< 1e-3), {:.1}s (< 120s)",
            report.max_rel_error, report.checked, secs
        ),
    ))
}

// 2

fn exact_tail(tau: usize, k: usize) -> f64 {
    let mut row = vec![1u128];
    for _ in 0..k {
        let mut next = vec![1u128; row.len() + 1];
        for j in 1..row.len() {
            next[j] = row[j - 1] + row[j];
        }
        row = next;
    }
    row.iter().skip(tau + 1).sum::<u128>() as f64 / 2f64.powi(k as i32)
}

fn statistics() -> Result<Line> {
    let mut worst = 0.0f64;
    for k in 1..=64 {
        for tau in 0..=k {
            worst = worst.max((fpr_closed_form(tau, k)? - exact_tail(tau, k)).abs());
        }
    }
    let mut rng = Rng::new(2);
    let mut worst_sigma = 0.0f64;
    for (k, taus) in [(16usize, [6usize, 8, 11]), (48, [20, 24, 30])] {
        for tau in taus {
            let p = fpr_closed_form(tau, k)?;
            let n = 1_000_000usize;
            let mc = fpr_monte_carlo(tau, k, n, &mut rng)?;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            worst_sigma = worst_sigma.max((mc - p).abs() / sigma);
        }
    }
    let k2 = fpr_closed_form(0, 2)?;
    let top = (1..=64).all(|k| fpr_closed_form(k, k).map(|v| v == 0.0).unwrap_or(false));
    let pass = worst <= 1e-12 && worst_sigma <= 3.0 && k2 == 0.75 && top;
    Ok(line(
        2,
        "exact statistics",
        pass,
        format!("max |closed - exact| {worst:.1e}, Monte Carlo within {worst_sigma:.2} sigma, P(M>0|k=2) = {k2}, tau=k gives 0: {top}"),
    ))
}

// 3

fn init_identity() -> Result<Line> {
    let model = Model::new(&full_config().model_config(), 3)?;
    let mut rng = Rng::new(3);
    let (mut identical, mut min_psnr, mut max_linf) = (0, f64::INFINITY, 0.0f64);
    for _ in 0..100 {
        let z = Tensor::uniform(&[8, 8, 8], -1.0, 1.0, &mut rng);
        let m = sample_message(D_W, &mut rng)?;
        let a = model.decode_pretrained(&z)?;
        let b = model.decode_wib(&z, &m, &WibOptions::default(), Some(&mut rng))?;
        identical += (a.data() == b.data()) as usize;
        min_psnr = min_psnr.min(metrics::psnr(&a, &b)?);
        max_linf = max_linf.max(metrics::linf(&a, &b)?);
    }
    Ok(line(
        3,
        "init identity",
        identical == 100 && min_psnr == PSNR_CAP && max_linf == 0.0,
        format!("{identical}/100 bit-identical, min PSNR {min_psnr} dB, max linf {max_linf}"),
    ))
}

// 4

fn fold_equivalence(t: &Trained) -> Result<Line> {
    let no_noise = WibOptions {
        noise: false,
        ..t.cfg.wib_options()
    };
    let mut rng = Rng::new(4);
    let m = sample_message(D_W, &mut rng)?;
    let baked = t.full.bake(&m, &no_noise)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let z = Tensor::uniform(&[8, 8, 8], -1.0, 1.0, &mut rng);
        let a = t.full.decode_wib(&z, &m, &no_noise, None)?;
        let b = baked.decode(&z, None)?;
        worst = worst.max(metrics::linf(&a, &b)?);
    }
    Ok(line(
        4,
        "fold equivalence",
        worst < 1e-4,
        format!("max linf baked vs unbaked {worst:.2e} over 20 inputs (< 1e-4), trained model"),
    ))
}

// 5

struct Users {
    registry: Registry,
    _dir: tempfile::TempDir,
}

/// Five genuine users followed by 9,996 never-baked decoys: 10,001 candidates.
fn padded_registry() -> Result<Users> {
    let dir = tempfile::tempdir()?;
    let mut registry = Registry::create(dir.path().join("registry.jsonl"), D_W)?;
    let mut rng = Rng::new(55);
    let mut users: Vec<(String, String)> = (0..5).map(|i| (format!("user-{i}"), String::new())).collect();
    users.extend((0..9_996).map(|i| (format!("decoy-{i:05}"), "decoy".to_string())));
    registry.register_many(&users, &mut rng)?;
    Ok(Users { registry, _dir: dir })
}

fn attribution(t: &Trained, users: &Users) -> Result<Line> {
    let opts = t.cfg.wib_options();
    let eval: WibEvaluation = evaluate_wib(&t.full, &t.heldout, 200, 99, &opts)?;
    let tau_det = detection_threshold(D_W, 1e-6, 1)?;
    let records = users.registry.records();
    let n = records.len() as u64;
    let tau_id = detection_threshold(D_W, 1e-6, n)?;
    let mut noise = Rng::new(5);
    let (mut detected, mut identified) = (0usize, 0usize);
    for trial in 0..200 {
        let rec = &records[trial % 5];
        let baked = t.full.bake(&rec.message, &opts)?;
        let img = baked.decode(&t.heldout[trial % t.heldout.len()].z, Some(&mut noise))?;
        detected += detect(&t.full, &img, &rec.message, tau_det)?.detected as usize;
        let v = identify(&t.full, &img, records, tau_id)?;
        identified += (v.identified && v.best_user_id == rec.user_id) as usize;
    }
    let unmarked = prepare_latents(&t.full, &procedural_corpus(1000, t.cfg.seed + 2))?;
    let mut false_pos = 0usize;
    for s in &unmarked {
        let det = detect(&t.full, &s.original, &records[0].message, tau_det)?;
        let id = identify(&t.full, &s.original, records, tau_id)?;
        false_pos += (det.detected || id.identified) as usize;
    }
    let tpr = detected as f64 / 200.0;
    let id_rate = identified as f64 / 200.0;
    let pass = eval.bit_accuracy >= 0.95 && tpr >= 0.99 && id_rate >= 0.99 && false_pos == 0;
    Ok(line(
        5,
        "end-to-end attribution",
        pass,
        format!(
            "clean bit accuracy {:.4} (>= 0.95), PSNR to original {:.2} dB, TPR {tpr:.3} at tau {tau_det}/{D_W} (>= 0.99), \
             identification {id_rate:.3} among {n} at tau {tau_id} (>= 0.99), false positives {false_pos}/1000 (0), \
             pre-training PSNR {:.2} dB",
            eval.bit_accuracy, eval.psnr_to_original, t.pretrain_psnr
        ),
    ))
}

fn training_time(t: &Trained) -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match t.train_seconds {
        Some(s) => format!(
            "default training took {:.1} min on {cores} core(s); budget {:.0} min scaled from 8 cores",
            s / 60.0,
            TRAINING_BUDGET_8_CORES_S * 8.0 / cores.min(8) as f64 / 60.0
        ),
        None => "default training loaded from the cache".to_string(),
    }
}

// 6

fn robustness(t: &Trained, users: &Users) -> Result<Line> {
    let opts = t.cfg.wib_options();
    let rec = &users.registry.records()[0];
    let baked = t.full.bake(&rec.message, &opts)?;
    let latents: Vec<Tensor> = t.heldout.iter().map(|s| s.z.clone()).collect();
    let specs = standard_transforms();
    let rows = robustness_sweep(&t.full, &baked, &rec.message, &latents, &specs, 200, 6)?;
    let clean = rows[0].bit_accuracy;
    let mut pass = true;
    let mut parts = vec![format!("clean {clean:.3}")];
    for (spec, row) in specs.iter().zip(&rows[1..]) {
        let ok_band = if spec.kind == TransformKind::Crop {
            row.bit_accuracy >= 0.70
        } else {
            (clean - row.bit_accuracy).abs() <= 0.08
        };
        let ok_order = clean >= row.bit_accuracy - 0.01;
        pass &= ok_band && ok_order;
        parts.push(format!("{} {:.3}{}", row.transform, row.bit_accuracy, if ok_band && ok_order { "" } else { "!" }));
    }
    Ok(line(6, "robustness trend", pass, parts.join(", ")))
}

// 7

fn attacks(t: &Trained, users: &Users) -> Result<Line> {
    let opts = t.cfg.wib_options();
    let rec = &users.registry.records()[0];
    let m = &rec.message;
    let baked = t.full.bake(m, &opts)?;

    let eval: Vec<LatentSample> = t.heldout[..50].to_vec();
    let curve = purification_attack(&t.full, &baked, m, &t.train, &eval, &PurificationConfig::default())?;
    let start_psnr = curve[0].psnr;
    let purification_ok = match curve.iter().find(|p| p.bit_acc < 0.75) {
        Some(p) => start_psnr - p.psnr >= 2.0,
        None => true,
    };
    let first_below = curve
        .iter()
        .find(|p| p.bit_acc < 0.75)
        .map(|p| format!("acc < 0.75 first at step {} with PSNR {:.2} dB (start {:.2})", p.step, p.psnr, start_psnr))
        .unwrap_or_else(|| format!("acc stays >= 0.75 (final {:.3})", curve.last().unwrap().bit_acc));

    let mut rng = Rng::new(7);
    let (mut to_target, mut worst_psnr) = (0.0, f64::INFINITY);
    let n_adv = 20;
    for s in &t.heldout[..n_adv] {
        let img = baked.decode(&s.z, None)?;
        let target = sample_message(D_W, &mut rng)?;
        let (_, r) = adversarial_message_attack(&t.full, &img, m, &target, 1000, 2e-3)?;
        to_target += r.accuracy_to_target;
        worst_psnr = worst_psnr.min(r.psnr_to_input);
    }
    to_target /= n_adv as f64;
    let adversarial_ok = to_target >= 0.9 && worst_psnr >= 30.0;

    let narrow = *BOTTLENECK_WIDTHS.last().unwrap();
    let mut ae = CompressiveAutoencoder::new(narrow, 8)?;
    ae.train(&procedural_corpus(TRAIN_IMAGES, t.cfg.seed + 3), 1500, 1e-3, 16, 9)?;
    let mut noise = Rng::new(10);
    let pairs = t.heldout[..100]
        .iter()
        .map(|s| Ok((baked.decode(&s.z, Some(&mut noise))?, s.original.clone())))
        .collect::<Result<Vec<_>>>()?;
    let ae_report = autoencoder_attack_report(&t.full, &ae, m, &pairs)?;
    let ae_ok = (0.4..=0.7).contains(&ae_report.bit_accuracy) && ae_report.psnr_loss() >= 4.0;

    Ok(line(
        7,
        "attack trade-offs",
        purification_ok && adversarial_ok && ae_ok,
        format!(
            "purification [{}]: {first_below}; adversarial [{}]: target accuracy {to_target:.3} (>= 0.9), min PSNR {worst_psnr:.2} dB (>= 30); \
             autoencoder width {narrow} [{}]: accuracy {:.3} in [0.4, 0.7], PSNR loss {:.2} dB (>= 4)",
            ok(purification_ok),
            ok(adversarial_ok),
            ok(ae_ok),
            ae_report.bit_accuracy,
            ae_report.psnr_loss()
        ),
    ))
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

// 8

fn collusion(t: &Trained, users: &Users) -> Result<Line> {
    let opts = t.cfg.wib_options();
    let (a, b) = (&users.registry.records()[0], &users.registry.records()[1]);
    let colluded = collude_models(&t.full.bake(&a.message, &opts)?, &t.full.bake(&b.message, &opts)?)?;
    let latents: Vec<Tensor> = t.heldout.iter().map(|s| s.z.clone()).collect();
    let report = collusion_bit_stats(&t.full, &colluded, &a.message, &b.message, &latents, 200, 8)?;
    let worst = report.differing_position_means().iter().fold(0.0f64, |w, d| w.max(d.abs()));
    let pass = report.agreeing_match_rate >= 0.9 && worst <= 0.25;
    Ok(line(
        8,
        "collusion",
        pass,
        format!(
            "agreeing positions match {:.3} (>= 0.9), worst differing |mean(m^j - m2)| {worst:.3} (<= 0.25), {} images",
            report.agreeing_match_rate, report.images
        ),
    ))
}

// 9

fn ablation(t: &Trained) -> Result<Line> {
    let (pre, _, _) = pretrained(&t.cfg)?;
    let opts = t.cfg.wib_options();
    let full = evaluate_wib(&t.full, &t.heldout, 200, 99, &opts)?;
    let mut pass = true;
    let mut parts = vec![format!("full acc {:.3} PSNR {:.2}", full.bit_accuracy, full.psnr_to_original)];
    for flag in ["frozen_extractor", "wib_inner_only"] {
        let cfg = TrainingConfig {
            ablation: AblationFlags::only(flag)?,
            ..t.cfg.clone()
        };
        let (model, _) = wib_model(flag, &cfg, &pre, &t.train)?;
        let e = evaluate_wib(&model, &t.heldout, 200, 99, &cfg.wib_options())?;
        let dominated = full.bit_accuracy >= e.bit_accuracy - 0.02 && full.psnr_to_original >= e.psnr_to_original - 0.5;
        pass &= dominated;
        parts.push(format!(
            "{flag} acc {:.3} PSNR {:.2} [{}]",
            e.bit_accuracy,
            e.psnr_to_original,
            ok(dominated)
        ));
    }
    Ok(line(9, "ablation directionality", pass, parts.join(", ")))
}

// 10

/// Two identical-seed CLI runs at reduced step counts.
fn determinism() -> Result<Line> {
    let cfg = r#"{"pretrain_steps": 40, "wib_steps": 30, "batch_size": 4, "d_w": 16}"#;
    let run = |dir: &Path| -> Result<()> {
        fs::write(dir.join("cfg.json"), cfg)?;
        let steps: [&[&str]; 4] = [
            &["pretrain", "--heldout", "8"],
            &["--checkpoint", "pretrained.twb", "train", "--heldout", "8"],
            &["--registry", "reg.jsonl", "register", "--user", "alice"],
            &["--registry", "reg.jsonl", "--checkpoint", "wib.twb", "fingerprint", "--user", "alice"],
        ];
        for args in steps {
            let out = Command::new(env!("CARGO_BIN_EXE_wibmark"))
                .current_dir(dir)
                .env_remove("TEAWIB_SEED")
                .args(["--config", "cfg.json", "--seed", "17"])
                .args(args)
                .output()?;
            if !out.status.success() {
                return Err(wibmark::Error::InvalidArgument(format!(
                    "{args:?} failed: {}",
                    String::from_utf8_lossy(&out.stderr)
                )));
            }
        }
        Ok(())
    };
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    run(a.path())?;
    run(b.path())?;
    let same = |f: &str| -> Result<bool> { Ok(fs::read(a.path().join(f))? == fs::read(b.path().join(f))?) };
    let logs = same("pretrain_log.csv")? && same("train_log.csv")?;
    let baked = same("alice.baked.twb")?;
    Ok(line(
        10,
        "determinism",
        logs && baked,
        format!("training logs identical: {logs}, baked checkpoints byte-identical: {baked} (40 + 30 steps)"),
    ))
}

fn guarded(id: u8, name: &'static str, f: impl FnOnce() -> Result<Line>) -> Line {
    let start = Instant::now();
    let mut l = f().unwrap_or_else(|e| line(id, name, false, format!("error: {e}")));
    l.detail.push_str(&format!(" [{:.0}s]", start.elapsed().as_secs_f64()));
    println!("criterion {:>2} {:<26} {}  {}", l.id, l.name, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    l
}

fn main() {
    // `cargo test -- --list` and filtered runs should not start training.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    println!("running acceptance criteria");
    let mut lines = vec![
        guarded(1, "autodiff correctness", autodiff),
        guarded(2, "exact statistics", statistics),
        guarded(3, "init identity", init_identity),
    ];
    let trained = trained();
    let users = padded_registry();
    match (&trained, &users) {
        (Ok(t), Ok(u)) => {
            println!("{}", training_time(t));
            lines.push(guarded(4, "fold equivalence", || fold_equivalence(t)));
            lines.push(guarded(5, "end-to-end attribution", || attribution(t, u)));
            lines.push(guarded(6, "robustness trend", || robustness(t, u)));
            lines.push(guarded(7, "attack trade-offs", || attacks(t, u)));
            lines.push(guarded(8, "collusion", || collusion(t, u)));
            lines.push(guarded(9, "ablation directionality", || ablation(t)));
        }
        _ => {
            let why = format!(
                "setup failed: {}",
                trained.as_ref().err().map(|e| e.to_string()).or(users.as_ref().err().map(|e| e.to_string())).unwrap_or_default()
            );
            for (id, name) in [
                (4, "fold equivalence"),
                (5, "end-to-end attribution"),
                (6, "robustness trend"),
                (7, "attack trade-offs"),
                (8, "collusion"),
                (9, "ablation directionality"),
            ] {
                lines.push(guarded(id, name, || Ok(line(id, name, false, why.clone()))));
            }
        }
    }
    lines.push(guarded(10, "determinism", determinism));
    let failed: Vec<u8> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!(
        "acceptance: {} of {} criteria pass{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
