//! The `hgm` subcommands. Each returns the manifest it wrote.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hgm_core::degradation::{bayer_mask, block_mask, load_mask_for, random_mask, DegradationOp};
use hgm_core::io::{encode_png, load_png};
use hgm_core::sampler::{generate as sample, restore_basic, restore_progressive, RestorationResult};
use hgm_core::score::{
    score_error, train_with_progress, Architecture, Checkpoint, ConvSpec, GaussianScore, ScoreNet, TrainConfig,
};
use hgm_core::synth::CorrelatedImageModel;
use hgm_core::{HighDimTransform, ImageTensor, MaskKind, MetricReport, NoiseSchedule, RestoreConfig, RestoreMode, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Config, Head};
use crate::manifest::{stable_hash, FileRecord, RunManifest, MANIFEST_FILE};
use crate::models;

pub const METRICS_HEADER: &str = "image_id,mask_kind,transform,mode,psnr_db,ssim,seed,wall_time_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Restore,
    Generate,
    Sweep,
    Eval,
    Synth,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Restore => "restore",
            Command::Generate => "generate",
            Command::Sweep => "sweep",
            Command::Eval => "eval",
            Command::Synth => "synth",
        }
    }
}

impl FromStr for Command {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Command::Train,
            "restore" => Command::Restore,
            "generate" => Command::Generate,
            "sweep" => Command::Sweep,
            "eval" => Command::Eval,
            "synth" => Command::Synth,
            other => bail!("unknown command {other:?}"),
        })
    }
}

pub fn run(command: Command, cfg: &Config) -> Result<RunManifest> {
    let start = Instant::now();
    let out_dir = cfg.out_dir()?.to_path_buf();
    let mut outputs = Outputs::new(&out_dir)?;
    let mut manifest = RunManifest::new(command.name(), cfg);
    match command {
        Command::Train => train(cfg, &mut manifest, &mut outputs)?,
        Command::Restore => restore(cfg, &mut manifest, &mut outputs)?,
        Command::Generate => generate(cfg, &mut manifest, &mut outputs)?,
        Command::Sweep => sweep(cfg, &mut manifest, &mut outputs)?,
        Command::Eval => eval(cfg, &mut manifest, &mut outputs)?,
        Command::Synth => synth(cfg, &mut manifest, &mut outputs)?,
    }
    manifest.outputs = outputs.records;
    manifest.timings.insert("wall_time_s".into(), start.elapsed().as_secs_f64());
    manifest.save(&out_dir)?;
    Ok(manifest)
}

/// Files written under the output directory, with their content hashes.
pub struct Outputs {
    root: PathBuf,
    records: Vec<FileRecord>,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let rel = rel.as_ref();
        if rel == Path::new(MANIFEST_FILE) {
            bail!("{MANIFEST_FILE} is reserved");
        }
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.records.push(FileRecord {
            path: rel.to_path_buf(),
            sha256: stable_hash(rel, bytes),
        });
        Ok(())
    }

    pub fn png(&mut self, rel: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
        self.write(rel, &encode_png(img)?)
    }
}

/// Sorted PNG files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every PNG of `dir`, requiring one common shape.
pub fn load_images(dir: &Path, channels: usize) -> Result<(Vec<PathBuf>, Vec<ImageTensor>)> {
    let paths = list_pngs(dir)?;
    if paths.is_empty() {
        bail!("no PNG images in {}", dir.display());
    }
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = load_png(p, channels).with_context(|| format!("loading {}", p.display()))?;
        if let Some(first) = images.first().map(ImageTensor::shape) {
            if img.shape() != first {
                bail!("{} is {:?}, expected {:?} like the rest", p.display(), img.shape(), first);
            }
        }
        images.push(img);
    }
    Ok((paths, images))
}

fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn train(cfg: &Config, manifest: &mut RunManifest, outputs: &mut Outputs) -> Result<()> {
    let dir = cfg.train.dataset.as_ref().context("train needs train.dataset")?;
    let (paths, images) = load_images(dir, cfg.data.channels)?;
    for p in &paths {
        manifest.add_input(p)?;
    }
    let t = cfg.train.transform;
    let lifted = images.iter().map(|x| t.forward(x)).collect::<hgm_core::Result<Vec<_>>>()?;
    let (h, w, c) = lifted[0].shape();
    let arch = match cfg.train.head {
        Head::Conv => Architecture::Conv(ConvSpec {
            channels: c,
            features: cfg.train.features,
            dilations: cfg.train.dilations.clone(),
            sigma_channel: cfg.train.sigma_channel,
        }),
        Head::Linear => Architecture::Linear {
            height: h,
            width: w,
            channels: c,
        },
    };
    let net = ScoreNet::new(arch, cfg.train.init_seed)?;
    let schedule = cfg.schedule.build()?;
    let tc = cfg.train.train_config();
    eprintln!(
        "training on {} images of {:?} ({} parameters); all-zeros baseline loss {}",
        images.len(),
        (h, w, c),
        net.params().len(),
        (h * w * c) as f64 / 2.0
    );
    let report_every = (tc.iterations / 10).max(1);
    let outcome = train_with_progress(net, &lifted, &schedule, &tc, |it, loss| {
        if (it + 1) % report_every == 0 {
            eprintln!("iteration {:>6}  loss {loss:.4}", it + 1);
        }
    })?;
    let ck = Checkpoint::new(&outcome.net, t, &schedule, tc.seed);
    outputs.write("checkpoint.json", ck.to_json()?.as_bytes())?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        writeln!(csv, "{i},{l}")?;
    }
    outputs.write("loss.csv", csv.as_bytes())?;
    manifest.seeds.insert("init".into(), cfg.train.init_seed);
    manifest.seeds.insert("train".into(), tc.seed);
    Ok(())
}

/// Degradation operator for image `index`. Random masks and observation
/// noise draw from stream `index` of the degradation seed.
pub fn build_degradation(cfg: &Config, shape: Shape, index: usize) -> Result<(DegradationOp, ChaCha8Rng)> {
    let d = &cfg.degradation;
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    rng.set_stream(index as u64);
    let (h, w, c) = shape;
    let op = match d.mask {
        MaskKind::Bayer => {
            if c != 3 {
                bail!("Bayer masks need 3-channel images");
            }
            bayer_mask(h, w)?
        }
        MaskKind::Block => block_mask(h, w, c, 1.0 - d.keep_fraction)?,
        MaskKind::Random => random_mask(h, w, c, d.keep_fraction, &mut rng)?,
        MaskKind::File => {
            let p = d.mask_file.as_ref().context("mask = \"file\" needs degradation.mask_file")?;
            load_mask_for(p, shape)?
        }
        MaskKind::Full => DegradationOp::full(shape),
    };
    Ok((op.with_noise(d.noise_std)?, rng))
}

pub fn restore_config(cfg: &Config, schedule: &NoiseSchedule, seed: u64) -> RestoreConfig {
    RestoreConfig {
        transform: cfg.restore.transform,
        lambda_dc: cfg.restore.lambda,
        mode: cfg.restore.mode,
        schedule: schedule.clone(),
        seed,
        clamp_each_step: cfg.restore.clamp_each_step,
        dc_variant: cfg.restore.dc_variant,
        snapshots: cfg.restore.snapshots,
    }
}

struct Restored {
    observed: ImageTensor,
    op: DegradationOp,
    result: RestorationResult,
    report: MetricReport,
    seed: u64,
}

fn restore(cfg: &Config, manifest: &mut RunManifest, outputs: &mut Outputs) -> Result<()> {
    let dir = cfg.restore.inputs.as_ref().context("restore needs restore.inputs")?;
    let (paths, images) = load_images(dir, cfg.data.channels)?;
    for p in &paths {
        manifest.add_input(p)?;
    }
    for p in [&cfg.model.checkpoint, &cfg.model.checkpoint_lowdim, &cfg.degradation.mask_file]
        .into_iter()
        .flatten()
    {
        manifest.add_input(p)?;
    }
    let shape = images[0].shape();
    let progressive = cfg.restore.mode == RestoreMode::Progressive;
    let models = models::build(cfg, shape, cfg.restore.transform, progressive)?;
    let schedule = cfg.schedule.build()?;
    let results: Vec<Result<Restored>> = images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let (op, mut rng) = build_degradation(cfg, shape, i)?;
            let y = op.apply(x, &mut rng)?;
            let seed = cfg.restore.seed.wrapping_add(i as u64);
            let rc = restore_config(cfg, &schedule, seed);
            let result = match &models.lowdim {
                Some(low) if progressive => restore_progressive(&y, &op, low, &models.highdim, &rc)?,
                _ => restore_basic(&y, &op, &models.highdim, &rc)?,
            };
            let report = MetricReport::compute(&result.restored, x)?;
            Ok(Restored {
                observed: y,
                op,
                result,
                report,
                seed,
            })
        })
        .collect();
    let mut csv = format!("{METRICS_HEADER}\n");
    for ((path, x), r) in paths.iter().zip(&images).zip(results) {
        let r = r.with_context(|| format!("restoring {}", path.display()))?;
        let id = image_id(path);
        outputs.png(format!("restored/{id}.png"), &r.result.restored)?;
        outputs.png(format!("observed/{id}.png"), &r.observed)?;
        outputs.png(format!("mask/{id}.png"), r.op.mask())?;
        let diff = r.result.restored.clamped().zip_map(x, |a, b| 0.5 + (a - b))?;
        outputs.png(format!("diff/{id}.png"), &diff)?;
        if let Some(snaps) = &r.result.per_level_snapshots {
            let mut levels = Vec::new();
            for (level, s) in snaps.iter().enumerate() {
                let file = format!("level_{level:02}.png");
                outputs.png(format!("snapshots/{id}/{file}"), s)?;
                levels.push(serde_json::json!({
                    "level": level,
                    "sigma": schedule.sigma(level),
                    "alpha": schedule.step_size(level)?,
                    "iterations": schedule.steps_per_level(),
                    "file": file,
                }));
            }
            let text = serde_json::to_string_pretty(&serde_json::json!({ "image_id": id, "levels": levels }))?;
            outputs.write(format!("snapshots/{id}/levels.json"), text.as_bytes())?;
        }
        writeln!(
            csv,
            "{id},{},{},{},{},{},{},{}",
            r.op.kind(),
            cfg.restore.transform,
            cfg.restore.mode,
            r.report.psnr_db,
            fmt_opt(r.report.ssim),
            r.seed,
            r.result.wall_time
        )?;
    }
    outputs.write("metrics.csv", csv.as_bytes())?;
    manifest.seeds.insert("restore".into(), cfg.restore.seed);
    manifest.seeds.insert("degradation".into(), cfg.degradation.seed);
    Ok(())
}

fn generate(cfg: &Config, manifest: &mut RunManifest, outputs: &mut Outputs) -> Result<()> {
    if let Some(p) = &cfg.model.checkpoint {
        manifest.add_input(p)?;
    }
    let shape = (cfg.data.height, cfg.data.width, cfg.data.channels);
    let t = cfg.restore.transform;
    let models = models::build(cfg, shape, t, false)?;
    let lifted_shape = t.forward_shape(shape)?;
    let schedule = cfg.schedule.build()?;
    let samples: Vec<Result<ImageTensor>> = (0..cfg.generate.count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.generate.seed);
            rng.set_stream(k as u64);
            let lifted = sample(&models.highdim, &schedule, lifted_shape, &mut rng)?;
            Ok(t.inverse(&lifted)?)
        })
        .collect();
    for (k, s) in samples.into_iter().enumerate() {
        outputs.png(format!("samples/sample_{k:04}.png"), &s?)?;
    }
    manifest.seeds.insert("generate".into(), cfg.generate.seed);
    Ok(())
}

/// Held-out score error of the elementwise linear head trained on `n`
/// samples of `N(mean, variance I)` at a single noise level.
pub fn linear_head_error(cfg: &Config, n: usize, seed: u64) -> Result<f64> {
    let s = &cfg.sweep;
    let shape = (s.side, s.side, 1);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(n as u64 + 1);
    let std = s.variance.sqrt();
    let data: Vec<ImageTensor> = (0..n)
        .map(|_| hgm_core::noise::standard_normal(shape, &mut data_rng).map(|v| s.mean + std * v))
        .collect();
    let schedule = NoiseSchedule::geometric(s.sigma, s.sigma, 1, cfg.schedule.epsilon, 1)?;
    let net = ScoreNet::new(
        Architecture::Linear {
            height: s.side,
            width: s.side,
            channels: 1,
        },
        seed,
    )?;
    let tc = TrainConfig {
        learning_rate: s.learning_rate,
        batch_size: s.batch_size,
        iterations: s.iterations,
        seed,
        final_lr_fraction: s.final_lr_fraction,
        ..TrainConfig::default()
    };
    let net = hgm_core::score::train(net, &data, &schedule, &tc)?.net;
    let oracle = GaussianScore::isotropic(ImageTensor::filled(shape, s.mean), s.variance)?;
    let mut held_rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = (s.variance + s.sigma * s.sigma).sqrt();
    let points: Vec<ImageTensor> = (0..s.held_out)
        .map(|_| hgm_core::noise::standard_normal(shape, &mut held_rng).map(|v| s.mean + spread * v))
        .collect();
    Ok(score_error(&net, &oracle, &points, s.sigma)?)
}

/// Gaussian-prior inpainting error of one transform.
pub struct TransformRow {
    pub transform: HighDimTransform,
    pub trials: usize,
    pub mae_vs_conditional_mean: f64,
    pub observed_psnr_db: f64,
    pub restored_psnr_db: f64,
}

pub fn transform_row(cfg: &Config, t: HighDimTransform) -> Result<TransformRow> {
    let s = &cfg.sweep;
    let prior = CorrelatedImageModel::ar1((s.restore_side, s.restore_side, 1), 0.5, s.restore_rho, s.restore_variance);
    let base = GaussianScore::full(prior.mean_tensor(), prior.covariance())?;
    let lifted = base.lifted(t)?;
    let schedule = cfg.schedule.build()?;
    let trials = s.restore_trials.max(1);
    let rows: Vec<Result<(f64, f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let x = prior.sample(&mut rng)?;
            let op = random_mask(s.restore_side, s.restore_side, 1, s.restore_keep_fraction, &mut rng)?;
            let y = op.apply(&x, &mut rng)?;
            let oracle = base.conditional_mean(&y, &op)?;
            let rc = RestoreConfig {
                transform: t,
                lambda_dc: s.restore_lambda,
                schedule: schedule.clone(),
                seed: k as u64,
                ..RestoreConfig::default()
            };
            let r = restore_basic(&y, &op, &lifted, &rc)?.restored;
            let mae = r.sub(&oracle)?.as_slice().iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64;
            Ok((mae, hgm_core::psnr(&y, &x)?, hgm_core::psnr(&r, &x)?))
        })
        .collect();
    let mut acc = (0.0, 0.0, 0.0);
    for r in rows {
        let (a, b, c) = r?;
        acc = (acc.0 + a, acc.1 + b, acc.2 + c);
    }
    let n = trials as f64;
    Ok(TransformRow {
        transform: t,
        trials,
        mae_vs_conditional_mean: acc.0 / n,
        observed_psnr_db: acc.1 / n,
        restored_psnr_db: acc.2 / n,
    })
}

fn sweep(cfg: &Config, manifest: &mut RunManifest, outputs: &mut Outputs) -> Result<()> {
    let s = &cfg.sweep;
    let jobs: Vec<(usize, u64)> = s
        .sample_counts
        .iter()
        .flat_map(|&n| s.seeds.iter().map(move |&seed| (n, seed)))
        .collect();
    let errors: Vec<Result<f64>> = jobs.par_iter().map(|&(n, seed)| linear_head_error(cfg, n, seed)).collect();
    let mut per_seed = String::from("n,seed,score_error\n");
    let mut summary = String::from("n,seeds,mean_score_error\n");
    let mut errors = errors.into_iter();
    for &n in &s.sample_counts {
        let mut total = 0.0;
        for &seed in &s.seeds {
            let e = errors.next().expect("one result per job")?;
            writeln!(per_seed, "{n},{seed},{e}")?;
            total += e;
        }
        if !s.seeds.is_empty() {
            writeln!(summary, "{n},{},{}", s.seeds.len(), total / s.seeds.len() as f64)?;
        }
    }
    outputs.write("sweep_samples.csv", per_seed.as_bytes())?;
    outputs.write("sweep_samples_summary.csv", summary.as_bytes())?;
    let mut csv = String::from("transform,trials,mae_vs_conditional_mean,observed_psnr_db,restored_psnr_db\n");
    for &t in &s.transforms {
        let row = transform_row(cfg, t)?;
        writeln!(
            csv,
            "{},{},{},{},{}",
            row.transform, row.trials, row.mae_vs_conditional_mean, row.observed_psnr_db, row.restored_psnr_db
        )?;
    }
    outputs.write("sweep_transforms.csv", csv.as_bytes())?;
    for &seed in &s.seeds {
        manifest.seeds.insert(format!("sweep_{seed}"), seed);
    }
    Ok(())
}

fn eval(cfg: &Config, manifest: &mut RunManifest, outputs: &mut Outputs) -> Result<()> {
    let restored = cfg.eval.restored.as_ref().context("eval needs eval.restored")?;
    let reference = cfg.eval.reference.as_ref().context("eval needs eval.reference")?;
    let refs = list_pngs(reference)?;
    if refs.is_empty() {
        bail!("no PNG images in {}", reference.display());
    }
    let mut csv = format!("{METRICS_HEADER}\n");
    for r in &refs {
        let name = r.file_name().expect("listed files have names");
        let u = restored.join(name);
        if !u.exists() {
            bail!("{} has no counterpart in {}", r.display(), restored.display());
        }
        manifest.add_input(r)?;
        manifest.add_input(&u)?;
        let start = Instant::now();
        let a = load_png(&u, cfg.data.channels)?;
        let b = load_png(r, cfg.data.channels)?;
        let report = MetricReport::compute(&a, &b).with_context(|| format!("comparing {}", u.display()))?;
        writeln!(
            csv,
            "{},,,,{},{},,{}",
            image_id(r),
            report.psnr_db,
            fmt_opt(report.ssim),
            start.elapsed().as_secs_f64()
        )?;
    }
    outputs.write("metrics.csv", csv.as_bytes())?;
    Ok(())
}

fn synth(cfg: &Config, manifest: &mut RunManifest, outputs: &mut Outputs) -> Result<()> {
    let model = cfg.data.image_model();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth.seed);
    let images = model.sample_many(cfg.synth.count, &mut rng)?;
    for (k, img) in images.iter().enumerate() {
        outputs.png(format!("images/img_{k:04}.png"), img)?;
    }
    manifest.seeds.insert("synth".into(), cfg.synth.seed);
    Ok(())
}

/// Outcome of rerunning a manifest.
#[derive(Debug)]
pub struct ReplayReport {
    pub manifest: RunManifest,
    pub changed_inputs: Vec<PathBuf>,
    pub mismatched_outputs: Vec<PathBuf>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.changed_inputs.is_empty() && self.mismatched_outputs.is_empty()
    }
}

/// Reruns the command recorded in `manifest_path` into `out_dir` and
/// compares every output hash with the recorded one.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<ReplayReport> {
    let original = RunManifest::load(manifest_path)?;
    let mut changed_inputs = Vec::new();
    for rec in &original.inputs {
        let now = std::fs::read(&rec.path).map(|b| crate::manifest::sha256_hex(&b)).ok();
        if now.as_deref() != Some(rec.sha256.as_str()) {
            changed_inputs.push(rec.path.clone());
        }
    }
    let mut cfg = original.config.clone();
    cfg.out_dir = out_dir.to_path_buf();
    let command: Command = original.command.parse()?;
    let rerun = run(command, &cfg)?;
    let mut mismatched: Vec<PathBuf> = Vec::new();
    for rec in &original.outputs {
        if !rerun.outputs.iter().any(|r| r == rec) {
            mismatched.push(rec.path.clone());
        }
    }
    for rec in &rerun.outputs {
        if !original.outputs.iter().any(|r| r.path == rec.path) {
            mismatched.push(rec.path.clone());
        }
    }
    Ok(ReplayReport {
        manifest: rerun,
        changed_inputs,
        mismatched_outputs: mismatched,
    })
}
