//! Annealed Langevin sampling and the restoration loops.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{data_fidelity_update, DegradationOp};
use crate::error::{ensure_arg, Result};
use crate::noise::{standard_normal, uniform, NoiseSource};
use crate::schedule::NoiseSchedule;
use crate::score::Score;
use crate::tensor::{ImageTensor, Shape};
use crate::transforms::HighDimTransform;

/// `X + alpha/2 * score + sqrt(alpha) * z` with `z` drawn from `noise`.
pub fn langevin_step(
    x: &ImageTensor,
    score: &ImageTensor,
    alpha: f64,
    noise: &mut (impl NoiseSource + ?Sized),
) -> Result<ImageTensor> {
    ensure_arg!(alpha > 0.0 && alpha.is_finite(), "step size must be positive (got {alpha})");
    score.ensure_shape(x.shape())?;
    let z = standard_normal(x.shape(), noise);
    let half = 0.5 * alpha;
    let root = alpha.sqrt();
    let data = x
        .as_slice()
        .iter()
        .zip(score.as_slice())
        .zip(z.as_slice())
        .map(|((v, s), n)| v + half * s + root * n)
        .collect();
    Ok(ImageTensor::from_parts(x.shape(), data))
}

/// Unconditional annealed Langevin sampling from uniform `[0, 1]` noise.
pub fn generate(
    model: &(impl Score + ?Sized),
    schedule: &NoiseSchedule,
    shape: Shape,
    noise: &mut (impl NoiseSource + ?Sized),
) -> Result<ImageTensor> {
    model.check_shape(shape)?;
    let mut x = uniform(shape, noise);
    for level in 0..schedule.levels() {
        let sigma = schedule.sigma(level);
        let alpha = schedule.step_size(level)?;
        for _ in 0..schedule.steps_per_level() {
            let s = model.evaluate(&x, sigma)?;
            x = langevin_step(&x, &s, alpha, noise)?;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestoreMode {
    #[default]
    Basic,
    Progressive,
}

impl std::fmt::Display for RestoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RestoreMode::Basic => "basic",
            RestoreMode::Progressive => "progressive",
        })
    }
}

impl std::str::FromStr for RestoreMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(RestoreMode::Basic),
            "progressive" => Ok(RestoreMode::Progressive),
            other => Err(crate::Error::invalid(format!("unknown restoration mode {other:?}"))),
        }
    }
}

/// Residual used by the high-dimensional data-consistency gradient of the
/// progressive mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DcVariant {
    /// `H(H^-1(X) - y_aug)` where `y_aug` is `y` on observed entries and the
    /// first-stage estimate elsewhere.
    #[default]
    Augmented,
    /// `H(M (H^-1(X) - y))`: observed entries only.
    Masked,
}

impl std::str::FromStr for DcVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "augmented" => Ok(DcVariant::Augmented),
            "masked" => Ok(DcVariant::Masked),
            other => Err(crate::Error::invalid(format!("unknown data-consistency variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestoreConfig {
    pub transform: HighDimTransform,
    pub lambda_dc: f64,
    pub mode: RestoreMode,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub clamp_each_step: bool,
    pub dc_variant: DcVariant,
    /// Keep the original-space estimate at the end of every level.
    pub snapshots: bool,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self {
            transform: HighDimTransform::Identity,
            lambda_dc: 1.0,
            mode: RestoreMode::Basic,
            schedule: NoiseSchedule::default(),
            seed: 0,
            clamp_each_step: false,
            dc_variant: DcVariant::Augmented,
            snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationResult {
    pub restored: ImageTensor,
    pub per_level_snapshots: Option<Vec<ImageTensor>>,
    pub iterations_run: usize,
    /// Seconds.
    pub wall_time: f64,
}

fn check_inputs(y: &ImageTensor, op: &DegradationOp, cfg: &RestoreConfig) -> Result<Shape> {
    y.ensure_shape(op.shape())?;
    ensure_arg!(op.observed_count() > 0, "the mask observes nothing");
    ensure_arg!(
        cfg.lambda_dc >= 0.0 && cfg.lambda_dc.is_finite(),
        "data-fidelity weight must be non-negative (got {})",
        cfg.lambda_dc
    );
    cfg.transform.forward_shape(y.shape())
}

/// Uniform noise with observed entries replaced by `y`.
fn initial_estimate(y: &ImageTensor, op: &DegradationOp, noise: &mut (impl NoiseSource + ?Sized)) -> ImageTensor {
    let mut x = uniform(y.shape(), noise);
    for (i, (v, &obs)) in x.as_mut_slice().iter_mut().zip(y.as_slice()).enumerate() {
        if op.observed(i) {
            *v = obs;
        }
    }
    x
}

fn finish_step(x: ImageTensor, clamp: bool) -> ImageTensor {
    if clamp {
        x.clamped()
    } else {
        x
    }
}

/// Basic restoration seeded by `cfg.seed`.
pub fn restore_basic(
    y: &ImageTensor,
    op: &DegradationOp,
    model: &(impl Score + ?Sized),
    cfg: &RestoreConfig,
) -> Result<RestorationResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    restore_basic_with(y, op, model, cfg, &mut rng)
}

/// Basic restoration drawing every random number from `noise`: the
/// initial estimate first, then one perturbation per Langevin step.
pub fn restore_basic_with(
    y: &ImageTensor,
    op: &DegradationOp,
    model: &(impl Score + ?Sized),
    cfg: &RestoreConfig,
    noise: &mut (impl NoiseSource + ?Sized),
) -> Result<RestorationResult> {
    let start = Instant::now();
    let lifted_shape = check_inputs(y, op, cfg)?;
    model.check_shape(lifted_shape)?;
    let t = cfg.transform;
    let schedule = &cfg.schedule;
    let mut lifted = t.forward(&initial_estimate(y, op, noise))?;
    let mut snapshots = cfg.snapshots.then(Vec::new);
    let mut iterations = 0;
    for level in 0..schedule.levels() {
        let sigma = schedule.sigma(level);
        let alpha = schedule.step_size(level)?;
        for _ in 0..schedule.steps_per_level() {
            let s = model.evaluate(&lifted, sigma)?;
            lifted = langevin_step(&lifted, &s, alpha, noise)?;
            let x = finish_step(data_fidelity_update(&lifted, y, op, cfg.lambda_dc, t)?, cfg.clamp_each_step);
            lifted = t.forward(&x)?;
            iterations += 1;
        }
        if let Some(s) = snapshots.as_mut() {
            s.push(t.inverse(&lifted)?);
        }
    }
    Ok(RestorationResult {
        restored: t.inverse(&lifted)?,
        per_level_snapshots: snapshots,
        iterations_run: iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Stream id of the generator driving the original-space stage.
pub const PROGRESSIVE_STAGE1_STREAM: u64 = 1;

/// Progressive restoration. The high-dimensional stage uses the same
/// generator stream as [`restore_basic`]; the original-space stage uses
/// stream [`PROGRESSIVE_STAGE1_STREAM`] of the same seed.
pub fn restore_progressive(
    y: &ImageTensor,
    op: &DegradationOp,
    model_lowdim: &(impl Score + ?Sized),
    model_highdim: &(impl Score + ?Sized),
    cfg: &RestoreConfig,
) -> Result<RestorationResult> {
    let mut main = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stage1 = ChaCha8Rng::seed_from_u64(cfg.seed);
    stage1.set_stream(PROGRESSIVE_STAGE1_STREAM);
    restore_progressive_with(y, op, model_lowdim, model_highdim, cfg, &mut main, &mut stage1)
}

/// Per level: `T` original-space Langevin and data-fidelity steps give an
/// intermediate estimate `x_rec`; then `T` high-dimensional steps
///
/// `X <- X + alpha/2 * s(X) - kappa * grad_dc(X) + sqrt(alpha) * z`
///
/// each followed by the data-fidelity update, with
/// `kappa = min(alpha * lambda / 2, 1)`. Both stages carry their state
/// across levels.
pub fn restore_progressive_with(
    y: &ImageTensor,
    op: &DegradationOp,
    model_lowdim: &(impl Score + ?Sized),
    model_highdim: &(impl Score + ?Sized),
    cfg: &RestoreConfig,
    noise: &mut (impl NoiseSource + ?Sized),
    stage1_noise: &mut (impl NoiseSource + ?Sized),
) -> Result<RestorationResult> {
    let start = Instant::now();
    let lifted_shape = check_inputs(y, op, cfg)?;
    model_lowdim.check_shape(y.shape())?;
    model_highdim.check_shape(lifted_shape)?;
    let t = cfg.transform;
    let schedule = &cfg.schedule;
    let x0 = initial_estimate(y, op, noise);
    let mut lifted = t.forward(&x0)?;
    let mut low = x0;
    let mut snapshots = cfg.snapshots.then(Vec::new);
    let mut iterations = 0;
    for level in 0..schedule.levels() {
        let sigma = schedule.sigma(level);
        let alpha = schedule.step_size(level)?;
        for _ in 0..schedule.steps_per_level() {
            let s = model_lowdim.evaluate(&low, sigma)?;
            low = langevin_step(&low, &s, alpha, stage1_noise)?;
            low = finish_step(
                data_fidelity_update(&low, y, op, cfg.lambda_dc, HighDimTransform::Identity)?,
                cfg.clamp_each_step,
            );
            iterations += 1;
        }
        let target = match cfg.dc_variant {
            DcVariant::Augmented => augmented_target(y, op, &low),
            DcVariant::Masked => y.clone(),
        };
        let kappa = (0.5 * alpha * cfg.lambda_dc).min(1.0);
        for _ in 0..schedule.steps_per_level() {
            let s = model_highdim.evaluate(&lifted, sigma)?;
            let mut next = langevin_step(&lifted, &s, alpha, noise)?;
            if kappa > 0.0 {
                let g = dc_gradient(&lifted, &target, op, t, cfg.dc_variant)?;
                for (v, gv) in next.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *v -= kappa * gv;
                }
            }
            let x = finish_step(data_fidelity_update(&next, y, op, cfg.lambda_dc, t)?, cfg.clamp_each_step);
            lifted = t.forward(&x)?;
            iterations += 1;
        }
        if let Some(s) = snapshots.as_mut() {
            s.push(t.inverse(&lifted)?);
        }
    }
    Ok(RestorationResult {
        restored: t.inverse(&lifted)?,
        per_level_snapshots: snapshots,
        iterations_run: iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn augmented_target(y: &ImageTensor, op: &DegradationOp, estimate: &ImageTensor) -> ImageTensor {
    let mut out = estimate.clone();
    for (i, (v, &obs)) in out.as_mut_slice().iter_mut().zip(y.as_slice()).enumerate() {
        if op.observed(i) {
            *v = obs;
        }
    }
    out
}

/// Gradient of the high-dimensional data-consistency penalty.
pub fn dc_gradient(
    lifted: &ImageTensor,
    target: &ImageTensor,
    op: &DegradationOp,
    t: HighDimTransform,
    variant: DcVariant,
) -> Result<ImageTensor> {
    let mut r = t.inverse(lifted)?.sub(target)?;
    if variant == DcVariant::Masked {
        for (i, v) in r.as_mut_slice().iter_mut().enumerate() {
            if !op.observed(i) {
                *v = 0.0;
            }
        }
    }
    t.forward(&r)
}
