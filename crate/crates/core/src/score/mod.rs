//! Score models, the denoising score matching objective and training.

pub mod analytic;
pub mod net;

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::noise::standard_normal;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, Shape};
use crate::transforms::HighDimTransform;

pub use analytic::{Covariance, GaussianScore, GmmComponent, GmmScore};
pub use net::{Architecture, ConvSpec, ScoreNet};

/// Anything that can approximate `grad_x log p_sigma(x)`.
pub trait Score: Send + Sync {
    fn evaluate(&self, x: &ImageTensor, sigma: f64) -> Result<ImageTensor>;

    /// Shape the model requires, if it is fixed. Convolutional networks
    /// accept any spatial size and only fix the channel count.
    fn expected_shape(&self) -> Option<Shape>;

    /// Fails unless `shape` is acceptable to the model.
    fn check_shape(&self, shape: Shape) -> Result<()> {
        match self.expected_shape() {
            Some(s) if s != shape => Err(Error::ShapeMismatch {
                expected: s,
                actual: shape,
            }),
            _ => Ok(()),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    ensure_arg!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive (got {sigma})");
    Ok(())
}

impl Score for GaussianScore {
    fn evaluate(&self, x: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
        check_sigma(sigma)?;
        GaussianScore::evaluate(self, x, sigma)
    }

    fn expected_shape(&self) -> Option<Shape> {
        Some(self.shape())
    }
}

impl Score for GmmScore {
    fn evaluate(&self, x: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
        check_sigma(sigma)?;
        GmmScore::evaluate(self, x, sigma)
    }

    fn expected_shape(&self) -> Option<Shape> {
        Some(self.shape())
    }
}

impl Score for ScoreNet {
    fn evaluate(&self, x: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
        ScoreNet::evaluate(self, x, sigma)
    }

    fn expected_shape(&self) -> Option<Shape> {
        self.architecture().fixed_shape()
    }

    fn check_shape(&self, shape: Shape) -> Result<()> {
        if let Some(s) = self.architecture().fixed_shape() {
            if s != shape {
                return Err(Error::ShapeMismatch {
                    expected: s,
                    actual: shape,
                });
            }
        }
        let c = self.architecture().channels();
        if c != shape.2 {
            return Err(Error::ShapeMismatch {
                expected: (shape.0, shape.1, c),
                actual: shape,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum ScoreModel {
    Gaussian(GaussianScore),
    Gmm(GmmScore),
    Net(ScoreNet),
}

impl ScoreModel {
    fn inner(&self) -> &dyn Score {
        match self {
            ScoreModel::Gaussian(g) => g,
            ScoreModel::Gmm(g) => g,
            ScoreModel::Net(n) => n,
        }
    }
}

impl Score for ScoreModel {
    fn evaluate(&self, x: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
        self.inner().evaluate(x, sigma)
    }

    fn expected_shape(&self) -> Option<Shape> {
        self.inner().expected_shape()
    }

    fn check_shape(&self, shape: Shape) -> Result<()> {
        self.inner().check_shape(shape)
    }
}

impl From<GaussianScore> for ScoreModel {
    fn from(g: GaussianScore) -> Self {
        ScoreModel::Gaussian(g)
    }
}

impl From<GmmScore> for ScoreModel {
    fn from(g: GmmScore) -> Self {
        ScoreModel::Gmm(g)
    }
}

impl From<ScoreNet> for ScoreModel {
    fn from(n: ScoreNet) -> Self {
        ScoreModel::Net(n)
    }
}

/// How noise levels enter each per-example loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelSampling {
    /// One level drawn uniformly per example.
    #[default]
    Uniform,
    /// Every level, averaged; one perturbation per level.
    AllLevels,
}

/// Perturbations drawn for one batch, in draw order.
struct Draws {
    /// `(example, level, z)`
    terms: Vec<(usize, usize, ImageTensor)>,
    per_example: usize,
}

fn draw_perturbations(
    batch: &[ImageTensor],
    schedule: &NoiseSchedule,
    sampling: LevelSampling,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Draws> {
    ensure_arg!(!batch.is_empty(), "score matching needs a non-empty batch");
    let shape = batch[0].shape();
    for x in batch {
        x.ensure_shape(shape)?;
    }
    let levels = schedule.levels();
    let mut terms = Vec::new();
    for (e, _) in batch.iter().enumerate() {
        match sampling {
            LevelSampling::Uniform => {
                let i = rng.random_range(0..levels);
                terms.push((e, i, standard_normal(shape, rng)));
            }
            LevelSampling::AllLevels => {
                for i in 0..levels {
                    terms.push((e, i, standard_normal(shape, rng)));
                }
            }
        }
    }
    let per_example = match sampling {
        LevelSampling::Uniform => 1,
        LevelSampling::AllLevels => levels,
    };
    Ok(Draws { terms, per_example })
}

/// `0.5 * ||sigma * s(x + sigma z) + z||^2` for one draw.
fn term_loss(model: &(impl Score + ?Sized), x: &ImageTensor, sigma: f64, z: &ImageTensor) -> Result<f64> {
    let noisy = x.zip_map(z, |a, b| a + sigma * b)?;
    let s = model.evaluate(&noisy, sigma)?;
    Ok(0.5
        * s.as_slice()
            .iter()
            .zip(z.as_slice())
            .map(|(v, n)| {
                let r = sigma * v + n;
                r * r
            })
            .sum::<f64>())
}

/// Monte Carlo denoising score matching loss, averaged over the batch.
pub fn dsm_loss(
    model: &(impl Score + ?Sized),
    batch: &[ImageTensor],
    schedule: &NoiseSchedule,
    sampling: LevelSampling,
    rng: &mut (impl Rng + ?Sized),
) -> Result<f64> {
    let draws = draw_perturbations(batch, schedule, sampling, rng)?;
    model.check_shape(batch[0].shape())?;
    let mut total = 0.0;
    for (e, i, z) in &draws.terms {
        total += term_loss(model, &batch[*e], schedule.sigma(*i), z)?;
    }
    Ok(total / (batch.len() * draws.per_example) as f64)
}

/// Loss and its gradient with respect to the network parameters.
///
/// Per-example terms run in parallel and are summed in draw order, so the
/// result does not depend on the thread count.
pub fn dsm_loss_and_grad(
    net: &ScoreNet,
    batch: &[ImageTensor],
    schedule: &NoiseSchedule,
    sampling: LevelSampling,
    rng: &mut (impl Rng + ?Sized),
) -> Result<(f64, Vec<f64>)> {
    let draws = draw_perturbations(batch, schedule, sampling, rng)?;
    Score::check_shape(net, batch[0].shape())?;
    let n = net.params().len();
    let parts: Vec<Result<(f64, Vec<f64>)>> = draws
        .terms
        .par_iter()
        .map(|(e, i, z)| term_grad(net, &batch[*e], schedule.sigma(*i), z, n))
        .collect();
    let scale = 1.0 / (batch.len() * draws.per_example) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

fn term_grad(net: &ScoreNet, x: &ImageTensor, sigma: f64, z: &ImageTensor, n: usize) -> Result<(f64, Vec<f64>)> {
    let noisy = x.zip_map(z, |a, b| a + sigma * b)?;
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    // sigma * s = f, so the residual is f + z
    net.forward_backward(
        &noisy,
        sigma,
        |f| {
            let r = f.zip_map(z, |a, b| a + b).expect("shapes agree");
            loss = 0.5 * r.norm_sq();
            r
        },
        &mut grad,
    )?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub level_sampling: LevelSampling,
    /// Learning rate at the last iteration as a fraction of the initial
    /// one, reached by linear decay. `1.0` keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 16,
            iterations: 2000,
            seed: 0,
            level_sampling: LevelSampling::Uniform,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive"
        );
        ensure_arg!((0.0..1.0).contains(&self.adam_beta1), "adam_beta1 must lie in [0, 1)");
        ensure_arg!((0.0..1.0).contains(&self.adam_beta2), "adam_beta2 must lie in [0, 1)");
        ensure_arg!(self.adam_epsilon > 0.0, "adam_epsilon must be positive");
        ensure_arg!(self.batch_size > 0, "batch size must be positive");
        ensure_arg!(
            (0.0..=1.0).contains(&self.final_lr_fraction),
            "final_lr_fraction must lie in [0, 1]"
        );
        Ok(())
    }

    fn lr_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.learning_rate;
        }
        let progress = iteration as f64 / (self.iterations - 1) as f64;
        self.learning_rate * (1.0 - progress * (1.0 - self.final_lr_fraction))
    }
}

/// Adam optimiser state.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            first: vec![0.0; n],
            second: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScoreNet,
    pub losses: Vec<f64>,
}

/// Fits `net` with Adam on mini-batches drawn with replacement from
/// `dataset`. Every draw comes from one generator seeded by `cfg.seed`.
pub fn train(net: ScoreNet, dataset: &[ImageTensor], schedule: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(net, dataset, schedule, cfg, |_, _| {})
}

pub fn train_with_progress(
    mut net: ScoreNet,
    dataset: &[ImageTensor],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_arg!(!dataset.is_empty(), "training needs a non-empty dataset");
    let shape = dataset[0].shape();
    for x in dataset {
        x.ensure_shape(shape)?;
    }
    Score::check_shape(&net, shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net.params().len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for it in 0..cfg.iterations {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(dataset[rng.random_range(0..dataset.len())].clone());
        }
        let (loss, grad) = dsm_loss_and_grad(&net, &batch, schedule, cfg.level_sampling, &mut rng)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: it, loss });
        }
        adam.step(net.params_mut(), &grad, cfg.lr_at(it));
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: it, loss });
        }
        losses.push(loss);
        progress(it, loss);
    }
    Ok(TrainOutcome { net, losses })
}

/// Optional corruption of the analytic gradient, for negative controls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GradHook {
    #[default]
    None,
    FlipSign,
    /// Scales every gradient entry by 1.01.
    Scale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for relative errors, so parameters with vanishing
/// gradients are judged on absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the backward pass against central differences of the
/// single-draw loss `0.5 ||f(x + sigma z) + z||^2` on at least 100 randomly
/// chosen parameters (all of them when there are fewer).
pub fn grad_check(net: &ScoreNet, x: &ImageTensor, sigma: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    grad_check_with_hook(net, x, sigma, tolerance, seed, GradHook::None)
}

pub fn grad_check_with_hook(
    net: &ScoreNet,
    x: &ImageTensor,
    sigma: f64,
    tolerance: f64,
    seed: u64,
    hook: GradHook,
) -> Result<GradCheckReport> {
    ensure_arg!(tolerance > 0.0, "tolerance must be positive");
    check_sigma(sigma)?;
    Score::check_shape(net, x.shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal(x.shape(), &mut rng);
    let n = net.params().len();
    let (_, mut grad) = term_grad(net, x, sigma, &z, n)?;
    match hook {
        GradHook::None => {}
        GradHook::FlipSign => grad.iter_mut().for_each(|g| *g = -*g),
        GradHook::Scale => grad.iter_mut().for_each(|g| *g *= 1.01),
    }
    let picked = sample_indices(&mut rng, n, n.min(128)).into_vec();
    let mut probe = net.clone();
    let mut worst = (0.0, picked[0]);
    for &p in &picked {
        let orig = probe.params()[p];
        probe.params_mut()[p] = orig + GRAD_CHECK_STEP;
        let up = term_loss(&probe, x, sigma, &z)?;
        probe.params_mut()[p] = orig - GRAD_CHECK_STEP;
        let down = term_loss(&probe, x, sigma, &z)?;
        probe.params_mut()[p] = orig;
        let fd = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let rel = (fd - grad[p]).abs() / (fd.abs().max(grad[p].abs()).max(GRAD_CHECK_FLOOR));
        if rel > worst.0 {
            worst = (rel, p);
        }
    }
    Ok(GradCheckReport {
        checked: picked.len(),
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    })
}

const CHECKPOINT_FORMAT: &str = "hgm-score-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON container for a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    /// Lift applied to the training images.
    #[serde(default)]
    pub transform: HighDimTransform,
    pub schedule: NoiseSchedule,
    pub train_seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(net: &ScoreNet, transform: HighDimTransform, schedule: &NoiseSchedule, train_seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: net.architecture().clone(),
            transform,
            schedule: schedule.clone(),
            train_seed,
            params: net.params().to_vec(),
        }
    }

    pub fn net(&self) -> Result<ScoreNet> {
        ScoreNet::from_params(self.architecture.clone(), self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        ck.architecture.validate()?;
        if ck.params.len() != ck.architecture.param_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                ck.architecture.param_count(),
                ck.params.len()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Mean squared error between `model` and `reference` scores at `sigma`
/// over `points`.
pub fn score_error(
    model: &(impl Score + ?Sized),
    reference: &(impl Score + ?Sized),
    points: &[ImageTensor],
    sigma: f64,
) -> Result<f64> {
    ensure_arg!(!points.is_empty(), "need at least one evaluation point");
    let mut total = 0.0;
    for x in points {
        let a = model.evaluate(x, sigma)?;
        let b = reference.evaluate(x, sigma)?;
        total += a.sub(&b)?.norm_sq();
    }
    Ok(total / points.len() as f64)
}
