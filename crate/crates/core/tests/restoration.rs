use hgm_core::degradation::{data_fidelity_update, random_mask, DegradationOp, HARD_PROJECTION_LAMBDA};
use hgm_core::noise::{uniform, NoiseSource, ZeroNoise};
use hgm_core::sampler::{
    langevin_step, restore_basic, restore_basic_with, restore_progressive, restore_progressive_with, DcVariant,
};
use hgm_core::score::GaussianScore;
use hgm_core::synth::CorrelatedImageModel;
use hgm_core::{HighDimTransform, ImageTensor, NoiseSchedule, RestoreConfig, RestoreMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prior(side: usize) -> (CorrelatedImageModel, GaussianScore) {
    let m = CorrelatedImageModel::ar1((side, side, 1), 0.5, 0.9, 0.01);
    let g = GaussianScore::full(m.mean_tensor(), m.covariance()).unwrap();
    (m, g)
}

fn short_schedule(steps: usize) -> NoiseSchedule {
    NoiseSchedule::default().with_steps(steps).unwrap()
}

fn inpainting_case(seed: u64) -> (ImageTensor, DegradationOp, ImageTensor) {
    let (m, _) = prior(8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = m.sample(&mut rng).unwrap();
    let op = random_mask(8, 8, 1, 0.3, &mut rng).unwrap();
    let y = op.apply(&x, &mut ZeroNoise).unwrap();
    (x, op, y)
}

#[test]
fn fully_observed_images_are_returned_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = uniform((4, 4, 3), &mut rng);
    let op = DegradationOp::full(y.shape());
    let g = GaussianScore::isotropic(ImageTensor::filled((4, 4, 3), 0.5), 0.05).unwrap();
    for t in HighDimTransform::ALL {
        let lifted = g.lifted(t).unwrap();
        let cfg = RestoreConfig {
            transform: t,
            lambda_dc: HARD_PROJECTION_LAMBDA,
            schedule: short_schedule(10),
            ..RestoreConfig::default()
        };
        let r = restore_basic(&y, &op, &lifted, &cfg).unwrap();
        assert!(r.restored.max_abs_diff(&y).unwrap() <= 1e-5, "{t}");
        let p = restore_progressive(&y, &op, &g, &lifted, &cfg).unwrap();
        assert!(p.restored.max_abs_diff(&y).unwrap() <= 1e-5, "{t} progressive");
    }
}

#[test]
fn observed_entries_are_kept_under_hard_projection() {
    let (_, g) = prior(8);
    let (_, op, y) = inpainting_case(1);
    for t in [HighDimTransform::Identity, HighDimTransform::Copy, HighDimTransform::Pool, HighDimTransform::Dwt] {
        let cfg = RestoreConfig {
            transform: t,
            lambda_dc: HARD_PROJECTION_LAMBDA,
            schedule: short_schedule(20),
            ..RestoreConfig::default()
        };
        let r = restore_basic(&y, &op, &g.lifted(t).unwrap(), &cfg).unwrap();
        assert_eq!(r.restored.shape(), y.shape());
        for i in 0..y.len() {
            if op.observed(i) {
                assert!((r.restored.as_slice()[i] - y.as_slice()[i]).abs() <= 1e-5);
            }
        }
    }
}

/// The plain original-space loop, written out step by step.
fn reference_trace(y: &ImageTensor, op: &DegradationOp, g: &GaussianScore, cfg: &RestoreConfig) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = ImageTensor::zeros(y.shape());
    rng.fill_uniform(x.as_mut_slice());
    for i in 0..x.len() {
        if op.observed(i) {
            x.as_mut_slice()[i] = y.as_slice()[i];
        }
    }
    let s = &cfg.schedule;
    for level in 0..s.levels() {
        let sigma = s.sigma(level);
        let alpha = s.step_size(level).unwrap();
        for _ in 0..s.steps_per_level() {
            let score = g.evaluate(&x, sigma).unwrap();
            let mut z = vec![0.0; x.len()];
            rng.fill_standard_normal(&mut z);
            for i in 0..x.len() {
                let v = x.as_slice()[i] + alpha / 2.0 * score.as_slice()[i] + alpha.sqrt() * z[i];
                x.as_mut_slice()[i] = if op.observed(i) {
                    (cfg.lambda_dc * y.as_slice()[i] + v) / (cfg.lambda_dc + 1.0)
                } else {
                    v
                };
            }
        }
    }
    x
}

#[test]
fn identity_lift_matches_the_plain_loop() {
    let (_, g) = prior(6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let op = random_mask(6, 6, 1, 0.4, &mut rng).unwrap();
    let y = op.apply(&uniform((6, 6, 1), &mut rng), &mut ZeroNoise).unwrap();
    let cfg = RestoreConfig {
        lambda_dc: 3.0,
        schedule: short_schedule(7),
        seed: 11,
        ..RestoreConfig::default()
    };
    let r = restore_basic(&y, &op, &g, &cfg).unwrap();
    assert_eq!(r.restored, reference_trace(&y, &op, &g, &cfg));
}

#[test]
fn progressive_without_data_term_follows_basic() {
    let (_, g) = prior(4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let op = random_mask(4, 4, 1, 0.5, &mut rng).unwrap();
    let y = op.apply(&uniform((4, 4, 1), &mut rng), &mut ZeroNoise).unwrap();
    for t in [HighDimTransform::Identity, HighDimTransform::Copy, HighDimTransform::Pool] {
        let lifted = g.lifted(t).unwrap();
        let cfg = RestoreConfig {
            transform: t,
            lambda_dc: 0.0,
            schedule: short_schedule(5),
            seed: 4,
            snapshots: true,
            ..RestoreConfig::default()
        };
        let basic = restore_basic(&y, &op, &lifted, &cfg).unwrap();
        let prog = restore_progressive(
            &y,
            &op,
            &g,
            &lifted,
            &RestoreConfig {
                mode: RestoreMode::Progressive,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(basic.restored, prog.restored, "{t}");
        assert_eq!(basic.per_level_snapshots, prog.per_level_snapshots);
    }
}

#[test]
fn restoration_is_deterministic() {
    let (_, g) = prior(8);
    let (_, op, y) = inpainting_case(5);
    let lifted = g.lifted(HighDimTransform::Pool).unwrap();
    let cfg = RestoreConfig {
        transform: HighDimTransform::Pool,
        schedule: short_schedule(10),
        seed: 8,
        ..RestoreConfig::default()
    };
    let a = restore_basic(&y, &op, &lifted, &cfg).unwrap();
    let b = restore_basic(&y, &op, &lifted, &cfg).unwrap();
    assert_eq!(a.restored, b.restored);
    let c = restore_basic(&y, &op, &lifted, &RestoreConfig { seed: 9, ..cfg.clone() }).unwrap();
    assert_ne!(a.restored, c.restored);
    let p1 = restore_progressive(&y, &op, &g, &lifted, &cfg).unwrap();
    let p2 = restore_progressive(&y, &op, &g, &lifted, &cfg).unwrap();
    assert_eq!(p1.restored, p2.restored);
}

#[test]
fn external_noise_sources_drive_both_modes() {
    let (_, g) = prior(4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let op = random_mask(4, 4, 1, 0.5, &mut rng).unwrap();
    let y = op.apply(&uniform((4, 4, 1), &mut rng), &mut ZeroNoise).unwrap();
    let cfg = RestoreConfig {
        schedule: short_schedule(3),
        ..RestoreConfig::default()
    };
    let a = restore_basic_with(&y, &op, &g, &cfg, &mut ZeroNoise).unwrap();
    let b = restore_basic_with(&y, &op, &g, &cfg, &mut ZeroNoise).unwrap();
    assert_eq!(a.restored, b.restored);
    let p = restore_progressive_with(&y, &op, &g, &g, &cfg, &mut ZeroNoise, &mut ZeroNoise).unwrap();
    assert!(p.restored.is_finite());
    let m = restore_progressive(
        &y,
        &op,
        &g,
        &g,
        &RestoreConfig {
            dc_variant: DcVariant::Masked,
            ..cfg
        },
    )
    .unwrap();
    assert!(m.restored.is_finite());
}

#[test]
fn model_shape_must_match_the_lift() {
    let (_, g) = prior(4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let op = random_mask(4, 4, 1, 0.5, &mut rng).unwrap();
    let y = op.apply(&uniform((4, 4, 1), &mut rng), &mut ZeroNoise).unwrap();
    let cfg = RestoreConfig {
        transform: HighDimTransform::Copy,
        schedule: short_schedule(2),
        ..RestoreConfig::default()
    };
    assert!(restore_basic(&y, &op, &g, &cfg).is_err());
}

/// Draws standard normals for the first half of each pixel's channels and
/// repeats them for the second half.
struct Mirrored<R> {
    rng: R,
    channels: usize,
}

impl<R: rand::Rng> NoiseSource for Mirrored<R> {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        let c = self.channels;
        for px in out.chunks_mut(2 * c) {
            self.rng.fill_standard_normal(&mut px[..c]);
            let (a, b) = px.split_at_mut(c);
            b.copy_from_slice(a);
        }
    }

    fn fill_uniform(&mut self, out: &mut [f64]) {
        self.rng.fill_uniform(out);
    }
}

#[test]
fn copy_halves_stay_equal_under_mirrored_noise() {
    let m = CorrelatedImageModel {
        height: 4,
        width: 4,
        channels: 3,
        mean: 0.5,
        rho: 0.8,
        luma_variance: 0.02,
        chroma_variance: 0.002,
    };
    let g = GaussianScore::full(m.mean_tensor(), m.covariance()).unwrap();
    let lifted = g.lifted(HighDimTransform::Copy).unwrap();
    let mut noise = Mirrored {
        rng: ChaCha8Rng::seed_from_u64(8),
        channels: 3,
    };
    let mut x = HighDimTransform::Copy.forward(&uniform((4, 4, 3), &mut noise)).unwrap();
    let s = short_schedule(5);
    let halves = |x: &ImageTensor| -> f64 {
        x.as_slice()
            .chunks(6)
            .map(|p| (0..3).map(|c| (p[c] - p[c + 3]).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let op = random_mask(4, 4, 3, 0.5, &mut rng).unwrap();
    let y = op.apply(&m.sample(&mut rng).unwrap(), &mut ZeroNoise).unwrap();
    for level in 0..s.levels() {
        let alpha = s.step_size(level).unwrap();
        for _ in 0..s.steps_per_level() {
            let score = lifted.evaluate(&x, s.sigma(level)).unwrap();
            x = langevin_step(&x, &score, alpha, &mut noise).unwrap();
            assert!(halves(&x) < 1e-9, "{}", halves(&x));
            let back = data_fidelity_update(&x, &y, &op, 2.0, HighDimTransform::Copy).unwrap();
            x = HighDimTransform::Copy.forward(&back).unwrap();
        }
    }
}

#[test]
fn error_to_posterior_mean_shrinks_level_by_level() {
    let (_, g) = prior(8);
    let (_, op, y) = inpainting_case(10);
    let oracle = g.conditional_mean(&y, &op).unwrap();
    let levels = NoiseSchedule::default().levels();
    let mut mse = vec![0.0; levels];
    for seed in 0..16 {
        let cfg = RestoreConfig {
            lambda_dc: HARD_PROJECTION_LAMBDA,
            seed,
            snapshots: true,
            ..RestoreConfig::default()
        };
        let r = restore_basic(&y, &op, &g, &cfg).unwrap();
        for (l, snap) in r.per_level_snapshots.unwrap().iter().enumerate() {
            mse[l] += snap.sub(&oracle).unwrap().norm_sq() / snap.len() as f64 / 16.0;
        }
    }
    for w in mse.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{mse:?}");
    }
}
