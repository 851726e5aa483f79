//! Geometric noise-level ladder used for both training and annealed sampling.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};

/// Default ladder: ten levels from 1 down to 0.01, 80 steps per level and
/// base step 2e-5.
pub const DEFAULT_SIGMA_FIRST: f64 = 1.0;
pub const DEFAULT_SIGMA_LAST: f64 = 0.01;
pub const DEFAULT_LEVELS: usize = 10;
pub const DEFAULT_EPSILON: f64 = 2e-5;
pub const DEFAULT_STEPS: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    epsilon: f64,
    steps_per_level: usize,
}

impl NoiseSchedule {
    /// Builds `levels` noise levels geometrically spaced from `sigma_first`
    /// down to `sigma_last`.
    ///
    /// Interpolation happens in log space so the common ratio does not drift;
    /// both endpoints are stored exactly.
    pub fn geometric(
        sigma_first: f64,
        sigma_last: f64,
        levels: usize,
        epsilon: f64,
        steps: usize,
    ) -> Result<Self> {
        ensure_arg!(
            sigma_first.is_finite() && sigma_last.is_finite() && sigma_last > 0.0,
            "noise levels must be positive and finite (got {sigma_first}, {sigma_last})"
        );
        ensure_arg!(
            sigma_first >= sigma_last,
            "sigma_first ({sigma_first}) must be >= sigma_last ({sigma_last})"
        );
        ensure_arg!(levels >= 1, "at least one noise level is required");
        ensure_arg!(
            levels > 1 || sigma_first == sigma_last,
            "a single-level schedule needs sigma_first == sigma_last"
        );
        ensure_arg!(
            epsilon.is_finite() && epsilon > 0.0,
            "epsilon must be positive (got {epsilon})"
        );
        ensure_arg!(steps >= 1, "steps per level must be positive");

        let sigmas = if levels == 1 {
            vec![sigma_first]
        } else {
            let (lo, hi) = (sigma_first.ln(), sigma_last.ln());
            let span = (levels - 1) as f64;
            (0..levels)
                .map(|i| match i {
                    0 => sigma_first,
                    i if i == levels - 1 => sigma_last,
                    i => (lo + (hi - lo) * i as f64 / span).exp(),
                })
                .collect()
        };
        Ok(Self {
            sigmas,
            epsilon,
            steps_per_level: steps,
        })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn steps_per_level(&self) -> usize {
        self.steps_per_level
    }

    pub fn sigma(&self, level: usize) -> f64 {
        self.sigmas[level]
    }

    pub fn sigma_last(&self) -> f64 {
        *self.sigmas.last().expect("schedule is never empty")
    }

    /// Langevin step for a level: `epsilon * sigma_i^2 / sigma_L^2`.
    pub fn step_size(&self, level: usize) -> Result<f64> {
        ensure_arg!(
            level < self.sigmas.len(),
            "level index {level} out of range for {} levels",
            self.sigmas.len()
        );
        let ratio = self.sigmas[level] / self.sigma_last();
        Ok(self.epsilon * ratio * ratio)
    }

    /// Same ladder with a different number of steps per level.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        ensure_arg!(steps >= 1, "steps per level must be positive");
        Ok(Self {
            steps_per_level: steps,
            ..self.clone()
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::geometric(
            DEFAULT_SIGMA_FIRST,
            DEFAULT_SIGMA_LAST,
            DEFAULT_LEVELS,
            DEFAULT_EPSILON,
            DEFAULT_STEPS,
        )
        .expect("default schedule is valid")
    }
}

/// Free-function form of [`NoiseSchedule::geometric`].
pub fn make_noise_schedule(
    sigma_first: f64,
    sigma_last: f64,
    levels: usize,
    epsilon: f64,
    steps: usize,
) -> Result<NoiseSchedule> {
    NoiseSchedule::geometric(sigma_first, sigma_last, levels, epsilon, steps)
}

pub fn step_size(schedule: &NoiseSchedule, level: usize) -> Result<f64> {
    schedule.step_size(level)
}
