//! Cosine forward-process noise schedule and the strided timestep subsequence
//! used by accelerated sampling.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// The two numbers that fully determine a [`NoiseSchedule`]; this is what gets
/// persisted alongside model weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub offset: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, offset: DEFAULT_COSINE_OFFSET }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.steps, self.offset)
    }
}

/// Per-timestep signal retention tables. `alpha_bar(0) == 1` so timestep 0 is
/// clean data; `beta(t)` is defined for `1..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    // None for tables built from explicit betas
    spec: Option<ScheduleSpec>,
    steps: usize,
    alpha_bar: Vec<f64>,
    // beta[t - 1] holds beta_t
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`,
    /// `alpha_bar_t = f(t)/f(0)`, with each beta clipped at [`MAX_BETA`] and
    /// alpha_bar rebuilt as the running product of `1 - beta`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule step count must be at least 1".into()));
        }
        if !(offset > 0.0 && offset < 1.0) {
            return Err(Error::Config(format!("cosine offset must lie in (0, 1), got {offset}")));
        }
        let total = steps as f64;
        let f = |t: usize| {
            let phase = (t as f64 / total + offset) / (1.0 + offset) * FRAC_PI_2;
            phase.cos().powi(2)
        };
        let f0 = f(0);
        let raw: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();

        let mut beta = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let b = (1.0 - raw[t] / raw[t - 1]).min(MAX_BETA);
            beta.push(b);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - b));
        }
        Ok(Self { spec: Some(ScheduleSpec { steps, offset }), steps, alpha_bar, beta })
    }

    /// Schedule from an explicit `beta_1..beta_T` table. Such schedules have no
    /// [`ScheduleSpec`] and cannot be embedded in a weights file.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("beta table must be nonempty".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b <= MAX_BETA)) {
            return Err(Error::Config(format!("beta {b} outside (0, {MAX_BETA}]")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for (i, b) in betas.iter().enumerate() {
            alpha_bar.push(alpha_bar[i] * (1.0 - b));
        }
        Ok(Self { spec: None, steps: betas.len(), alpha_bar, beta: betas })
    }

    pub fn spec(&self) -> Option<ScheduleSpec> {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Panics if `t > steps`.
    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Panics unless `1 <= t <= steps`.
    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1, "beta is undefined at t = 0");
        self.beta[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Posterior variance of `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let prev = self.alpha_bar(t - 1);
        let cur = self.alpha_bar(t);
        (1.0 - prev) / (1.0 - cur) * self.beta(t)
    }

    pub fn check_timestep(&self, t: usize, what: &str) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Domain(format!("{what}: timestep {t} exceeds {}", self.steps())));
        }
        Ok(())
    }

    pub(crate) fn check_positive_timestep(&self, t: usize, what: &str) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("{what}: timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Strictly increasing timesteps `[tau_1, ..., tau_S]` within `1..=T`; `tau_0 = 0` is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSubsequence {
    taus: Vec<usize>,
}

impl StepSubsequence {
    /// Multiples of `stride` up to `steps`, with `steps` appended when it is not a multiple.
    pub fn strided(steps: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("subsequence stride must be at least 1".into()));
        }
        if steps == 0 || stride > steps {
            return Err(Error::Config(format!("stride {stride} must lie in 1..={steps}")));
        }
        let mut taus: Vec<usize> = (1..=steps / stride).map(|k| k * stride).collect();
        if taus.last() != Some(&steps) {
            taus.push(steps);
        }
        Ok(Self { taus })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Largest timestep in the subsequence.
    pub fn last(&self) -> usize {
        *self.taus.last().expect("subsequence is never empty")
    }

    /// 1-based position of `t`, if it is a member.
    pub fn position(&self, t: usize) -> Option<usize> {
        self.taus.binary_search(&t).ok().map(|i| i + 1)
    }

    /// Timestep preceding position `i` (1-based); `tau_0 = 0`.
    pub fn previous(&self, i: usize) -> usize {
        if i <= 1 {
            0
        } else {
            self.taus[i - 2]
        }
    }
}
