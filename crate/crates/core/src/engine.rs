//! Forward noising, the deterministic reverse step, and the slow and fast
//! fading denoising loops.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::EqualizedOutput;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::signal::LatentVector;
use crate::source::ConditioningVector;

fn check_level(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(v >= lo && v <= hi) {
        return Err(Error::Domain(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// `√(1−β̄)·f₀ + √β̄·n`.
pub fn forward_noise<R: Rng + ?Sized>(f0: &[f64], noise_level: f64, rng: &mut R) -> Result<LatentVector> {
    check_level("noise level", noise_level, 0.0, 1.0)?;
    let a = (1.0 - noise_level).sqrt();
    let b = noise_level.sqrt();
    Ok(f0
        .iter()
        .map(|f| a * f + b * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Draw from `q(f_t | f_s)` for `β̄_s ≤ β̄_t`.
pub fn forward_bridge<R: Rng + ?Sized>(f_s: &[f64], level_s: f64, level_t: f64, rng: &mut R) -> Result<LatentVector> {
    check_level("level_s", level_s, 0.0, 1.0)?;
    check_level("level_t", level_t, level_s, 1.0)?;
    if level_s == 1.0 {
        return Err(Error::Domain("cannot bridge from pure noise".into()));
    }
    let ratio = (1.0 - level_t) / (1.0 - level_s);
    let a = ratio.sqrt();
    let b = (1.0 - ratio).max(0.0).sqrt();
    Ok(f_s
        .iter()
        .map(|f| a * f + b * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Deterministic reverse step from level `β̄_t` to `β̄_s`:
/// `√(β̄_s/β̄_t)·f_t + (√(1−β̄_s) − √(β̄_s(1−β̄_t)/β̄_t))·f̂₀`.
pub fn reverse_step(f_t: &[f64], level_t: f64, level_s: f64, f0_hat: &[f64]) -> Result<LatentVector> {
    if f_t.len() != f0_hat.len() {
        return Err(Error::InvalidShape("state and estimate differ in length".into()));
    }
    if !(level_t > 0.0 && level_t <= 1.0) {
        return Err(Error::Domain(format!("level_t = {level_t} outside (0, 1]")));
    }
    if !(level_s >= 0.0 && level_s < level_t) {
        return Err(Error::Domain(format!(
            "need 0 <= level_s < level_t, got {level_s} and {level_t}"
        )));
    }
    let c_t = (level_s / level_t).sqrt();
    let c_0 = (1.0 - level_s).sqrt() - (level_s * (1.0 - level_t) / level_t).sqrt();
    Ok(f_t.iter().zip(f0_hat).map(|(f, e)| c_t * f + c_0 * e).collect())
}

/// How successive times are spaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `T` equal steps from the matched time `m` down to zero.
    Proportional,
    /// Steps of `1/T`, the last one shortened to land on zero.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub slow_rule: StepRule,
    pub fast_rule: StepRule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            slow_rule: StepRule::Proportional,
            fast_rule: StepRule::Unit,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }
}

const SNAP: f64 = 1e-12;

/// Times `m = t_0 > t_1 > … > t_K = 0`.
pub fn step_times(start: f64, steps: usize, rule: StepRule) -> Vec<f64> {
    let big_t = steps as f64;
    match rule {
        StepRule::Proportional => (0..=steps)
            .map(|k| match k {
                0 => start,
                k if k == steps => 0.0,
                k => start * (steps - k) as f64 / big_t,
            })
            .collect(),
        StepRule::Unit => {
            let mut out = vec![start];
            let mut k = 1usize;
            loop {
                let t = start - k as f64 / big_t;
                if t <= SNAP {
                    out.push(0.0);
                    break;
                }
                out.push(t);
                k += 1;
            }
            out
        }
    }
}

/// Noise levels along `times`; the first one is pinned to `start_level` so
/// the loop begins exactly at the observed level.
fn levels_along(schedule: &NoiseSchedule, times: &[f64], start_level: f64) -> Vec<f64> {
    let mut levels: Vec<f64> = times.iter().map(|&t| schedule.level(t)).collect();
    levels[0] = start_level;
    levels
}

/// Uniform-noise denoising (AWGN or slow fading): start at `S⁻¹(d)` and
/// apply the reverse step down to zero.
///
/// When the matched time is below `1/T` the input is returned unchanged.
pub fn denoise_slow(
    eq: &EqualizedOutput,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cond: Option<&ConditioningVector>,
) -> Result<LatentVector> {
    sampler.validate()?;
    let d = eq
        .uniform_noise_level()
        .ok_or_else(|| Error::Domain("slow denoising needs one shared noise level".into()))?;
    let m = schedule.invert_noise_level(d)?;
    if m < 1.0 / sampler.steps as f64 {
        return Ok(eq.values.clone());
    }
    let times = step_times(m, sampler.steps, sampler.slow_rule);
    let levels = levels_along(schedule, &times, d);
    let mut f = eq.values.clone();
    for w in levels.windows(2) {
        let f0_hat = model.denoise(&f, w[0], cond)?;
        f = reverse_step(&f, w[0], w[1], &f0_hat)?;
    }
    Ok(f)
}

/// Raises every element to level `β̄_t` with fresh noise:
/// `√((1−β̄_t)/(1−b))·f + √(β̄_t − b(1−β̄_t)/(1−b))·ε`.
///
/// Elements already at `β̄_t` are copied as is. One normal draw is consumed
/// per element either way.
pub fn water_fill<R: Rng + ?Sized>(state: &[f64], tracked: &[f64], level_t: f64, rng: &mut R) -> Result<LatentVector> {
    if state.len() != tracked.len() {
        return Err(Error::InvalidShape("state and tracked levels differ in length".into()));
    }
    state
        .iter()
        .zip(tracked)
        .map(|(&f, &b)| {
            let eps: f64 = rng.sample(StandardNormal);
            if b > level_t {
                return Err(Error::InvariantViolation(format!(
                    "tracked level {b} above target {level_t}"
                )));
            }
            if b == level_t {
                return Ok(f);
            }
            let keep = 1.0 - level_t;
            let c1 = (keep / (1.0 - b)).sqrt();
            let c2 = (level_t - b * keep / (1.0 - b)).max(0.0).sqrt();
            Ok(c1 * f + c2 * eps)
        })
        .collect()
}

/// Per-iteration record of the fast fading loop.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t: f64,
    pub s: f64,
    pub level_t: f64,
    pub level_s: f64,
    pub tracked_before: Vec<f64>,
    pub tracked_after: Vec<f64>,
    pub state_before: Vec<f64>,
    pub state_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FastTrace {
    pub iterations: Vec<IterationRecord>,
}

/// Heterogeneous-noise denoising (fast fading, masking).
///
/// Each element carries its own tracked level `b_i`, starting at `d_i`. An
/// iteration optionally water-fills to `β̄_t`, denoises, takes a reverse
/// step to `β̄_s`, and then updates only the elements with `b_i ≥ β̄_s`.
pub fn denoise_fast<R: Rng + ?Sized>(
    eq: &EqualizedOutput,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cond: Option<&ConditioningVector>,
    fill: bool,
    rng: &mut R,
) -> Result<LatentVector> {
    run_fast(eq, model, schedule, sampler, cond, fill, rng, None)
}

/// [`denoise_fast`] that also returns every iteration's state.
#[allow(clippy::too_many_arguments)]
pub fn denoise_fast_traced<R: Rng + ?Sized>(
    eq: &EqualizedOutput,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cond: Option<&ConditioningVector>,
    fill: bool,
    rng: &mut R,
) -> Result<(LatentVector, FastTrace)> {
    let mut trace = FastTrace::default();
    let out = run_fast(eq, model, schedule, sampler, cond, fill, rng, Some(&mut trace))?;
    Ok((out, trace))
}

#[allow(clippy::too_many_arguments)]
fn run_fast<R: Rng + ?Sized>(
    eq: &EqualizedOutput,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cond: Option<&ConditioningVector>,
    fill: bool,
    rng: &mut R,
    mut trace: Option<&mut FastTrace>,
) -> Result<LatentVector> {
    sampler.validate()?;
    if eq.noise_levels.len() != eq.values.len() {
        return Err(Error::InvalidShape("one noise level per element required".into()));
    }
    if eq.values.is_empty() {
        return Ok(eq.values.clone());
    }
    let d_max = eq.max_noise_level();
    let m = schedule.invert_noise_level(d_max)?;
    if m < 1.0 / sampler.steps as f64 {
        return Ok(eq.values.clone());
    }
    let times = step_times(m, sampler.steps, sampler.fast_rule);
    let levels = levels_along(schedule, &times, d_max);
    let mut f = eq.values.clone();
    let mut b = eq.noise_levels.clone();
    for k in 0..levels.len() - 1 {
        let (level_t, level_s) = (levels[k], levels[k + 1]);
        if let Some(bad) = b.iter().find(|&&x| x > level_t) {
            return Err(Error::InvariantViolation(format!(
                "tracked level {bad} above {level_t} at t = {}",
                times[k]
            )));
        }
        let tracked_before = trace.is_some().then(|| b.clone());
        let state_before = trace.is_some().then(|| f.values().to_vec());
        let g = if fill {
            water_fill(&f, &b, level_t, rng)?
        } else {
            f.clone()
        };
        let f0_hat = model.denoise(&g, level_t, cond)?;
        let g_s = reverse_step(&g, level_t, level_s, &f0_hat)?;
        for i in 0..f.len() {
            if b[i] >= level_s {
                f[i] = g_s[i];
                b[i] = level_s;
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.iterations.push(IterationRecord {
                t: times[k],
                s: times[k + 1],
                level_t,
                level_s,
                tracked_before: tracked_before.unwrap_or_default(),
                tracked_after: b.clone(),
                state_before: state_before.unwrap_or_default(),
                state_after: f.values().to_vec(),
            });
        }
    }
    Ok(f)
}
