//! Flow-matching denoising loop with dual-path cross-attention guidance.
//!
//! The forward process interpolates `x = (1 - sigma) * x0 + sigma * noise` and
//! the model predicts a velocity that an Euler step follows from one noise
//! level to the next. Noise levels come from the shifted map
//! `sigma(u) = s * u / (1 + (s - 1) * u)` over `u` linearly spaced `1 -> 0`.
//!
//! In dual-path mode each step runs the conditional pass twice over the same
//! input latent: a full-attention forward whose per-block cross-attention
//! outputs are cached, and a window-attention forward that has its own cross
//! outputs overridden by the cache. The full forward is refreshed every `P`
//! steps, counted from the first refinement step. The unconditional pass runs
//! window-only unless configured otherwise.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{entropy_scale, AttentionScale};
use crate::dit::{
    predict_velocity, AttentionMode, CrossOutputs, ModelWeights, Override, TextContext,
};
use crate::error::{Error, Result};
use crate::flops::{flops_estimate, full_attention_flops};
use crate::grid::TokenGrid;
use crate::latent::LatentField;
use crate::mask::WindowSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub num_steps: usize,
    pub flow_shift: f64,
    pub strength: f64,
    pub guidance_scale: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            num_steps: 50,
            flow_shift: 9.0,
            strength: 0.7,
            guidance_scale: 5.0,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Domain("num_steps must be >= 1".into()));
        }
        if !(self.flow_shift.is_finite() && self.flow_shift > 0.0) {
            return Err(Error::Domain(format!(
                "flow_shift must be positive, got {}",
                self.flow_shift
            )));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::Domain(format!(
                "strength must lie in (0, 1], got {}",
                self.strength
            )));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::Domain(format!(
                "guidance_scale must be non-negative, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// How the self-attention logit scale is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ScaleMode {
    InverseSqrtD,
    /// Entropy scaling against a native spatial token count; the target is
    /// the spatial token count of the grid being denoised.
    Entropy {
        native_tokens: usize,
    },
}

impl ScaleMode {
    pub fn resolve(&self, grid: &TokenGrid, head_dim: usize) -> Result<AttentionScale> {
        match *self {
            ScaleMode::InverseSqrtD => Ok(AttentionScale::inverse_sqrt(head_dim)),
            ScaleMode::Entropy { native_tokens } => {
                entropy_scale(native_tokens, grid.spatial_count(), head_dim)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualPathConfig {
    pub lambda: f64,
    pub cache_period: usize,
    pub dual_path_on_uncond: bool,
    pub window: WindowSpec,
    pub scale_mode: ScaleMode,
}

impl DualPathConfig {
    /// `lambda = 1`, `P = 2`, window-only unconditional pass, `1/sqrt(d)`.
    pub fn new(window: WindowSpec) -> Self {
        Self {
            lambda: 1.0,
            cache_period: 2,
            dual_path_on_uncond: false,
            window,
            scale_mode: ScaleMode::InverseSqrtD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Domain(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.cache_period == 0 {
            return Err(Error::Domain("cache_period must be >= 1".into()));
        }
        Ok(())
    }
}

/// Full-branch cross outputs held between refreshes.
#[derive(Debug, Clone, Default)]
pub struct CacheState {
    entry: Option<(usize, CrossOutputs)>,
}

impl CacheState {
    pub fn store(&mut self, step: usize, outputs: CrossOutputs) {
        self.entry = Some((step, outputs));
    }

    pub fn cached(&self) -> Option<&CrossOutputs> {
        self.entry.as_ref().map(|(_, c)| c)
    }

    pub fn refreshed_at_step(&self) -> Option<usize> {
        self.entry.as_ref().map(|(s, _)| *s)
    }
}

/// `num_steps + 1` shifted noise levels from 1 down to 0.
pub fn sigma_schedule(spec: &ScheduleSpec) -> Vec<f64> {
    let n = spec.num_steps;
    let s = spec.flow_shift;
    (0..=n)
        .map(|i| {
            let u = (n - i) as f64 / n as f64;
            s * u / (1.0 + (s - 1.0) * u)
        })
        .collect()
}

/// First step of the refinement: `round(num_steps * (1 - strength))`, capped
/// so at least one step runs.
pub fn start_step(spec: &ScheduleSpec) -> usize {
    let raw = (spec.num_steps as f64 * (1.0 - spec.strength)).round() as usize;
    raw.min(spec.num_steps - 1)
}

/// Flow-matching interpolation `(1 - sigma) * x0 + sigma * noise`.
pub fn add_noise(latent: &LatentField, sigma: f64, noise: &LatentField) -> Result<LatentField> {
    latent.same_shape(noise)?;
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!(
            "sigma must lie in [0, 1], got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(latent.clone());
    }
    if sigma == 1.0 {
        return Ok(noise.clone());
    }
    let values = latent.values() * (1.0 - sigma) + noise.values() * sigma;
    LatentField::new(*latent.grid(), values)
}

/// True on the steps where the full branch is recomputed.
pub fn should_refresh(step_offset: usize, period: usize) -> bool {
    step_offset.is_multiple_of(period)
}

/// Self-attention routing of a denoising run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    /// Ordinary CFG with one attention mode for both passes.
    Plain {
        mode: AttentionMode,
        scale_mode: ScaleMode,
    },
    /// Dual-path guidance, reusing full-branch outputs between refreshes.
    DualPath(DualPathConfig),
    /// Dual-path guidance recomputing the full branch every step without
    /// going through the cache.
    DualPathUncached(DualPathConfig),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchTimings {
    pub cond_full_ms: f64,
    pub cond_window_ms: f64,
    pub uncond_full_ms: f64,
    pub uncond_window_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub sigma: f64,
    pub sigma_next: f64,
    /// Full-attention forwards executed on the conditional pass (0 or 1).
    pub cond_full_forwards: usize,
    /// Full-attention forwards executed on the unconditional pass (0 or 1).
    pub uncond_full_forwards: usize,
    pub window_forwards: usize,
    /// Step whose full-branch outputs guided this step's conditional pass.
    pub cond_guidance_from: Option<usize>,
    pub uncond_guidance_from: Option<usize>,
    pub self_attention_flops: f64,
    pub timings: BranchTimings,
}

impl StepTrace {
    pub fn full_forwards(&self) -> usize {
        self.cond_full_forwards + self.uncond_full_forwards
    }
}

/// Per-step record of a denoising run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub start_step: usize,
    pub num_steps: usize,
    pub steps: Vec<StepTrace>,
    pub total_ms: f64,
}

impl RunTrace {
    pub fn cond_full_refreshes(&self) -> usize {
        self.steps.iter().map(|s| s.cond_full_forwards).sum()
    }

    pub fn uncond_full_refreshes(&self) -> usize {
        self.steps.iter().map(|s| s.uncond_full_forwards).sum()
    }

    pub fn full_forwards(&self) -> usize {
        self.cond_full_refreshes() + self.uncond_full_refreshes()
    }

    pub fn full_forwards_per_step(&self) -> f64 {
        self.full_forwards() as f64 / self.steps.len() as f64
    }

    /// Largest gap between a step and the step its guidance came from.
    pub fn max_staleness(&self) -> usize {
        self.steps
            .iter()
            .flat_map(|s| {
                [s.cond_guidance_from, s.uncond_guidance_from]
                    .into_iter()
                    .flatten()
                    .map(move |from| s.step - from)
            })
            .max()
            .unwrap_or(0)
    }

    /// Wall-clock fields zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut t = self.clone();
        t.total_ms = 0.0;
        for s in &mut t.steps {
            s.timings = BranchTimings::default();
        }
        t
    }
}

/// Full-branch forwards a dual-path run of `steps` refinement steps performs:
/// `(conditional, unconditional)`.
pub fn planned_full_forwards(steps: usize, config: &DualPathConfig) -> (usize, usize) {
    let cond = steps.div_ceil(config.cache_period);
    (cond, if config.dual_path_on_uncond { cond } else { 0 })
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t0 = Instant::now();
    let out = f()?;
    Ok((out, t0.elapsed().as_secs_f64() * 1e3))
}

struct Forward<'a> {
    weights: &'a ModelWeights,
    scale: AttentionScale,
    full_flops: f64,
    window_flops: f64,
}

impl Forward<'_> {
    fn run(
        &self,
        x: &LatentField,
        sigma: f64,
        text: &TextContext,
        mode: AttentionMode,
        guide: Option<Override<'_>>,
    ) -> Result<((LatentField, CrossOutputs), f64)> {
        timed(|| predict_velocity(x, sigma, text, self.weights, mode, self.scale, guide))
    }
}

/// One pass (conditional or unconditional) of a dual-path step. Returns the
/// velocity, whether a full forward ran, the guidance step, and timings.
#[allow(clippy::too_many_arguments)]
fn dual_pass(
    fwd: &Forward<'_>,
    x: &LatentField,
    sigma: f64,
    step: usize,
    text: &TextContext,
    config: &DualPathConfig,
    refresh: bool,
    cache: Option<&mut CacheState>,
) -> Result<(LatentField, bool, Option<usize>, f64, f64)> {
    let window = AttentionMode::Window(config.window);
    let mut full_ms = 0.0;
    let mut fresh = None;
    if refresh || cache.is_none() {
        let ((_, cross), ms) = fwd.run(x, sigma, text, AttentionMode::Full, None)?;
        full_ms = ms;
        fresh = Some(cross);
    }
    let (source, from, ran_full) = match cache {
        Some(cache) => {
            let ran = fresh.is_some();
            if let Some(cross) = fresh {
                cache.store(step, cross);
            }
            let from = cache.refreshed_at_step();
            let cached = cache.cached().ok_or_else(|| {
                Error::Domain("full-branch cache read before first refresh".into())
            })?;
            (cached.clone(), from, ran)
        }
        None => (
            fresh.expect("uncached pass always runs the full branch"),
            Some(step),
            true,
        ),
    };
    let guide = Override {
        source: &source,
        lambda: config.lambda,
    };
    let ((v, _), window_ms) = fwd.run(x, sigma, text, window, Some(guide))?;
    Ok((v, ran_full, from, full_ms, window_ms))
}

/// Runs steps `[start, num_steps)` of the schedule from `noisy`, which must
/// sit at noise level `sigma_schedule(spec)[start]`.
pub fn denoise(
    noisy: &LatentField,
    text: &TextContext,
    null_text: &TextContext,
    spec: &ScheduleSpec,
    start: usize,
    sampler: Sampler,
    weights: &ModelWeights,
) -> Result<(LatentField, RunTrace)> {
    spec.validate()?;
    if start >= spec.num_steps {
        return Err(Error::Domain(format!(
            "start step {start} beyond schedule of {} steps",
            spec.num_steps
        )));
    }
    let grid = *noisy.grid();
    let dims = &weights.dims;
    let scale_mode = match &sampler {
        Sampler::Plain { scale_mode, .. } => *scale_mode,
        Sampler::DualPath(c) | Sampler::DualPathUncached(c) => {
            c.validate()?;
            c.scale_mode
        }
    };
    let window = match &sampler {
        Sampler::Plain {
            mode: AttentionMode::Window(w),
            ..
        } => Some(*w),
        Sampler::Plain { .. } => None,
        Sampler::DualPath(c) | Sampler::DualPathUncached(c) => Some(c.window),
    };
    let full_flops = full_attention_flops(&grid, dims.head_dim, dims.heads, dims.blocks);
    let window_flops = window
        .map(|w| flops_estimate(&grid, &w, dims.head_dim, dims.heads, dims.blocks).window)
        .unwrap_or(0.0);
    let fwd = Forward {
        weights,
        scale: scale_mode.resolve(&grid, dims.head_dim)?,
        full_flops: full_flops as f64,
        window_flops,
    };

    let sigmas = sigma_schedule(spec);
    let mut cond_cache = CacheState::default();
    let mut uncond_cache = CacheState::default();
    let mut x = noisy.clone();
    let mut steps = Vec::with_capacity(spec.num_steps - start);
    let run_start = Instant::now();

    for (offset, step) in (start..spec.num_steps).enumerate() {
        let (sigma, sigma_next) = (sigmas[step], sigmas[step + 1]);
        let mut timings = BranchTimings::default();
        let mut trace = StepTrace {
            step,
            sigma,
            sigma_next,
            cond_full_forwards: 0,
            uncond_full_forwards: 0,
            window_forwards: 0,
            cond_guidance_from: None,
            uncond_guidance_from: None,
            self_attention_flops: 0.0,
            timings,
        };

        let (v_cond, v_uncond) = match sampler {
            Sampler::Plain { mode, .. } => {
                let ((v_c, _), c_ms) = fwd.run(&x, sigma, text, mode, None)?;
                let ((v_u, _), u_ms) = fwd.run(&x, sigma, null_text, mode, None)?;
                match mode {
                    AttentionMode::Full => {
                        trace.cond_full_forwards = 1;
                        trace.uncond_full_forwards = 1;
                        timings.cond_full_ms = c_ms;
                        timings.uncond_full_ms = u_ms;
                    }
                    AttentionMode::Window(_) => {
                        trace.window_forwards = 2;
                        timings.cond_window_ms = c_ms;
                        timings.uncond_window_ms = u_ms;
                    }
                }
                (v_c, v_u)
            }
            Sampler::DualPath(config) | Sampler::DualPathUncached(config) => {
                let cached = matches!(sampler, Sampler::DualPath(_));
                let refresh = !cached || should_refresh(offset, config.cache_period);

                let (v_c, ran, from, full_ms, win_ms) = dual_pass(
                    &fwd,
                    &x,
                    sigma,
                    step,
                    text,
                    &config,
                    refresh,
                    cached.then_some(&mut cond_cache),
                )?;
                trace.cond_full_forwards = ran as usize;
                trace.cond_guidance_from = from;
                trace.window_forwards += 1;
                timings.cond_full_ms = full_ms;
                timings.cond_window_ms = win_ms;

                let v_u = if config.dual_path_on_uncond {
                    let (v_u, ran, from, full_ms, win_ms) = dual_pass(
                        &fwd,
                        &x,
                        sigma,
                        step,
                        null_text,
                        &config,
                        refresh,
                        cached.then_some(&mut uncond_cache),
                    )?;
                    trace.uncond_full_forwards = ran as usize;
                    trace.uncond_guidance_from = from;
                    timings.uncond_full_ms = full_ms;
                    timings.uncond_window_ms = win_ms;
                    v_u
                } else {
                    let window = AttentionMode::Window(config.window);
                    let ((v_u, _), ms) = fwd.run(&x, sigma, null_text, window, None)?;
                    timings.uncond_window_ms = ms;
                    v_u
                };
                trace.window_forwards += 1;
                (v_c, v_u)
            }
        };

        // v = v_u + g * (v_c - v_u)
        let diff = v_cond.axpy(-1.0, &v_uncond)?;
        let velocity = v_uncond.axpy(spec.guidance_scale, &diff)?;
        x = x.axpy(sigma_next - sigma, &velocity)?;

        trace.self_attention_flops = trace.full_forwards() as f64 * fwd.full_flops
            + trace.window_forwards as f64 * fwd.window_flops;
        trace.timings = timings;
        steps.push(trace);
    }

    Ok((
        x,
        RunTrace {
            start_step: start,
            num_steps: spec.num_steps,
            steps,
            total_ms: run_start.elapsed().as_secs_f64() * 1e3,
        },
    ))
}

/// SDEdit-style refinement: dual-path denoising from `start_step(spec)`.
pub fn denoise_dual_path(
    noisy: &LatentField,
    text: &TextContext,
    null_text: &TextContext,
    spec: &ScheduleSpec,
    config: &DualPathConfig,
    weights: &ModelWeights,
) -> Result<(LatentField, RunTrace)> {
    denoise(
        noisy,
        text,
        null_text,
        spec,
        start_step(spec),
        Sampler::DualPath(*config),
        weights,
    )
}
