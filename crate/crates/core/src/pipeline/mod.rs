//! Coarse-to-fine driver.
//!
//! Stage one denoises pure noise at the native grid with full attention and
//! plain CFG. Stage two upsamples that result to the target grid, re-noises it
//! to the level of the refinement's first step and runs dual-path denoising
//! over the rest of the schedule.

pub mod config;
pub mod report;
pub mod upsample;

use std::time::Instant;

use crate::dit::{AttentionMode, ModelWeights, TextContext};
use crate::error::Result;
use crate::flops::flops_estimate;
use crate::latent::LatentField;
use crate::mask::sparsity;
use crate::scheduler::{
    add_noise, denoise, planned_full_forwards, sigma_schedule, start_step, RunTrace, Sampler,
};

pub use config::{parse_config, ConfigError, PipelineConfig};
pub use report::Report;
pub use upsample::{upsample_latent, UpsampleMethod};

use report::{ConfigEcho, FlopsReport, MaskStats, RefinementPlan, RunSummary, StepReport};

const TEXT_SEED_SALT: u64 = 0x7465_7874;
const STAGE_ONE_STREAM: u64 = 0;
const STAGE_TWO_STREAM: u64 = 1;

/// Everything produced by a two-stage run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: Report,
    pub stage1: LatentField,
    pub stage1_trace: RunTrace,
    /// Upsampled and re-noised input of stage two.
    pub refinement_input: LatentField,
    pub final_latent: LatentField,
    pub trace: RunTrace,
}

/// Seeded weights plus the conditional and empty-prompt contexts.
pub fn model_setup(config: &PipelineConfig) -> Result<(ModelWeights, TextContext, TextContext)> {
    let dims = config.dims;
    let weights = ModelWeights::seeded(dims, config.weight_seed)?;
    let text = TextContext::seeded(
        dims.text_len,
        dims.text_dim,
        config.weight_seed ^ TEXT_SEED_SALT,
    )?;
    let null = TextContext::null(dims.text_len, dims.text_dim)?;
    Ok((weights, text, null))
}

/// Stage one: full-attention CFG from pure noise over the whole schedule.
pub fn stage_one(
    config: &PipelineConfig,
    weights: &ModelWeights,
    text: &TextContext,
    null: &TextContext,
) -> Result<(LatentField, RunTrace)> {
    let noise = LatentField::standard_normal(
        config.native_grid,
        config.dims.channels,
        config.noise_seed,
        STAGE_ONE_STREAM,
    );
    let sampler = Sampler::Plain {
        mode: AttentionMode::Full,
        scale_mode: config.dual_path.scale_mode,
    };
    denoise(&noise, text, null, &config.schedule, 0, sampler, weights)
}

/// Upsamples a stage-one result and noises it to `sigma[start_step]`.
pub fn prepare_refinement(config: &PipelineConfig, stage1: &LatentField) -> Result<LatentField> {
    let up = upsample_latent(stage1, &config.target_grid, config.upsample)?;
    let noise = LatentField::standard_normal(
        config.target_grid,
        config.dims.channels,
        config.noise_seed,
        STAGE_TWO_STREAM,
    );
    let sigma = sigma_schedule(&config.schedule)[start_step(&config.schedule)];
    add_noise(&up, sigma, &noise)
}

fn scale_value(config: &PipelineConfig) -> Result<f64> {
    Ok(config
        .dual_path
        .scale_mode
        .resolve(&config.target_grid, config.dims.head_dim)?
        .value())
}

/// Report sections that need no denoising.
pub fn bench_report(config: &PipelineConfig) -> Result<Report> {
    let window = config.window();
    let target = &config.target_grid;
    let dims = &config.dims;
    let s = sparsity(&window, target);
    let est = flops_estimate(target, &window, dims.head_dim, dims.heads, dims.blocks);
    let start = start_step(&config.schedule);
    let steps = config.schedule.num_steps - start;
    let (cond, uncond) = planned_full_forwards(steps, &config.dual_path);

    Ok(Report {
        schema_version: report::SCHEMA_VERSION,
        config: echo(config),
        mask: MaskStats {
            sparsity_numer: *s.numer(),
            sparsity_denom: *s.denom(),
            sparsity: crate::flops::ratio_to_f64(s),
            keys_per_query: (window.w() + 1).min(target.width())
                * (window.h() + 1).min(target.height())
                * target.frames(),
        },
        flops: FlopsReport {
            full: est.full,
            window: est.window,
            ratio: est.ratio,
            attention_scale: scale_value(config)?,
        },
        refinement: RefinementPlan {
            start_step: start,
            steps,
            planned_cond_full_forwards: cond,
            planned_uncond_full_forwards: uncond,
            naive_full_forwards_per_step: 2.0,
            planned_full_forwards_per_step: (cond + uncond) as f64 / steps as f64,
        },
        run: None,
    })
}

fn echo(config: &PipelineConfig) -> ConfigEcho {
    let s = &config.schedule;
    let d = &config.dual_path;
    let m = &config.dims;
    ConfigEcho {
        native_grid: config.native_grid.to_string(),
        target_grid: config.target_grid.to_string(),
        window: d.window.to_string(),
        num_steps: s.num_steps,
        strength: s.strength,
        guidance_scale: s.guidance_scale,
        flow_shift: s.flow_shift,
        lambda: d.lambda,
        cache_period: d.cache_period,
        dual_path_on_uncond: d.dual_path_on_uncond,
        scale_mode: d.scale_mode,
        model_dim: m.model_dim,
        heads: m.heads,
        head_dim: m.head_dim,
        blocks: m.blocks,
        ff_dim: m.ff_dim,
        text_len: m.text_len,
        text_dim: m.text_dim,
        channels: m.channels,
        weight_seed: config.weight_seed,
        noise_seed: config.noise_seed,
        upsample: config.upsample.to_string(),
        bench_only: config.bench_only,
        defaults_applied: config.defaults_applied.clone(),
    }
}

/// Runs both stages and assembles the report.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    let started = Instant::now();
    let mut report = bench_report(config)?;
    let (weights, text, null) = model_setup(config)?;

    let t1 = Instant::now();
    let (stage1, stage1_trace) = stage_one(config, &weights, &text, &null)?;
    let stage1_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let refinement_input = prepare_refinement(config, &stage1)?;
    let (final_latent, trace) = denoise(
        &refinement_input,
        &text,
        &null,
        &config.schedule,
        start_step(&config.schedule),
        Sampler::DualPath(config.dual_path),
        &weights,
    )?;
    let stage2_ms = t2.elapsed().as_secs_f64() * 1e3;

    report.run = Some(RunSummary {
        full_branch_refreshes: trace.cond_full_refreshes(),
        uncond_full_refreshes: trace.uncond_full_refreshes(),
        full_forwards_per_step: trace.full_forwards_per_step(),
        max_staleness: trace.max_staleness(),
        steps: StepReport::from_trace(&trace),
        stage1_ms,
        stage2_ms,
        total_ms: started.elapsed().as_secs_f64() * 1e3,
        stage1_checksum: stage1.checksum(),
        final_latent_checksum: final_latent.checksum(),
    });

    Ok(PipelineRun {
        report,
        stage1,
        stage1_trace,
        refinement_input,
        final_latent,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::parse_table;

    fn small(extra: &str) -> PipelineConfig {
        let text = format!("native_grid = \"1x4x6\"\ntarget_grid = \"1x6x8\"\nsteps = 10\n{extra}");
        PipelineConfig::from_table(&parse_table(&text).unwrap()).unwrap()
    }

    #[test]
    fn report_is_deterministic_apart_from_timings() {
        let cfg = small("weight_seed = 3\nnoise_seed = 4\n");
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.report.without_timings(), b.report.without_timings());
        assert_eq!(a.final_latent, b.final_latent);
        let c = run_pipeline(&small("weight_seed = 3\nnoise_seed = 5\n")).unwrap();
        assert_ne!(
            a.report.run.unwrap().final_latent_checksum,
            c.report.run.unwrap().final_latent_checksum
        );
    }

    #[test]
    fn report_matches_trace_and_plan() {
        let cfg = small("cache_period = 2\n");
        let run = run_pipeline(&cfg).unwrap();
        let r = &run.report;
        let summary = r.run.as_ref().unwrap();
        assert_eq!(r.refinement.start_step, 3);
        assert_eq!(r.refinement.steps, 7);
        assert_eq!(summary.full_branch_refreshes, 4);
        assert_eq!(r.refinement.planned_cond_full_forwards, 4);
        assert_eq!(summary.steps.len(), 7);
        assert_eq!(r.flops.ratio, r.mask.sparsity);
        assert!(r.to_json().contains("\"schema_version\": 1"));
    }

    #[test]
    fn bench_report_skips_denoising() {
        let cfg = small("bench_only = true\n");
        let r = bench_report(&cfg).unwrap();
        assert!(r.run.is_none());
        assert!(r.config.bench_only);
    }
}
