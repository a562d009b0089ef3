//! Machine-readable run report (JSON). Field names and units are documented
//! in `docs/report-schema.md`; bump [`SCHEMA_VERSION`] on any change.

use serde::{Deserialize, Serialize};

use crate::scheduler::{BranchTimings, RunTrace, ScaleMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: ConfigEcho,
    pub mask: MaskStats,
    pub flops: FlopsReport,
    pub refinement: RefinementPlan,
    /// Absent for `bench_only` runs.
    pub run: Option<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub native_grid: String,
    pub target_grid: String,
    pub window: String,
    pub num_steps: usize,
    pub strength: f64,
    pub guidance_scale: f64,
    pub flow_shift: f64,
    pub lambda: f64,
    pub cache_period: usize,
    pub dual_path_on_uncond: bool,
    pub scale_mode: ScaleMode,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub blocks: usize,
    pub ff_dim: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub channels: usize,
    pub weight_seed: u64,
    pub noise_seed: u64,
    pub upsample: String,
    pub bench_only: bool,
    pub defaults_applied: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub sparsity_numer: u64,
    pub sparsity_denom: u64,
    pub sparsity: f64,
    /// Keys per query per frame.
    pub keys_per_query: usize,
}

/// Self-attention FLOPs of one forward pass at the target grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub full: u64,
    pub window: f64,
    pub ratio: f64,
    pub attention_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementPlan {
    pub start_step: usize,
    pub steps: usize,
    pub planned_cond_full_forwards: usize,
    pub planned_uncond_full_forwards: usize,
    /// Dual-path CFG without caching runs the full branch on both passes.
    pub naive_full_forwards_per_step: f64,
    pub planned_full_forwards_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub full_branch_refreshes: usize,
    pub uncond_full_refreshes: usize,
    pub full_forwards_per_step: f64,
    pub max_staleness: usize,
    pub steps: Vec<StepReport>,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
    pub total_ms: f64,
    pub stage1_checksum: String,
    pub final_latent_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub sigma: f64,
    pub refreshed: bool,
    pub guidance_from: Option<usize>,
    pub self_attention_flops: f64,
    pub timings_ms: BranchTimings,
}

impl StepReport {
    pub fn from_trace(trace: &RunTrace) -> Vec<Self> {
        trace
            .steps
            .iter()
            .map(|s| StepReport {
                step: s.step,
                sigma: s.sigma,
                refreshed: s.cond_full_forwards > 0,
                guidance_from: s.cond_guidance_from,
                self_attention_flops: s.self_attention_flops,
                timings_ms: s.timings,
            })
            .collect()
    }
}

impl Report {
    /// Copy with every wall-clock field zeroed.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        if let Some(run) = &mut r.run {
            run.stage1_ms = 0.0;
            run.stage2_ms = 0.0;
            run.total_ms = 0.0;
            for s in &mut run.steps {
                s.timings_ms = BranchTimings::default();
            }
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}
