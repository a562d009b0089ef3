//! Inward sliding-window attention with dual-path cross-attention override
//! and full-branch caching, over a toy diffusion transformer.

pub mod attention;
pub mod dit;
pub mod error;
pub mod flops;
pub mod grid;
pub mod latent;
pub mod mask;
pub mod pipeline;
pub mod scheduler;

pub use attention::{entropy_scale, AttentionScale, HeadTensors};
pub use dit::{AttentionMode, ModelDims, ModelWeights, TextContext};
pub use error::{Error, Result};
pub use grid::TokenGrid;
pub use latent::LatentField;
pub use mask::{KeyInterval, WindowSpec};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineRun, Report, UpsampleMethod};
pub use scheduler::{DualPathConfig, RunTrace, Sampler, ScaleMode, ScheduleSpec};
