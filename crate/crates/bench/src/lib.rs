//! Seeded fixtures shared by the benchmarks.

use inwin_core::dit::{ModelDims, ModelWeights, TextContext};
use inwin_core::{HeadTensors, LatentField, TokenGrid};
use ndarray::Array2;

fn gaussian(rows: usize, cols: usize, seed: u64, stream: u64) -> Array2<f64> {
    let grid = TokenGrid::new(1, 1, rows).expect("rows > 0");
    LatentField::standard_normal(grid, cols, seed, stream).into_values()
}

/// One attention head's Q, K and V over `grid`.
pub fn head(grid: &TokenGrid, head_dim: usize, seed: u64) -> HeadTensors {
    let n = grid.token_count();
    HeadTensors::new(
        gaussian(n, head_dim, seed, 0),
        gaussian(n, head_dim, seed, 1),
        gaussian(n, head_dim, seed, 2),
    )
    .expect("finite seeded tensors")
}

pub struct DenoiseFixture {
    pub latent: LatentField,
    pub text: TextContext,
    pub null: TextContext,
    pub weights: ModelWeights,
}

pub fn denoise_fixture(grid: TokenGrid, seed: u64) -> DenoiseFixture {
    let dims = ModelDims::default();
    DenoiseFixture {
        latent: LatentField::standard_normal(grid, dims.channels, seed, 0),
        text: TextContext::seeded(dims.text_len, dims.text_dim, seed).expect("valid dims"),
        null: TextContext::null(dims.text_len, dims.text_dim).expect("valid dims"),
        weights: ModelWeights::seeded(dims, seed).expect("valid dims"),
    }
}
