//! Theoretical self-attention cost.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::grid::TokenGrid;
use crate::mask::{sparsity, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    /// Multiply-adds counted as 2 FLOPs, for both `Q K^T` and the weighted
    /// sum over `V`, across all heads and blocks.
    pub full: u64,
    pub window: f64,
    /// `window / full`; identical to the mask sparsity.
    pub ratio: f64,
    pub ratio_numer: u64,
    pub ratio_denom: u64,
}

/// `full = 2 * N^2 * d * heads * blocks * 2` with `N = F * H * W`, and
/// `window = full * sparsity`.
pub fn flops_estimate(
    grid: &TokenGrid,
    window: &WindowSpec,
    head_dim: usize,
    heads: usize,
    blocks: usize,
) -> FlopsEstimate {
    let full = full_attention_flops(grid, head_dim, heads, blocks);
    let s: Ratio<u64> = sparsity(window, grid);
    let ratio = ratio_to_f64(s);
    FlopsEstimate {
        full,
        window: full as f64 * ratio,
        ratio,
        ratio_numer: *s.numer(),
        ratio_denom: *s.denom(),
    }
}

/// Self-attention FLOPs of one full-attention forward pass.
pub fn full_attention_flops(grid: &TokenGrid, head_dim: usize, heads: usize, blocks: usize) -> u64 {
    let n = grid.token_count() as u64;
    2 * n * n * head_dim as u64 * heads as u64 * blocks as u64 * 2
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covering_window_has_unit_ratio() {
        let g = TokenGrid::new(2, 5, 5).unwrap();
        let e = flops_estimate(&g, &WindowSpec::new(4, 4).unwrap(), 8, 4, 2);
        assert_eq!(e.ratio, 1.0);
        assert_eq!(e.full, 2 * 50 * 50 * 8 * 4 * 2 * 2);
        assert_eq!(e.window, e.full as f64);
    }

    #[test]
    fn hd_configuration() {
        let g = TokenGrid::new(1, 68, 120).unwrap();
        let e = flops_estimate(&g, &WindowSpec::new(52, 30).unwrap(), 128, 12, 30);
        assert_eq!((e.ratio_numer, e.ratio_denom), (1643, 8160));
        assert_eq!(e.ratio, 1643.0 / 8160.0);
        assert!((1.0 / e.ratio - 4.97).abs() < 0.01);
    }

    #[test]
    fn halving_window_extents() {
        let g = TokenGrid::new(1, 64, 64).unwrap();
        let big = flops_estimate(&g, &WindowSpec::new(32, 32).unwrap(), 8, 4, 2);
        let small = flops_estimate(&g, &WindowSpec::new(16, 16).unwrap(), 8, 4, 2);
        // (17 * 17) / (33 * 33): a quarter up to the +1 of each extent.
        assert_eq!(small.window / big.window, (17.0 * 17.0) / (33.0 * 33.0));
        assert!((small.window / big.window - 0.25).abs() < 0.02);
    }
}
