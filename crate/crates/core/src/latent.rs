//! The denoiser state: a `F x H x W x D` field stored as one token per row.

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::TokenGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    grid: TokenGrid,
    values: Array2<f64>,
}

impl LatentField {
    /// `values` holds one row per token in flat `(t, y, x)` order.
    pub fn new(grid: TokenGrid, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != grid.token_count() || values.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "field {:?} does not fit grid {grid}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent field"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TokenGrid, channels: usize) -> Self {
        Self {
            grid,
            values: Array2::zeros((grid.token_count(), channels)),
        }
    }

    pub fn from_fn(
        grid: TokenGrid,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let values = Array2::from_shape_fn((grid.token_count(), channels), |(i, c)| {
            let (t, y, x) = grid.coord_of(i).expect("index within grid");
            f(t, y, x, c)
        });
        Self::new(grid, values)
    }

    /// Seeded standard-normal field. `stream` separates independent draws
    /// sharing one seed.
    pub fn standard_normal(grid: TokenGrid, channels: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let values = Array2::from_shape_simple_fn((grid.token_count(), channels), || {
            StandardNormal.sample(&mut rng)
        });
        Self { grid, values }
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn get(&self, (t, y, x): (usize, usize, usize), channel: usize) -> Result<f64> {
        let i = self.grid.flat_index((t, y, x))?;
        self.values
            .get((i, channel))
            .copied()
            .ok_or(Error::OutOfBounds {
                axis: "channel",
                value: channel,
                size: self.channels(),
            })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid || self.channels() != other.channels() {
            return Err(Error::ShapeMismatch(format!(
                "field {}x{} vs {}x{}",
                self.grid,
                self.channels(),
                other.grid,
                other.channels()
            )));
        }
        Ok(())
    }

    /// `self + step * direction`, elementwise.
    pub fn axpy(&self, step: f64, direction: &Self) -> Result<Self> {
        self.same_shape(direction)?;
        let mut values = self.values.clone();
        Zip::from(&mut values)
            .and(&direction.values)
            .for_each(|x, &d| *x += step * d);
        Ok(Self {
            grid: self.grid,
            values,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// SHA-256 over the grid dims, channel count and little-endian `f64` bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for dim in [
            self.grid.frames(),
            self.grid.height(),
            self.grid.width(),
            self.channels(),
        ] {
            h.update((dim as u64).to_le_bytes());
        }
        for v in self.values.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
