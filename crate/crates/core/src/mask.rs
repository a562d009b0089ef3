//! Inward sliding-window attention mask.
//!
//! Each query attends to a `(w+1) x (h+1)` spatial window. Near the grid
//! boundary the window is shifted inward instead of truncated, so every query
//! keeps the same number of keys. The mask is spatial only and is broadcast
//! across all frame pairs.
//!
//! Two forms are provided: [`mask_entry`] evaluates the offset formula
//! literally in exact rational arithmetic and serves as the oracle, while
//! [`key_interval`] is the fixed-extent interval form used by the windowed
//! kernel.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TokenGrid;

/// Largest spatial token count [`materialize_mask`] will densify.
pub const DEFAULT_MASK_CAP: usize = 16_384;

/// Native window extents in tokens. Both must be even.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    w: usize,
    h: usize,
}

impl WindowSpec {
    pub fn new(w: usize, h: usize) -> Result<Self> {
        // Odd extents give boundary queries one more column than interior ones.
        for (axis, value) in [("w", w), ("h", h)] {
            if value == 0 || value % 2 != 0 {
                return Err(Error::OddWindow { axis, value });
            }
        }
        Ok(Self { w, h })
    }

    /// Window extents equal to the native spatial extents, rounded down to
    /// even (at least 2).
    pub fn native(native: &TokenGrid) -> Self {
        let fit = |n: usize| (n & !1).max(2);
        Self {
            w: fit(native.width()),
            h: fit(native.height()),
        }
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn h(&self) -> usize {
        self.h
    }

    /// True when the window spans the whole grid along both spatial axes.
    pub fn covers(&self, grid: &TokenGrid) -> bool {
        grid.width() <= self.w + 1 && grid.height() <= self.h + 1
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.w, self.h)
    }
}

/// Parses `WxH`.
impl FromStr for WindowSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("expected window as WxH, got {s:?}"));
        let (w, h) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let w = w.trim().parse().map_err(|_| bad())?;
        let h = h.trim().parse().map_err(|_| bad())?;
        Self::new(w, h)
    }
}

/// Per-query inward shifts, kept as exact rationals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InwardOffsets {
    pub delta_w: Ratio<i64>,
    pub delta_h: Ratio<i64>,
}

/// Inclusive spatial bounds of a query's key region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyInterval {
    pub x_lo: usize,
    pub x_hi: usize,
    pub y_lo: usize,
    pub y_hi: usize,
}

impl KeyInterval {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.x_lo..=self.x_hi).contains(&x) && (self.y_lo..=self.y_hi).contains(&y)
    }

    pub fn width(&self) -> usize {
        self.x_hi - self.x_lo + 1
    }

    pub fn height(&self) -> usize {
        self.y_hi - self.y_lo + 1
    }

    /// Spatial keys per frame.
    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

fn check_spatial(grid: &TokenGrid, (y, x): (usize, usize)) -> Result<()> {
    if y >= grid.height() {
        return Err(Error::OutOfBounds {
            axis: "y",
            value: y,
            size: grid.height(),
        });
    }
    if x >= grid.width() {
        return Err(Error::OutOfBounds {
            axis: "x",
            value: x,
            size: grid.width(),
        });
    }
    Ok(())
}

fn axis_offset(extent: usize, pos: usize, size: usize) -> Ratio<i64> {
    let half = Ratio::new(extent as i64, 2);
    let pos = Ratio::from_integer(pos as i64);
    let size = Ratio::from_integer(size as i64);
    let one = Ratio::from_integer(1);
    (half - pos)
        .max(half + pos - size + one)
        .max(Ratio::from_integer(0))
}

/// Inward shift of the query's window along each spatial axis.
pub fn inward_offsets(
    q: (usize, usize),
    window: &WindowSpec,
    grid: &TokenGrid,
) -> Result<InwardOffsets> {
    check_spatial(grid, q)?;
    Ok(InwardOffsets {
        delta_w: axis_offset(window.w, q.1, grid.width()),
        delta_h: axis_offset(window.h, q.0, grid.height()),
    })
}

/// Literal mask predicate on spatial `(y, x)` coordinates.
pub fn mask_entry(
    q: (usize, usize),
    k: (usize, usize),
    window: &WindowSpec,
    grid: &TokenGrid,
) -> Result<bool> {
    check_spatial(grid, k)?;
    let off = inward_offsets(q, window, grid)?;
    let dist = |a: usize, b: usize| Ratio::from_integer((a as i64 - b as i64).abs());
    let x_ok = dist(q.1, k.1) <= Ratio::new(window.w as i64, 2) + off.delta_w;
    let y_ok = dist(q.0, k.0) <= Ratio::new(window.h as i64, 2) + off.delta_h;
    Ok(x_ok && y_ok)
}

fn axis_interval(extent: usize, pos: usize, size: usize) -> (usize, usize) {
    let len = (extent + 1).min(size);
    let lo = pos.saturating_sub(extent / 2).min(size - len);
    (lo, lo + len - 1)
}

/// Fixed-extent key region for the query at spatial `(y, x)`.
pub fn key_interval(
    q: (usize, usize),
    window: &WindowSpec,
    grid: &TokenGrid,
) -> Result<KeyInterval> {
    check_spatial(grid, q)?;
    Ok(key_interval_unchecked(q, window, grid))
}

pub(crate) fn key_interval_unchecked(
    (y, x): (usize, usize),
    window: &WindowSpec,
    grid: &TokenGrid,
) -> KeyInterval {
    let (x_lo, x_hi) = axis_interval(window.w, x, grid.width());
    let (y_lo, y_hi) = axis_interval(window.h, y, grid.height());
    KeyInterval {
        x_lo,
        x_hi,
        y_lo,
        y_hi,
    }
}

/// Dense `(H*W) x (H*W)` spatial mask, capped at [`DEFAULT_MASK_CAP`] tokens.
pub fn materialize_mask(window: &WindowSpec, grid: &TokenGrid) -> Result<Array2<bool>> {
    materialize_mask_capped(window, grid, DEFAULT_MASK_CAP)
}

pub fn materialize_mask_capped(
    window: &WindowSpec,
    grid: &TokenGrid,
    cap: usize,
) -> Result<Array2<bool>> {
    let n = grid.spatial_count();
    if n > cap {
        return Err(Error::MaskTooLarge {
            spatial_tokens: n,
            cap,
        });
    }
    let w = grid.width();
    Ok(Array2::from_shape_fn((n, n), |(q, k)| {
        key_interval_unchecked((q / w, q % w), window, grid).contains(k / w, k % w)
    }))
}

/// Expands a spatial mask to all `frames x frames` block pairs.
pub fn broadcast_frames(spatial: &Array2<bool>, frames: usize) -> Array2<bool> {
    let n = spatial.nrows();
    Array2::from_shape_fn((n * frames, n * frames), |(q, k)| spatial[[q % n, k % n]])
}

/// Fraction of allowed query-key spatial pairs.
pub fn sparsity(window: &WindowSpec, grid: &TokenGrid) -> Ratio<u64> {
    let allowed = (window.w + 1).min(grid.width()) * (window.h + 1).min(grid.height());
    Ratio::new(allowed as u64, grid.spatial_count() as u64)
}

/// Text dump: one line per query row, `1` for allowed and `0` for masked.
pub fn mask_to_bitmap(mask: &Array2<bool>) -> String {
    let mut out = String::with_capacity(mask.nrows() * (mask.ncols() + 1));
    for row in mask.rows() {
        out.extend(row.iter().map(|&b| if b { '1' } else { '0' }));
        out.push('\n');
    }
    out
}
