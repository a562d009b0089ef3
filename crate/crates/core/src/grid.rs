//! Token grid coordinate algebra.
//!
//! Tokens are laid out row-major over `(t, y, x)`: frame outermost, column
//! innermost, so each frame's spatial block is contiguous.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(frame, row, column)` token position.
pub type Coord = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    frames: usize,
    height: usize,
    width: usize,
}

impl TokenGrid {
    pub fn new(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidGrid(format!(
                "every axis must be >= 1, got {frames}x{height}x{width}"
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Tokens per frame (`H * W`).
    pub fn spatial_count(&self) -> usize {
        self.height * self.width
    }

    pub fn token_count(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn flat_index(&self, (t, y, x): Coord) -> Result<usize> {
        check_axis("frame", t, self.frames)?;
        check_axis("y", y, self.height)?;
        check_axis("x", x, self.width)?;
        Ok((t * self.height + y) * self.width + x)
    }

    pub fn coord_of(&self, index: usize) -> Result<Coord> {
        check_axis("token", index, self.token_count())?;
        let x = index % self.width;
        let rest = index / self.width;
        Ok((rest / self.height, rest % self.height, x))
    }

    /// Iterates every coordinate in flat-index order.
    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.frames).flat_map(move |t| {
            (0..self.height).flat_map(move |y| (0..self.width).map(move |x| (t, y, x)))
        })
    }
}

fn check_axis(axis: &'static str, value: usize, size: usize) -> Result<()> {
    if value < size {
        Ok(())
    } else {
        Err(Error::OutOfBounds { axis, value, size })
    }
}

impl fmt::Display for TokenGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.height, self.width)
    }
}

/// Parses `FxHxW`.
impl FromStr for TokenGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidGrid(format!("expected FxHxW, got {s:?}")));
        }
        let mut dims = [0usize; 3];
        for (dim, part) in dims.iter_mut().zip(&parts) {
            *dim = part
                .trim()
                .parse()
                .map_err(|_| Error::InvalidGrid(format!("expected FxHxW, got {s:?}")))?;
        }
        Self::new(dims[0], dims[1], dims[2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(f: usize, h: usize, w: usize) -> TokenGrid {
        TokenGrid::new(f, h, w).unwrap()
    }

    #[test]
    fn flat_index_examples() {
        assert_eq!(grid(1, 1, 1).flat_index((0, 0, 0)).unwrap(), 0);
        assert_eq!(grid(2, 3, 4).flat_index((1, 0, 0)).unwrap(), 12);
        assert_eq!(grid(2, 3, 4).flat_index((0, 2, 3)).unwrap(), 11);
    }

    #[test]
    fn coord_of_examples() {
        assert_eq!(grid(2, 3, 4).coord_of(11).unwrap(), (0, 2, 3));
        assert_eq!(grid(2, 3, 4).coord_of(12).unwrap(), (1, 0, 0));
        assert_eq!(grid(1, 1, 1).coord_of(0).unwrap(), (0, 0, 0));
    }

    #[test]
    fn out_of_range_names_axis() {
        let g = grid(2, 3, 4);
        assert_eq!(
            g.flat_index((0, 3, 0)),
            Err(Error::OutOfBounds {
                axis: "y",
                value: 3,
                size: 3
            })
        );
        assert!(matches!(
            g.flat_index((2, 0, 0)),
            Err(Error::OutOfBounds { axis: "frame", .. })
        ));
        assert!(matches!(
            g.flat_index((0, 0, 4)),
            Err(Error::OutOfBounds { axis: "x", .. })
        ));
        assert!(g.coord_of(24).is_err());
    }

    #[test]
    fn zero_axis_rejected() {
        assert!(TokenGrid::new(0, 1, 1).is_err());
        assert!(TokenGrid::new(1, 0, 1).is_err());
        assert!(TokenGrid::new(1, 1, 0).is_err());
    }

    #[test]
    fn parse_and_display() {
        let g: TokenGrid = "2x30x52".parse().unwrap();
        assert_eq!(g, grid(2, 30, 52));
        assert_eq!(g.to_string(), "2x30x52");
        assert!("30x52".parse::<TokenGrid>().is_err());
        assert!("1x0x5".parse::<TokenGrid>().is_err());
    }

    #[test]
    fn coords_iterates_in_flat_order() {
        let g = grid(2, 3, 4);
        for (i, c) in g.coords().enumerate() {
            assert_eq!(g.flat_index(c).unwrap(), i);
        }
    }

    proptest! {
        #[test]
        fn round_trip(f in 1usize..8, h in 1usize..20, w in 1usize..20) {
            let g = grid(f, h, w);
            prop_assume!(g.token_count() <= 10_000);
            for i in 0..g.token_count() {
                prop_assert_eq!(g.flat_index(g.coord_of(i).unwrap()).unwrap(), i);
            }
        }

        #[test]
        fn strictly_increasing_in_lexicographic_order(
            f in 1usize..5, h in 1usize..10, w in 1usize..10,
            a in any::<(usize, usize, usize)>(), b in any::<(usize, usize, usize)>(),
        ) {
            let g = grid(f, h, w);
            let ca = (a.0 % f, a.1 % h, a.2 % w);
            let cb = (b.0 % f, b.1 % h, b.2 % w);
            let ia = g.flat_index(ca).unwrap();
            let ib = g.flat_index(cb).unwrap();
            prop_assert_eq!(ca.cmp(&cb), ia.cmp(&ib));
        }
    }
}
