use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::latent::LatentField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMethod {
    Nearest,
    /// Linear along each spatial axis (frames are never resampled).
    Trilinear,
}

impl fmt::Display for UpsampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMethod::Nearest => "nearest",
            UpsampleMethod::Trilinear => "trilinear",
        })
    }
}

impl FromStr for UpsampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "trilinear" => Ok(Self::Trilinear),
            other => Err(Error::Domain(format!(
                "unknown upsample method {other:?} (expected nearest or trilinear)"
            ))),
        }
    }
}

/// Source index pair and blend weight for one destination coordinate, using
/// half-pixel centers clamped to the source range.
fn linear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
        .clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

fn nearest_tap(dst: usize, src_len: usize, dst_len: usize) -> usize {
    dst * src_len / dst_len
}

/// Spatially enlarges every frame of `latent` to `target`.
pub fn upsample_latent(
    latent: &LatentField,
    target: &TokenGrid,
    method: UpsampleMethod,
) -> Result<LatentField> {
    let src = latent.grid();
    if target.frames() != src.frames() {
        return Err(Error::ShapeMismatch(format!(
            "frame count must be preserved ({} -> {})",
            src.frames(),
            target.frames()
        )));
    }
    if target.height() < src.height() || target.width() < src.width() {
        return Err(Error::Domain(format!(
            "cannot downsample {src} to {target}"
        )));
    }
    let (sh, sw) = (src.height(), src.width());
    let (th, tw) = (target.height(), target.width());
    let values = latent.values();
    let channels = latent.channels();
    let at = |t: usize, y: usize, x: usize| (t * sh + y) * sw + x;

    let mut out = Array2::zeros((target.token_count(), channels));
    for t in 0..target.frames() {
        for y in 0..th {
            for x in 0..tw {
                let row = (t * th + y) * tw + x;
                match method {
                    UpsampleMethod::Nearest => {
                        let src_row = at(t, nearest_tap(y, sh, th), nearest_tap(x, sw, tw));
                        out.row_mut(row).assign(&values.row(src_row));
                    }
                    UpsampleMethod::Trilinear => {
                        let (y0, y1, fy) = linear_taps(y, sh, th);
                        let (x0, x1, fx) = linear_taps(x, sw, tw);
                        for c in 0..channels {
                            let v = |yy, xx| values[[at(t, yy, xx), c]];
                            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                            out[[row, c]] = top * (1.0 - fy) + bottom * fy;
                        }
                    }
                }
            }
        }
    }
    LatentField::new(*target, out)
}
