//! Single-head attention kernels.
//!
//! All kernels share one per-query routine: logits are accumulated in `f64`
//! over keys in ascending flat-index order, softmax subtracts the row maximum
//! over the allowed keys only, and disallowed keys never enter the sum. The
//! fixed key order makes every kernel bit-reproducible regardless of how
//! queries are spread over threads.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::mask::{key_interval_unchecked, WindowSpec};

/// Query, key and value matrices for one head, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
}

impl HeadTensors {
    /// Validates shapes and rejects non-finite entries.
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        let t = Self::new_unchecked(q, k, v)?;
        for (name, m) in [("query", &t.q), ("key", &t.k), ("value", &t.v)] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(t)
    }

    /// Shape checks only.
    pub fn new_unchecked(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        if q.nrows() != k.nrows() || k.nrows() != v.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "token counts differ: q {}, k {}, v {}",
                q.nrows(),
                k.nrows(),
                v.nrows()
            )));
        }
        if q.ncols() != k.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "query dim {} != key dim {}",
                q.ncols(),
                k.ncols()
            )));
        }
        if q.nrows() == 0 || q.ncols() == 0 || v.ncols() == 0 {
            return Err(Error::ShapeMismatch("empty head tensors".into()));
        }
        Ok(Self { q, k, v })
    }

    pub fn token_count(&self) -> usize {
        self.q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn q(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn k(&self) -> &Array2<f64> {
        &self.k
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }
}

/// Positive multiplier applied to `q . k` before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AttentionScale(f64);

impl AttentionScale {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::Domain(format!(
                "attention scale must be positive, got {value}"
            )))
        }
    }

    /// The usual `1 / sqrt(d)`.
    pub fn inverse_sqrt(head_dim: usize) -> Self {
        Self(1.0 / (head_dim as f64).sqrt())
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Resolution-aware scale `sqrt(log_native(target) / d)`.
///
/// Equals `1 / sqrt(d)` when `target == native`; grows slowly with the target
/// token count to counter softmax entropy growth at larger resolutions.
pub fn entropy_scale(
    native_token_count: usize,
    target_token_count: usize,
    head_dim: usize,
) -> Result<AttentionScale> {
    if native_token_count < 2 || target_token_count < 2 {
        return Err(Error::Domain(format!(
            "entropy scale needs token counts >= 2, got native {native_token_count}, target {target_token_count}"
        )));
    }
    if head_dim == 0 {
        return Err(Error::Domain("head_dim must be positive".into()));
    }
    let ratio = (target_token_count as f64).ln() / (native_token_count as f64).ln();
    AttentionScale::new((ratio / head_dim as f64).sqrt())
}

#[inline]
fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Exclusion-semantics softmax attention of `query` over the listed rows of
/// `k`/`v`, written into `out`. `logits` is scratch space reused between calls.
#[allow(clippy::too_many_arguments)]
fn attend_row(
    query: ArrayView1<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    keys: impl Iterator<Item = usize> + Clone,
    scale: f64,
    logits: &mut Vec<f64>,
    out: &mut [f64],
    row: usize,
) -> Result<()> {
    logits.clear();
    logits.extend(keys.clone().map(|j| dot(query, k.row(j)) * scale));
    if logits.is_empty() {
        return Err(Error::EmptyReceptiveField(row));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    out.fill(0.0);
    for (j, &w) in keys.zip(logits.iter()) {
        let p = w / sum;
        for (o, &vj) in out.iter_mut().zip(v.row(j).iter()) {
            *o += p * vj;
        }
    }
    Ok(())
}

fn attend(
    t: &HeadTensors,
    query: usize,
    keys: impl Iterator<Item = usize> + Clone,
    scale: f64,
    logits: &mut Vec<f64>,
    out: &mut [f64],
) -> Result<()> {
    attend_row(t.q.row(query), &t.k, &t.v, keys, scale, logits, out, query)
}

/// Dense attention of `q` rows over a separate key/value sequence, as used by
/// latent-to-text cross-attention. `k` and `v` must share a row count.
pub fn cross_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    scale: AttentionScale,
) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() || k.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cross-attention q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let (n, m, dv) = (q.nrows(), k.nrows(), v.ncols());
    let mut data = vec![0.0; n * dv];
    data.par_chunks_mut(dv.max(1))
        .enumerate()
        .try_for_each_init(Vec::new, |logits, (i, out)| {
            attend_row(q.row(i), k, v, 0..m, scale.0, logits, out, i)
        })?;
    Ok(Array2::from_shape_vec((n, dv), data).expect("row-major buffer"))
}

fn run_rows<F>(t: &HeadTensors, row_fn: F) -> Result<Array2<f64>>
where
    F: Fn(usize, &mut Vec<f64>, &mut [f64]) -> Result<()> + Sync,
{
    let n = t.token_count();
    let dv = t.value_dim();
    let mut data = vec![0.0; n * dv];
    data.par_chunks_mut(dv)
        .enumerate()
        .try_for_each_init(Vec::new, |logits, (i, out)| row_fn(i, logits, out))?;
    Ok(Array2::from_shape_vec((n, dv), data).expect("row-major buffer"))
}

/// Full softmax attention.
pub fn dense_attention(t: &HeadTensors, scale: AttentionScale) -> Result<Array2<f64>> {
    let n = t.token_count();
    run_rows(t, |i, logits, out| attend(t, i, 0..n, scale.0, logits, out))
}

/// Softmax restricted to the `true` entries of each mask row. Masked keys get
/// exactly zero weight.
pub fn masked_dense_attention(
    t: &HeadTensors,
    mask: &Array2<bool>,
    scale: AttentionScale,
) -> Result<Array2<f64>> {
    let n = t.token_count();
    if mask.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match {n} tokens",
            mask.dim()
        )));
    }
    run_rows(t, |i, logits, out| {
        let row = mask.row(i);
        let keys = (0..n).filter(move |&j| row[j]);
        attend(t, i, keys, scale.0, logits, out)
    })
}

/// Inward sliding-window attention without materializing the mask.
///
/// Every frame's query at spatial position `(y, x)` shares one key interval,
/// so the interval is computed once per spatial position and the key rows are
/// walked as contiguous runs of the flat layout.
pub fn windowed_attention(
    t: &HeadTensors,
    window: &WindowSpec,
    grid: &TokenGrid,
    scale: AttentionScale,
) -> Result<Array2<f64>> {
    if t.token_count() != grid.token_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens for grid {grid} ({} tokens)",
            t.token_count(),
            grid.token_count()
        )));
    }
    let (frames, height, width) = (grid.frames(), grid.height(), grid.width());
    let spatial = grid.spatial_count();
    let dv = t.value_dim();
    let n = t.token_count();

    // Rows are grouped by spatial position: chunk `s` holds the outputs of the
    // F queries at position `s`, frame-major inside the chunk.
    let mut grouped = vec![0.0; n * dv];
    grouped
        .par_chunks_mut(frames * dv)
        .enumerate()
        .try_for_each_init(Vec::new, |logits, (s, chunk)| {
            let iv = key_interval_unchecked((s / width, s % width), window, grid);
            let keys = (0..frames).flat_map(move |f| {
                (iv.y_lo..=iv.y_hi).flat_map(move |y| {
                    let base = (f * height + y) * width;
                    base + iv.x_lo..=base + iv.x_hi
                })
            });
            for (f, out) in chunk.chunks_mut(dv).enumerate() {
                attend(t, f * spatial + s, keys.clone(), scale.0, logits, out)?;
            }
            Ok::<_, Error>(())
        })?;

    let mut out = Array2::zeros((n, dv));
    for s in 0..spatial {
        for f in 0..frames {
            let src = &grouped[(s * frames + f) * dv..(s * frames + f + 1) * dv];
            out.row_mut(f * spatial + s)
                .iter_mut()
                .zip(src)
                .for_each(|(o, &x)| *o = x);
        }
    }
    Ok(out)
}

/// The mask applied as a multiplicative factor on the logits, so masked keys
/// keep a logit of zero and still receive weight.
///
/// Comparison oracle only; the pipeline always uses exclusion semantics.
pub fn literal_product_attention(
    t: &HeadTensors,
    mask: &Array2<bool>,
    scale: AttentionScale,
) -> Result<Array2<f64>> {
    let n = t.token_count();
    if mask.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match {n} tokens",
            mask.dim()
        )));
    }
    let mut out = Array2::zeros((n, t.value_dim()));
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let m = if mask[[i, j]] { 1.0 } else { 0.0 };
                dot(t.q.row(i), t.k.row(j)) * m * scale.0
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            let p = w / sum;
            for (o, &vj) in out.row_mut(i).iter_mut().zip(t.v.row(j).iter()) {
                *o += p * vj;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{broadcast_frames, materialize_mask};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn random_heads(seed: u64, n: usize, d: usize) -> HeadTensors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HeadTensors::new(
            random(&mut rng, n, d),
            random(&mut rng, n, d),
            random(&mut rng, n, d),
        )
        .unwrap()
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn construction_rejects_bad_input() {
        let ok = Array2::<f64>::zeros((3, 2));
        let mut nan = ok.clone();
        nan[[1, 1]] = f64::NAN;
        assert_eq!(
            HeadTensors::new(ok.clone(), nan, ok.clone()),
            Err(Error::NonFinite("key"))
        );
        let mut inf = ok.clone();
        inf[[0, 0]] = f64::INFINITY;
        assert!(HeadTensors::new(inf, ok.clone(), ok.clone()).is_err());
        assert!(HeadTensors::new(ok.clone(), Array2::zeros((2, 2)), ok.clone()).is_err());
        assert!(HeadTensors::new(ok.clone(), Array2::zeros((3, 3)), ok.clone()).is_err());
        assert!(AttentionScale::new(0.0).is_err());
        assert!(AttentionScale::new(f64::NAN).is_err());
    }

    #[test]
    fn single_token_returns_v() {
        let t = HeadTensors::new(
            array![[0.3, -2.0]],
            array![[1.0, 4.0]],
            array![[7.0, -3.5, 2.0]],
        )
        .unwrap();
        let out = dense_attention(&t, AttentionScale::inverse_sqrt(2)).unwrap();
        assert_eq!(out, array![[7.0, -3.5, 2.0]]);
    }

    #[test]
    fn identical_keys_give_value_mean() {
        let mut t = random_heads(3, 6, 4);
        t.k = Array2::from_shape_fn((6, 4), |(_, c)| c as f64 * 0.1);
        let out = dense_attention(&t, AttentionScale::inverse_sqrt(4)).unwrap();
        let mean = t.v.mean_axis(ndarray::Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_matches_frozen_reference() {
        // Expected values computed independently with numpy in float64.
        let q = array![[0.5, -1.0], [1.5, 0.25], [-0.75, 0.8], [0.1, 0.2]];
        let k = array![[1.0, 0.0], [-0.5, 2.0], [0.3, -0.3], [0.9, 1.1]];
        let v = array![[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0], [2.5, -2.0]];
        let expected = array![
            [0.7702788654504639, 1.5990569954391458],
            [1.214195131847152, 0.4637825776251676],
            [-0.08651197103566463, 0.4680418575500781],
            [0.6345720979156358, 0.7063535369220499]
        ];
        let out = dense_attention(
            &HeadTensors::new(q, k, v).unwrap(),
            AttentionScale::inverse_sqrt(2),
        )
        .unwrap();
        assert!(max_abs_diff(&out, &expected) < 1e-14);
    }

    #[test]
    fn masked_examples() {
        let t = random_heads(11, 9, 4);
        let scale = AttentionScale::inverse_sqrt(4);
        let dense = dense_attention(&t, scale).unwrap();
        let all = Array2::from_elem((9, 9), true);
        assert_eq!(masked_dense_attention(&t, &all, scale).unwrap(), dense);

        let eye = Array2::from_shape_fn((9, 9), |(i, j)| i == j);
        assert_eq!(masked_dense_attention(&t, &eye, scale).unwrap(), t.v);

        let grid = TokenGrid::new(1, 3, 3).unwrap();
        let window = WindowSpec::new(2, 2).unwrap();
        let m = materialize_mask(&window, &grid).unwrap();
        assert_eq!(masked_dense_attention(&t, &m, scale).unwrap(), dense);
    }

    #[test]
    fn empty_mask_row_is_an_error() {
        let t = random_heads(1, 3, 2);
        let mut m = Array2::from_elem((3, 3), true);
        m.row_mut(1).fill(false);
        assert_eq!(
            masked_dense_attention(&t, &m, AttentionScale::inverse_sqrt(2)),
            Err(Error::EmptyReceptiveField(1))
        );
        assert!(masked_dense_attention(
            &t,
            &Array2::from_elem((2, 2), true),
            AttentionScale::inverse_sqrt(2)
        )
        .is_err());
    }

    #[test]
    fn windowed_degenerates_to_dense() {
        let grid = TokenGrid::new(2, 3, 5).unwrap();
        let t = random_heads(5, grid.token_count(), 4);
        let scale = AttentionScale::inverse_sqrt(4);
        let win = windowed_attention(&t, &WindowSpec::new(4, 2).unwrap(), &grid, scale).unwrap();
        assert!(max_abs_diff(&win, &dense_attention(&t, scale).unwrap()) < 1e-6);
    }

    #[test]
    fn windowed_matches_masked_reference() {
        let grid = TokenGrid::new(2, 4, 4).unwrap();
        let window = WindowSpec::new(2, 2).unwrap();
        let t = random_heads(17, grid.token_count(), 4);
        let scale = AttentionScale::inverse_sqrt(4);
        let mask = broadcast_frames(&materialize_mask(&window, &grid).unwrap(), 2);
        let reference = masked_dense_attention(&t, &mask, scale).unwrap();
        let out = windowed_attention(&t, &window, &grid, scale).unwrap();
        let rel =
            max_abs_diff(&out, &reference) / reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(rel < 1e-5);
    }

    #[test]
    fn windowed_ignores_values_outside_window() {
        let grid = TokenGrid::new(1, 6, 6).unwrap();
        let window = WindowSpec::new(2, 2).unwrap();
        let t = random_heads(23, 36, 4);
        let scale = AttentionScale::inverse_sqrt(4);
        let before = windowed_attention(&t, &window, &grid, scale).unwrap();
        // Query (0,0) sees x,y in [0,2]; key (5,5) is outside.
        let outside = grid.flat_index((0, 5, 5)).unwrap();
        let mut moved = t.clone();
        moved.v.row_mut(outside).fill(1e3);
        let after = windowed_attention(&moved, &window, &grid, scale).unwrap();
        assert_eq!(before.row(0), after.row(0));
    }

    #[test]
    fn windowed_rejects_shape_mismatch() {
        let grid = TokenGrid::new(1, 4, 4).unwrap();
        let t = random_heads(1, 15, 2);
        assert!(matches!(
            windowed_attention(
                &t,
                &WindowSpec::new(2, 2).unwrap(),
                &grid,
                AttentionScale::inverse_sqrt(2)
            ),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn entropy_scale_values() {
        for n in [2, 17, 1560] {
            assert!((entropy_scale(n, n, 64).unwrap().value() - 0.125).abs() < 1e-15);
        }
        // 50-digit reference values from mpmath.
        let two_x = entropy_scale(1560, 3120, 128).unwrap().value();
        assert!((two_x - 0.092_460_905_091_126_588_618).abs() < 1e-15);
        let four_x = entropy_scale(1560, 1560 * 4, 128).unwrap().value();
        assert!((four_x - 0.096_361_496_151_422_625_311).abs() < 1e-15);
        assert!(entropy_scale(1, 100, 8).is_err());
        assert!(entropy_scale(100, 1, 8).is_err());
    }

    #[test]
    fn literal_product_differs_from_exclusion() {
        let grid = TokenGrid::new(1, 6, 6).unwrap();
        let window = WindowSpec::new(2, 2).unwrap();
        let mask = materialize_mask(&window, &grid).unwrap();
        let t = random_heads(29, 36, 4);
        let scale = AttentionScale::inverse_sqrt(4);
        let product = literal_product_attention(&t, &mask, scale).unwrap();
        let exclusion = masked_dense_attention(&t, &mask, scale).unwrap();
        assert!(max_abs_diff(&product, &exclusion) > 1e-3);
        // Under the product reading, a masked key still carries weight.
        let all = Array2::from_elem((36, 36), true);
        assert!(
            max_abs_diff(
                &literal_product_attention(&t, &all, scale).unwrap(),
                &dense_attention(&t, scale).unwrap()
            ) < 1e-12
        );
    }

    #[test]
    fn scale_sharpens_argmax_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = rng.random_range(2..10);
            let q = random(&mut rng, 1, 3);
            let k = random(&mut rng, n, 3);
            let q_full = Array2::from_shape_fn((n, 3), |(_, c)| q[[0, c]]);
            let v = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 });
            let t = HeadTensors::new(q_full, k.clone(), v).unwrap();
            let logits: Vec<f64> = (0..n).map(|j| dot(q.row(0), k.row(j))).collect();
            let arg = (0..n)
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
                .unwrap();
            let lo = dense_attention(&t, AttentionScale::new(0.5).unwrap()).unwrap();
            let hi = dense_attention(&t, AttentionScale::new(2.0).unwrap()).unwrap();
            assert!(hi[[0, arg]] > lo[[0, arg]]);
        }
    }
}
