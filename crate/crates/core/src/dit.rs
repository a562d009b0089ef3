//! Toy diffusion-transformer stack.
//!
//! Each block is pre-norm self-attention, latent-to-text cross-attention and a
//! feed-forward sublayer, all residual. Self-attention runs either full or
//! inward-windowed. The cross-attention output of a block (before its residual
//! add) can be blended with an externally supplied field, which is how the
//! window branch borrows global guidance from the full branch.
//!
//! Weights are seeded uniform in `[-0.1, 0.1]` and carry no semantics; the
//! stack exists to exercise the attention and override contracts end to end.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention, dense_attention, windowed_attention, AttentionScale, HeadTensors,
};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::latent::LatentField;
use crate::mask::WindowSpec;

const INIT_RANGE: f64 = 0.1;
const NORM_EPS: f64 = 1e-6;
const POS_AMPLITUDE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub blocks: usize,
    pub ff_dim: usize,
    pub text_len: usize,
    pub text_dim: usize,
    /// Latent channels `D` seen by the sampler.
    pub channels: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            model_dim: 32,
            heads: 4,
            head_dim: 8,
            blocks: 2,
            ff_dim: 64,
            text_len: 8,
            text_dim: 16,
            channels: 4,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("blocks", self.blocks),
            ("ff_dim", self.ff_dim),
            ("text_len", self.text_len),
            ("text_dim", self.text_dim),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Domain(format!("{name} must be positive")));
        }
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::Domain(format!(
                "heads ({}) x head_dim ({}) must equal model_dim ({})",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        Ok(())
    }
}

/// Self-attention routing for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    Window(WindowSpec),
}

/// Conditioning tokens, one row per text token.
#[derive(Debug, Clone, PartialEq)]
pub struct TextContext {
    tokens: Array2<f64>,
}

impl TextContext {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::ShapeMismatch(
                "text context needs at least one token".into(),
            ));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text context"));
        }
        Ok(Self { tokens })
    }

    /// Seeded uniform `[-1, 1]` tokens, standing in for an encoded prompt.
    pub fn seeded(len: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(Array2::from_shape_simple_fn((len, dim), || {
            rng.random_range(-1.0..=1.0)
        }))
    }

    /// All-zero tokens, the empty-prompt context for the unconditional pass.
    pub fn null(len: usize, dim: usize) -> Result<Self> {
        Self::new(Array2::zeros((len, dim)))
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub self_norm: Array1<f64>,
    pub self_q: Array2<f64>,
    pub self_k: Array2<f64>,
    pub self_v: Array2<f64>,
    pub self_o: Array2<f64>,
    pub cross_norm: Array1<f64>,
    pub cross_q: Array2<f64>,
    pub cross_k: Array2<f64>,
    pub cross_v: Array2<f64>,
    pub cross_o: Array2<f64>,
    pub ff_norm: Array1<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
}

impl BlockWeights {
    fn generate(dims: &ModelDims, mut draw: impl FnMut() -> f64) -> Self {
        let (dm, dt, ff) = (dims.model_dim, dims.text_dim, dims.ff_dim);
        let mut mat = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), &mut draw);
        let self_q = mat(dm, dm);
        let self_k = mat(dm, dm);
        let self_v = mat(dm, dm);
        let self_o = mat(dm, dm);
        let cross_q = mat(dm, dm);
        let cross_k = mat(dt, dm);
        let cross_v = mat(dt, dm);
        let cross_o = mat(dm, dm);
        let ff_w1 = mat(dm, ff);
        let ff_w2 = mat(ff, dm);
        let ff_b1 = Array1::from_shape_simple_fn(ff, &mut draw);
        let ff_b2 = Array1::from_shape_simple_fn(dm, &mut draw);
        Self {
            self_norm: Array1::ones(dm),
            self_q,
            self_k,
            self_v,
            self_o,
            cross_norm: Array1::ones(dm),
            cross_q,
            cross_k,
            cross_v,
            cross_o,
            ff_norm: Array1::ones(dm),
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
        }
    }

    pub fn seeded(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self::generate(dims, || rng.random_range(-INIT_RANGE..=INIT_RANGE))
    }

    /// Every projection and bias zero, norm gains one.
    pub fn zeros(dims: &ModelDims) -> Self {
        Self::generate(dims, || 0.0)
    }

    /// Zeroes only the cross-attention projections.
    pub fn zero_cross(&mut self) {
        for m in [
            &mut self.cross_q,
            &mut self.cross_k,
            &mut self.cross_v,
            &mut self.cross_o,
        ] {
            m.fill(0.0);
        }
    }

    /// Zeroes only the self-attention projections.
    pub fn zero_self(&mut self) {
        for m in [
            &mut self.self_q,
            &mut self.self_k,
            &mut self.self_v,
            &mut self.self_o,
        ] {
            m.fill(0.0);
        }
    }
}

/// Full parameter set: latent embedding, block stack and velocity head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub dims: ModelDims,
    pub embed_in: Array2<f64>,
    pub time_embed: Array1<f64>,
    pub blocks: Vec<BlockWeights>,
    pub embed_out: Array2<f64>,
}

impl ModelWeights {
    /// Same `(dims, seed)` always regenerates bit-identical weights.
    pub fn seeded(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Array2::from_shape_simple_fn((r, c), || rng.random_range(-INIT_RANGE..=INIT_RANGE))
        };
        let embed_in = draw_mat(&mut rng, dims.channels, dims.model_dim);
        let embed_out = draw_mat(&mut rng, dims.model_dim, dims.channels);
        let time_embed = Array1::from_shape_simple_fn(dims.model_dim, || {
            rng.random_range(-INIT_RANGE..=INIT_RANGE)
        });
        let blocks = (0..dims.blocks)
            .map(|_| BlockWeights::seeded(&dims, &mut rng))
            .collect();
        Ok(Self {
            dims,
            embed_in,
            time_embed,
            blocks,
            embed_out,
        })
    }
}

/// Per-block cross-attention outputs taken before the residual add.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossOutputs(pub Vec<Array2<f64>>);

impl CrossOutputs {
    pub fn blocks(&self) -> &[Array2<f64>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cross outputs from another branch to blend into this forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Override<'a> {
    pub source: &'a CrossOutputs,
    pub lambda: f64,
}

fn rms_norm(x: &Array2<f64>, gain: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        Zip::from(&mut row)
            .and(gain)
            .for_each(|v, &g| *v *= inv * g);
    }
    out
}

fn head_slice(m: &Array2<f64>, head: usize, head_dim: usize) -> Array2<f64> {
    m.slice(s![.., head * head_dim..(head + 1) * head_dim])
        .to_owned()
}

fn check_hidden(latent: &LatentField, weights: &BlockWeights) -> Result<()> {
    if latent.channels() != weights.self_q.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "hidden width {} != model_dim {}",
            latent.channels(),
            weights.self_q.nrows()
        )));
    }
    Ok(())
}

/// Residual self-attention over the hidden field.
pub fn self_attention_sublayer(
    latent: &LatentField,
    weights: &BlockWeights,
    heads: usize,
    mode: AttentionMode,
    grid: &TokenGrid,
    scale: AttentionScale,
) -> Result<LatentField> {
    if latent.grid() != grid {
        return Err(Error::ShapeMismatch(format!(
            "latent grid {} != attention grid {grid}",
            latent.grid()
        )));
    }
    check_hidden(latent, weights)?;
    let x = latent.values();
    let normed = rms_norm(x, &weights.self_norm);
    let q = normed.dot(&weights.self_q);
    let k = normed.dot(&weights.self_k);
    let v = normed.dot(&weights.self_v);
    let head_dim = x.ncols() / heads;

    let mut concat = Array2::zeros(x.raw_dim());
    for h in 0..heads {
        let t = HeadTensors::new_unchecked(
            head_slice(&q, h, head_dim),
            head_slice(&k, h, head_dim),
            head_slice(&v, h, head_dim),
        )?;
        let out = match mode {
            AttentionMode::Full => dense_attention(&t, scale)?,
            AttentionMode::Window(window) => windowed_attention(&t, &window, grid, scale)?,
        };
        concat
            .slice_mut(s![.., h * head_dim..(h + 1) * head_dim])
            .assign(&out);
    }
    LatentField::new(*grid, x + &concat.dot(&weights.self_o))
}

fn cross_raw(
    latent: &LatentField,
    text: &TextContext,
    weights: &BlockWeights,
    heads: usize,
) -> Result<Array2<f64>> {
    check_hidden(latent, weights)?;
    if text.tokens.ncols() != weights.cross_k.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "text width {} != text_dim {}",
            text.tokens.ncols(),
            weights.cross_k.nrows()
        )));
    }
    let x = latent.values();
    let normed = rms_norm(x, &weights.cross_norm);
    let q = normed.dot(&weights.cross_q);
    let k = text.tokens.dot(&weights.cross_k);
    let v = text.tokens.dot(&weights.cross_v);
    let head_dim = x.ncols() / heads;
    let scale = AttentionScale::inverse_sqrt(head_dim);

    let mut concat = Array2::zeros(x.raw_dim());
    for h in 0..heads {
        let out = cross_attention(
            &head_slice(&q, h, head_dim),
            &head_slice(&k, h, head_dim),
            &head_slice(&v, h, head_dim),
            scale,
        )?;
        concat
            .slice_mut(s![.., h * head_dim..(h + 1) * head_dim])
            .assign(&out);
    }
    Ok(concat.dot(&weights.cross_o))
}

/// Residual latent-to-text cross-attention. Returns the updated latent and
/// the raw cross output that was added to it.
pub fn cross_attention_sublayer(
    latent: &LatentField,
    text: &TextContext,
    weights: &BlockWeights,
    heads: usize,
) -> Result<(LatentField, Array2<f64>)> {
    let cross = cross_raw(latent, text, weights, heads)?;
    let next = LatentField::new(*latent.grid(), latent.values() + &cross)?;
    Ok((next, cross))
}

/// `lambda * full_out + (1 - lambda) * window_out`. The endpoints return
/// their operand unchanged.
pub fn override_cross(
    window_out: &Array2<f64>,
    full_out: &Array2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    if window_out.dim() != full_out.dim() {
        return Err(Error::ShapeMismatch(format!(
            "override operands {:?} vs {:?}",
            window_out.dim(),
            full_out.dim()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if lambda == 1.0 {
        return Ok(full_out.clone());
    }
    if lambda == 0.0 {
        return Ok(window_out.clone());
    }
    Ok(Zip::from(window_out)
        .and(full_out)
        .map_collect(|&w, &f| lambda * f + (1.0 - lambda) * w))
}

fn feed_forward_sublayer(latent: &LatentField, weights: &BlockWeights) -> Result<LatentField> {
    let x = latent.values();
    let mut hidden = rms_norm(x, &weights.ff_norm).dot(&weights.ff_w1) + &weights.ff_b1;
    hidden.mapv_inplace(|v| v / (1.0 + (-v).exp()));
    let out = hidden.dot(&weights.ff_w2) + &weights.ff_b2;
    LatentField::new(*latent.grid(), x + &out)
}

/// Runs the block stack over a hidden field of width `model_dim`.
///
/// With an override, each block's cross output is blended per
/// [`override_cross`] before its residual add. The returned [`CrossOutputs`]
/// are the per-block fields actually added.
pub fn model_forward(
    hidden: &LatentField,
    text: &TextContext,
    blocks: &[BlockWeights],
    heads: usize,
    mode: AttentionMode,
    scale: AttentionScale,
    override_with: Option<Override<'_>>,
) -> Result<(LatentField, CrossOutputs)> {
    if let Some(o) = &override_with {
        if o.source.len() != blocks.len() {
            return Err(Error::ShapeMismatch(format!(
                "override source has {} blocks, model has {}",
                o.source.len(),
                blocks.len()
            )));
        }
    }
    let grid = *hidden.grid();
    let mut x = hidden.clone();
    let mut used = Vec::with_capacity(blocks.len());
    for (b, weights) in blocks.iter().enumerate() {
        x = self_attention_sublayer(&x, weights, heads, mode, &grid, scale)?;
        let mut cross = cross_raw(&x, text, weights, heads)?;
        if let Some(o) = &override_with {
            cross = override_cross(&cross, &o.source.0[b], o.lambda)?;
        }
        x = LatentField::new(grid, x.values() + &cross)?;
        used.push(cross);
        x = feed_forward_sublayer(&x, weights)?;
    }
    Ok((x, CrossOutputs(used)))
}

/// Fixed sinusoidal positional term; channel `c` encodes axis `c % 3` of
/// `(t, y, x)` at frequency index `c / 3`.
pub fn positional_term(grid: &TokenGrid, model_dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((grid.token_count(), model_dim), |(i, c)| {
        let (t, y, x) = grid.coord_of(i).expect("index within grid");
        let pos = [t, y, x][c % 3] as f64;
        let k = (c / 3) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * (k / 2.0).floor() / model_dim as f64);
        let angle = pos * freq;
        POS_AMPLITUDE
            * if (c / 3) % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
    })
}

/// Velocity prediction: embed the `channels`-wide latent with positional and
/// noise-level terms, run the stack, project back to `channels`.
pub fn predict_velocity(
    latent: &LatentField,
    sigma: f64,
    text: &TextContext,
    weights: &ModelWeights,
    mode: AttentionMode,
    scale: AttentionScale,
    override_with: Option<Override<'_>>,
) -> Result<(LatentField, CrossOutputs)> {
    let dims = &weights.dims;
    if latent.channels() != dims.channels {
        return Err(Error::ShapeMismatch(format!(
            "latent has {} channels, model expects {}",
            latent.channels(),
            dims.channels
        )));
    }
    let grid = *latent.grid();
    let time = weights.time_embed.mapv(|v| v * sigma).insert_axis(Axis(0));
    let embedded =
        latent.values().dot(&weights.embed_in) + positional_term(&grid, dims.model_dim) + time;
    let hidden = LatentField::new(grid, embedded)?;
    let (out, cross) = model_forward(
        &hidden,
        text,
        &weights.blocks,
        dims.heads,
        mode,
        scale,
        override_with,
    )?;
    let velocity = LatentField::new(grid, out.values().dot(&weights.embed_out))?;
    Ok((velocity, cross))
}
