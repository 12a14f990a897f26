//! Reference forward passes for a single attention layer.
//!
//! These stop at `O = A·V` (no output projection, no normalization) and keep
//! every intermediate needed to compare a GQA layer against its converted
//! latent form. Heads own contiguous `d_h`-wide column blocks of `Q`, `K_C`
//! and `V_C`.

use crate::error::{invalid, mismatch, Result};
use crate::factorizer::{GqaLayer, MlaFactors};
use crate::linalg::Matrix;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_groups: usize,
    /// Width of the decoupled rotary channel; 0 disables it.
    pub rope_dim: usize,
    pub rope_base: f64,
    pub seq_len: usize,
}

impl AttentionConfig {
    pub fn new(
        n_heads: usize,
        head_dim: usize,
        n_groups: usize,
        rope_dim: usize,
        seq_len: usize,
    ) -> Result<Self> {
        let cfg = Self {
            d_model: n_heads * head_dim,
            n_heads,
            head_dim,
            n_groups,
            rope_dim,
            rope_base: DEFAULT_ROPE_BASE,
            seq_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn for_layer(layer: &GqaLayer, rope_dim: usize, seq_len: usize) -> Result<Self> {
        Self::new(
            layer.n_heads,
            layer.head_dim,
            layer.n_groups,
            rope_dim,
            seq_len,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.head_dim != self.d_model {
            return Err(invalid(format!(
                "n_heads·head_dim = {} differs from d_model {}",
                self.n_heads * self.head_dim,
                self.d_model
            )));
        }
        if !self.rope_dim.is_multiple_of(2) {
            return Err(invalid(format!("rope_dim {} must be even", self.rope_dim)));
        }
        if !(self.rope_base > 0.0) {
            return Err(invalid("rope_base must be positive"));
        }
        Ok(())
    }

    /// `1/√(d_h + d_r)`.
    pub fn softmax_scale(&self) -> f64 {
        1.0 / ((self.head_dim + self.rope_dim) as f64).sqrt()
    }
}

/// Decoupled rotary adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeAdapters {
    /// `D × n_h·d_r`
    pub w_r_q: Matrix,
    /// `D × d_r`
    pub w_r_k: Matrix,
}

impl RopeAdapters {
    pub fn new(w_r_q: Matrix, w_r_k: Matrix, config: &AttentionConfig) -> Result<Self> {
        let (d, h, r) = (config.d_model, config.n_heads, config.rope_dim);
        if w_r_q.shape() != (d, h * r) || w_r_k.shape() != (d, r) {
            return Err(mismatch(format!(
                "rope adapters {:?}/{:?} do not match D={d}, n_h={h}, d_r={r}",
                w_r_q.shape(),
                w_r_k.shape()
            )));
        }
        Ok(Self { w_r_q, w_r_k })
    }

    pub fn zeros(config: &AttentionConfig) -> Self {
        let (d, h, r) = (config.d_model, config.n_heads, config.rope_dim);
        Self {
            w_r_q: Matrix::zeros(d, h * r),
            w_r_k: Matrix::zeros(d, r),
        }
    }
}

/// Per-token widths of what a decoder would keep in its cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheWidths {
    pub key: usize,
    pub value: usize,
    pub rope_key: usize,
}

impl CacheWidths {
    pub fn total(&self) -> usize {
        self.key + self.value + self.rope_key
    }
}

/// Everything a forward pass produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Per head, `T × T` scaled logits; entries above the diagonal are
    /// masked and stored as 0.
    pub logits: Vec<Matrix>,
    /// Per head, row-stochastic causal attention weights.
    pub weights: Vec<Matrix>,
    /// `T × n_h·d_h`, heads concatenated.
    pub output: Matrix,
    pub cache: CacheWidths,
    /// Multiplier applied to `QKᵀ`.
    pub scale: f64,
}

impl AttentionTrace {
    pub fn seq_len(&self) -> usize {
        self.output.rows()
    }
}

/// Rotates consecutive pairs `(2j, 2j+1)` of each `width`-wide block of row
/// `t` by angle `t·base^(−2j/width)`. Positions are 0-indexed.
pub fn rope_rotate(x: &Matrix, width: usize, base: f64) -> Result<Matrix> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(invalid(format!(
            "rope width {width} must be even and positive"
        )));
    }
    if !x.cols().is_multiple_of(width) {
        return Err(mismatch(format!(
            "{} columns are not a multiple of rope width {width}",
            x.cols()
        )));
    }
    let freqs: Vec<f64> = (0..width / 2)
        .map(|j| base.powf(-2.0 * j as f64 / width as f64))
        .collect();
    let mut out = x.clone();
    let cols = x.cols();
    let data = out.data_mut();
    for t in 0..x.rows() {
        let row = &mut data[t * cols..(t + 1) * cols];
        for block in row.chunks_mut(width) {
            for (j, f) in freqs.iter().enumerate() {
                let (sin, cos) = (t as f64 * f).sin_cos();
                let (a, b) = (block[2 * j], block[2 * j + 1]);
                block[2 * j] = a * cos - b * sin;
                block[2 * j + 1] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

/// Numerically stable causal softmax of one row prefix.
fn softmax_prefix(logits: &[f64], len: usize, out: &mut [f64]) {
    let max = logits[..len]
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for j in 0..len {
        out[j] = (logits[j] - max).exp();
        sum += out[j];
    }
    for v in &mut out[..len] {
        *v /= sum;
    }
    for v in &mut out[len..] {
        *v = 0.0;
    }
}

/// Causal attention for one head given its own query, key and value blocks.
fn attend_head(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64) -> Result<(Matrix, Matrix, Matrix)> {
    let t = q.rows();
    let mut logits = q.matmul(&k.transpose())?.scale(scale).into_vec();
    let mut weights = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            logits[i * t + j] = 0.0;
        }
        softmax_prefix(
            &logits[i * t..(i + 1) * t],
            i + 1,
            &mut weights[i * t..(i + 1) * t],
        );
    }
    let weights = Matrix::new(t, t, weights)?;
    let out = weights.matmul(v)?;
    Ok((Matrix::new(t, t, logits)?, weights, out))
}

struct HeadInputs<'a> {
    q: &'a Matrix,
    k: &'a Matrix,
    v: &'a Matrix,
    /// Per-head rotary query blocks and the shared rotary key.
    rope: Option<(&'a Matrix, &'a Matrix)>,
}

fn run_heads(
    inputs: HeadInputs,
    n_heads: usize,
    head_dim: usize,
    rope_dim: usize,
    cache: CacheWidths,
) -> Result<AttentionTrace> {
    let scale = 1.0 / ((head_dim + rope_dim) as f64).sqrt();
    let mut logits = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut q = inputs.q.column_block(h * head_dim, head_dim)?;
        let mut k = inputs.k.column_block(h * head_dim, head_dim)?;
        if let Some((q_r, k_r)) = inputs.rope {
            q = Matrix::hcat(&[&q, &q_r.column_block(h * rope_dim, rope_dim)?])?;
            k = Matrix::hcat(&[&k, k_r])?;
        }
        let v = inputs.v.column_block(h * head_dim, head_dim)?;
        let (l, w, o) = attend_head(&q, &k, &v, scale)?;
        logits.push(l);
        weights.push(w);
        outs.push(o);
    }
    let output = Matrix::hcat(&outs.iter().collect::<Vec<_>>())?;
    Ok(AttentionTrace {
        logits,
        weights,
        output,
        cache,
        scale,
    })
}

fn check_input(x: &Matrix, d_model: usize) -> Result<()> {
    if x.cols() != d_model || x.rows() == 0 {
        return Err(mismatch(format!(
            "input is {}x{}, expected T×{d_model} with T ≥ 1",
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

/// Grouped-query attention without positional encoding. Head `h` attends
/// with group `⌊h·g_h/n_h⌋`'s key and value.
pub fn gqa_forward(layer: &GqaLayer, x: &Matrix) -> Result<AttentionTrace> {
    check_input(x, layer.d_model)?;
    let (n_h, g_h, d_h) = (layer.n_heads, layer.n_groups, layer.head_dim);
    let q = x.matmul(&layer.w_q)?;
    let k_g = x.matmul(&layer.w_k_g)?;
    let v_g = x.matmul(&layer.w_v_g)?;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut logits = Vec::with_capacity(n_h);
    let mut weights = Vec::with_capacity(n_h);
    let mut outs = Vec::with_capacity(n_h);
    for h in 0..n_h {
        let g = h * g_h / n_h;
        let (l, w, o) = attend_head(
            &q.column_block(h * d_h, d_h)?,
            &k_g.column_block(g * d_h, d_h)?,
            &v_g.column_block(g * d_h, d_h)?,
            scale,
        )?;
        logits.push(l);
        weights.push(w);
        outs.push(o);
    }
    let output = Matrix::hcat(&outs.iter().collect::<Vec<_>>())?;
    let cache = CacheWidths {
        key: g_h * d_h,
        value: g_h * d_h,
        rope_key: 0,
    };
    Ok(AttentionTrace {
        logits,
        weights,
        output,
        cache,
        scale,
    })
}

fn latent_kv(factors: &MlaFactors, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let k_c = x.matmul(&factors.w_a_k)?.matmul(&factors.w_b_k)?;
    let v_c = x.matmul(&factors.w_a_v)?.matmul(&factors.w_b_v)?;
    Ok((k_c, v_c))
}

fn check_mla(factors: &MlaFactors, w_q: &Matrix, config: &AttentionConfig) -> Result<()> {
    config.validate()?;
    let d = config.d_model;
    if w_q.shape() != (d, d)
        || factors.w_a_k.rows() != d
        || factors.w_a_v.rows() != d
        || factors.w_b_k.cols() != d
        || factors.w_b_v.cols() != d
    {
        return Err(mismatch(format!("MLA weights do not match d_model {d}")));
    }
    Ok(())
}

/// Latent attention without the rotary channel: caches `X W_a_K` and
/// `X W_a_V`, rebuilds `K_C`, `V_C` through the up-projections.
pub fn mla_forward(
    factors: &MlaFactors,
    w_q: &Matrix,
    config: &AttentionConfig,
    x: &Matrix,
) -> Result<AttentionTrace> {
    check_mla(factors, w_q, config)?;
    if config.rope_dim != 0 {
        return Err(invalid(
            "mla_forward is the NoPE path; use mla_forward_rope for rope_dim > 0",
        ));
    }
    check_input(x, config.d_model)?;
    let q = x.matmul(w_q)?;
    let (k_c, v_c) = latent_kv(factors, x)?;
    let cache = CacheWidths {
        key: factors.r_k,
        value: factors.r_v,
        rope_key: 0,
    };
    run_heads(
        HeadInputs {
            q: &q,
            k: &k_c,
            v: &v_c,
            rope: None,
        },
        config.n_heads,
        config.head_dim,
        0,
        cache,
    )
}

/// Latent attention with the decoupled rotary channel: per-head rotary
/// queries `(X W_Q^R)` and one shared rotary key `(X W_K^R)`, each rotated at
/// its own position, concatenated to the content channel and scaled by
/// `1/√(d_h + d_r)`. Values come from the content channel only.
pub fn mla_forward_rope(
    factors: &MlaFactors,
    w_q: &Matrix,
    adapters: &RopeAdapters,
    config: &AttentionConfig,
    x: &Matrix,
) -> Result<AttentionTrace> {
    check_mla(factors, w_q, config)?;
    if config.rope_dim == 0 {
        return Err(invalid("mla_forward_rope needs rope_dim > 0"));
    }
    let adapters = RopeAdapters::new(adapters.w_r_q.clone(), adapters.w_r_k.clone(), config)?;
    check_input(x, config.d_model)?;
    let d_r = config.rope_dim;
    let q = x.matmul(w_q)?;
    let (k_c, v_c) = latent_kv(factors, x)?;
    let q_r = rope_rotate(&x.matmul(&adapters.w_r_q)?, d_r, config.rope_base)?;
    let k_r = rope_rotate(&x.matmul(&adapters.w_r_k)?, d_r, config.rope_base)?;
    let cache = CacheWidths {
        key: factors.r_k,
        value: factors.r_v,
        rope_key: d_r,
    };
    run_heads(
        HeadInputs {
            q: &q,
            k: &k_c,
            v: &v_c,
            rope: Some((&q_r, &k_r)),
        },
        config.n_heads,
        config.head_dim,
        d_r,
        cache,
    )
}

/// Logit differences over unmasked entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub max_abs: f64,
    pub frob: f64,
}

pub fn logit_drift(a: &AttentionTrace, b: &AttentionTrace) -> Result<Drift> {
    if a.logits.len() != b.logits.len() || a.seq_len() != b.seq_len() {
        return Err(mismatch("traces differ in head count or sequence length"));
    }
    let t = a.seq_len();
    let (mut max_abs, mut sq) = (0.0f64, 0.0);
    for (la, lb) in a.logits.iter().zip(&b.logits) {
        for i in 0..t {
            for j in 0..=i {
                let d = la[(i, j)] - lb[(i, j)];
                max_abs = max_abs.max(d.abs());
                sq += d * d;
            }
        }
    }
    Ok(Drift {
        max_abs,
        frob: sq.sqrt(),
    })
}

/// Largest absolute difference between two outputs.
pub fn output_drift(a: &AttentionTrace, b: &AttentionTrace) -> Result<f64> {
    a.output
        .max_abs_diff(&b.output)
        .ok_or_else(|| mismatch("outputs differ in shape"))
}

/// KV-cache footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvFootprint {
    pub bytes: u64,
    /// Decimal megabytes (10⁶ bytes).
    pub megabytes: f64,
}

/// `layers · seq_len · batch · width · bytes_per_element`.
pub fn kv_cache_bytes(
    layers: u64,
    seq_len: u64,
    batch: u64,
    width: u64,
    bytes_per_element: u64,
) -> KvFootprint {
    let bytes = layers * seq_len * batch * width * bytes_per_element;
    KvFootprint {
        bytes,
        megabytes: bytes as f64 / 1e6,
    }
}

/// Fractional saving of `candidate` over `baseline`.
pub fn kv_reduction(baseline: &KvFootprint, candidate: &KvFootprint) -> f64 {
    if baseline.bytes == 0 {
        0.0
    } else {
        1.0 - candidate.bytes as f64 / baseline.bytes as f64
    }
}

/// Rounds to `decimals` places with ties away from zero, the convention
/// used when reporting table values (`53.125` → `53.13`).
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let m = 10f64.powi(decimals);
    (x * m).round() / m
}
