//! Two-branch attention.
//!
//! One shared qkv projection feeds two paths: patch attention (PA), the
//! usual scaled dot-product attention over the patch tokens of each sample
//! and head, and derivative attention (DA), which reshapes the same q/k/v
//! across the merged batch-head axis at each patch index, takes first-order
//! finite differences of the similarity logits along that merged axis, and
//! softmaxes the differences.
//!
//! Note that DA deliberately mixes information across batch elements, at
//! training and at evaluation time. With a single sample the mixing spans
//! heads only. This is a property of the architecture, not an oversight;
//! batch composition therefore affects DA outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Vid};
use crate::{Error, Result};

/// Attention hyperparameters. Defaults follow the reference configuration
/// (embed dim 1024, 16 heads, dropout 0.1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub dropout: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            embed_dim: 1024,
            num_heads: 16,
            dropout: 0.1,
        }
    }
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, num_heads: usize) -> Self {
        AttentionConfig {
            embed_dim,
            num_heads,
            ..AttentionConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("attention dims must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Tape handles for one attention module's weights: the shared qkv
/// projection (C x 3C with bias) and the output projection (2C x C for the
/// two-branch module, C x C for single-branch).
#[derive(Debug, Clone, Copy)]
pub struct AttentionVids {
    pub w_qkv: Vid,
    pub b_qkv: Vid,
    pub w_o: Vid,
    pub b_o: Vid,
}

/// Inverted dropout with its own seeded stream; disabled by passing `None`
/// to the forward functions.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Vid) -> Result<Vid> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x).to_vec();
        let n = tape.data(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = tape.constant(mask, &shape)?;
        tape.mul(x, m)
    }
}

/// Shared projection `[q, k, v] = x W_qkv + b`, split into thirds and
/// reshaped per head to (B, N_h, N, d_h).
pub fn project_qkv(
    tape: &mut Tape,
    x: Vid,
    w: &AttentionVids,
    cfg: &AttentionConfig,
) -> Result<(Vid, Vid, Vid)> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != c {
        return Err(Error::shape(
            "project_qkv",
            format!("input {shape:?} vs embed_dim {c}"),
        ));
    }
    if tape.shape(w.w_qkv) != [c, 3 * c] {
        return Err(Error::shape(
            "project_qkv",
            format!("w_qkv {:?} vs [{c}, {}]", tape.shape(w.w_qkv), 3 * c),
        ));
    }
    let (b, n) = (shape[0], shape[1]);
    let flat = tape.reshape(x, &[b * n, c])?;
    let proj = tape.matmul(flat, w.w_qkv)?;
    let proj = tape.add_bcast(proj, w.b_qkv)?;
    let mut heads = Vec::with_capacity(3);
    for third in 0..3 {
        let part = tape.slice(proj, 1, third * c, c)?;
        let part = tape.reshape(part, &[b, n, cfg.num_heads, cfg.head_dim()])?;
        heads.push(tape.permute(part, &[0, 2, 1, 3])?);
    }
    Ok((heads[0], heads[1], heads[2]))
}

/// PA attention probabilities: softmax(q k^T / sqrt(d_h)) over key patches,
/// per sample and head.
pub fn patch_attention_probs(tape: &mut Tape, q: Vid, k: Vid) -> Result<Vid> {
    let qs = tape.shape(q);
    if qs.len() < 2 {
        return Err(Error::shape("patch_attention", format!("{qs:?}")));
    }
    let dh = qs[qs.len() - 1] as f64;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / dh.sqrt());
    let axis = tape.shape(scaled).len() - 1;
    tape.softmax(scaled, axis)
}

/// Patch-wise scaled dot-product attention output A^pa v.
pub fn patch_attention(tape: &mut Tape, q: Vid, k: Vid, v: Vid) -> Result<Vid> {
    let probs = patch_attention_probs(tape, q, k)?;
    tape.matmul(probs, v)
}

/// (B, N_h, N, d_h) -> (N, B*N_h, d_h): the merged batch-head view used by
/// the derivative branch. Merge order is batch-major (index = b * N_h + h).
pub fn to_merged_tokens(tape: &mut Tape, x: Vid) -> Result<Vid> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("to_merged_tokens", format!("{s:?}")));
    }
    let p = tape.permute(x, &[2, 0, 1, 3])?;
    tape.reshape(p, &[s[2], s[0] * s[1], s[3]])
}

/// Exact inverse of [`to_merged_tokens`].
pub fn from_merged_tokens(tape: &mut Tape, x: Vid, batch: usize, heads: usize) -> Result<Vid> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != batch * heads {
        return Err(Error::shape(
            "from_merged_tokens",
            format!("{s:?} vs batch {batch} x heads {heads}"),
        ));
    }
    let r = tape.reshape(x, &[s[0], batch, heads, s[2]])?;
    tape.permute(r, &[1, 2, 0, 3])
}

/// DA attention probabilities from similarity logits S of shape (N, M, M):
/// adjacent-row differences along the merged axis, a zero row appended to
/// restore shape, then softmax over the last axis. A zero logit row
/// softmaxes to the uniform distribution, so the pad introduces no bias.
pub fn derivative_probs_from_logits(tape: &mut Tape, s: Vid) -> Result<Vid> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::shape("derivative_probs", format!("{shape:?}")));
    }
    let m = shape[1];
    if m < 2 {
        return Err(Error::Config(format!(
            "derivative attention needs batch * heads >= 2, got {m}"
        )));
    }
    let upper = tape.slice(s, 1, 1, m - 1)?;
    let lower = tape.slice(s, 1, 0, m - 1)?;
    let diff = tape.sub(upper, lower)?;
    let padded = tape.pad_zero(diff, 1, 0, 1)?;
    tape.softmax(padded, 2)
}

/// DA attention probabilities straight from projected q, k.
pub fn derivative_attention_probs(tape: &mut Tape, q: Vid, k: Vid) -> Result<Vid> {
    let shape = tape.shape(q);
    if shape.len() != 4 {
        return Err(Error::shape("derivative_attention", format!("{shape:?}")));
    }
    let dh = shape[3] as f64;
    let qs = to_merged_tokens(tape, q)?;
    let ks = to_merged_tokens(tape, k)?;
    let kt = tape.transpose(ks)?;
    let logits = tape.matmul(qs, kt)?;
    let scaled = tape.scale(logits, 1.0 / dh.sqrt());
    derivative_probs_from_logits(tape, scaled)
}

/// Derivative-based attention branch: reshape across the merged batch-head
/// axis, difference the logits, softmax, apply to values, reshape back.
pub fn derivative_attention(tape: &mut Tape, q: Vid, k: Vid, v: Vid) -> Result<Vid> {
    let probs = derivative_attention_probs(tape, q, k)?;
    let s = tape.shape(q).to_vec();
    let (batch, heads) = (s[0], s[1]);
    let vs = to_merged_tokens(tape, v)?;
    let out = tape.matmul(probs, vs)?;
    from_merged_tokens(tape, out, batch, heads)
}

/// Merges (B, N_h, N, d) back to (B, N, N_h * d).
fn merge_heads(tape: &mut Tape, x: Vid) -> Result<Vid> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Full two-branch module: shared projection, both branches on the same
/// (q, k, v), concatenation along the per-head feature axis (2 d_h per
/// head), output projection 2C -> C, then dropout when training.
pub fn two_branch_attention(
    tape: &mut Tape,
    x: Vid,
    w: &AttentionVids,
    cfg: &AttentionConfig,
    dropout: Option<&mut Dropout>,
) -> Result<Vid> {
    let c = cfg.embed_dim;
    if tape.shape(w.w_o) != [2 * c, c] {
        return Err(Error::shape(
            "two_branch_attention",
            format!("w_o {:?} vs [{}, {c}]", tape.shape(w.w_o), 2 * c),
        ));
    }
    let (q, k, v) = project_qkv(tape, x, w, cfg)?;
    let (b, n) = (tape.shape(x)[0], tape.shape(x)[1]);
    let pa = patch_attention(tape, q, k, v)?;
    let da = derivative_attention(tape, q, k, v)?;
    let cat = tape.concat_last_axis(pa, da)?; // (B, N_h, N, 2 d_h)
    let merged = merge_heads(tape, cat)?; // (B, N, 2C)
    let flat = tape.reshape(merged, &[b * n, 2 * c])?;
    let out = tape.matmul(flat, w.w_o)?;
    let out = tape.add_bcast(out, w.b_o)?;
    let out = tape.reshape(out, &[b, n, c])?;
    match dropout {
        Some(d) => d.apply(tape, out),
        None => Ok(out),
    }
}

/// Single-branch baseline: PA only, output projection C -> C.
pub fn single_branch_attention(
    tape: &mut Tape,
    x: Vid,
    w: &AttentionVids,
    cfg: &AttentionConfig,
    dropout: Option<&mut Dropout>,
) -> Result<Vid> {
    let c = cfg.embed_dim;
    if tape.shape(w.w_o) != [c, c] {
        return Err(Error::shape(
            "single_branch_attention",
            format!("w_o {:?} vs [{c}, {c}]", tape.shape(w.w_o)),
        ));
    }
    let (q, k, v) = project_qkv(tape, x, w, cfg)?;
    let (b, n) = (tape.shape(x)[0], tape.shape(x)[1]);
    let pa = patch_attention(tape, q, k, v)?;
    let merged = merge_heads(tape, pa)?;
    let flat = tape.reshape(merged, &[b * n, c])?;
    let out = tape.matmul(flat, w.w_o)?;
    let out = tape.add_bcast(out, w.b_o)?;
    let out = tape.reshape(out, &[b, n, c])?;
    match dropout {
        Some(d) => d.apply(tape, out),
        None => Ok(out),
    }
}
