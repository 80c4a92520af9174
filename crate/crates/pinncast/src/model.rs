//! The full forecaster: patch embedding with lead-time conditioning, a stack
//! of ODE-transformer blocks, and a linear head back to the grid.
//!
//! Each block follows the residual form
//!
//! ```text
//! h <- h + ODESolve(LN(TA(h)))
//! h <- h + ODESolve(LN(MLP(h)))
//! ```
//!
//! i.e. transform first, then layer norm, then the continuous-depth update.
//! With `use_node = false` the ODE solve reduces to plain residual addition;
//! with `use_two_branch = false` TA is replaced by single-branch attention.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    single_branch_attention, two_branch_attention, AttentionConfig, AttentionVids, Dropout,
};
use crate::data::GridField;
use crate::diffcore::{Tape, Tensor, Vid};
use crate::odesolve::{ode_solve, BoundVectorField, OdeSolveConfig};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::physics::LossWeights;
use crate::{Error, Result};

/// Architectural hyperparameters. Defaults follow the reference
/// configuration (patch 2, width 1024, depth 4, 16 heads, dropout 0.1,
/// mlp ratio 4, both architecture flags on).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub var_names: Vec<String>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub use_two_branch: bool,
    pub use_node: bool,
    pub ode: OdeSolveConfig,
}

impl ModelConfig {
    pub fn new(var_names: Vec<String>, grid_h: usize, grid_w: usize) -> Self {
        ModelConfig {
            var_names,
            grid_h,
            grid_w,
            patch_size: 2,
            embed_dim: 1024,
            depth: 4,
            heads: 16,
            mlp_ratio: 4,
            dropout: 0.1,
            use_two_branch: true,
            use_node: true,
            ode: OdeSolveConfig::default(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn n_tokens(&self) -> usize {
        (self.grid_h / self.patch_size) * (self.grid_w / self.patch_size)
    }

    fn patch_values(&self) -> usize {
        self.n_vars() * self.patch_size * self.patch_size
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            embed_dim: self.embed_dim,
            num_heads: self.heads,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.var_names.is_empty() {
            return Err(Error::Config("model needs at least one variable".into()));
        }
        if self.patch_size == 0
            || !self.grid_h.is_multiple_of(self.patch_size)
            || !self.grid_w.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "grid {}x{} not divisible by patch size {}",
                self.grid_h, self.grid_w, self.patch_size
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        self.attention().validate()?;
        self.ode.validate()
    }
}

/// The four architecture/objective combinations used in component studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single-branch attention, discrete residuals, data loss only.
    Vanilla,
    /// Two-branch attention only.
    TwoBranch,
    /// ODE residual updates only.
    Node,
    /// Two-branch attention, ODE updates, and the physics loss.
    Full,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [Variant::Vanilla, Variant::TwoBranch, Variant::Node, Variant::Full]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::TwoBranch => "two_branch",
            Variant::Node => "node",
            Variant::Full => "full",
        }
    }

    pub fn apply(&self, cfg: &mut ModelConfig) {
        let (two_branch, node) = match self {
            Variant::Vanilla => (false, false),
            Variant::TwoBranch => (true, false),
            Variant::Node => (false, true),
            Variant::Full => (true, true),
        };
        cfg.use_two_branch = two_branch;
        cfg.use_node = node;
    }

    /// Physics penalties are active only in the full configuration.
    pub fn loss_weights(&self) -> LossWeights {
        match self {
            Variant::Full => LossWeights::default(),
            _ => LossWeights::mse_only(),
        }
    }
}

struct EmbedIds {
    w_patch: ParamId,
    b_patch: ParamId,
    pos: ParamId,
    w_lead: ParamId,
    b_lead: ParamId,
}

struct BlockIds {
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
    vf_attn: Option<[ParamId; 4]>,
    vf_mlp: Option<[ParamId; 4]>,
}

/// Forecaster with its parameter store.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    embed: EmbedIds,
    blocks: Vec<BlockIds>,
    final_ln_gain: ParamId,
    final_ln_bias: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

const INIT_STD: f64 = 0.02;

impl Model {
    /// Builds a model with deterministic initialization: truncated-normal
    /// projections (std 0.02), zero biases, unit layer-norm gains, and
    /// zeroed vector-field output layers so the initial ODE dynamics are
    /// the identity map.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.embed_dim;
        let n = cfg.n_tokens();
        let pv = cfg.patch_values();

        let embed = EmbedIds {
            w_patch: store.add("embed.w_patch", trunc_normal(&mut rng, &[pv, c], INIT_STD)),
            b_patch: store.add("embed.b_patch", Tensor::zeros(&[c])),
            pos: store.add("embed.pos", trunc_normal(&mut rng, &[n, c], INIT_STD)),
            w_lead: store.add("embed.w_lead", trunc_normal(&mut rng, &[c], INIT_STD)),
            b_lead: store.add("embed.b_lead", Tensor::zeros(&[c])),
        };

        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let p = |suffix: &str| format!("blocks.{b}.{suffix}");
            let wo_rows = if cfg.use_two_branch { 2 * c } else { c };
            let add_field = |store: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str| {
                [
                    store.add(p(&format!("{tag}.w1")), trunc_normal(rng, &[c, c], INIT_STD)),
                    store.add(p(&format!("{tag}.b1")), Tensor::zeros(&[c])),
                    store.add(p(&format!("{tag}.w2")), Tensor::zeros(&[c, c])),
                    store.add(p(&format!("{tag}.b2")), Tensor::zeros(&[c])),
                ]
            };
            blocks.push(BlockIds {
                w_qkv: store.add(p("attn.w_qkv"), trunc_normal(&mut rng, &[c, 3 * c], INIT_STD)),
                b_qkv: store.add(p("attn.b_qkv"), Tensor::zeros(&[3 * c])),
                w_o: store.add(p("attn.w_o"), trunc_normal(&mut rng, &[wo_rows, c], INIT_STD)),
                b_o: store.add(p("attn.b_o"), Tensor::zeros(&[c])),
                ln1_gain: store.add(p("ln1.gain"), Tensor::filled(&[c], 1.0)),
                ln1_bias: store.add(p("ln1.bias"), Tensor::zeros(&[c])),
                ln2_gain: store.add(p("ln2.gain"), Tensor::filled(&[c], 1.0)),
                ln2_bias: store.add(p("ln2.bias"), Tensor::zeros(&[c])),
                mlp_w1: store.add(p("mlp.w1"), trunc_normal(&mut rng, &[c, cfg.mlp_ratio * c], INIT_STD)),
                mlp_b1: store.add(p("mlp.b1"), Tensor::zeros(&[cfg.mlp_ratio * c])),
                mlp_w2: store.add(p("mlp.w2"), trunc_normal(&mut rng, &[cfg.mlp_ratio * c, c], INIT_STD)),
                mlp_b2: store.add(p("mlp.b2"), Tensor::zeros(&[c])),
                vf_attn: cfg.use_node.then(|| add_field(&mut store, &mut rng, "vf_attn")),
                vf_mlp: cfg.use_node.then(|| add_field(&mut store, &mut rng, "vf_mlp")),
            });
        }

        let final_ln_gain = store.add("final_ln.gain", Tensor::filled(&[c], 1.0));
        let final_ln_bias = store.add("final_ln.bias", Tensor::zeros(&[c]));
        let head_w = store.add("head.w", trunc_normal(&mut rng, &[c, pv], INIT_STD));
        let head_b = store.add("head.b", Tensor::zeros(&[pv]));

        Ok(Model {
            cfg,
            store,
            embed,
            blocks,
            final_ln_gain,
            final_ln_bias,
            head_w,
            head_b,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_values()
    }

    /// Copies every parameter whose name and shape exist in `other`.
    pub fn copy_matching_params(&mut self, other: &Model) {
        let mut values = Vec::new();
        for (_, name, tensor) in other.store.iter() {
            values.push((name.to_string(), tensor.data().to_vec()));
        }
        for (name, data) in values {
            let _ = self.store.set_by_name(&name, &data);
        }
    }

    /// Tokenizes a (B, V, H, W) field: non-overlapping p x p patches with
    /// all variables stacked as channels, linear projection to the embed
    /// dim, learned positional embedding, and a lead-time embedding (linear
    /// map of delta / 24) added to every token.
    pub fn patch_embed(&self, tape: &mut Tape, x: Vid, delta_hours: f64) -> Result<Vid> {
        let cfg = &self.cfg;
        let shape = tape.shape(x);
        let valid = shape.len() == 4
            && shape[1] == cfg.n_vars()
            && shape[2] == cfg.grid_h
            && shape[3] == cfg.grid_w;
        if !valid {
            return Err(Error::shape(
                "patch_embed",
                format!(
                    "{shape:?} vs (B, {}, {}, {})",
                    cfg.n_vars(),
                    cfg.grid_h,
                    cfg.grid_w
                ),
            ));
        }
        if !(delta_hours > 0.0) {
            return Err(Error::Config(format!("lead time must be positive, got {delta_hours}")));
        }
        let b = shape[0];
        let n = cfg.n_tokens();
        let patches = patchify(tape, x, cfg.patch_size)?;
        let flat = tape.reshape(patches, &[b * n, cfg.patch_values()])?;
        let w_patch = tape.param(&self.store, self.embed.w_patch);
        let b_patch = tape.param(&self.store, self.embed.b_patch);
        let proj = tape.matmul(flat, w_patch)?;
        let proj = tape.add_bcast(proj, b_patch)?;
        let tokens = tape.reshape(proj, &[b, n, cfg.embed_dim])?;
        let pos = tape.param(&self.store, self.embed.pos);
        let tokens = tape.add_bcast(tokens, pos)?;
        let w_lead = tape.param(&self.store, self.embed.w_lead);
        let b_lead = tape.param(&self.store, self.embed.b_lead);
        let lead = tape.scale(w_lead, delta_hours / 24.0);
        let lead = tape.add(lead, b_lead)?;
        tape.add_bcast(tokens, lead)
    }

    fn residual_update(
        &self,
        tape: &mut Tape,
        normed: Vid,
        field_ids: Option<&[ParamId; 4]>,
    ) -> Result<Vid> {
        match field_ids {
            Some(ids) => {
                let field = BoundVectorField::from_store(
                    tape,
                    &self.store,
                    (ids[0], ids[1], ids[2], ids[3]),
                    self.cfg.embed_dim,
                );
                ode_solve(tape, &field, normed, 0.0, 1.0, &self.cfg.ode)
            }
            None => Ok(normed),
        }
    }

    /// One encoder block: attention and MLP sublayers, each followed by
    /// layer norm and an ODE-governed (or plain) residual update.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        h: Vid,
        block_idx: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Vid> {
        let block = &self.blocks[block_idx];
        let attn_cfg = self.cfg.attention();
        let w = AttentionVids {
            w_qkv: tape.param(&self.store, block.w_qkv),
            b_qkv: tape.param(&self.store, block.b_qkv),
            w_o: tape.param(&self.store, block.w_o),
            b_o: tape.param(&self.store, block.b_o),
        };
        let attn = if self.cfg.use_two_branch {
            two_branch_attention(tape, h, &w, &attn_cfg, dropout.as_deref_mut())?
        } else {
            single_branch_attention(tape, h, &w, &attn_cfg, dropout.as_deref_mut())?
        };
        let g1 = tape.param(&self.store, block.ln1_gain);
        let b1 = tape.param(&self.store, block.ln1_bias);
        let n1 = tape.layer_norm(attn, g1, b1)?;
        let r1 = self.residual_update(tape, n1, block.vf_attn.as_ref())?;
        let h = tape.add(h, r1)?;

        let shape = tape.shape(h).to_vec();
        let (b, n) = (shape[0], shape[1]);
        let c = self.cfg.embed_dim;
        let flat = tape.reshape(h, &[b * n, c])?;
        let w1 = tape.param(&self.store, block.mlp_w1);
        let bb1 = tape.param(&self.store, block.mlp_b1);
        let w2 = tape.param(&self.store, block.mlp_w2);
        let bb2 = tape.param(&self.store, block.mlp_b2);
        let u = tape.matmul(flat, w1)?;
        let u = tape.add_bcast(u, bb1)?;
        let u = tape.relu(u);
        let u = match dropout.as_deref_mut() {
            Some(d) => d.apply(tape, u)?,
            None => u,
        };
        let u = tape.matmul(u, w2)?;
        let u = tape.add_bcast(u, bb2)?;
        let u = match dropout {
            Some(d) => d.apply(tape, u)?,
            None => u,
        };
        let mlp = tape.reshape(u, &[b, n, c])?;
        let g2 = tape.param(&self.store, block.ln2_gain);
        let b2 = tape.param(&self.store, block.ln2_bias);
        let n2 = tape.layer_norm(mlp, g2, b2)?;
        let r2 = self.residual_update(tape, n2, block.vf_mlp.as_ref())?;
        tape.add(h, r2)
    }

    /// Full forward pass on an existing tape; `x` is a (B, V, H, W) value in
    /// model space. Pass a dropout stream only during training.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Vid,
        delta_hours: f64,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Vid> {
        let mut h = self.patch_embed(tape, x, delta_hours)?;
        let b = tape.shape(x)[0];
        for i in 0..self.blocks.len() {
            h = self.block_forward(tape, h, i, dropout.as_deref_mut())?;
        }
        let g = tape.param(&self.store, self.final_ln_gain);
        let bb = tape.param(&self.store, self.final_ln_bias);
        let h = tape.layer_norm(h, g, bb)?;
        let n = self.cfg.n_tokens();
        let flat = tape.reshape(h, &[b * n, self.cfg.embed_dim])?;
        let w = tape.param(&self.store, self.head_w);
        let hb = tape.param(&self.store, self.head_b);
        let out = tape.matmul(flat, w)?;
        let out = tape.add_bcast(out, hb)?;
        let tokens = tape.reshape(out, &[b, n, self.cfg.patch_values()])?;
        unpatchify(
            tape,
            tokens,
            self.cfg.n_vars(),
            self.cfg.grid_h,
            self.cfg.grid_w,
            self.cfg.patch_size,
        )
    }

    /// Single-pass forecast in evaluation mode: a deterministic pure
    /// function of (weights, x, delta). Input and output share the model's
    /// working space; normalization is the caller's concern.
    pub fn forecast(&self, x: &GridField, delta_hours: f64) -> Result<GridField> {
        let (b, ..) = x.dims();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x.to_tensor());
        let out = self.forward(&mut tape, xv, delta_hours, None)?;
        x.with_data(tape.data(out).to_vec(), b)
    }
}

/// (B, V, H, W) -> (B, N, V p^2): non-overlapping p x p patches, variables
/// stacked as channels.
pub fn patchify(tape: &mut Tape, x: Vid, p: usize) -> Result<Vid> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
        return Err(Error::shape(
            "patchify",
            format!("{s:?} with patch size {p}"),
        ));
    }
    let (b, v, h, w) = (s[0], s[1], s[2], s[3]);
    let (hp, wp) = (h / p, w / p);
    let r = tape.reshape(x, &[b, v, hp, p, wp, p])?;
    let t = tape.permute(r, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(t, &[b, hp * wp, v * p * p])
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tape: &mut Tape, tokens: Vid, v: usize, h: usize, w: usize, p: usize) -> Result<Vid> {
    let s = tape.shape(tokens).to_vec();
    let (hp, wp) = (h / p, w / p);
    if s.len() != 3 || s[1] != hp * wp || s[2] != v * p * p {
        return Err(Error::shape(
            "unpatchify",
            format!("{s:?} vs (B, {}, {})", hp * wp, v * p * p),
        ));
    }
    let b = s[0];
    let r = tape.reshape(tokens, &[b, hp, wp, v, p, p])?;
    let t = tape.permute(r, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(t, &[b, v, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_lats, default_lons};
    use crate::odesolve::OdeMethod;
    use rand::{Rng, SeedableRng};

    fn micro_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::new(
            vec!["t2m".into(), "u10".into(), "v10".into()],
            8,
            8,
        );
        cfg.embed_dim = 16;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.ode.method = OdeMethod::Rk4Fixed;
        cfg.ode.rk4_steps = 4;
        cfg
    }

    fn rand_field(rng: &mut ChaCha8Rng, cfg: &ModelConfig, b: usize) -> GridField {
        let n = b * cfg.n_vars() * cfg.grid_h * cfg.grid_w;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        GridField::new(
            data,
            b,
            cfg.var_names.clone(),
            default_lats(cfg.grid_h),
            default_lons(cfg.grid_w),
        )
        .unwrap()
    }

    #[test]
    fn patch_embed_token_shape() {
        let model = Model::new(micro_cfg(), 0).unwrap();
        assert_eq!(model.cfg.n_tokens(), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_field(&mut rng, &model.cfg, 2);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x.to_tensor());
        let tokens = model.patch_embed(&mut tape, xv, 6.0).unwrap();
        assert_eq!(tape.shape(tokens), &[2, 16, 16]);
    }

    #[test]
    fn zero_input_with_zero_embeddings_gives_zero_tokens() {
        let mut model = Model::new(micro_cfg(), 0).unwrap();
        let c = model.cfg.embed_dim;
        let n = model.cfg.n_tokens();
        model.store.set_by_name("embed.pos", &vec![0.0; n * c]).unwrap();
        model.store.set_by_name("embed.w_lead", &vec![0.0; c]).unwrap();
        let mut tape = Tape::new();
        let xv = tape
            .constant(vec![0.0; 3 * 8 * 8], &[1, 3, 8, 8])
            .unwrap();
        let tokens = model.patch_embed(&mut tape, xv, 6.0).unwrap();
        assert!(tape.data(tokens).iter().all(|&t| t == 0.0));
    }

    #[test]
    fn lead_time_conditions_the_tokens() {
        let model = Model::new(micro_cfg(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_field(&mut rng, &model.cfg, 1);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x.to_tensor());
        let t6 = model.patch_embed(&mut tape, xv, 6.0).unwrap();
        let t24 = model.patch_embed(&mut tape, xv, 24.0).unwrap();
        assert_ne!(tape.data(t6), tape.data(t24));
        assert!(model.patch_embed(&mut tape, xv, 0.0).is_err());
    }

    #[test]
    fn unpatchify_inverts_patchify_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(data.clone(), &[2, 3, 8, 8]).unwrap();
        let tokens = patchify(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(tokens), &[2, 16, 12]);
        let back = unpatchify(&mut tape, tokens, 3, 8, 8, 2).unwrap();
        assert_eq!(tape.data(back), data.as_slice());
    }

    #[test]
    fn zero_dynamics_matches_discrete_residuals_bitwise() {
        // vf.w2 and vf.b2 are zero-initialized, so f == 0 out of the box.
        let node_model = Model::new(micro_cfg(), 5).unwrap();
        let mut plain_cfg = micro_cfg();
        plain_cfg.use_node = false;
        let mut plain_model = Model::new(plain_cfg, 5).unwrap();
        plain_model.copy_matching_params(&node_model);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_field(&mut rng, &node_model.cfg, 2);
        let a = node_model.forecast(&x, 6.0).unwrap();
        let b = plain_model.forecast(&x, 6.0).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn all_zero_weights_and_gain_preserve_the_state() {
        let mut model = Model::new(micro_cfg(), 7).unwrap();
        let names: Vec<(String, usize)> = model
            .store
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.numel()))
            .collect();
        for (name, numel) in names {
            model.store.set_by_name(&name, &vec![0.0; numel]).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h_data: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let h = tape.constant(h_data.clone(), &[2, 16, 16]).unwrap();
        let out = model.block_forward(&mut tape, h, 0, None).unwrap();
        assert_eq!(tape.data(out), h_data.as_slice());
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut cfg = micro_cfg();
        cfg.embed_dim = 8;
        cfg.heads = 2;
        let model = Model::new(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h_data: Vec<f64> = (0..1 * 4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |hd: &[f64]| {
            let mut tape = Tape::new();
            let h = tape.leaf(&Tensor::new(hd.to_vec(), &[1, 4, 8]).unwrap().with_grad());
            let out = model.block_forward(&mut tape, h, 0, None).unwrap();
            let m = tape.mean(out);
            let loss = tape.scale(m, (4 * 8) as f64);
            (tape, loss, h)
        };
        let (mut tape, loss, h) = run(&h_data);
        tape.backward(loss).unwrap();
        let grad = tape.grad(h).unwrap().to_vec();

        let step = 1e-5;
        let mut pick = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..16 {
            let i = pick.gen_range(0..h_data.len());
            let mut hp = h_data.clone();
            hp[i] += step;
            let mut hm = h_data.clone();
            hm[i] -= step;
            let (tp, lp, _) = run(&hp);
            let (tm, lm, _) = run(&hm);
            let fd = (tp.scalar_value(lp) - tm.scalar_value(lm)) / (2.0 * step);
            let diff = (grad[i] - fd).abs();
            assert!(
                diff <= 1e-7 || diff <= 1e-4 * grad[i].abs().max(fd.abs()),
                "block grad {i}: analytic {} fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn forecast_preserves_shape_and_is_deterministic() {
        let model = Model::new(micro_cfg(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_field(&mut rng, &model.cfg, 2);
        let a = model.forecast(&x, 6.0).unwrap();
        assert_eq!(a.dims(), x.dims());
        let b = model.forecast(&x, 6.0).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn ablation_variants_construct_and_forecast() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut counts = std::collections::BTreeMap::new();
        for variant in Variant::all() {
            let mut cfg = micro_cfg();
            variant.apply(&mut cfg);
            let model = Model::new(cfg, 15).unwrap();
            let x = rand_field(&mut rng, &model.cfg, 2);
            let out = model.forecast(&x, 6.0).unwrap();
            assert_eq!(out.dims(), x.dims());
            counts.insert(variant.name(), model.param_count());

            if let Variant::Vanilla = variant {
                assert!(model.store.iter().all(|(_, name, _)| !name.contains("vf_")));
            }
        }
        assert!(counts["vanilla"] < counts["full"]);
        assert!(counts["two_branch"] < counts["full"]);
        assert!(counts["node"] < counts["full"]);
    }
}
