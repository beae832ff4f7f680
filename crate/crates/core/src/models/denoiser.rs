//! Toy latent denoiser.
//!
//! Image tokens are the per-position concatenation `[z_t, z_masked, mask]`
//! (`2c + 1` channels). Each layer lets image queries attend over the keys of
//! `[condition tokens; image tokens]`. Condition tokens are projected by bias-free
//! maps `W_q, W_k, W_v` applied to `f_task^i = LN_i(ctx)`; these projections
//! are the hook point for per-layer injection.
//!
//! In [`CondMode::Cross`] the condition is a fixed shared input to every layer.
//! In [`CondMode::Joint`] the condition tokens also query and are updated
//! layer by layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AsukaError, Result};
use crate::image::Image;
use crate::mask::{patchify_mask, sample_mask, synthetic_object_pool, Mask, MaskRecipe};
use crate::nn::layers::{grid_ids, multi_head_attention, pos_embed_2d, scalar_embed, LayerNorm, Linear, Mlp};
use crate::nn::optim::{accumulate, clip_grad_norm, cosine_lr, scale_all, AdamW};
use crate::nn::{concat_cols, concat_rows, Graph, Mat, ParamId, ParamStore, Params, Var};
use crate::rng::{seeded, ChaCha8Rng};
use crate::schedule::{to_eps, Denoiser, NoiseSchedule, PredictionTarget};

use super::vae::Vae;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    Cross,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Token width `M_s`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of condition tokens (`N_s = N_m`).
    pub ctx_tokens: usize,
    pub mode: CondMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { latent_channels: 4, width: 128, layers: 4, heads: 4, mlp_ratio: 2, ctx_tokens: 16, mode: CondMode::Joint }
    }
}

impl DenoiserConfig {
    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserLayer {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    ctx_ln: LayerNorm,
    /// Frozen condition projections `W_q, W_k, W_v`.
    pub w_ctx: [Linear; 3],
    ctx_proj: Linear,
    ctx_ln2: LayerNorm,
    ctx_mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    in_proj: Linear,
    t1: Linear,
    t2: Linear,
    null_ctx: ParamId,
    pub layers: Vec<DenoiserLayer>,
    out_ln: LayerNorm,
    out: Linear,
}

/// One denoiser input.
#[derive(Clone, Debug)]
pub struct DenoiseInput {
    pub z_t: Mat,
    pub z_masked: Mat,
    /// `N × 1`, 1 = masked.
    pub mask: Mat,
    pub t: usize,
    pub grid: (usize, usize),
}

impl DenoiseInput {
    fn check(&self, c: usize) -> Result<()> {
        let n = self.grid.0 * self.grid.1;
        if self.z_t.shape() != (n, c) || self.z_masked.shape() != (n, c) || self.mask.shape() != (n, 1) {
            return Err(AsukaError::arg(format!(
                "denoiser inputs z_t {:?}, z_masked {:?}, mask {:?} for a {}x{} grid with {c} channels",
                self.z_t.shape(),
                self.z_masked.shape(),
                self.mask.shape(),
                self.grid.0,
                self.grid.1
            )));
        }
        Ok(())
    }
}

/// Replaces the condition projections of layer `i`: receives `f_task^i` and
/// the frozen weights `[W_q, W_k, W_v]`, returns `[f_q, f_k, f_v]`.
pub type QkvHook<'a, 'g> = &'a dyn Fn(usize, Var<'g>, [Var<'g>; 3]) -> [Var<'g>; 3];

pub struct DenoiseOutput<'g> {
    pub out: Var<'g>,
    /// Key sequence length seen by image queries at each layer.
    pub key_tokens: Vec<usize>,
}

impl ToyDenoiser {
    pub fn new(cfg: DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut s = ParamStore::new();
        let w = cfg.width;
        let in_proj = Linear::new(&mut s, "den.in", cfg.in_channels(), w, true, 1.0, rng);
        let t1 = Linear::new(&mut s, "den.t1", w, w, true, 1.0, rng);
        let t2 = Linear::new(&mut s, "den.t2", w, w, true, 0.5, rng);
        let null_ctx = s.add("den.null_ctx", Mat::randn(cfg.ctx_tokens, w, 1.0, rng));
        let layers = (0..cfg.layers)
            .map(|i| {
                let n = |x: &str| format!("den.layer{i}.{x}");
                DenoiserLayer {
                    ln1: LayerNorm::new(&mut s, &n("ln1"), w),
                    qkv: Linear::new(&mut s, &n("qkv"), w, 3 * w, true, 1.0, rng),
                    proj: Linear::new(&mut s, &n("proj"), w, w, true, 0.5, rng),
                    ln2: LayerNorm::new(&mut s, &n("ln2"), w),
                    mlp: Mlp::new(&mut s, &n("mlp"), w, cfg.mlp_ratio, rng),
                    ctx_ln: LayerNorm::new(&mut s, &n("ctx_ln"), w),
                    w_ctx: [
                        Linear::new(&mut s, &n("w_q"), w, w, false, 1.0, rng),
                        Linear::new(&mut s, &n("w_k"), w, w, false, 1.0, rng),
                        Linear::new(&mut s, &n("w_v"), w, w, false, 1.0, rng),
                    ],
                    ctx_proj: Linear::new(&mut s, &n("ctx_proj"), w, w, true, 0.5, rng),
                    ctx_ln2: LayerNorm::new(&mut s, &n("ctx_ln2"), w),
                    ctx_mlp: Mlp::new(&mut s, &n("ctx_mlp"), w, cfg.mlp_ratio, rng),
                }
            })
            .collect();
        let out_ln = LayerNorm::new(&mut s, "den.out_ln", w);
        let out = Linear::new(&mut s, "den.out", w, cfg.latent_channels, true, 0.1, rng);
        Self { cfg, store: s, in_proj, t1, t2, null_ctx, layers, out_ln, out }
    }

    pub fn from_store(cfg: DenoiserConfig, store: ParamStore) -> Result<Self> {
        let mut d = Self::new(cfg, &mut seeded(0));
        if d.store.len() != store.len() || d.store.load_matching(&store) != store.len() {
            return Err(AsukaError::Checkpoint("denoiser checkpoint does not match the configuration".into()));
        }
        Ok(d)
    }

    pub fn null_ctx(&self) -> &Mat {
        self.store.get(self.null_ctx)
    }

    pub fn null_ctx_var<'g>(&self, p: &Params<'g>) -> Var<'g> {
        p.v(self.null_ctx)
    }

    /// Full forward pass on the tape. `ctx` is `N_ctx × M_s`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        p: &Params<'g>,
        inp: &DenoiseInput,
        ctx: Var<'g>,
        mode: CondMode,
        hook: Option<QkvHook<'_, 'g>>,
    ) -> Result<DenoiseOutput<'g>> {
        let c = self.cfg.latent_channels;
        let w = self.cfg.width;
        inp.check(c)?;
        if ctx.cols() != w {
            return Err(AsukaError::arg(format!("condition width {} vs model width {w}", ctx.cols())));
        }
        let feats = concat_cols(&[g.constant(inp.z_t.clone()), g.constant(inp.z_masked.clone()), g.constant(inp.mask.clone())]);
        let temb = self.t2.forward(p, self.t1.forward(p, g.constant(scalar_embed(inp.t as f64, w))).silu());
        let pos = g.constant(pos_embed_2d(&grid_ids(inp.grid.0, inp.grid.1), w));
        let mut x = self.in_proj.forward(p, feats).add(pos).add_row(temb);
        let mut ctx = ctx;
        let mut key_tokens = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let h = l.ln1.forward(p, x);
            let qkv = l.qkv.forward(p, h);
            let (q, k, v) = (qkv.slice_cols(0, w), qkv.slice_cols(w, w), qkv.slice_cols(2 * w, w));
            let f_task = l.ctx_ln.forward(p, ctx);
            let weights = [p.v(l.w_ctx[0].w), p.v(l.w_ctx[1].w), p.v(l.w_ctx[2].w)];
            let [fq, fk, fv] = match hook {
                Some(hk) => hk(i, f_task, weights),
                None => [f_task.matmul(weights[0]), f_task.matmul(weights[1]), f_task.matmul(weights[2])],
            };
            let keys = concat_rows(&[fk, k]);
            let vals = concat_rows(&[fv, v]);
            key_tokens.push(keys.rows());
            let att = multi_head_attention(q, keys, vals, self.cfg.heads);
            x = x.add(l.proj.forward(p, att));
            x = x.add(l.mlp.forward(p, l.ln2.forward(p, x)));
            if mode == CondMode::Joint {
                let catt = multi_head_attention(fq, keys, vals, self.cfg.heads);
                ctx = ctx.add(l.ctx_proj.forward(p, catt));
                ctx = ctx.add(l.ctx_mlp.forward(p, l.ctx_ln2.forward(p, ctx)));
            }
        }
        let out = self.out.forward(p, self.out_ln.forward(p, x));
        Ok(DenoiseOutput { out, key_tokens })
    }

    /// Eval-mode prediction with an explicit condition.
    pub fn predict_with(&self, inp: &DenoiseInput, ctx: &Mat, mode: CondMode) -> Result<Mat> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        Ok(self.forward(&g, &p, inp, g.constant(ctx.clone()), mode, None)?.out.to_mat())
    }
}

/// The unaligned base generator: condition = learned null tokens.
#[derive(Clone, Copy)]
pub struct BaseGenerator<'a> {
    pub model: &'a ToyDenoiser,
    pub target: PredictionTarget,
    pub grid: (usize, usize),
}

impl Denoiser for BaseGenerator<'_> {
    fn prediction_target(&self) -> PredictionTarget {
        self.target
    }

    fn predict(&self, z_t: &Mat, z_cond: &Mat, mask: &Mat, t: usize) -> Result<Mat> {
        let inp = DenoiseInput { z_t: z_t.clone(), z_masked: z_cond.clone(), mask: mask.clone(), t, grid: self.grid };
        self.model.predict_with(&inp, self.model.null_ctx(), self.model.cfg.mode)
    }
}

/// Latent-resolution mask: a latent cell is masked if any of its pixels is.
pub fn latent_mask(mask: &Mask, factor: usize) -> Result<Mat> {
    let pm = patchify_mask(mask, factor)?;
    Ok(Mat::from_vec(pm.data.len(), 1, pm.data.iter().map(|&b| b as u8 as f64).collect()))
}

/// `z ⊙ (1 − m)` with `m` an `N × 1` mask.
pub fn mask_latent(z: &Mat, m: &Mat) -> Mat {
    Mat::from_fn(z.rows, z.cols, |r, c| z.get(r, c) * (1.0 - m.data[r]))
}

/// One training example for the generation objective.
#[derive(Clone, Debug)]
pub struct GenExample {
    pub input: DenoiseInput,
    pub target: Mat,
}

/// Draws `(t, eps)` and builds the noised input and regression target.
pub fn make_example(
    z0: &Mat,
    lat_mask: &Mat,
    grid: (usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<GenExample> {
    let t = rng.random_range(0..schedule.steps);
    let eps = Mat::randn(z0.rows, z0.cols, 1.0, rng);
    let z_t = schedule.noise(z0, &eps, t)?;
    let target = schedule.target(z0, &eps);
    Ok(GenExample { input: DenoiseInput { z_t, z_masked: mask_latent(z0, lat_mask), mask: lat_mask.clone(), t, grid }, target })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of examples trained with an all-zero mask (full conditioning).
    pub p_unmasked: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { steps: 400, batch: 4, lr: 1e-3, p_unmasked: 0.15 }
    }
}

/// Encodes `corpus` once with the frozen encoder.
pub fn encode_corpus(vae: &Vae, corpus: &[Image]) -> Result<Vec<Mat>> {
    corpus.iter().map(|img| vae.encode(img)).collect()
}

/// Masks for generator training: mixture masks, occasionally empty.
pub fn training_mask(rng: &mut ChaCha8Rng, side: usize, pool: &[Mask], recipe: &MaskRecipe, p_unmasked: f64) -> Result<Mask> {
    if rng.random_bool(p_unmasked) {
        return Ok(Mask::zeros(side, side));
    }
    Ok(sample_mask(rng, side, side, pool, recipe)?.mask)
}

/// Base pretraining with the null condition. Returns the loss trace.
pub fn train_denoiser(
    den: &mut ToyDenoiser,
    vae: &Vae,
    corpus: &[Image],
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(AsukaError::arg("empty training corpus"));
    }
    let side = corpus[0].height;
    let grid = vae.latent_grid(side, corpus[0].width)?;
    let latents = encode_corpus(vae, corpus)?;
    let pool = synthetic_object_pool(rng, 16, 32);
    let recipe = MaskRecipe::default();
    let mut opt = AdamW::new(&den.store, 1e-4);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mode = den.cfg.mode;
    for step in 0..cfg.steps {
        let mut acc = None;
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let i = rng.random_range(0..corpus.len());
            let m = training_mask(rng, side, &pool, &recipe, cfg.p_unmasked)?;
            let ex = make_example(&latents[i], &latent_mask(&m, vae.cfg.factor)?, grid, schedule, rng)?;
            let g = Graph::new();
            let p = den.store.bind(&g, true);
            let out = den.forward(&g, &p, &ex.input, den.null_ctx_var(&p), mode, None)?.out;
            let loss = out.sub(g.constant(ex.target)).square().mean();
            total += loss.scalar();
            accumulate(&mut acc, p.grads(&g.backward(loss)));
        }
        let mut grads = acc.expect("batch is non-empty");
        scale_all(&mut grads, 1.0 / cfg.batch as f64);
        clip_grad_norm(&mut grads, 1.0);
        opt.step(&mut den.store, &grads, cosine_lr(cfg.lr, step, cfg.steps));
        trace.push(total / cfg.batch as f64);
    }
    Ok(trace)
}

/// Deterministic sampler over `steps` evenly spaced timesteps from `T−1` to 0.
/// `model(z_t, t)` returns the raw denoiser output.
pub fn sample_latent(
    model: &dyn Fn(&Mat, usize) -> Result<Mat>,
    schedule: &NoiseSchedule,
    target: PredictionTarget,
    z_init: Mat,
    steps: usize,
) -> Result<Mat> {
    let steps = steps.max(1);
    let ts: Vec<usize> =
        (0..=steps).map(|k| ((schedule.steps - 1) as f64 * (1.0 - k as f64 / steps as f64)).round() as usize).collect();
    let mut z = z_init;
    for k in 0..steps {
        let (t, t_next) = (ts[k], ts[k + 1]);
        let out = model(&z, t)?;
        let eps = to_eps(schedule, target, &z, &out, t)?;
        let (a, b) = schedule.ab_coeffs(t)?;
        let (a2, b2) = schedule.ab_coeffs(t_next)?;
        let z0 = z.zip_map(&eps, |zz, e| (zz - b * e) / a.max(1e-4));
        z = if k + 1 == steps { z0 } else { z0.zip_map(&eps, |x, e| a2 * x + b2 * e) };
    }
    Ok(z)
}
