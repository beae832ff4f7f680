//! Toy masked autoencoder.
//!
//! Patches are embedded linearly, masked patches are replaced by a learned
//! mask token, and a fixed 2-D sinusoidal position code is added, so any image
//! whose sides are multiples of the patch size is accepted. The prior is the
//! final normalized hidden state; a linear head maps it back to pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AsukaError, Result};
use crate::image::{apply_map, patchify_map, unpatchify_map, Image};
use crate::mask::PatchMask;
use crate::nn::layers::{grid_ids, pos_embed_2d, Block, LayerNorm, Linear};
use crate::nn::optim::{accumulate, clip_grad_norm, cosine_lr, scale_all, AdamW};
use crate::nn::{Graph, Mat, ParamId, ParamStore, Params, Var};
use crate::rng::{seeded, ChaCha8Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub patch: usize,
    /// Token width `M_m`.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self { patch: 16, dim: 64, depth: 2, heads: 4, mlp_ratio: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    Predicted,
    Reconstructed,
}

/// `N_m × M_m` tokens over a patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaePrior {
    pub tokens: Mat,
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub source: PriorSource,
}

impl MaePrior {
    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Clone, Debug)]
pub struct Mae {
    pub cfg: MaeConfig,
    pub store: ParamStore,
    embed: Linear,
    mask_token: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl Mae {
    pub fn new(cfg: MaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let pdim = cfg.patch * cfg.patch * 3;
        let embed = Linear::new(&mut store, "mae.embed", pdim, cfg.dim, true, 1.0, rng);
        let mask_token = store.add("mae.mask_token", Mat::randn(1, cfg.dim, 0.02, rng));
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut store, &format!("mae.block{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::new(&mut store, "mae.norm", cfg.dim);
        let head = Linear::new(&mut store, "mae.head", cfg.dim, pdim, true, 1.0, rng);
        Self { cfg, store, embed, mask_token, blocks, norm, head }
    }

    /// Rebuilds the architecture and takes weights from `store`.
    pub fn from_store(cfg: MaeConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, &mut seeded(0));
        if m.store.len() != store.len() || m.store.load_matching(&store) != store.len() {
            return Err(AsukaError::Checkpoint("MAE checkpoint does not match the configured architecture".into()));
        }
        Ok(m)
    }

    pub fn grid(&self, image: &Image) -> Result<(usize, usize)> {
        let p = self.cfg.patch;
        if image.height % p != 0 || image.width % p != 0 {
            return Err(AsukaError::arg(format!("{}x{} image not divisible by patch {p}", image.height, image.width)));
        }
        Ok((image.height / p, image.width / p))
    }

    /// Patch pixels, `N × (p·p·3)`.
    pub fn patch_pixels(&self, image: &Image) -> Result<Mat> {
        let (gr, gc) = self.grid(image)?;
        let p = self.cfg.patch;
        Ok(apply_map(&image.to_mat(), gr * gc, p * p * 3, &patchify_map(image.height, image.width, 3, p)))
    }

    /// Hidden tokens on the tape. Masked patches contribute no pixel content.
    pub fn forward<'g>(&self, g: &'g Graph, p: &Params<'g>, image: &Image, pm: &PatchMask) -> Result<Var<'g>> {
        let (gr, gc) = self.grid(image)?;
        if (pm.rows, pm.cols) != (gr, gc) {
            return Err(AsukaError::arg(format!("patch mask {}x{} vs grid {gr}x{gc}", pm.rows, pm.cols)));
        }
        let n = gr * gc;
        let d = self.cfg.dim;
        let mut px = self.patch_pixels(image)?;
        for (i, &m) in pm.data.iter().enumerate() {
            if m {
                px.row_mut(i).fill(0.0);
            }
        }
        let keep = Mat::from_fn(n, d, |r, _| if pm.data[r] { 0.0 } else { 1.0 });
        let masked_col = Mat::from_fn(n, 1, |r, _| if pm.data[r] { 1.0 } else { 0.0 });
        let emb = self.embed.forward(p, g.constant(px)).mul(g.constant(keep));
        let fill = g.constant(masked_col).matmul(p.v(self.mask_token));
        let mut x = emb.add(fill).add(g.constant(pos_embed_2d(&grid_ids(gr, gc), d)));
        for b in &self.blocks {
            x = b.forward(p, x);
        }
        Ok(self.norm.forward(p, x))
    }

    fn run(&self, image: &Image, pm: &PatchMask, source: PriorSource) -> Result<MaePrior> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let tokens = self.forward(&g, &p, image, pm)?.to_mat();
        Ok(MaePrior { tokens, patch_size: self.cfg.patch, grid: (pm.rows, pm.cols), source })
    }

    pub fn predict(&self, image: &Image, pm: &PatchMask) -> Result<MaePrior> {
        self.run(image, pm, PriorSource::Predicted)
    }

    pub fn reconstruct(&self, image: &Image) -> Result<MaePrior> {
        let (gr, gc) = self.grid(image)?;
        self.run(image, &PatchMask::empty(gr, gc), PriorSource::Reconstructed)
    }

    /// Decodes prior tokens back to an image through the pixel head.
    pub fn to_pixels(&self, prior: &MaePrior) -> Result<Image> {
        if prior.tokens.cols != self.cfg.dim {
            return Err(AsukaError::arg(format!("prior width {} vs MAE width {}", prior.tokens.cols, self.cfg.dim)));
        }
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let px = self.head.forward(&p, g.constant(prior.tokens.clone())).to_mat();
        let (gr, gc) = prior.grid;
        let ps = prior.patch_size;
        let (h, w) = (gr * ps, gc * ps);
        let flat = apply_map(&px, h * w, 3, &unpatchify_map(h, w, 3, ps));
        Ok(Image::from_mat(h, w, &flat)?.clamped())
    }

    /// Mean squared pixel error of the head output against `image`.
    pub fn reconstruction_error(&self, image: &Image, prior: &MaePrior) -> Result<f64> {
        Ok(self.to_pixels(prior)?.mean_sq_diff(image))
    }
}

/// Random patch mask with exactly `round(ratio · P)` masked patches.
pub fn random_patch_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, ratio: f64) -> PatchMask {
    let n = rows * cols;
    let k = (ratio * n as f64).round() as usize;
    let mut pm = PatchMask::empty(rows, cols);
    for i in rand::seq::index::sample(rng, n, k) {
        pm.data[i] = true;
    }
    pm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_ratio: f64,
}

impl Default for MaeTrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch: 8, lr: 5e-3, mask_ratio: 0.75 }
    }
}

/// Trains on random patch masks with ratios drawn from `[0, mask_ratio]`;
/// the loss is the pixel L2 over all patches.
/// Returns the per-step loss trace.
pub fn train_mae(mae: &mut Mae, corpus: &[Image], cfg: &MaeTrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(AsukaError::arg("empty training corpus"));
    }
    let mut opt = AdamW::new(&mae.store, 1e-4);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc = None;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch {
            let img = &corpus[rng.random_range(0..corpus.len())];
            let (gr, gc) = mae.grid(img)?;
            let ratio = rng.random_range(0.0..=cfg.mask_ratio);
            let pm = random_patch_mask(rng, gr, gc, ratio);
            let g = Graph::new();
            let p = mae.store.bind(&g, true);
            let tokens = mae.forward(&g, &p, img, &pm)?;
            let pred = mae.head.forward(&p, tokens);
            let target = g.constant(mae.patch_pixels(img)?);
            let loss = pred.sub(target).square().mean();
            loss_sum += loss.scalar();
            accumulate(&mut acc, p.grads(&g.backward(loss)));
        }
        let mut grads = acc.expect("batch is non-empty");
        scale_all(&mut grads, 1.0 / cfg.batch as f64);
        clip_grad_norm(&mut grads, 1.0);
        opt.step(&mut mae.store, &grads, cosine_lr(cfg.lr, step, cfg.steps));
        trace.push(loss_sum / cfg.batch as f64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::corpus::toy_corpus;

    #[test]
    fn grid_arithmetic_and_empty_mask_coincidence() {
        let mae = Mae::new(MaeConfig::default(), &mut seeded(1));
        let img = toy_corpus(1, 1, 256).remove(0);
        let pm = random_patch_mask(&mut seeded(2), 16, 16, 0.75);
        let pred = mae.predict(&img, &pm).unwrap();
        assert_eq!(pred.tokens.shape(), (256, 64));
        assert_eq!(pm.data.iter().filter(|&&m| !m).count(), 64);
        assert_eq!(pred.source, PriorSource::Predicted);
        assert_eq!(mae.predict(&img, &pm).unwrap(), pred);

        let rec = mae.reconstruct(&img).unwrap();
        assert_eq!(rec.source, PriorSource::Reconstructed);
        let empty = mae.predict(&img, &PatchMask::empty(16, 16)).unwrap();
        assert_eq!(empty.tokens, rec.tokens);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let mae = Mae::new(MaeConfig::default(), &mut seeded(1));
        let img = toy_corpus(1, 1, 64).remove(0);
        assert!(matches!(mae.predict(&img, &PatchMask::empty(3, 4)), Err(AsukaError::InvalidArgument(_))));
        let odd = Image::new(40, 64);
        assert!(mae.reconstruct(&odd).is_err());
    }

    #[test]
    fn masked_pixels_do_not_leak() {
        let mae = Mae::new(MaeConfig::default(), &mut seeded(4));
        let a = toy_corpus(5, 1, 64).remove(0);
        let mut b = a.clone();
        let pm = random_patch_mask(&mut seeded(3), 4, 4, 0.5);
        for (i, &m) in pm.data.iter().enumerate() {
            if m {
                let (pr, pc) = (i / 4, i % 4);
                for r in 0..16 {
                    for c in 0..16 {
                        b.set_pixel(pr * 16 + r, pc * 16 + c, [0.9, 0.1, 0.4]);
                    }
                }
            }
        }
        assert_eq!(mae.predict(&a, &pm).unwrap(), mae.predict(&b, &pm).unwrap());
    }

    #[test]
    fn training_makes_reconstruction_beat_prediction() {
        let corpus = toy_corpus(10, 64, 64);
        let held_out = toy_corpus(11, 16, 64);
        let mut rng = seeded(12);
        let mut mae = Mae::new(MaeConfig::default(), &mut rng);
        let cfg = MaeTrainConfig { steps: 300, batch: 8, ..MaeTrainConfig::default() };
        let trace = train_mae(&mut mae, &corpus, &cfg, &mut rng).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);
        let (mut rec_err, mut pred_err) = (0.0, 0.0);
        for (i, img) in held_out.iter().enumerate() {
            let pm = random_patch_mask(&mut seeded(100 + i as u64), 4, 4, 0.75);
            rec_err += mae.reconstruction_error(img, &mae.reconstruct(img).unwrap()).unwrap();
            pred_err += mae.reconstruction_error(img, &mae.predict(img, &pm).unwrap()).unwrap();
        }
        assert!(rec_err < pred_err, "{rec_err} vs {pred_err}");
    }
}
