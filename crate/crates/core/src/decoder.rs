//! Mask-conditioned decoder fine-tuning for color-consistent compositing.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_jitter, color_jitter, ColorJitterParams, JitterDraw};
use crate::error::{AsukaError, Result};
use crate::image::Image;
use crate::mask::{jagged_downsample, sample_mask, synthetic_object_pool, Mask, MaskRecipe};
use crate::metrics::{boundary_band, gradient_at_edge};
use crate::models::corpus::toy_item;
use crate::models::Vae;
use crate::nn::optim::{accumulate, clip_grad_norm, cosine_lr, scale_all, AdamW};
use crate::nn::{Graph, Mat, Var};
use crate::rng::{stream, ChaCha8Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugKind {
    None,
    Color,
    Latent,
}

/// Input corruption for one pair. `Latent` carries the cached augmented image.
#[derive(Clone, Copy, Debug)]
pub enum Augmentation<'a> {
    None,
    Color(&'a ColorJitterParams),
    Latent(&'a Image),
}

#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub corrupt_latent: Mat,
    pub cond_image: Image,
    pub mask: Mask,
    pub target: Image,
    pub aug: AugKind,
}

/// `image · (1 − mask)`.
pub fn masked_image(image: &Image, mask: &Mask) -> Result<Image> {
    if image.dims() != mask.dims() {
        return Err(AsukaError::shape(format!("image {:?} vs mask {:?}", image.dims(), mask.dims())));
    }
    Ok(Image::from_fn(image.height, image.width, |r, c| if mask.get(r, c) { [0.0; 3] } else { image.pixel(r, c) }))
}

pub fn build_training_pair(vae: &Vae, image: &Image, mask: &Mask, aug: Augmentation<'_>, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
    if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(AsukaError::arg("training images must lie in [0, 1]"));
    }
    let cond_image = masked_image(image, mask)?;
    let (augmented, kind) = match aug {
        Augmentation::None => (image.clone(), AugKind::None),
        Augmentation::Color(p) => (color_jitter(image, rng, p), AugKind::Color),
        Augmentation::Latent(img) => {
            if img.dims() != image.dims() {
                return Err(AsukaError::shape(format!("augmented {:?} vs original {:?}", img.dims(), image.dims())));
            }
            (img.clone(), AugKind::Latent)
        }
    };
    Ok(TrainingPair { corrupt_latent: vae.encode(&augmented)?, cond_image, mask: mask.clone(), target: image.clone(), aug: kind })
}

/// `mask ⊙ decoded + (1 − mask) ⊙ original`.
pub fn composite(decoded: &Image, original: &Image, mask: &Mask) -> Result<Image> {
    if decoded.dims() != original.dims() || decoded.dims() != mask.dims() {
        return Err(AsukaError::arg(format!(
            "composite inputs differ in size: decoded {:?}, original {:?}, mask {:?}",
            decoded.dims(),
            original.dims(),
            mask.dims()
        )));
    }
    Ok(Image::from_fn(decoded.height, decoded.width, |r, c| {
        if mask.get(r, c) {
            decoded.pixel(r, c)
        } else {
            original.pixel(r, c)
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    /// Fraction of pairs whose mask is a jagged (nearest-downsampled) mask.
    pub jagged_fraction: f64,
    pub jagged_factor: usize,
    /// Fraction of pairs taken from the latent-augmentation cache, when present.
    pub p_latent: f64,
    pub jitter: ColorJitterParams,
    pub recipe: MaskRecipe,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            jagged_fraction: 0.25,
            jagged_factor: 2,
            p_latent: 0.5,
            jitter: ColorJitterParams::default(),
            recipe: MaskRecipe::default(),
        }
    }
}

/// Draws training pairs from a corpus and an optional latent-augmentation
/// cache aligned with it.
pub struct PairSampler<'a> {
    pub corpus: &'a [Image],
    pub latent_cache: Option<&'a [Image]>,
    pub cfg: PairConfig,
    pool: Vec<Mask>,
}

impl<'a> PairSampler<'a> {
    pub fn new(corpus: &'a [Image], latent_cache: Option<&'a [Image]>, cfg: PairConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let first = corpus.first().ok_or_else(|| AsukaError::arg("empty training corpus"))?;
        if corpus.iter().any(|i| i.dims() != first.dims()) {
            return Err(AsukaError::arg("training images must share one size"));
        }
        if let Some(cache) = latent_cache {
            if cache.len() != corpus.len() {
                return Err(AsukaError::arg(format!("latent cache has {} items for {} images", cache.len(), corpus.len())));
            }
        }
        if !(0.0..=1.0).contains(&cfg.jagged_fraction) || !(0.0..=1.0).contains(&cfg.p_latent) {
            return Err(AsukaError::Config("pair fractions must lie in [0, 1]".into()));
        }
        cfg.recipe.validate()?;
        let pool = synthetic_object_pool(rng, 16, 32);
        Ok(Self { corpus, latent_cache, cfg, pool })
    }

    /// A mixture mask at the corpus size; jagged with probability
    /// `jagged_fraction`. Returns `(mask, jagged)`.
    pub fn sample_mask(&self, rng: &mut ChaCha8Rng) -> Result<(Mask, bool)> {
        let (h, w) = self.corpus[0].dims();
        if rng.random_bool(self.cfg.jagged_fraction) {
            let f = self.cfg.jagged_factor;
            let hi = sample_mask(rng, h * f, w * f, &self.pool, &self.cfg.recipe)?.mask;
            Ok((jagged_downsample(&hi, f)?, true))
        } else {
            Ok((sample_mask(rng, h, w, &self.pool, &self.cfg.recipe)?.mask, false))
        }
    }

    pub fn sample(&self, vae: &Vae, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
        let i = rng.random_range(0..self.corpus.len());
        let (mask, _) = self.sample_mask(rng)?;
        let aug = match self.latent_cache {
            Some(cache) if rng.random_bool(self.cfg.p_latent) => Augmentation::Latent(&cache[i]),
            _ => Augmentation::Color(&self.cfg.jitter),
        };
        build_training_pair(vae, &self.corpus[i], &mask, aug, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Peak learning rate, cosine-decayed to zero.
    pub lr: f64,
    /// Weight of the boundary-band gradient term; 0 leaves plain L1.
    pub boundary_weight: f64,
    pub band_width: usize,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 4, lr: 3e-3, boundary_weight: 1.0, band_width: 2 }
    }
}

/// Gather maps picking, from an `N × (f·f·3)` patch matrix, the two pixels of
/// every forward-difference pair inside the band. Each map is `K × 3`.
fn band_pair_maps(mask: &Mask, band_width: usize, factor: usize) -> Result<Option<(usize, Rc<Vec<Option<usize>>>, Rc<Vec<Option<usize>>>)>> {
    let band = boundary_band(mask, band_width)?;
    let (h, w) = mask.dims();
    let gc = w / factor;
    let idx = |r: usize, c: usize, ch: usize| ((r / factor) * gc + c / factor) * factor * factor * 3 + ((r % factor) * factor + c % factor) * 3 + ch;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for r in 0..h {
        for c in 0..w {
            if !band.get(r, c) {
                continue;
            }
            for (nr, nc) in [(r, c + 1), (r + 1, c)] {
                if nr < h && nc < w && band.get(nr, nc) {
                    for ch in 0..3 {
                        a.push(Some(idx(nr, nc, ch)));
                        b.push(Some(idx(r, c, ch)));
                    }
                }
            }
        }
    }
    if a.is_empty() {
        return Ok(None);
    }
    Ok(Some((a.len() / 3, Rc::new(a), Rc::new(b))))
}

fn pair_loss<'g>(g: &'g Graph, vae: &Vae, out: Var<'g>, pair: &TrainingPair, cfg: &DecoderTrainConfig) -> Result<Var<'g>> {
    let target = vae.patches(&pair.target)?;
    let mut loss = out.sub(g.constant(target.clone())).abs().mean();
    if cfg.boundary_weight > 0.0 {
        if let Some((k, a, b)) = band_pair_maps(&pair.mask, cfg.band_width, vae.cfg.factor)? {
            let d_out = out.gather(k, 3, a.clone()).sub(out.gather(k, 3, b.clone()));
            let t = g.constant(target);
            let d_gt = t.gather(k, 3, a).sub(t.gather(k, 3, b));
            loss = loss.add(d_out.sub(d_gt).abs().mean().scale(cfg.boundary_weight));
        }
    }
    Ok(loss)
}

/// Fine-tunes the decoder store on conditioned pairs. The encoder is only
/// read; its digest is checked afterwards.
pub fn train_decoder(vae: &mut Vae, sampler: &PairSampler<'_>, cfg: &DecoderTrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let enc_before = vae.encoder.store.digest();
    let mut store = vae.decoder.store.clone();
    let mut opt = AdamW::new(&store, 0.0);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc = None;
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let pair = sampler.sample(vae, rng)?;
            let grid = vae.latent_grid(pair.target.height, pair.target.width)?;
            let g = Graph::new();
            let pd = store.bind(&g, true);
            let out = vae.decode_var(&g, &pd, g.constant(pair.corrupt_latent.clone()), grid, Some((&pair.cond_image, &pair.mask)))?;
            let loss = pair_loss(&g, vae, out, &pair, cfg)?;
            total += loss.scalar();
            accumulate(&mut acc, pd.grads(&g.backward(loss)));
        }
        let mut grads = acc.expect("batch is non-empty");
        scale_all(&mut grads, 1.0 / cfg.batch as f64);
        clip_grad_norm(&mut grads, 1.0);
        opt.step(&mut store, &grads, cosine_lr(cfg.lr, step, cfg.steps));
        trace.push(total / cfg.batch as f64);
    }
    if vae.encoder.store.digest() != enc_before {
        return Err(AsukaError::FrozenViolation("VAE encoder digest changed during decoder training".into()));
    }
    vae.decoder.store = store;
    Ok(trace)
}

/// One evaluation triplet: a generated image whose masked region is
/// color-shifted, its mask, and the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub target: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EvalRecord {
    id: String,
    image: String,
    mask: String,
    target: String,
}

pub const EVAL_MANIFEST: &str = "manifest.json";

/// Held-out synthetic set: toy images, mixture masks, and a strong color
/// jitter applied inside the mask only.
pub fn color_shift_eval_set(seed: u64, n: usize, side: usize) -> Result<Vec<EvalItem>> {
    let shift = ColorJitterParams { brightness: 0.3, contrast: 0.3, saturation: 0.3, hue: 0.05 };
    let mut pool_rng = stream(seed, u64::MAX);
    let pool = synthetic_object_pool(&mut pool_rng, 16, 32);
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let (target, _) = toy_item(seed ^ 0x5eed, i, side);
            let mask = sample_mask(&mut rng, side, side, &pool, &MaskRecipe::default())?.mask;
            let mut draw = JitterDraw::sample(&mut rng, &shift);
            if (draw.brightness - 1.0).abs() < 0.1 {
                draw.brightness = if draw.brightness < 1.0 { 0.85 } else { 1.15 };
            }
            let shifted = apply_jitter(&target, &draw);
            let image = composite(&shifted, &target, &mask)?;
            Ok(EvalItem { id: format!("item{i:05}"), image, mask, target })
        })
        .collect()
}

pub fn save_eval_set(items: &[EvalItem], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AsukaError::io(dir, e))?;
    let mut records = Vec::with_capacity(items.len());
    for it in items {
        let rec = EvalRecord {
            id: it.id.clone(),
            image: format!("{}_image.png", it.id),
            mask: format!("{}_mask.png", it.id),
            target: format!("{}_target.png", it.id),
        };
        it.image.save_png(&dir.join(&rec.image))?;
        it.mask.save_png(&dir.join(&rec.mask))?;
        it.target.save_png(&dir.join(&rec.target))?;
        records.push(rec);
    }
    let path = dir.join(EVAL_MANIFEST);
    let json = serde_json::to_string_pretty(&records).expect("records serialize");
    fs::write(&path, json).map_err(|e| AsukaError::io(&path, e))
}

pub fn load_eval_set(dir: &Path) -> Result<Vec<EvalItem>> {
    let path = dir.join(EVAL_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| AsukaError::io(&path, e))?;
    let records: Vec<EvalRecord> =
        serde_json::from_str(&text).map_err(|e| AsukaError::Config(format!("{}: {e}", path.display())))?;
    records
        .into_iter()
        .map(|r| {
            Ok(EvalItem {
                image: Image::load(&dir.join(&r.image))?,
                mask: Mask::load_png(&dir.join(&r.mask))?,
                target: Image::load(&dir.join(&r.target))?,
                id: r.id,
            })
        })
        .collect()
}

/// Decodes the item's latent (conditioned or not), composites over the
/// known pixels and scores G@e against the target.
pub fn eval_item(vae: &Vae, item: &EvalItem, conditional: bool) -> Result<(Image, f64)> {
    let z = vae.encode(&item.image)?;
    let decoded = if conditional {
        vae.decode_cond(&z, &item.image, &item.mask)?
    } else {
        vae.decode(&z, item.image.height, item.image.width)?
    };
    let out = composite(&decoded, &item.image, &item.mask)?;
    let gae = gradient_at_edge(&out, &item.target, &item.mask)?;
    Ok((out, gae))
}
