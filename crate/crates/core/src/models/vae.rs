//! Toy autoencoder with a pixel-conditioned decoder.
//!
//! The encoder maps each 8×8 patch to `c` latent channels. The decoder sees a
//! 3×3 latent neighbourhood plus, optionally, the visible pixels and the mask.
//! The conditioning branch is zero-initialized and reads only
//! `masked_image·(1−mask)` and `(1−mask)`, so an all-ones mask yields the
//! plain decoder.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::LatentCodec;
use crate::error::{AsukaError, Result};
use crate::image::{apply_map, patchify_map, unpatchify_map, Image};
use crate::mask::Mask;
use crate::nn::layers::Linear;
use crate::nn::optim::{accumulate, clip_grad_norm, cosine_lr, scale_all, AdamW};
use crate::nn::{Graph, Mat, ParamId, ParamStore, Params, Var};
use crate::rng::{seeded, ChaCha8Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Spatial downsampling factor.
    pub factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { factor: 8, latent_channels: 4, hidden: 64 }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
    scale: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub store: ParamStore,
    l_in: Linear,
    cond_local: Linear,
    cond_global: Linear,
    l_mix: Linear,
    l_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// 3×3 neighbourhood gather map (zero padding) for an `rows × cols` token
/// grid of width `d`: output `N × 9d`.
pub fn neighbor_map(rows: usize, cols: usize, d: usize) -> Rc<Vec<Option<usize>>> {
    let mut map = Vec::with_capacity(rows * cols * 9 * d);
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (nr, nc) = (r + dr, c + dc);
                    let inside = nr >= 0 && nc >= 0 && nr < rows as isize && nc < cols as isize;
                    for k in 0..d {
                        map.push(inside.then(|| (nr as usize * cols + nc as usize) * d + k));
                    }
                }
            }
        }
    }
    Rc::new(map)
}

impl Vae {
    pub fn new(cfg: VaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let pdim = cfg.factor * cfg.factor * 3;
        let (c, h) = (cfg.latent_channels, cfg.hidden);
        let mut es = ParamStore::new();
        let l1 = Linear::new(&mut es, "vae.enc.l1", pdim, h, true, 1.0, rng);
        let l2 = Linear::new(&mut es, "vae.enc.l2", h, c, true, 1.0, rng);
        let scale = es.add("vae.enc.latent_scale", Mat::full(1, 1, 1.0));
        let mut ds = ParamStore::new();
        let l_in = Linear::new(&mut ds, "vae.dec.in", c, h, true, 1.0, rng);
        let cin = pdim + cfg.factor * cfg.factor;
        let cond_local = Linear::zeros(&mut ds, "vae.dec.cond_local", cin, h, false);
        let cond_global = Linear::zeros(&mut ds, "vae.dec.cond_global", cin, h, false);
        let l_mix = Linear::new(&mut ds, "vae.dec.mix", 9 * h, h, true, 1.0, rng);
        let l_out = Linear::new(&mut ds, "vae.dec.out", h, pdim, true, 1.0, rng);
        Self {
            cfg,
            encoder: Encoder { store: es, l1, l2, scale },
            decoder: Decoder { store: ds, l_in, cond_local, cond_global, l_mix, l_out },
        }
    }

    pub fn from_stores(cfg: VaeConfig, enc: ParamStore, dec: ParamStore) -> Result<Self> {
        let mut v = Self::new(cfg, &mut seeded(0));
        for (mine, theirs, what) in [(&mut v.encoder.store, &enc, "encoder"), (&mut v.decoder.store, &dec, "decoder")] {
            if mine.len() != theirs.len() || mine.load_matching(theirs) != theirs.len() {
                return Err(AsukaError::Checkpoint(format!("VAE {what} checkpoint does not match the configuration")));
            }
        }
        Ok(v)
    }

    pub fn latent_grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.cfg.factor;
        if height % f != 0 || width % f != 0 {
            return Err(AsukaError::arg(format!("{height}x{width} not divisible by the latent factor {f}")));
        }
        Ok((height / f, width / f))
    }

    /// Patch pixels, `N × (f·f·3)`.
    pub fn patches(&self, image: &Image) -> Result<Mat> {
        let (gr, gc) = self.latent_grid(image.height, image.width)?;
        let f = self.cfg.factor;
        Ok(apply_map(&image.to_mat(), gr * gc, f * f * 3, &patchify_map(image.height, image.width, 3, f)))
    }

    pub fn latent_scale(&self) -> f64 {
        self.encoder.store.get(self.encoder.scale).data[0]
    }

    pub fn encode_var<'g>(&self, g: &'g Graph, pe: &Params<'g>, image: &Image) -> Result<Var<'g>> {
        let x = g.constant(self.patches(image)?);
        let h = self.encoder.l1.forward(pe, x).silu();
        Ok(self.encoder.l2.forward(pe, h).scale(self.latent_scale()))
    }

    /// Conditioning input rows: patchified `masked_image·(1−m)` then `(1−m)`.
    fn cond_input(&self, masked_image: &Image, mask: &Mask) -> Result<Mat> {
        if masked_image.dims() != mask.dims() {
            return Err(AsukaError::shape(format!("image {:?} vs mask {:?}", masked_image.dims(), mask.dims())));
        }
        let (h, w) = mask.dims();
        let (gr, gc) = self.latent_grid(h, w)?;
        let f = self.cfg.factor;
        let mut vis = masked_image.clone();
        for r in 0..h {
            for c in 0..w {
                if mask.get(r, c) {
                    vis.set_pixel(r, c, [0.0; 3]);
                }
            }
        }
        let px = apply_map(&vis.to_mat(), gr * gc, f * f * 3, &patchify_map(h, w, 3, f));
        let keep = Mat::from_vec(h * w, 1, mask.data.iter().map(|&m| 1.0 - m as f64).collect());
        let km = apply_map(&keep, gr * gc, f * f, &patchify_map(h, w, 1, f));
        let mut out = Mat::zeros(gr * gc, f * f * 4);
        for r in 0..gr * gc {
            out.row_mut(r)[..f * f * 3].copy_from_slice(px.row(r));
            out.row_mut(r)[f * f * 3..].copy_from_slice(km.row(r));
        }
        Ok(out)
    }

    /// Decoder on the tape. Returns patch pixels `N × (f·f·3)` in `(0, 1)`.
    pub fn decode_var<'g>(
        &self,
        g: &'g Graph,
        pd: &Params<'g>,
        z: Var<'g>,
        grid: (usize, usize),
        cond: Option<(&Image, &Mask)>,
    ) -> Result<Var<'g>> {
        let (gr, gc) = grid;
        if z.rows() != gr * gc || z.cols() != self.cfg.latent_channels {
            return Err(AsukaError::shape(format!("latent {:?} for grid {gr}x{gc}", z.shape())));
        }
        let d = &self.decoder;
        let hd = self.cfg.hidden;
        let mut h = d.l_in.forward(pd, z.scale(1.0 / self.latent_scale()));
        if let Some((img, mask)) = cond {
            if self.latent_grid(mask.height, mask.width)? != grid {
                return Err(AsukaError::shape("conditioning resolution differs from the output resolution"));
            }
            let cin = g.constant(self.cond_input(img, mask)?);
            let n = gr * gc;
            let pool = g.constant(Mat::full(n, n, 1.0 / n as f64));
            h = h.add(d.cond_local.forward(pd, cin)).add(pool.matmul(d.cond_global.forward(pd, cin)));
        }
        let a = h.silu();
        let nb = a.gather(gr * gc, 9 * hd, neighbor_map(gr, gc, hd));
        let h2 = d.l_mix.forward(pd, nb).silu();
        Ok(d.l_out.forward(pd, h2).sigmoid())
    }

    pub fn patches_to_image(&self, patches: &Mat, grid: (usize, usize)) -> Result<Image> {
        let f = self.cfg.factor;
        let (h, w) = (grid.0 * f, grid.1 * f);
        Image::from_mat(h, w, &apply_map(patches, h * w, 3, &unpatchify_map(h, w, 3, f)))
    }

    pub fn encode(&self, image: &Image) -> Result<Mat> {
        let g = Graph::new();
        let pe = self.encoder.store.bind(&g, false);
        Ok(self.encode_var(&g, &pe, image)?.to_mat())
    }

    fn decode_impl(&self, z: &Mat, grid: (usize, usize), cond: Option<(&Image, &Mask)>) -> Result<Image> {
        let g = Graph::new();
        let pd = self.decoder.store.bind(&g, false);
        let out = self.decode_var(&g, &pd, g.constant(z.clone()), grid, cond)?.to_mat();
        self.patches_to_image(&out, grid)
    }

    /// Unconditioned decode.
    pub fn decode(&self, z: &Mat, height: usize, width: usize) -> Result<Image> {
        let grid = self.latent_grid(height, width)?;
        self.decode_impl(z, grid, None)
    }

    /// Decode conditioned on the visible pixels of `masked_image`.
    pub fn decode_cond(&self, z: &Mat, masked_image: &Image, mask: &Mask) -> Result<Image> {
        let grid = self.latent_grid(mask.height, mask.width)?;
        self.decode_impl(z, grid, Some((masked_image, mask)))
    }

    /// Sets the latent scale so encoded latents of `corpus` have unit RMS.
    pub fn calibrate_scale(&mut self, corpus: &[Image]) -> Result<f64> {
        self.encoder.store.set(self.encoder.scale, Mat::full(1, 1, 1.0));
        let mut sq = 0.0;
        let mut n = 0usize;
        for img in corpus {
            let z = self.encode(img)?;
            sq += z.data.iter().map(|x| x * x).sum::<f64>();
            n += z.len();
        }
        let s = 1.0 / (sq / n.max(1) as f64).sqrt().max(1e-8);
        self.encoder.store.set(self.encoder.scale, Mat::full(1, 1, s));
        Ok(s)
    }
}

impl LatentCodec for Vae {
    fn encode(&self, image: &Image) -> Result<Mat> {
        Vae::encode(self, image)
    }

    fn decode(&self, z: &Mat, height: usize, width: usize) -> Result<Image> {
        Vae::decode(self, z, height, width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 800, batch: 8, lr: 3e-3 }
    }
}

/// Joint encoder/decoder training on clean images (pixel MSE), followed by
/// latent-scale calibration. Returns the loss trace.
pub fn train_vae(vae: &mut Vae, corpus: &[Image], cfg: &VaeTrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(AsukaError::arg("empty training corpus"));
    }
    let mut opt_e = AdamW::new(&vae.encoder.store, 1e-4);
    let mut opt_d = AdamW::new(&vae.decoder.store, 1e-4);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (mut acc_e, mut acc_d) = (None, None);
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let img = &corpus[rng.random_range(0..corpus.len())];
            let grid = vae.latent_grid(img.height, img.width)?;
            let g = Graph::new();
            let pe = vae.encoder.store.bind(&g, true);
            let pd = vae.decoder.store.bind(&g, true);
            let z = vae.encode_var(&g, &pe, img)?;
            let out = vae.decode_var(&g, &pd, z, grid, None)?;
            let loss = out.sub(g.constant(vae.patches(img)?)).square().mean();
            total += loss.scalar();
            let grads = g.backward(loss);
            accumulate(&mut acc_e, pe.grads(&grads));
            accumulate(&mut acc_d, pd.grads(&grads));
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        for (acc, opt, store) in
            [(acc_e, &mut opt_e, &mut vae.encoder.store), (acc_d, &mut opt_d, &mut vae.decoder.store)]
        {
            let mut grads = acc.expect("batch is non-empty");
            scale_all(&mut grads, 1.0 / cfg.batch as f64);
            clip_grad_norm(&mut grads, 1.0);
            opt.step(store, &grads, lr);
        }
        trace.push(total / cfg.batch as f64);
    }
    vae.calibrate_scale(corpus)?;
    Ok(trace)
}
