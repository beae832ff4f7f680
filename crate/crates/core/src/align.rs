//! Alignment of MAE priors to a frozen generator's condition space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AsukaError, Result};
use crate::image::Image;
use crate::mask::{expand_to_patch_ratio, patchify_mask, synthetic_object_pool, Mask, MaskRecipe, PatchMask};
use crate::models::denoiser::{latent_mask, make_example, training_mask, ToyDenoiser};
use crate::models::{Mae, MaePrior, Vae};
use crate::nn::layers::{Block, Linear};
use crate::nn::optim::{accumulate, clip_grad_norm, scale_all, AdamW};
use crate::nn::{Graph, Mat, ParamStore, Params, Var};
use crate::rng::{seeded, ChaCha8Rng};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// `M_m`
    pub in_dim: usize,
    /// `M_s`
    pub out_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { in_dim: 64, out_dim: 128, blocks: 4, heads: 4, mlp_ratio: 4 }
    }
}

/// Linear dimension map followed by pre-norm self-attention blocks.
#[derive(Clone, Debug)]
pub struct AlignmentModule {
    pub cfg: AlignConfig,
    pub store: ParamStore,
    dim_map: Linear,
    blocks: Vec<Block>,
}

impl AlignmentModule {
    pub fn new(cfg: AlignConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let dim_map = Linear::new(&mut store, &format!("{prefix}.dim_map"), cfg.in_dim, cfg.out_dim, true, 1.0, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&mut store, &format!("{prefix}.block{i}"), cfg.out_dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        Self { cfg, store, dim_map, blocks }
    }

    pub fn from_store(cfg: AlignConfig, prefix: &str, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, prefix, &mut seeded(0));
        if m.store.len() != store.len() || m.store.load_matching(&store) != store.len() {
            return Err(AsukaError::Checkpoint("alignment checkpoint does not match the configuration".into()));
        }
        Ok(m)
    }

    /// Sets the dimension map (weights and bias) to zero.
    pub fn zero_dim_map(&mut self) {
        for id in [Some(self.dim_map.w), self.dim_map.b].into_iter().flatten() {
            let (r, c) = self.store.get(id).shape();
            self.store.set(id, Mat::zeros(r, c));
        }
    }

    pub fn forward<'g>(&self, p: &Params<'g>, tokens: Var<'g>) -> Result<Var<'g>> {
        if tokens.cols() != self.cfg.in_dim {
            return Err(AsukaError::arg(format!("prior width {} vs configured M_m {}", tokens.cols(), self.cfg.in_dim)));
        }
        let mut x = self.dim_map.forward(p, tokens);
        for b in &self.blocks {
            x = b.forward(p, x);
        }
        Ok(x)
    }

    /// `N_m × M_m` prior → `N_m × M_s` condition.
    pub fn align(&self, prior: &MaePrior) -> Result<Mat> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        Ok(self.forward(&p, g.constant(prior.tokens.clone()))?.to_mat())
    }
}

/// Probability of substituting the reconstructed prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSchedule {
    pub p0: f64,
    pub p_final: f64,
    pub decay_steps: usize,
}

impl Default for PriorSchedule {
    fn default() -> Self {
        Self { p0: 1.0, p_final: 0.1, decay_steps: 2000 }
    }
}

impl PriorSchedule {
    /// Linear from `p0` at step 0 to `p_final` at `decay_steps`, constant after.
    pub fn p(&self, step: usize) -> f64 {
        if step >= self.decay_steps {
            return self.p_final;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.p0 + (self.p_final - self.p0) * frac
    }
}

/// Returns `reconstructed` with probability `schedule.p(step)`, else `predicted`.
pub fn choose_prior<'a>(
    rng: &mut ChaCha8Rng,
    schedule: &PriorSchedule,
    step: usize,
    predicted: &'a MaePrior,
    reconstructed: &'a MaePrior,
) -> Result<&'a MaePrior> {
    if predicted.tokens.shape() != reconstructed.tokens.shape() || predicted.grid != reconstructed.grid {
        return Err(AsukaError::arg(format!(
            "prior shapes differ: {:?} vs {:?}",
            predicted.tokens.shape(),
            reconstructed.tokens.shape()
        )));
    }
    Ok(if rng.random_bool(schedule.p(step).clamp(0.0, 1.0)) { reconstructed } else { predicted })
}

/// MAE patch mask for an inpainting mask: patchified and expanded to 75%,
/// or the plain patchified mask when it is already above the target.
pub fn mae_patch_mask(mask: &Mask, patch: usize, target: f64, rng: &mut ChaCha8Rng) -> Result<PatchMask> {
    match expand_to_patch_ratio(mask, patch, target, rng) {
        Err(AsukaError::RatioExceeded { .. }) => patchify_mask(mask, patch),
        other => other,
    }
}

/// One row of a training trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub p: f64,
    pub lr: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,loss,p,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.p, r.lr));
    }
    s
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Learning rate at `reference_batch`; scaled by `batch / reference_batch`.
    pub lr: f64,
    pub reference_batch: usize,
    pub weight_decay: f64,
    pub mae_mask_ratio: f64,
    pub prior: PriorSchedule,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 5e-2,
            reference_batch: 64,
            weight_decay: 1e-4,
            mae_mask_ratio: 0.75,
            prior: PriorSchedule::default(),
        }
    }
}

impl AlignTrainConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr * self.batch as f64 / self.reference_batch.max(1) as f64
    }
}

/// Frozen models shared by the alignment and injection trainers.
pub struct Frozen<'a> {
    pub mae: &'a Mae,
    pub vae: &'a Vae,
    pub generator: &'a ToyDenoiser,
}

impl Frozen<'_> {
    /// `(generator, mae, vae encoder)` digests.
    pub fn digests(&self) -> [String; 3] {
        [self.generator.store.digest(), self.mae.store.digest(), self.vae.encoder.store.digest()]
    }

    pub fn verify(&self, before: &[String; 3]) -> Result<()> {
        let after = self.digests();
        for (i, name) in ["generator", "MAE", "VAE encoder"].iter().enumerate() {
            if before[i] != after[i] {
                return Err(AsukaError::FrozenViolation(format!("{name} digest changed during training")));
            }
        }
        Ok(())
    }
}

/// Precomputed per-image data for conditioning the generator on priors.
pub struct PriorCorpus {
    pub images: Vec<Image>,
    pub latents: Vec<Mat>,
    pub reconstructed: Vec<MaePrior>,
    pub grid: (usize, usize),
    pub side: usize,
    pub pool: Vec<Mask>,
}

impl PriorCorpus {
    pub fn new(frozen: &Frozen<'_>, images: Vec<Image>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let first = images.first().ok_or_else(|| AsukaError::arg("empty training corpus"))?;
        let side = first.height;
        let grid = frozen.vae.latent_grid(first.height, first.width)?;
        let latents = images.iter().map(|i| frozen.vae.encode(i)).collect::<Result<Vec<_>>>()?;
        let reconstructed = images.iter().map(|i| frozen.mae.reconstruct(i)).collect::<Result<Vec<_>>>()?;
        let pool = synthetic_object_pool(rng, 16, 32);
        Ok(Self { images, latents, reconstructed, grid, side, pool })
    }
}

/// A sampled training case: generator example plus the prior to align.
pub struct PriorCase {
    pub example: crate::models::denoiser::GenExample,
    pub prior: MaePrior,
}

pub fn sample_case(
    frozen: &Frozen<'_>,
    data: &PriorCorpus,
    schedule: &NoiseSchedule,
    prior_schedule: &PriorSchedule,
    mae_mask_ratio: f64,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PriorCase> {
    let i = rng.random_range(0..data.images.len());
    let m = training_mask(rng, data.side, &data.pool, &MaskRecipe::default(), 0.0)?;
    let pm = mae_patch_mask(&m, frozen.mae.cfg.patch, mae_mask_ratio, rng)?;
    let predicted = frozen.mae.predict(&data.images[i], &pm)?;
    let prior = choose_prior(rng, prior_schedule, step, &predicted, &data.reconstructed[i])?.clone();
    let lat = latent_mask(&m, frozen.vae.cfg.factor)?;
    let example = make_example(&data.latents[i], &lat, data.grid, schedule, rng)?;
    Ok(PriorCase { example, prior })
}

/// Trains `module` with the generation objective through the frozen
/// generator. Verifies afterwards that no frozen digest changed.
pub fn train_alignment(
    module: &mut AlignmentModule,
    frozen: &Frozen<'_>,
    data: &PriorCorpus,
    schedule: &NoiseSchedule,
    cfg: &AlignTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TraceRow>> {
    let before = frozen.digests();
    let mut opt = AdamW::new(&module.store, cfg.weight_decay);
    let lr = cfg.effective_lr();
    let mode = frozen.generator.cfg.mode;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc = None;
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let case = sample_case(frozen, data, schedule, &cfg.prior, cfg.mae_mask_ratio, step, rng)?;
            let g = Graph::new();
            let pg = frozen.generator.store.bind(&g, false);
            let pa = module.store.bind(&g, true);
            let ctx = module.forward(&pa, g.constant(case.prior.tokens))?;
            let out = frozen.generator.forward(&g, &pg, &case.example.input, ctx, mode, None)?.out;
            let loss = out.sub(g.constant(case.example.target)).square().mean();
            total += loss.scalar();
            accumulate(&mut acc, pa.grads(&g.backward(loss)));
        }
        let mut grads = acc.expect("batch is non-empty");
        scale_all(&mut grads, 1.0 / cfg.batch as f64);
        clip_grad_norm(&mut grads, 1.0);
        opt.step(&mut module.store, &grads, lr);
        trace.push(TraceRow { step, loss: total / cfg.batch as f64, p: cfg.prior.p(step), lr });
    }
    frozen.verify(&before)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use crate::models::{MaeConfig, PriorSource, VaeConfig};
    use crate::models::denoiser::DenoiserConfig;
    use crate::models::corpus::toy_corpus;

    fn prior(rng: &mut ChaCha8Rng, n: usize, src: PriorSource) -> MaePrior {
        MaePrior { tokens: Mat::randn(n, 64, 1.0, rng), patch_size: 16, grid: (n / 4, 4), source: src }
    }

    #[test]
    fn shapes_and_zero_map() {
        let mut rng = seeded(1);
        let mut m = AlignmentModule::new(AlignConfig::default(), "align", &mut rng);
        let pr = prior(&mut rng, 256, PriorSource::Predicted);
        assert_eq!(m.align(&pr).unwrap().shape(), (256, 128));
        for n in [4, 16, 12] {
            assert_eq!(m.align(&prior(&mut rng, n, PriorSource::Predicted)).unwrap().rows, n);
        }
        m.zero_dim_map();
        assert!(m.align(&pr).unwrap().data.iter().all(|&x| x == 0.0));
        let bad = MaePrior { tokens: Mat::zeros(16, 32), ..pr };
        assert!(matches!(m.align(&bad), Err(AsukaError::InvalidArgument(_))));
    }

    #[test]
    fn align_gradients_match_finite_differences() {
        let cfg = AlignConfig { in_dim: 8, out_dim: 8, blocks: 2, heads: 2, mlp_ratio: 2 };
        for draw in 0..10u64 {
            let mut rng = seeded(50 + draw);
            let module = AlignmentModule::new(cfg.clone(), "a", &mut rng);
            let x = Mat::randn(5, 8, 1.0, &mut rng);
            let w = Mat::randn(5, 8, 1.0, &mut rng);
            let loss_of = |store: &ParamStore| {
                let g = Graph::new();
                let p = store.bind(&g, false);
                module.forward(&p, g.constant(x.clone())).unwrap().mul(g.constant(w.clone())).sum().scalar()
            };
            let g = Graph::new();
            let p = module.store.bind(&g, true);
            let l = module.forward(&p, g.constant(x.clone())).unwrap().mul(g.constant(w.clone())).sum();
            let analytic = p.grads(&g.backward(l));
            let (mut num, mut den) = (0.0, 0.0);
            for (k, id) in module.store.ids().enumerate() {
                let v = module.store.get(id).clone();
                for j in 0..v.len() {
                    let h = 1e-5;
                    let mut s = module.store.clone();
                    s.get_mut(id).data[j] = v.data[j] + h;
                    let lp = loss_of(&s);
                    s.get_mut(id).data[j] = v.data[j] - h;
                    let lm = loss_of(&s);
                    let fd = (lp - lm) / (2.0 * h);
                    num += (fd - analytic[k].data[j]).powi(2);
                    den += fd * fd;
                }
            }
            let rel = (num / den).sqrt();
            assert!(rel < 1e-4, "draw {draw}: {rel}");
        }
    }

    #[test]
    fn p_schedule_values() {
        let s = PriorSchedule::default();
        assert_eq!(s.p(0), 1.0);
        assert_eq!(s.p(1000), 0.55);
        assert_eq!(s.p(2000), 0.1);
        assert_eq!(s.p(5000), 0.1);
        let mut prev = f64::INFINITY;
        for step in 0..3000 {
            let p = s.p(step);
            assert!(p <= prev && (0.1..=1.0).contains(&p));
            prev = p;
        }
    }

    #[test]
    fn choose_prior_frequencies() {
        let mut rng = seeded(2);
        let s = PriorSchedule::default();
        let a = prior(&mut rng, 16, PriorSource::Predicted);
        let b = prior(&mut rng, 16, PriorSource::Reconstructed);
        for _ in 0..100 {
            assert_eq!(choose_prior(&mut rng, &s, 0, &a, &b).unwrap().source, PriorSource::Reconstructed);
        }
        let n = 10_000;
        let hits = (0..n).filter(|_| choose_prior(&mut rng, &s, 2500, &a, &b).unwrap().source == PriorSource::Reconstructed).count();
        assert!((hits as f64 / n as f64 - 0.1).abs() <= 0.01, "{hits}");
        let same = choose_prior(&mut rng, &s, 700, &a, &a).unwrap();
        assert_eq!(same, &a);
        let other = prior(&mut rng, 12, PriorSource::Reconstructed);
        assert!(choose_prior(&mut rng, &s, 0, &a, &other).is_err());
    }

    #[test]
    fn patch_mask_falls_back_above_target() {
        let mut rng = seeded(3);
        let full = Mask::ones(64, 64);
        assert_eq!(mae_patch_mask(&full, 16, 0.75, &mut rng).unwrap().count(), 16);
        let empty = Mask::zeros(64, 64);
        assert_eq!(mae_patch_mask(&empty, 16, 0.75, &mut rng).unwrap().count(), 12);
    }

    #[test]
    fn zero_steps_is_a_no_op_and_training_keeps_frozen_digests() {
        let mut rng = seeded(4);
        let mae = Mae::new(MaeConfig::default(), &mut rng);
        let vae = Vae::new(VaeConfig::default(), &mut rng);
        let den_cfg = DenoiserConfig { width: 32, layers: 2, heads: 2, ..DenoiserConfig::default() };
        let generator = ToyDenoiser::new(den_cfg, &mut rng);
        let frozen = Frozen { mae: &mae, vae: &vae, generator: &generator };
        let data = PriorCorpus::new(&frozen, toy_corpus(1, 8, 64), &mut rng).unwrap();
        let acfg = AlignConfig { out_dim: 32, blocks: 1, ..AlignConfig::default() };
        let mut module = AlignmentModule::new(acfg, "align", &mut rng);
        let before = module.store.digest();
        let s = NoiseSchedule::diffusion(1000);
        let zero = AlignTrainConfig { steps: 0, ..AlignTrainConfig::default() };
        assert!(train_alignment(&mut module, &frozen, &data, &s, &zero, &mut rng).unwrap().is_empty());
        assert_eq!(module.store.digest(), before);
        let short = AlignTrainConfig { steps: 3, batch: 2, ..AlignTrainConfig::default() };
        let digests = frozen.digests();
        let trace = train_alignment(&mut module, &frozen, &data, &s, &short, &mut rng).unwrap();
        assert_eq!(trace.len(), 3);
        assert_ne!(module.store.digest(), before);
        assert_eq!(frozen.digests(), digests);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
