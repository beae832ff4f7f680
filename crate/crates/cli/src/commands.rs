//! Subcommand bodies. Each one works inside an open [`Run`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use asuka_core::align::{trace_csv, AlignmentModule, Frozen, PriorCorpus, TraceRow};
use asuka_core::augment::{latent_augment_corpus, ManifestRecord, MANIFEST_FILE};
use asuka_core::dataset::{build_benchmark, center_crop_resize, SourceImage, ToyEmbedder};
use asuka_core::decoder::{
    color_shift_eval_set, composite, eval_item, load_eval_set, masked_image, save_eval_set, train_decoder, PairSampler,
};
use asuka_core::inject::{GateOverride, InjectionModule};
use asuka_core::judge::{judge_batch, JudgeClient, JudgeItem};
use asuka_core::mask::{patchify_mask, sample_mask, synthetic_object_pool, BaseType, Mask};
use asuka_core::metrics::{
    gradient_at_edge_with, make_judge_composite, score_with_plugins, CompositeStyle, ScoreValue, ScorerRegistry, JUDGE_PROMPT,
};
use asuka_core::models::corpus::{toy_corpus, toy_item, Domain};
use asuka_core::models::denoiser::{
    latent_mask, mask_latent, sample_latent, train_denoiser, BaseGenerator, DenoiseInput, DenoiserTrainConfig, ToyDenoiser,
};
use asuka_core::models::mae::{train_mae, Mae, MaeTrainConfig};
use asuka_core::models::vae::{train_vae, Vae, VaeTrainConfig};
use asuka_core::nn::Mat;
use asuka_core::{AsukaError, Image};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::run::{write_json, Run};

pub const ALIGN_PREFIX: &str = "align";

/// Marks failures of an external service (exit status 4).
#[derive(Debug)]
pub struct ExternalServiceError(pub String);

impl std::fmt::Display for ExternalServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "external service: {}", self.0)
    }
}

impl std::error::Error for ExternalServiceError {}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Images under `--images`, center-cropped to `side`, or the synthetic corpus.
pub fn training_corpus(run: &mut Run, images: Option<&Path>, n: usize) -> Result<Vec<Image>> {
    let side = run.cfg.data.side;
    match images {
        Some(dir) => {
            let paths = list_images(dir)?;
            if paths.is_empty() {
                bail!("no png or jpeg images in {}", dir.display());
            }
            paths.iter().map(|p| Ok(center_crop_resize(&Image::load(p)?, side)?)).collect()
        }
        None => Ok(toy_corpus(run.seed("corpus"), n, side)),
    }
}

/// Where a stage may take an existing checkpoint from.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Reuse {
    /// Only this run's own checkpoints (resume).
    OwnOnly,
    /// This run, then `--from` directories.
    SearchPath,
}

fn lookup(run: &Run, name: &str, reuse: Reuse) -> Result<Option<asuka_core::nn::ParamStore>> {
    match reuse {
        Reuse::OwnOnly if !run.has_own_checkpoint(name) => Ok(None),
        _ => run.load_store(name),
    }
}

pub fn stage_vae(run: &mut Run, corpus: &[Image], train: &VaeTrainConfig, reuse: Reuse) -> Result<Vae> {
    if let (Some(e), Some(d)) = (lookup(run, "vae_encoder", reuse)?, lookup(run, "vae_decoder", reuse)?) {
        return Ok(Vae::from_stores(run.cfg.vae.clone(), e, d)?);
    }
    let mut rng = run.rng("vae");
    let mut vae = Vae::new(run.cfg.vae.clone(), &mut rng);
    let trace = train_vae(&mut vae, corpus, train, &mut rng)?;
    run.save_store("vae_encoder", &vae.encoder.store)?;
    run.save_store("vae_decoder", &vae.decoder.store)?;
    run.record_loss("vae", &trace)?;
    Ok(vae)
}

pub fn stage_mae(run: &mut Run, corpus: &[Image], train: &MaeTrainConfig, reuse: Reuse) -> Result<Mae> {
    if let Some(s) = lookup(run, "mae", reuse)? {
        return Ok(Mae::from_store(run.cfg.mae.clone(), s)?);
    }
    let mut rng = run.rng("mae");
    let mut mae = Mae::new(run.cfg.mae.clone(), &mut rng);
    let trace = train_mae(&mut mae, corpus, train, &mut rng)?;
    run.save_store("mae", &mae.store)?;
    run.record_loss("mae", &trace)?;
    Ok(mae)
}

pub fn stage_base(run: &mut Run, vae: &Vae, corpus: &[Image], train: &DenoiserTrainConfig, reuse: Reuse) -> Result<ToyDenoiser> {
    if let Some(s) = lookup(run, "base", reuse)? {
        return Ok(ToyDenoiser::from_store(run.cfg.denoiser.clone(), s)?);
    }
    let mut rng = run.rng("base");
    let mut den = ToyDenoiser::new(run.cfg.denoiser.clone(), &mut rng);
    let schedule = run.cfg.schedule.build();
    let trace = train_denoiser(&mut den, vae, corpus, &schedule, train, &mut rng)?;
    run.save_store("base", &den.store)?;
    run.record_loss("base", &trace)?;
    Ok(den)
}

fn record_trace(run: &Run, name: &str, rows: &[TraceRow]) -> Result<()> {
    fs::write(run.path(&format!("losses/{name}.csv"))?, trace_csv(rows))?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, r.loss)).collect();
    let p: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, r.p)).collect();
    crate::plot::lines(&run.path(&format!("plots/{name}_loss.svg"))?, &format!("{name} loss"), "loss", &[(name, pts)])?;
    crate::plot::lines(&run.path(&format!("plots/{name}_p.svg"))?, "reconstructed-prior probability", "p", &[("p", p)])
}

fn frozen_metrics(before: &[String; 3], frozen: &Frozen<'_>) -> serde_json::Value {
    let after = frozen.digests();
    json!({
        "generator_before": before[0], "mae_before": before[1], "vae_encoder_before": before[2],
        "generator_after": after[0], "mae_after": after[1], "vae_encoder_after": after[2],
        "unchanged": before == &after,
    })
}

pub fn stage_align(
    run: &mut Run,
    frozen: &Frozen<'_>,
    data: &PriorCorpus,
    steps: Option<usize>,
    reuse: Reuse,
) -> Result<AlignmentModule> {
    if let Some(s) = lookup(run, "align", reuse)? {
        return Ok(AlignmentModule::from_store(run.cfg.align.clone(), ALIGN_PREFIX, s)?);
    }
    let mut cfg = run.cfg.align_train.clone();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let mut rng = run.rng("align");
    let mut module = AlignmentModule::new(run.cfg.align.clone(), ALIGN_PREFIX, &mut rng);
    let before = frozen.digests();
    let rows = asuka_core::align::train_alignment(&mut module, frozen, data, &run.cfg.schedule.build(), &cfg, &mut rng)?;
    run.save_store("align", &module.store)?;
    record_trace(run, "align", &rows)?;
    run.record_metric("align_frozen", frozen_metrics(&before, frozen))?;
    Ok(module)
}

pub fn stage_inject(
    run: &mut Run,
    frozen: &Frozen<'_>,
    data: &PriorCorpus,
    align: AlignmentModule,
    steps: Option<usize>,
    reuse: Reuse,
) -> Result<InjectionModule> {
    if let (Some(s), Some(a)) = (lookup(run, "inject", reuse)?, lookup(run, "inject_align", reuse)?) {
        let align = AlignmentModule::from_store(run.cfg.align.clone(), ALIGN_PREFIX, a)?;
        return Ok(InjectionModule::from_stores(frozen.generator, align, run.cfg.inject.clone(), s)?);
    }
    let mut cfg = run.cfg.inject_train.clone();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let mut rng = run.rng("inject");
    let mut module = InjectionModule::new(frozen.generator, align, run.cfg.inject.clone(), &mut rng)?;
    let before = frozen.digests();
    let rows = asuka_core::inject::train_inject(&mut module, frozen, data, &run.cfg.schedule.build(), &cfg, &mut rng)?;
    run.save_store("inject", &module.store)?;
    run.save_store("inject_align", &module.align.store)?;
    record_trace(run, "inject", &rows)?;
    run.record_metric("inject_frozen", frozen_metrics(&before, frozen))?;
    Ok(module)
}

/// Trains the conditional decoder on top of `vae` and returns the trained copy.
pub fn stage_decoder(
    run: &mut Run,
    vae: &Vae,
    corpus: &[Image],
    cache: Option<&[Image]>,
    steps: Option<usize>,
    reuse: Reuse,
) -> Result<Vae> {
    if let Some(s) = lookup(run, "decoder_cond", reuse)? {
        return Ok(Vae::from_stores(run.cfg.vae.clone(), vae.encoder.store.clone(), s)?);
    }
    let mut cfg = run.cfg.decoder_train.clone();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let mut rng = run.rng("decoder");
    let sampler = PairSampler::new(corpus, cache, run.cfg.pairs.clone(), &mut rng)?;
    let mut trained = vae.clone();
    let trace = train_decoder(&mut trained, &sampler, &cfg, &mut rng)?;
    run.save_store("decoder_cond", &trained.decoder.store)?;
    run.record_loss("decoder", &trace)?;
    Ok(trained)
}

fn load_vae(run: &Run) -> Result<Vae> {
    Ok(Vae::from_stores(run.cfg.vae.clone(), run.require_store("vae_encoder")?, run.require_store("vae_decoder")?)?)
}

fn load_frozen(run: &Run) -> Result<(Mae, Vae, ToyDenoiser)> {
    let mae = Mae::from_store(run.cfg.mae.clone(), run.require_store("mae")?)?;
    let vae = load_vae(run)?;
    let base = ToyDenoiser::from_store(run.cfg.denoiser.clone(), run.require_store("base")?)?;
    Ok((mae, vae, base))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub id: String,
    pub base: BaseType,
    pub combined: bool,
    pub fallback: bool,
    pub ratio: f64,
}

pub const MASK_INDEX: &str = "masks/index.jsonl";

pub fn mask_gen(run: &mut Run, n: usize) -> Result<()> {
    let side = run.cfg.data.side;
    let mut pool_rng = run.rng("object_pool");
    let pool = synthetic_object_pool(&mut pool_rng, 16, 32);
    let mut rng = run.rng("masks");
    let dir = run.subdir("masks")?;
    let mut index = String::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ratios = Vec::with_capacity(n);
    let mut fallbacks = 0;
    for i in 0..n {
        let s = sample_mask(&mut rng, side, side, &pool, &run.cfg.mask)?;
        let id = format!("mask_{i:05}");
        s.mask.save_png(&dir.join(format!("{id}.png")))?;
        let rec = MaskRecord { id, base: s.base, combined: s.combined, fallback: s.fallback, ratio: s.mask.ratio() };
        index.push_str(&serde_json::to_string(&rec)?);
        index.push('\n');
        *counts.entry(s.base.as_str()).or_default() += 1;
        fallbacks += s.fallback as usize;
        ratios.push(rec.ratio);
    }
    fs::write(run.path(MASK_INDEX)?, index)?;
    let freq: BTreeMap<&str, f64> =
        ["object", "irregular", "regular"].iter().map(|k| (*k, *counts.get(k).unwrap_or(&0) as f64 / n.max(1) as f64)).collect();
    run.record_metric(
        "mask_gen",
        json!({
            "n": n,
            "base_frequency": freq,
            "mean_ratio": ratios.iter().sum::<f64>() / n.max(1) as f64,
            "fallbacks": fallbacks,
        }),
    )?;
    crate::plot::histogram(&run.path("plots/mask_ratio_hist.svg")?, "mask ratio", "ratio", &[("masks", &ratios)], 20)
}

pub fn train_base(run: &mut Run, images: Option<&Path>) -> Result<()> {
    let corpus = training_corpus(run, images, run.cfg.data.train_images)?;
    let (vt, bt) = (run.cfg.vae_train.clone(), run.cfg.base_train.clone());
    let vae = stage_vae(run, &corpus, &vt, Reuse::OwnOnly)?;
    stage_base(run, &vae, &corpus, &bt, Reuse::OwnOnly)?;
    Ok(())
}

pub fn train_mae_cmd(run: &mut Run, images: Option<&Path>) -> Result<()> {
    let corpus = training_corpus(run, images, run.cfg.data.train_images)?;
    let mt = run.cfg.mae_train.clone();
    let mae = stage_mae(run, &corpus, &mt, Reuse::OwnOnly)?;
    let errs: Vec<f64> = corpus.iter().map(|img| Ok(mae.reconstruction_error(img, &mae.reconstruct(img)?)?)).collect::<Result<_>>()?;
    run.record_metric("mae", json!({"mean_reconstruction_mse": errs.iter().sum::<f64>() / errs.len() as f64}))
}

pub fn train_align_cmd(run: &mut Run, images: Option<&Path>) -> Result<()> {
    let (mae, vae, base) = load_frozen(run)?;
    let corpus = training_corpus(run, images, run.cfg.data.train_images)?;
    let frozen = Frozen { mae: &mae, vae: &vae, generator: &base };
    let mut rng = run.rng("prior_corpus");
    let data = PriorCorpus::new(&frozen, corpus, &mut rng)?;
    stage_align(run, &frozen, &data, None, Reuse::OwnOnly)?;
    Ok(())
}

pub fn train_inject_cmd(run: &mut Run, images: Option<&Path>) -> Result<()> {
    let (mae, vae, base) = load_frozen(run)?;
    let corpus = training_corpus(run, images, run.cfg.data.train_images)?;
    let frozen = Frozen { mae: &mae, vae: &vae, generator: &base };
    let mut rng = run.rng("prior_corpus");
    let data = PriorCorpus::new(&frozen, corpus, &mut rng)?;
    let align = match run.load_store("align")? {
        Some(s) => AlignmentModule::from_store(run.cfg.align.clone(), ALIGN_PREFIX, s)?,
        None => AlignmentModule::new(run.cfg.align.clone(), ALIGN_PREFIX, &mut run.rng("align_init")),
    };
    stage_inject(run, &frozen, &data, align, None, Reuse::OwnOnly)?;
    Ok(())
}

/// Source images and their augmented counterparts from an `augment-corpus`
/// manifest; unaugmented items map to themselves.
fn load_cache(dir: &Path, side: usize) -> Result<(Vec<Image>, Vec<Image>)> {
    let records: Vec<ManifestRecord> = crate::run::read_json(&dir.join(MANIFEST_FILE))?;
    let load = |p: &Path| -> Result<Image> { Ok(center_crop_resize(&Image::load(p)?, side)?) };
    let sources = records.iter().map(|r| load(&r.source_path)).collect::<Result<_>>()?;
    let outputs = records.iter().map(|r| load(&r.output_path)).collect::<Result<_>>()?;
    Ok((sources, outputs))
}

pub fn augment_corpus(run: &mut Run, images: Option<&Path>) -> Result<()> {
    let vae = load_vae(run)?;
    let base = ToyDenoiser::from_store(run.cfg.denoiser.clone(), run.require_store("base")?)?;
    let sources = match images {
        Some(dir) => list_images(dir)?,
        None => {
            let corpus = training_corpus(run, None, run.cfg.data.train_images)?;
            let dir = run.subdir("corpus")?;
            corpus
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let p = dir.join(format!("img_{i:05}.png"));
                    img.save_png(&p)?;
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let side = run.cfg.data.side;
    let grid = vae.latent_grid(side, side)?;
    let schedule = run.cfg.schedule.build();
    let gen = BaseGenerator { model: &base, target: schedule.prediction_target(), grid };
    let seed = run.seed("augment");
    let cache = run.subdir("augmented")?;
    let t0 = Instant::now();
    let report =
        latent_augment_corpus(&sources, &vae, &gen, &schedule, seed, run.cfg.augment.apply_prob, &cache, run.cfg.data.workers)?;
    let applied = report.records.iter().filter(|r| r.applied).count();
    run.record_metric(
        "augment",
        json!({"items": report.records.len(), "applied": applied, "recomputed": report.recomputed, "seconds": t0.elapsed().as_secs_f64()}),
    )
}

pub fn train_decoder_cmd(run: &mut Run, images: Option<&Path>, cache_dir: Option<&Path>) -> Result<()> {
    let vae = load_vae(run)?;
    let (corpus, cache) = match cache_dir {
        Some(d) => {
            if images.is_some() {
                bail!("--images and --cache both name a corpus; the cache manifest already lists its sources");
            }
            let (src, out) = load_cache(d, run.cfg.data.side)?;
            (src, Some(out))
        }
        None => (training_corpus(run, images, run.cfg.data.train_images)?, None),
    };
    let enc_before = vae.encoder.store.digest();
    let trained = stage_decoder(run, &vae, &corpus, cache.as_deref(), None, Reuse::OwnOnly)?;
    run.record_metric(
        "decoder",
        json!({
            "latent_cache_items": cache.as_ref().map_or(0, Vec::len),
            "vae_encoder_before": enc_before,
            "vae_encoder_after": trained.encoder.store.digest(),
        }),
    )
}

pub const EVAL_TABLE: &str = "eval/per_item.csv";

pub fn eval(run: &mut Run, set_dir: Option<&Path>) -> Result<()> {
    let vae = load_vae(run)?;
    let trained = run.load_store("decoder_cond")?.map(|s| Vae::from_stores(run.cfg.vae.clone(), vae.encoder.store.clone(), s)).transpose()?;
    let items = match set_dir {
        Some(d) => load_eval_set(d)?,
        None => {
            let seed = run.seed("eval_set");
            let items = color_shift_eval_set(seed, run.cfg.eval.items, run.cfg.data.side)?;
            let dir = run.subdir("eval/set")?;
            save_eval_set(&items, &dir)?;
            // Score the stored 8-bit set so a later `--eval-set` run reproduces these numbers.
            load_eval_set(&dir)?
        }
    };
    let bw = run.cfg.eval.band_width;
    let mut table = String::from("id,gae_baseline,gae_trained\n");
    let (mut base_scores, mut trained_scores) = (Vec::new(), Vec::new());
    let (mut preds, mut gts, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for item in &items {
        let (out_b, _) = eval_item(&vae, item, false)?;
        let gb = gradient_at_edge_with(&out_b, &item.target, &item.mask, bw)?;
        base_scores.push(gb);
        let gt_cell = match &trained {
            Some(t) => {
                let (out_t, _) = eval_item(t, item, true)?;
                let g = gradient_at_edge_with(&out_t, &item.target, &item.mask, bw)?;
                trained_scores.push(g);
                preds.push(out_t);
                g.to_string()
            }
            None => {
                preds.push(out_b);
                String::new()
            }
        };
        gts.push(item.target.clone());
        masks.push(item.mask.clone());
        table.push_str(&format!("{},{gb},{gt_cell}\n", item.id));
    }
    fs::write(run.path(EVAL_TABLE)?, table)?;
    let n = items.len() as f64;
    let mean_b = base_scores.iter().sum::<f64>() / n;
    let mut gae = json!({"items": items.len(), "band_width": bw, "baseline_mean": mean_b});
    if !trained_scores.is_empty() {
        let mean_t = trained_scores.iter().sum::<f64>() / n;
        let wins = base_scores.iter().zip(&trained_scores).filter(|(b, t)| t < b).count();
        gae["trained_mean"] = json!(mean_t);
        gae["wins"] = json!(wins);
        gae["trained_below_baseline"] = json!(mean_t < mean_b);
    }
    let scores = score_with_plugins(&ScorerRegistry::new(), &preds, &gts, &masks)?;
    let scores: BTreeMap<String, serde_json::Value> = scores
        .into_iter()
        .map(|(k, v)| {
            let v = match v {
                ScoreValue::Value(x) => json!(x),
                ScoreValue::Unavailable => json!("unavailable"),
            };
            (k, v)
        })
        .collect();
    run.record_metric("eval", json!({"g@e": gae, "scores": scores}))?;
    let mut series: Vec<(&str, &[f64])> = vec![("baseline decoder", &base_scores)];
    if !trained_scores.is_empty() {
        series.push(("conditional decoder", &trained_scores));
    }
    crate::plot::histogram(&run.path("plots/gae_hist.svg")?, "G@e on the color-shift set", "G@e", &series, 24)
}

pub const VERDICTS: &str = "judge/verdicts.jsonl";

pub fn judge(run: &mut Run, composites: Option<&Path>) -> Result<()> {
    let dir = match composites {
        Some(d) => d.to_path_buf(),
        None => run
            .manifest
            .inputs
            .iter()
            .rev()
            .map(|d| d.join("demo/judge"))
            .find(|d| d.is_dir())
            .context("no --composites directory and no demo/judge folder in any --from run")?,
    };
    let items: Vec<JudgeItem> = list_images(&dir)?
        .into_iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("item").to_string();
            Ok(JudgeItem { id, composite: Image::load(&p)? })
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        bail!("no composites in {}", dir.display());
    }
    let client = JudgeClient::new(run.cfg.judge.clone())?;
    let mut log = fs::File::create(run.path(VERDICTS)?)?;
    let records = judge_batch(&client, &items, JUDGE_PROMPT, &mut log)?;
    let yes = records.iter().filter(|r| r.verdict == Some(true)).count();
    let no = records.iter().filter(|r| r.verdict == Some(false)).count();
    let transport = records.iter().filter(|r| r.error.as_deref().is_some_and(|e| e.starts_with("transport"))).count();
    run.record_metric(
        "judge",
        json!({
            "items": records.len(),
            "hallucination": yes,
            "clean": no,
            "unparsed": records.len() - yes - no - transport,
            "transport_errors": transport,
            "model_id": run.cfg.judge.model_id,
            "hallucination_rate": if yes + no > 0 { yes as f64 / (yes + no) as f64 } else { f64::NAN },
        }),
    )?;
    if transport > 0 {
        return Err(ExternalServiceError(format!("{transport} of {} judge requests failed to reach the endpoint", records.len())).into());
    }
    Ok(())
}

pub fn build_dataset(run: &mut Run, input: Option<&Path>, domains: &[String]) -> Result<()> {
    let mut tags: BTreeMap<String, Domain> = BTreeMap::new();
    for d in domains {
        let (name, tag) = d.split_once('=').with_context(|| format!("--domain expects source=tag, got `{d}`"))?;
        let tag: Domain = serde_json::from_value(json!(tag))
            .with_context(|| format!("unknown domain tag `{tag}` (expected indoor, landscape, building or background)"))?;
        tags.insert(name.to_string(), tag);
    }
    let sources = match input {
        Some(dir) => read_sources(dir, &tags)?,
        None => {
            let seed = run.seed("dataset_sources");
            let side = run.cfg.dataset.side * 5 / 4;
            (0..run.cfg.dataset.clusters_per_dataset * 16)
                .map(|i| {
                    let (image, domain) = toy_item(seed, i, side);
                    let foreground = (domain == Domain::Background).then(|| center_blob(side));
                    SourceImage { id: format!("toy_{i:05}"), source_dataset: domain.as_str().to_string(), domain, image, foreground }
                })
                .collect()
        }
    };
    let mut rng = run.rng("dataset");
    let out = run.subdir("dataset")?;
    let records = build_benchmark(&sources, &ToyEmbedder, &run.cfg.dataset, &mut rng, Some(&out))?;
    let mut per_domain: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *per_domain.entry(r.domain_tag.as_str()).or_default() += 1;
    }
    let ratios: Vec<f64> = records.iter().map(|r| r.mask_ratio).collect();
    run.record_metric(
        "dataset",
        json!({
            "sources": sources.len(),
            "selected": records.len(),
            "per_domain": per_domain,
            "mean_mask_ratio": ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
        }),
    )?;
    crate::plot::histogram(&run.path("plots/mask_ratio_hist.svg")?, "benchmark mask ratio", "ratio", &[("masks", &ratios)], 20)
}

fn center_blob(side: usize) -> Mask {
    let c = side as f64 / 2.0;
    let r = side as f64 / 4.0;
    Mask::from_fn(side, side, |y, x| (y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2) <= r * r)
}

/// `dir/<source>/*.png`, with optional foreground masks in `dir/<source>/fg/`.
fn read_sources(dir: &Path, tags: &BTreeMap<String, Domain>) -> Result<Vec<SourceImage>> {
    let mut subdirs: Vec<PathBuf> =
        fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    let mut out = Vec::new();
    for sub in subdirs {
        let name = sub.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let domain = match tags.get(&name) {
            Some(d) => *d,
            None => serde_json::from_value(json!(name))
                .with_context(|| format!("source `{name}` has no domain; pass --domain {name}=<tag>"))?,
        };
        for p in list_images(&sub)? {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let fg_path = sub.join("fg").join(format!("{stem}.png"));
            let foreground = if fg_path.exists() { Some(Mask::load_png(&fg_path)?) } else { None };
            out.push(SourceImage { id: format!("{name}_{stem}"), source_dataset: name.clone(), domain, image: Image::load(&p)?, foreground });
        }
    }
    if out.is_empty() {
        bail!("no source images under {}", dir.display());
    }
    Ok(out)
}

/// Trained models for inference.
pub struct Pipeline {
    pub vae: Vae,
    pub decoder: Vae,
    pub mae: Mae,
    pub base: ToyDenoiser,
    pub inject: InjectionModule,
}

/// Loads every model from the search path, training whatever is missing at
/// `demo` sizes.
pub fn demo_pipeline(run: &mut Run) -> Result<Pipeline> {
    let d = run.cfg.demo.clone();
    let corpus = training_corpus(run, None, d.train_images)?;
    let vt = VaeTrainConfig { steps: d.vae_steps, ..run.cfg.vae_train.clone() };
    let vae = stage_vae(run, &corpus, &vt, Reuse::SearchPath)?;
    let mt = MaeTrainConfig { steps: d.mae_steps, ..run.cfg.mae_train.clone() };
    let mae = stage_mae(run, &corpus, &mt, Reuse::SearchPath)?;
    let bt = DenoiserTrainConfig { steps: d.base_steps, ..run.cfg.base_train.clone() };
    let base = stage_base(run, &vae, &corpus, &bt, Reuse::SearchPath)?;
    let decoder = stage_decoder(run, &vae, &corpus, None, Some(d.decoder_steps), Reuse::SearchPath)?;
    let inject = {
        let frozen = Frozen { mae: &mae, vae: &vae, generator: &base };
        let mut rng = run.rng("prior_corpus");
        let data = PriorCorpus::new(&frozen, corpus, &mut rng)?;
        let align = stage_align(run, &frozen, &data, Some(d.align_steps), Reuse::SearchPath)?;
        stage_inject(run, &frozen, &data, align, Some(d.inject_steps), Reuse::SearchPath)?
    };
    Ok(Pipeline { vae, decoder, mae, base, inject })
}

impl Pipeline {
    /// Samples the masked latent with the injected generator, decodes with the
    /// conditional decoder and pastes the result into the masked region.
    pub fn inpaint(&self, image: &Image, mask: &Mask, schedule: &asuka_core::schedule::NoiseSchedule, steps: usize, noise: Mat) -> Result<Image> {
        let (h, w) = image.dims();
        let grid = self.vae.latent_grid(h, w)?;
        let z0 = self.vae.encode(image)?;
        let lm = latent_mask(mask, self.vae.cfg.factor)?;
        let z_masked = mask_latent(&z0, &lm);
        let prior = self.mae.predict(image, &patchify_mask(mask, self.mae.cfg.patch)?)?;
        let model = |z: &Mat, t: usize| -> asuka_core::Result<Mat> {
            let inp = DenoiseInput { z_t: z.clone(), z_masked: z_masked.clone(), mask: lm.clone(), t, grid };
            self.inject.predict(&self.base, &inp, &prior, GateOverride::Learned)
        };
        let z = sample_latent(&model, schedule, schedule.prediction_target(), noise, steps)?;
        let decoded = self.decoder.decode_cond(&z, &masked_image(image, mask)?, mask)?;
        Ok(composite(&decoded, image, mask)?)
    }
}

pub fn demo_inpaint(run: &mut Run) -> Result<()> {
    let pipe = demo_pipeline(run)?;
    let side = run.cfg.data.side;
    let schedule = run.cfg.schedule.build();
    let image_seed = run.seed("demo_images");
    let mut mask_rng = run.rng("demo_masks");
    let mut noise_rng = run.rng("demo_noise");
    let pool = synthetic_object_pool(&mut mask_rng, 16, 32);
    let dir = run.subdir("demo")?;
    let judge_dir = run.subdir("demo/judge")?;
    let style = CompositeStyle::default();
    let mut items = Vec::new();
    for i in 0..run.cfg.demo.images {
        let (image, domain) = toy_item(image_seed, i, side);
        let mask = sample_mask(&mut mask_rng, side, side, &pool, &run.cfg.mask)?.mask;
        let c = pipe.vae.cfg.latent_channels;
        let n = (side / pipe.vae.cfg.factor).pow(2);
        let noise = Mat::randn(n, c, 1.0, &mut noise_rng);
        let result = pipe.inpaint(&image, &mask, &schedule, run.cfg.demo.sample_steps, noise)?;
        let id = format!("demo_{i:03}");
        image.save_png(&dir.join(format!("{id}_input.png")))?;
        mask.save_png(&dir.join(format!("{id}_mask.png")))?;
        result.save_png(&dir.join(format!("{id}_result.png")))?;
        make_judge_composite(&image, &mask, &result, &style)?.save_png(&judge_dir.join(format!("{id}.png")))?;
        let gae = gradient_at_edge_with(&result, &image, &mask, run.cfg.eval.band_width)?;
        items.push(json!({"id": id, "domain": domain.as_str(), "mask_ratio": mask.ratio(), "g@e_vs_source": gae}));
    }
    write_json(&run.path("demo/index.json")?, &items)?;
    run.record_metric("demo", json!({"images": items.len(), "sample_steps": run.cfg.demo.sample_steps}))
}

/// Exit status for an error chain: 2 validation, 4 external service, 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<crate::config::ValidationError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<ExternalServiceError>().is_some() {
            return 4;
        }
        if let Some(AsukaError::Transport(_)) = cause.downcast_ref::<AsukaError>() {
            return 4;
        }
    }
    3
}
