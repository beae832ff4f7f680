//! Color jitter and offline latent augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{AsukaError, Result};
use crate::image::Image;
use crate::nn::Mat;
use crate::rng::{seeded, stream, ChaCha8Rng};
use crate::schedule::{one_step_estimate, Denoiser, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorJitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitterParams {
    fn default() -> Self {
        Self { brightness: 0.15, contrast: 0.2, saturation: 0.1, hue: 0.03 }
    }
}

impl ColorJitterParams {
    pub const IDENTITY: Self = Self { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0 };

    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0) {
                out.push((name.to_string(), format!("magnitude {v} must be >= 0")));
            }
        }
        if self.hue > 0.5 {
            out.push(("hue".to_string(), format!("hue magnitude {} exceeds 0.5", self.hue)));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Concrete jitter factors and their order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterDraw {
    pub order: [JitterOp; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of the hue circle.
    pub hue: f64,
}

impl JitterDraw {
    pub fn identity() -> Self {
        Self {
            order: [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue],
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, p: &ColorJitterParams) -> Self {
        let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
        order.shuffle(rng);
        let mut factor = |m: f64| if m > 0.0 { rng.random_range((1.0 - m).max(0.0)..=1.0 + m) } else { 1.0 };
        let brightness = factor(p.brightness);
        let contrast = factor(p.contrast);
        let saturation = factor(p.saturation);
        let hue = if p.hue > 0.0 { rng.random_range(-p.hue..=p.hue) } else { 0.0 };
        Self { order, brightness, contrast, saturation, hue }
    }
}

fn luma([r, g, b]: [f64; 3]) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn blend(a: f64, b: f64, f: f64) -> f64 {
    (f * a + (1.0 - f) * b).clamp(0.0, 1.0)
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Applies a drawn jitter. Each step clamps to `[0, 1]`.
pub fn apply_jitter(image: &Image, draw: &JitterDraw) -> Image {
    let mut out = image.clone();
    for op in draw.order {
        match op {
            JitterOp::Brightness if draw.brightness != 1.0 => {
                out = out.map(|x| (x * draw.brightness).clamp(0.0, 1.0));
            }
            JitterOp::Contrast if draw.contrast != 1.0 => {
                let n = (out.height * out.width) as f64;
                let mean = out.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f64>() / n;
                out = out.map(|x| blend(x, mean, draw.contrast));
            }
            JitterOp::Saturation if draw.saturation != 1.0 => {
                for p in out.data.chunks_exact_mut(3) {
                    let g = luma([p[0], p[1], p[2]]);
                    for x in p.iter_mut() {
                        *x = blend(*x, g, draw.saturation);
                    }
                }
            }
            JitterOp::Hue if draw.hue != 0.0 => {
                for p in out.data.chunks_exact_mut(3) {
                    let [h, s, v] = rgb_to_hsv([p[0], p[1], p[2]]);
                    let rgb = hsv_to_rgb([h + draw.hue, s, v]);
                    for (x, y) in p.iter_mut().zip(rgb) {
                        *x = y.clamp(0.0, 1.0);
                    }
                }
            }
            _ => {}
        }
    }
    out
}

pub fn color_jitter(image: &Image, rng: &mut ChaCha8Rng, params: &ColorJitterParams) -> Image {
    apply_jitter(image, &JitterDraw::sample(rng, params))
}

/// Image ↔ latent mapping. Latents are `(h·w) × c`.
pub trait LatentCodec: Sync {
    fn encode(&self, image: &Image) -> Result<Mat>;
    fn decode(&self, z: &Mat, height: usize, width: usize) -> Result<Image>;
}

/// Latent = pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &Image) -> Result<Mat> {
        Ok(image.to_mat())
    }

    fn decode(&self, z: &Mat, height: usize, width: usize) -> Result<Image> {
        Image::from_mat(height, width, z)
    }
}

/// Encode, noise at `t ∈ [T/2, T)`, one-step estimate, decode.
pub fn augment_one(
    image: &Image,
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, usize)> {
    let z0 = codec.encode(image)?;
    let (lo, hi) = schedule.augment_range();
    let t = rng.random_range(lo..hi);
    let eps = Mat::randn(z0.rows, z0.cols, 1.0, rng);
    let z_t = schedule.noise(&z0, &eps, t)?;
    let z_hat = one_step_estimate(&z_t, t, denoiser, &z0, schedule)?;
    Ok((codec.decode(&z_hat, image.height, image.width)?.clamped(), t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source_path: PathBuf,
    pub output_path: PathBuf,
    pub applied: bool,
    pub t: Option<usize>,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug)]
pub struct AugmentReport {
    pub records: Vec<ManifestRecord>,
    /// Items whose augmented file had to be computed in this call.
    pub recomputed: usize,
}

/// Per-item seed: the first draw of stream `index` under `root`.
pub fn item_seed(root: u64, index: usize) -> u64 {
    stream(root, index as u64).next_u64()
}

fn read_manifest(path: &Path) -> Option<Vec<ManifestRecord>> {
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}

/// Offline latent augmentation of the images at `sources` into `cache_dir`.
///
/// Each item draws from its own seed, so the selection and noise for item `i`
/// do not depend on other items. Selected items are written as
/// `cache_dir/aug_NNNNN.png`; unselected items point back at their source.
/// A record already present in the manifest with the same source, seed and an
/// existing output file is reused without recomputation.
pub fn latent_augment_corpus(
    sources: &[PathBuf],
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    root_seed: u64,
    apply_prob: f64,
    cache_dir: &Path,
    workers: usize,
) -> Result<AugmentReport> {
    if !(0.0..=1.0).contains(&apply_prob) {
        return Err(AsukaError::arg(format!("apply_prob {apply_prob} outside [0, 1]")));
    }
    fs::create_dir_all(cache_dir).map_err(|e| AsukaError::io(cache_dir, e))?;
    let manifest_path = cache_dir.join(MANIFEST_FILE);
    let previous = read_manifest(&manifest_path).unwrap_or_default();

    let process = |i: usize| -> Result<(ManifestRecord, bool)> {
        let source = &sources[i];
        let seed = item_seed(root_seed, i);
        if let Some(rec) = previous.iter().find(|r| &r.source_path == source && r.seed == seed) {
            if !rec.applied || rec.output_path.exists() {
                return Ok((rec.clone(), false));
            }
        }
        let mut rng = seeded(seed);
        let applied = rng.random_bool(apply_prob);
        if !applied {
            let rec = ManifestRecord { source_path: source.clone(), output_path: source.clone(), applied, t: None, seed };
            return Ok((rec, false));
        }
        let image = Image::load(source)?;
        let (out, t) = augment_one(&image, codec, denoiser, schedule, &mut rng)?;
        let output_path = cache_dir.join(format!("aug_{i:05}.png"));
        out.save_png(&output_path)?;
        Ok((ManifestRecord { source_path: source.clone(), output_path, applied, t: Some(t), seed }, true))
    };

    let workers = workers.clamp(1, sources.len().max(1));
    let mut results: Vec<Option<Result<(ManifestRecord, bool)>>> = (0..sources.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let process = &process;
                scope.spawn(move || {
                    (w..sources.len()).step_by(workers).map(|i| (i, process(i))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("augment worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let mut records = Vec::with_capacity(sources.len());
    let mut recomputed = 0;
    for r in results {
        let (rec, fresh) = r.expect("every item processed")?;
        recomputed += fresh as usize;
        records.push(rec);
    }
    let json = serde_json::to_vec_pretty(&records).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| AsukaError::io(&manifest_path, e))?;
    Ok(AugmentReport { records, recomputed })
}
