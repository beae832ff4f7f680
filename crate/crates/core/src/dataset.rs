//! Benchmark construction: embeddings, bisecting k-means, representative
//! selection, center crops and background-only masks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AsukaError, Result};
use crate::image::Image;
use crate::mask::{sample_mask, synthetic_object_pool, Mask, MaskRecipe};
use crate::models::corpus::Domain;
use crate::nn::Mat;
use crate::rng::ChaCha8Rng;

/// `n × d` features with one id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub data: Mat,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, data: Mat) -> Result<Self> {
        if ids.len() != data.rows {
            return Err(AsukaError::arg(format!("{} ids for {} feature rows", ids.len(), data.rows)));
        }
        if data.data.iter().any(|v| !v.is_finite()) {
            return Err(AsukaError::arg("features must be finite"));
        }
        Ok(Self { ids, data })
    }

    pub fn len(&self) -> usize {
        self.data.rows
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// Cluster index in `0..k` per row.
    pub assignment: Vec<usize>,
    pub centers: Mat,
    /// Total SSE before any split, then after each split.
    pub sse_history: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centers.rows
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(x: &Mat, members: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; x.cols];
    for &i in members {
        for (acc, v) in m.iter_mut().zip(x.row(i)) {
            *acc += v;
        }
    }
    let n = members.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn sse_of(x: &Mat, members: &[usize]) -> f64 {
    let mu = mean_of(x, members);
    members.iter().map(|&i| sq_dist(x.row(i), &mu)).sum()
}

/// 2-means on `members`, seeded with the farthest pair (smallest indices on
/// ties). Both halves are non-empty.
fn two_means(x: &Mat, members: &[usize], iters: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut sa, mut sb, mut best) = (members[0], members[1], -1.0);
    for (p, &i) in members.iter().enumerate() {
        for &j in &members[p + 1..] {
            let d = sq_dist(x.row(i), x.row(j));
            if d > best {
                (sa, sb, best) = (i, j, d);
            }
        }
    }
    let (mut ca, mut cb) = (x.row(sa).to_vec(), x.row(sb).to_vec());
    let mut split: Option<(Vec<usize>, Vec<usize>)> = None;
    for _ in 0..iters.max(1) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for &i in members {
            if sq_dist(x.row(i), &cb) < sq_dist(x.row(i), &ca) {
                b.push(i);
            } else {
                a.push(i);
            }
        }
        if a.is_empty() || b.is_empty() {
            break;
        }
        if split.as_ref().is_some_and(|(pa, _)| *pa == a) {
            break;
        }
        ca = mean_of(x, &a);
        cb = mean_of(x, &b);
        split = Some((a, b));
    }
    match split {
        Some(s) => s,
        // All points coincide: peel one off.
        None => (members[..members.len() - 1].to_vec(), vec![members[members.len() - 1]]),
    }
}

/// Splits the cluster with the largest SSE until `k` clusters exist.
pub fn bisecting_kmeans(features: &FeatureMatrix, k: usize, inner_iters: usize) -> Result<ClusterResult> {
    let n = features.len();
    if k == 0 || n < k {
        return Err(AsukaError::arg(format!("cannot form {k} clusters from {n} points")));
    }
    let x = &features.data;
    let mut clusters: Vec<Vec<usize>> = vec![(0..n).collect()];
    let mut sses = vec![sse_of(x, &clusters[0])];
    let mut history = vec![sses[0]];
    while clusters.len() < k {
        let pick = (0..clusters.len())
            .filter(|&c| clusters[c].len() >= 2)
            .max_by(|&a, &b| sses[a].total_cmp(&sses[b]).then(clusters[a].len().cmp(&clusters[b].len())).then(b.cmp(&a)))
            .expect("n >= k leaves a splittable cluster");
        let (a, b) = two_means(x, &clusters[pick], inner_iters);
        sses[pick] = sse_of(x, &a);
        clusters[pick] = a;
        sses.push(sse_of(x, &b));
        clusters.push(b);
        history.push(sses.iter().sum());
    }
    let mut assignment = vec![0; n];
    let mut centers = Mat::zeros(k, x.cols);
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            assignment[i] = c;
        }
        centers.row_mut(c).copy_from_slice(&mean_of(x, members));
    }
    Ok(ClusterResult { assignment, centers, sse_history: history })
}

/// Total SSE of an assignment with its own cluster means.
pub fn total_sse(x: &Mat, assignment: &[usize], k: usize) -> f64 {
    (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..x.rows).filter(|&i| assignment[i] == c).collect();
            if members.is_empty() { 0.0 } else { sse_of(x, &members) }
        })
        .sum()
}

/// Row index of the member nearest each center; ties go to the smallest id.
pub fn select_representatives(features: &FeatureMatrix, result: &ClusterResult) -> Vec<usize> {
    (0..result.k())
        .map(|c| {
            let center = result.centers.row(c);
            (0..features.len())
                .filter(|&i| result.assignment[i] == c)
                .min_by(|&a, &b| {
                    sq_dist(features.data.row(a), center)
                        .total_cmp(&sq_dist(features.data.row(b), center))
                        .then_with(|| features.ids[a].cmp(&features.ids[b]))
                })
                .expect("clusters are non-empty")
        })
        .collect()
}

/// Centered square crop of side `min(h, w)`, then bilinear resize to `side`.
pub fn center_crop_resize(image: &Image, side: usize) -> Result<Image> {
    let (h, w) = image.dims();
    if h == 0 || w == 0 || side == 0 {
        return Err(AsukaError::InvalidSize { height: h, width: w, reason: "empty image or target".into() });
    }
    let s = h.min(w);
    let (top, left) = ((h - s) / 2, (w - s) / 2);
    if s == side {
        return Ok(Image::from_fn(side, side, |r, c| image.pixel(top + r, left + c)));
    }
    let scale = s as f64 / side as f64;
    let coord = |d: usize| {
        let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, src - i0 as f64)
    };
    Ok(Image::from_fn(side, side, |r, c| {
        let (r0, r1, fr) = coord(r);
        let (c0, c1, fc) = coord(c);
        let p = |rr: usize, cc: usize| image.pixel(top + rr, left + cc);
        let (a, b, cpx, d) = (p(r0, c0), p(r0, c1), p(r1, c0), p(r1, c1));
        std::array::from_fn(|k| {
            (1.0 - fr) * ((1.0 - fc) * a[k] + fc * b[k]) + fr * ((1.0 - fc) * cpx[k] + fc * d[k])
        })
    }))
}

/// `mask AND NOT fg`.
pub fn background_mask(mask: &Mask, fg: &Mask) -> Result<Mask> {
    if mask.dims() != fg.dims() {
        return Err(AsukaError::arg(format!("mask {:?} vs segmentation {:?}", mask.dims(), fg.dims())));
    }
    mask.difference(fg)
}

/// Image feature extractor.
pub trait Embedder: Sync {
    fn name(&self) -> &str;
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Mean color over a 4×4 grid plus per-channel standard deviation (51 values).
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyEmbedder;

impl Embedder for ToyEmbedder {
    fn name(&self) -> &str {
        "toy-pixel-stats"
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w) = image.dims();
        if h < 4 || w < 4 {
            return Err(AsukaError::InvalidSize { height: h, width: w, reason: "embedder needs at least 4x4".into() });
        }
        let mut out = vec![0.0; 51];
        let mut counts = [0usize; 16];
        let mut mean = [0.0; 3];
        let mut sq = [0.0; 3];
        for r in 0..h {
            for c in 0..w {
                let cell = (r * 4 / h) * 4 + c * 4 / w;
                counts[cell] += 1;
                let p = image.pixel(r, c);
                for k in 0..3 {
                    out[cell * 3 + k] += p[k];
                    mean[k] += p[k];
                    sq[k] += p[k] * p[k];
                }
            }
        }
        for cell in 0..16 {
            for k in 0..3 {
                out[cell * 3 + k] /= counts[cell] as f64;
            }
        }
        let n = (h * w) as f64;
        for k in 0..3 {
            out[48 + k] = (sq[k] / n - (mean[k] / n).powi(2)).max(0.0).sqrt();
        }
        Ok(out)
    }
}

/// Embeds `images` on `workers` threads; rows follow input order.
pub fn embed_all(embedder: &dyn Embedder, ids: Vec<String>, images: &[Image], workers: usize) -> Result<FeatureMatrix> {
    if images.is_empty() {
        return Err(AsukaError::arg("nothing to embed"));
    }
    let chunk = images.len().div_ceil(workers.max(1));
    let parts: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            images.chunks(chunk).map(|part| s.spawn(move || part.iter().map(|i| embedder.embed(i)).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("embedder thread panicked")).collect()
    });
    let rows: Vec<Vec<f64>> = parts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(AsukaError::arg("embedder returned rows of different lengths"));
    }
    FeatureMatrix::new(ids, Mat::from_vec(rows.len(), d, rows.concat()))
}

/// One candidate image for the benchmark.
#[derive(Clone, Debug)]
pub struct SourceImage {
    pub id: String,
    pub source_dataset: String,
    pub domain: Domain,
    pub image: Image,
    /// Foreground segmentation; masks are restricted to the background when present.
    pub foreground: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    pub source_dataset: String,
    pub cluster_id: usize,
    pub mask_ratio: f64,
    pub domain_tag: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    /// Clusters (and so selected images) per source dataset.
    pub clusters_per_dataset: usize,
    pub side: usize,
    pub inner_iters: usize,
    pub workers: usize,
    pub recipe: MaskRecipe,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { clusters_per_dataset: 8, side: 64, inner_iters: 25, workers: 4, recipe: MaskRecipe::default() }
    }
}

pub const BENCHMARK_MANIFEST: &str = "manifest.json";

/// Clusters each source dataset, keeps the member nearest every center,
/// crops it and draws a mask. Writes `images/`, `masks/` and the manifest
/// into `out_dir` when given.
pub fn build_benchmark(
    sources: &[SourceImage],
    embedder: &dyn Embedder,
    cfg: &BenchmarkConfig,
    rng: &mut ChaCha8Rng,
    out_dir: Option<&Path>,
) -> Result<Vec<BenchmarkRecord>> {
    let mut datasets: Vec<&str> = sources.iter().map(|s| s.source_dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    let pool = synthetic_object_pool(rng, 16, 32);
    if let Some(dir) = out_dir {
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| AsukaError::io(&p, e))?;
        }
    }
    let mut records = Vec::new();
    for ds in datasets {
        let members: Vec<&SourceImage> = sources.iter().filter(|s| s.source_dataset == ds).collect();
        let images: Vec<Image> =
            members.iter().map(|s| center_crop_resize(&s.image, cfg.side)).collect::<Result<_>>()?;
        let ids = members.iter().map(|s| s.id.clone()).collect();
        let feats = embed_all(embedder, ids, &images, cfg.workers)?;
        let k = cfg.clusters_per_dataset.min(members.len());
        let clusters = bisecting_kmeans(&feats, k, cfg.inner_iters)?;
        for (cluster_id, &row) in select_representatives(&feats, &clusters).iter().enumerate() {
            let src = members[row];
            let mut mask = sample_mask(rng, cfg.side, cfg.side, &pool, &cfg.recipe)?.mask;
            if let Some(fg) = &src.foreground {
                let fg = resize_mask(fg, cfg.side)?;
                mask = background_mask(&mask, &fg)?;
            }
            if let Some(dir) = out_dir {
                images[row].save_png(&dir.join("images").join(format!("{}.png", src.id)))?;
                mask.save_png(&dir.join("masks").join(format!("{}.png", src.id)))?;
            }
            records.push(BenchmarkRecord {
                id: src.id.clone(),
                source_dataset: ds.to_string(),
                cluster_id,
                mask_ratio: mask.ratio(),
                domain_tag: src.domain,
            });
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join(BENCHMARK_MANIFEST);
        let json = serde_json::to_string_pretty(&records).expect("records serialize");
        fs::write(&path, json).map_err(|e| AsukaError::io(&path, e))?;
    }
    Ok(records)
}

/// Center crop and nearest-neighbour resize for binary masks.
fn resize_mask(mask: &Mask, side: usize) -> Result<Mask> {
    let as_img = Image::from_fn(mask.height, mask.width, |r, c| [mask.get(r, c) as u8 as f64; 3]);
    let resized = center_crop_resize(&as_img, side)?;
    Ok(Mask::from_fn(side, side, |r, c| resized.pixel(r, c)[0] >= 0.5))
}
