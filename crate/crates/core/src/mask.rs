//! Inpainting mask synthesis and morphology.
//!
//! Masks are binary H×W grids where 1 marks the hole. Generators are pure
//! functions of the caller's RNG state: the same seed always reproduces the
//! same mask bit for bit.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AsukaError, Result};
use crate::rng::ChaCha8Rng;

pub const MIN_SIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                m.data[r * width + c] = f(r, c) as u8;
            }
        }
        m
    }

    /// Builds a mask from 0/1 values, rejecting anything else.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(AsukaError::shape(format!("{} values for a {height}x{width} mask", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(AsukaError::arg("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Fraction of masked pixels.
    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn complement(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(AsukaError::shape(format!("mask {:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other)?;
        Ok(Mask { data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(), ..self.clone() })
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other)?;
        Ok(Mask { data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(), ..self.clone() })
    }

    /// `self AND NOT other`
    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other)?;
        Ok(Mask { data: self.data.iter().zip(&other.data).map(|(a, b)| a & (1 - b)).collect(), ..self.clone() })
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(a, b)| a <= b)
    }

    /// Values as `f64` (1.0 = masked).
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Single-channel PNG, 255 = masked.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::L8)
            .map_err(|e| AsukaError::Image(format!("{}: {e}", path.display())))
    }

    /// Reads a grayscale PNG; values ≥ 128 count as masked.
    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path).map_err(|e| AsukaError::Image(format!("{}: {e}", path.display())))?;
        let l = img.to_luma8();
        let data = l.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
        Ok(Mask { height: l.height() as usize, width: l.width() as usize, data })
    }
}

/// Base families of the mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseType {
    Object,
    Irregular,
    Regular,
}

impl BaseType {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseType::Object => "object",
            BaseType::Irregular => "irregular",
            BaseType::Regular => "regular",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrregularStyle {
    /// Thick random polylines.
    Brush,
    /// Thinner polylines joined with random rectangles.
    Comod,
}

/// Mixture weights and ratio limits for [`sample_mask`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskRecipe {
    pub p_object: f64,
    pub p_irregular: f64,
    pub p_regular: f64,
    pub p_combine_object_with_irregular: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub dilation_min_px: usize,
    pub dilation_max_px: usize,
    /// Rejection attempts before falling back to a rectangle of target ratio.
    pub max_rejections: usize,
}

impl Default for MaskRecipe {
    fn default() -> Self {
        Self {
            p_object: 0.5,
            p_irregular: 0.4,
            p_regular: 0.1,
            p_combine_object_with_irregular: 0.5,
            ratio_min: 0.1,
            ratio_max: 0.75,
            dilation_min_px: 5,
            dilation_max_px: 20,
            max_rejections: 100,
        }
    }
}

impl MaskRecipe {
    /// Every violated constraint, as `(field, message)`.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (name, p) in [
            ("p_object", self.p_object),
            ("p_irregular", self.p_irregular),
            ("p_regular", self.p_regular),
            ("p_combine_object_with_irregular", self.p_combine_object_with_irregular),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push((name.to_string(), format!("probability {p} outside [0, 1]")));
            }
        }
        let total = self.p_object + self.p_irregular + self.p_regular;
        if (total - 1.0).abs() > 1e-9 {
            out.push(("p_object".to_string(), format!("p_object + p_irregular + p_regular = {total}, expected 1")));
        }
        if !(0.0 <= self.ratio_min && self.ratio_min < self.ratio_max && self.ratio_max <= 1.0) {
            out.push((
                "ratio_min".to_string(),
                format!("need 0 <= ratio_min < ratio_max <= 1, got [{}, {}]", self.ratio_min, self.ratio_max),
            ));
        }
        if self.dilation_min_px > self.dilation_max_px {
            out.push(("dilation_min_px".to_string(), "dilation_min_px > dilation_max_px".to_string()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some((f, m)) => Err(AsukaError::arg(format!("{f}: {m}"))),
        }
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(AsukaError::InvalidSize {
            height: h,
            width: w,
            reason: format!("both sides must be at least {MIN_SIDE}"),
        });
    }
    Ok(())
}

/// Fills every pixel within `radius` of segment `(y0,x0)-(y1,x1)`.
fn stamp_capsule(m: &mut Mask, (y0, x0): (f64, f64), (y1, x1): (f64, f64), radius: f64) {
    let (h, w) = (m.height as f64, m.width as f64);
    let rmin = (y0.min(y1) - radius).floor().max(0.0) as usize;
    let rmax = (y0.max(y1) + radius).ceil().min(h - 1.0).max(0.0) as usize;
    let cmin = (x0.min(x1) - radius).floor().max(0.0) as usize;
    let cmax = (x0.max(x1) + radius).ceil().min(w - 1.0).max(0.0) as usize;
    let (dy, dx) = (y1 - y0, x1 - x0);
    let len2 = dy * dy + dx * dx;
    let r2 = radius * radius;
    for r in rmin..=rmax {
        let py = r as f64 + 0.5;
        for c in cmin..=cmax {
            let px = c as f64 + 0.5;
            let t = if len2 > 0.0 { (((py - y0) * dy + (px - x0) * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ey, ex) = (py - (y0 + t * dy), px - (x0 + t * dx));
            if ey * ey + ex * ex <= r2 {
                m.data[r * m.width + c] = 1;
            }
        }
    }
}

fn fill_rect(m: &mut Mask, r0: usize, r1: usize, c0: usize, c1: usize) {
    for r in r0..r1.min(m.height) {
        for c in c0..c1.min(m.width) {
            m.data[r * m.width + c] = 1;
        }
    }
}

/// Random polyline strokes of varying thickness; `comod` adds rectangles.
pub fn gen_irregular_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, style: IrregularStyle) -> Result<Mask> {
    check_size(h, w)?;
    let side = h.min(w) as f64;
    loop {
        let mut m = Mask::zeros(h, w);
        let (strokes, width_range, step_frac) = match style {
            IrregularStyle::Brush => (rng.random_range(1..=6), (0.03, 0.14), 0.22),
            IrregularStyle::Comod => (rng.random_range(1..=4), (0.015, 0.06), 0.3),
        };
        for _ in 0..strokes {
            let vertices = rng.random_range(3..=9);
            let mut y = rng.random_range(0.0..h as f64);
            let mut x = rng.random_range(0.0..w as f64);
            let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
            let radius = 0.5 * side * rng.random_range(width_range.0..width_range.1);
            for _ in 0..vertices {
                angle += rng.random_range(-1.2..1.2);
                let len = side * rng.random_range(0.05..step_frac);
                let ny = (y + len * angle.sin()).clamp(0.0, h as f64 - 1.0);
                let nx = (x + len * angle.cos()).clamp(0.0, w as f64 - 1.0);
                stamp_capsule(&mut m, (y, x), (ny, nx), radius);
                (y, x) = (ny, nx);
            }
        }
        if style == IrregularStyle::Comod {
            for _ in 0..rng.random_range(0..=3) {
                let rh = rng.random_range(h / 8..=h / 2);
                let rw = rng.random_range(w / 8..=w / 2);
                let r0 = rng.random_range(0..=h - rh);
                let c0 = rng.random_range(0..=w - rw);
                fill_rect(&mut m, r0, r0 + rh, c0, c0 + rw);
            }
        }
        let n = m.count();
        if n > 0 && n < h * w {
            return Ok(m);
        }
    }
}

/// Axis-aligned rectangle covering rows `[r0, r1)` and cols `[c0, c1)`.
pub fn rect_mask(h: usize, w: usize, (r0, r1): (usize, usize), (c0, c1): (usize, usize)) -> Mask {
    let mut m = Mask::zeros(h, w);
    fill_rect(&mut m, r0, r1, c0, c1);
    m
}

/// A random rectangle or, with probability 0.5, its complement.
pub fn gen_regular_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Mask> {
    check_size(h, w)?;
    let rh = rng.random_range(h / 8..=h * 7 / 8);
    let rw = rng.random_range(w / 8..=w * 7 / 8);
    let r0 = rng.random_range(0..=h - rh);
    let c0 = rng.random_range(0..=w - rw);
    let rect = rect_mask(h, w, (r0, r0 + rh), (c0, c0 + rw));
    Ok(if rng.random_bool(0.5) { rect.complement() } else { rect })
}

/// Nearest-neighbour rescale of an object shape to `oh × ow` and placement
/// at `(top, left)` in an `h × w` frame (clipped at the border).
pub fn place_object(obj: &Mask, h: usize, w: usize, (oh, ow): (usize, usize), (top, left): (usize, usize)) -> Mask {
    let mut m = Mask::zeros(h, w);
    for r in 0..oh {
        let sr = r * obj.height / oh.max(1);
        for c in 0..ow {
            let sc = c * obj.width / ow.max(1);
            if obj.get(sr, sc) && top + r < h && left + c < w {
                m.set(top + r, left + c, true);
            }
        }
    }
    m
}

fn random_object(rng: &mut ChaCha8Rng, pool: &[Mask], h: usize, w: usize) -> Mask {
    let obj = pool.choose(rng).expect("non-empty pool");
    let scale = rng.random_range(0.35..0.95);
    let oh = ((h as f64 * scale).round() as usize).max(1);
    let ow = ((w as f64 * scale * rng.random_range(0.75..1.33)).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - oh.min(h));
    let left = rng.random_range(0..=w - ow);
    place_object(obj, h, w, (oh, ow), (top, left))
}

/// A drawn mask together with how it was built.
#[derive(Clone, Debug)]
pub struct MaskSample {
    pub mask: Mask,
    pub base: BaseType,
    /// Object base unioned with an irregular mask.
    pub combined: bool,
    /// The placed object shape, for object bases.
    pub object: Option<Mask>,
    /// True when ratio enforcement gave up and used the rectangle fallback.
    pub fallback: bool,
}

/// Draws the base type: recipe weights, or irregular/regular renormalized
/// when there are no object shapes.
pub fn draw_base(rng: &mut ChaCha8Rng, recipe: &MaskRecipe, have_objects: bool) -> BaseType {
    let (po, pi) = if have_objects {
        (recipe.p_object, recipe.p_irregular)
    } else {
        (0.0, recipe.p_irregular / (recipe.p_irregular + recipe.p_regular))
    };
    let u: f64 = rng.random();
    if u < po {
        BaseType::Object
    } else if u < po + pi {
        BaseType::Irregular
    } else {
        BaseType::Regular
    }
}

fn draw_shape(
    rng: &mut ChaCha8Rng,
    base: BaseType,
    recipe: &MaskRecipe,
    pool: &[Mask],
    h: usize,
    w: usize,
) -> Result<(Mask, bool, Option<Mask>)> {
    Ok(match base {
        BaseType::Object => {
            let obj = random_object(rng, pool, h, w);
            if rng.random_bool(recipe.p_combine_object_with_irregular) {
                let style = if rng.random_bool(0.5) { IrregularStyle::Brush } else { IrregularStyle::Comod };
                let irr = gen_irregular_mask(rng, h, w, style)?;
                (obj.union(&irr)?, true, Some(obj))
            } else {
                (obj.clone(), false, Some(obj))
            }
        }
        BaseType::Irregular => {
            let style = if rng.random_bool(0.5) { IrregularStyle::Brush } else { IrregularStyle::Comod };
            (gen_irregular_mask(rng, h, w, style)?, false, None)
        }
        BaseType::Regular => (gen_regular_mask(rng, h, w)?, false, None),
    })
}

/// Centered-random rectangle whose area ratio is as close as possible to `target`.
fn rect_with_ratio(rng: &mut ChaCha8Rng, h: usize, w: usize, target: f64) -> Mask {
    let area = target * (h * w) as f64;
    let aspect = rng.random_range(0.5..2.0f64);
    let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
    let r0 = rng.random_range(0..=h - rh);
    let c0 = rng.random_range(0..=w - rw);
    rect_mask(h, w, (r0, r0 + rh), (c0, c0 + rw))
}

/// Draws from the mixture. The base type is drawn once; shapes of that base
/// are resampled until the ratio lies in `[ratio_min, ratio_max]`, with a
/// rectangle fallback after `max_rejections` attempts.
pub fn sample_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, object_pool: &[Mask], recipe: &MaskRecipe) -> Result<MaskSample> {
    check_size(h, w)?;
    recipe.validate()?;
    let base = draw_base(rng, recipe, !object_pool.is_empty());
    for _ in 0..recipe.max_rejections.max(1) {
        let (mask, combined, object) = draw_shape(rng, base, recipe, object_pool, h, w)?;
        let ratio = mask.ratio();
        if ratio >= recipe.ratio_min && ratio <= recipe.ratio_max {
            return Ok(MaskSample { mask, base, combined, object, fallback: false });
        }
    }
    let target = rng.random_range(recipe.ratio_min..=recipe.ratio_max);
    let mask = rect_with_ratio(rng, h, w, target);
    Ok(MaskSample { mask, base, combined: false, object: None, fallback: true })
}

/// Morphological dilation by a `(2r+1)²` square. Separable: a horizontal then a
/// vertical running-window maximum.
pub fn dilate(mask: &Mask, radius_px: i64) -> Result<Mask> {
    if radius_px < 0 {
        return Err(AsukaError::arg(format!("dilation radius must be non-negative, got {radius_px}")));
    }
    let r = radius_px as usize;
    if r == 0 {
        return Ok(mask.clone());
    }
    let (h, w) = mask.dims();
    let mut horiz = Mask::zeros(h, w);
    let mut prefix = vec![0usize; w.max(h) + 1];
    for row in 0..h {
        for c in 0..w {
            prefix[c + 1] = prefix[c] + mask.data[row * w + c] as usize;
        }
        for c in 0..w {
            let lo = c.saturating_sub(r);
            let hi = (c + r + 1).min(w);
            horiz.data[row * w + c] = (prefix[hi] > prefix[lo]) as u8;
        }
    }
    let mut out = Mask::zeros(h, w);
    for col in 0..w {
        for rr in 0..h {
            prefix[rr + 1] = prefix[rr] + horiz.data[rr * w + col] as usize;
        }
        for rr in 0..h {
            let lo = rr.saturating_sub(r);
            let hi = (rr + r + 1).min(h);
            out.data[rr * w + col] = (prefix[hi] > prefix[lo]) as u8;
        }
    }
    Ok(out)
}

/// Erosion by a `(2r+1)²` square. Pixels outside the frame do not erode.
pub fn erode(mask: &Mask, radius_px: i64) -> Result<Mask> {
    Ok(dilate(&mask.complement(), radius_px)?.complement())
}

/// Nearest-neighbour downsampling: output `(r, c)` copies input
/// `(r·factor, c·factor)`. Produces staircase boundaries.
pub fn jagged_downsample(mask_hi: &Mask, factor: usize) -> Result<Mask> {
    if factor < 2 {
        return Err(AsukaError::arg(format!("jagged factor must be >= 2, got {factor}")));
    }
    let (h, w) = mask_hi.dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(AsukaError::arg(format!("{h}x{w} mask is not divisible by factor {factor}; pad first")));
    }
    let (oh, ow) = (h / factor, w / factor);
    Ok(Mask::from_fn(oh, ow, |r, c| mask_hi.get(r * factor, c * factor)))
}

/// Patch grid of booleans (row-major, `rows × cols`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl PatchMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![false; rows * cols] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_superset_of(&self, other: &PatchMask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(a, b)| *a || !*b)
    }
}

/// A patch is masked iff any of its pixels is masked.
pub fn patchify_mask(mask: &Mask, patch: usize) -> Result<PatchMask> {
    let (h, w) = mask.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(AsukaError::arg(format!("{h}x{w} mask is not divisible by patch {patch}")));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut pm = PatchMask::empty(rows, cols);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                pm.data[(r / patch) * cols + c / patch] = true;
            }
        }
    }
    Ok(pm)
}

/// Patchifies `mask` and adds uniformly chosen extra patches until exactly
/// `round(target_ratio · P)` patches are masked.
pub fn expand_to_patch_ratio(mask: &Mask, patch: usize, target_ratio: f64, rng: &mut ChaCha8Rng) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&target_ratio) {
        return Err(AsukaError::arg(format!("target ratio {target_ratio} outside [0, 1]")));
    }
    let mut pm = patchify_mask(mask, patch)?;
    let total = pm.data.len();
    let target = (target_ratio * total as f64).round() as usize;
    let have = pm.count();
    if have > target {
        return Err(AsukaError::RatioExceeded { ratio: pm.ratio(), target: target_ratio });
    }
    let free: Vec<usize> = (0..total).filter(|&i| !pm.data[i]).collect();
    for i in rand::seq::index::sample(rng, free.len(), target - have) {
        pm.data[free[i]] = true;
    }
    Ok(pm)
}

/// Synthetic object silhouettes (unions of ellipses) standing in for a
/// segmentation-derived shape pool.
pub fn synthetic_object_pool(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Vec<Mask> {
    (0..n)
        .map(|_| {
            let blobs = rng.random_range(1..=4);
            let params: Vec<(f64, f64, f64, f64)> = (0..blobs)
                .map(|_| {
                    (
                        rng.random_range(0.3..0.7) * side as f64,
                        rng.random_range(0.3..0.7) * side as f64,
                        rng.random_range(0.15..0.45) * side as f64,
                        rng.random_range(0.15..0.45) * side as f64,
                    )
                })
                .collect();
            Mask::from_fn(side, side, |r, c| {
                params.iter().any(|&(cy, cx, ry, rx)| {
                    let (dy, dx) = ((r as f64 + 0.5 - cy) / ry, (c as f64 + 0.5 - cx) / rx);
                    dy * dy + dx * dx <= 1.0
                })
            })
        })
        .collect()
}
