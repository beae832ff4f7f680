//! Boundary gradient metric, judge composites and verdict parsing, and the
//! scorer plugin registry.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

use crate::error::{AsukaError, Result};
use crate::image::Image;
use crate::mask::{dilate, erode, Mask};

pub const DEFAULT_BAND_WIDTH: usize = 2;

/// `dilate(mask, w) AND NOT erode(mask, w)`.
pub fn boundary_band(mask: &Mask, width_px: usize) -> Result<Mask> {
    let w = width_px as i64;
    dilate(mask, w)?.difference(&erode(mask, w)?)
}

/// G@e with the default 2 px band.
pub fn gradient_at_edge(pred: &Image, gt: &Image, mask: &Mask) -> Result<f64> {
    gradient_at_edge_with(pred, gt, mask, DEFAULT_BAND_WIDTH)
}

/// Mean over band pixels and channels of `|Δ∂x| + |Δ∂y|`, forward differences
/// on the [0, 255] scale. A difference is used only when both of its pixels
/// lie in the band.
pub fn gradient_at_edge_with(pred: &Image, gt: &Image, mask: &Mask, band_width: usize) -> Result<f64> {
    if pred.dims() != gt.dims() || pred.dims() != mask.dims() {
        return Err(AsukaError::shape(format!(
            "prediction {:?}, ground truth {:?}, mask {:?}",
            pred.dims(),
            gt.dims(),
            mask.dims()
        )));
    }
    let band = boundary_band(mask, band_width)?;
    let n = band.count();
    if n == 0 {
        return Err(AsukaError::UndefinedMetric("mask has no boundary (all zeros or all ones)".into()));
    }
    let (h, w) = mask.dims();
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            if !band.get(r, c) {
                continue;
            }
            let (p0, g0) = (pred.pixel(r, c), gt.pixel(r, c));
            for (nr, nc) in [(r, c + 1), (r + 1, c)] {
                if nr >= h || nc >= w || !band.get(nr, nc) {
                    continue;
                }
                let (p1, g1) = (pred.pixel(nr, nc), gt.pixel(nr, nc));
                for ch in 0..3 {
                    total += (255.0 * ((p1[ch] - p0[ch]) - (g1[ch] - g0[ch]))).abs();
                }
            }
        }
    }
    Ok(total / (3 * n) as f64)
}

/// Side-by-side panel for the hallucination judge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeStyle {
    pub alpha: f64,
    pub gap_px: usize,
    pub overlay: [f64; 3],
}

impl Default for CompositeStyle {
    fn default() -> Self {
        Self { alpha: 0.5, gap_px: 16, overlay: [0.5, 0.5, 0.5] }
    }
}

/// Left: input with the overlay blended at `alpha` inside the mask. Right:
/// the result. White gap between them.
pub fn make_judge_composite(masked_input: &Image, mask: &Mask, result: &Image, style: &CompositeStyle) -> Result<Image> {
    if masked_input.dims() != result.dims() || masked_input.dims() != mask.dims() {
        return Err(AsukaError::arg(format!(
            "panel sizes differ: input {:?}, mask {:?}, result {:?}",
            masked_input.dims(),
            mask.dims(),
            result.dims()
        )));
    }
    if !(0.0..=1.0).contains(&style.alpha) {
        return Err(AsukaError::arg(format!("overlay alpha {} outside [0, 1]", style.alpha)));
    }
    let (h, w) = masked_input.dims();
    let a = style.alpha;
    Ok(Image::from_fn(h, 2 * w + style.gap_px, |r, c| {
        if c < w {
            let p = masked_input.pixel(r, c);
            if mask.get(r, c) {
                std::array::from_fn(|k| (1.0 - a) * p[k] + a * style.overlay[k])
            } else {
                p
            }
        } else if c < w + style.gap_px {
            [1.0; 3]
        } else {
            result.pixel(r, c - w - style.gap_px)
        }
    }))
}

pub const JUDGE_PROMPT: &str = "The image has two panels. The left panel shows the masked input: the \
semi-transparent gray region is the area to be filled. The right panel shows the inpainted result. \
Decide whether the filled region contains objects that are not supported by the surrounding context \
(hallucinated objects). Think briefly, then end with a final line of exactly `ANSWER: YES` if \
hallucinated objects appear, or `ANSWER: NO` otherwise.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub hallucination: bool,
    pub raw_response: String,
    pub model_id: String,
}

/// Parses the last `ANSWER: YES|NO` line; a reply that is just `yes` or `no`
/// (any case, trailing punctuation ignored) is also accepted.
pub fn parse_verdict(raw: &str) -> Result<bool> {
    for line in raw.lines().rev() {
        let line = line.trim().trim_matches(|c| c == '*' || c == '`').trim();
        let upper = line.to_ascii_uppercase();
        if let Some(rest) = upper.strip_prefix("ANSWER:") {
            return match rest.trim().trim_end_matches(['.', '!']) {
                "YES" => Ok(true),
                "NO" => Ok(false),
                other => Err(AsukaError::Protocol {
                    message: format!("answer token `{other}` is neither YES nor NO"),
                    raw_response: raw.to_string(),
                }),
            };
        }
    }
    match raw.trim().trim_end_matches(['.', '!']).to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(AsukaError::Protocol { message: "no verdict token in reply".into(), raw_response: raw.to_string() }),
    }
}

/// Metrics computed by third-party scorers; reported as unavailable when no
/// registered scorer provides them.
pub const EXTERNAL_METRICS: [&str; 4] = ["lpips", "fid", "u-ids", "p-ids"];

pub const GAE_METRIC: &str = "g@e";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "value")]
pub enum ScoreValue {
    Value(f64),
    Unavailable,
}

impl ScoreValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(*v),
            Self::Unavailable => None,
        }
    }
}

/// An external image-set scorer.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, pred: &[Image], gt: &[Image]) -> Result<BTreeMap<String, f64>>;
}

#[derive(Default)]
pub struct ScorerRegistry {
    scorers: Vec<Box<dyn Scorer>>,
}

impl ScorerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, scorer: Box<dyn Scorer>) -> Result<()> {
        if self.scorers.iter().any(|s| s.name() == scorer.name()) {
            return Err(AsukaError::Config(format!("scorer `{}` registered twice", scorer.name())));
        }
        self.scorers.push(scorer);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.scorers.iter().map(|s| s.name()).collect()
    }
}

/// Built-in G@e (mean over items) plus every registered scorer's output.
/// External metrics nobody provides are marked unavailable.
pub fn score_with_plugins(
    registry: &ScorerRegistry,
    pred: &[Image],
    gt: &[Image],
    masks: &[Mask],
) -> Result<BTreeMap<String, ScoreValue>> {
    if pred.len() != gt.len() || pred.len() != masks.len() || pred.is_empty() {
        return Err(AsukaError::arg(format!(
            "need equal non-empty sets, got {} predictions, {} targets, {} masks",
            pred.len(),
            gt.len(),
            masks.len()
        )));
    }
    let mut out = BTreeMap::new();
    let mut gae = 0.0;
    for ((p, g), m) in pred.iter().zip(gt).zip(masks) {
        gae += gradient_at_edge(p, g, m)?;
    }
    out.insert(GAE_METRIC.to_string(), ScoreValue::Value(gae / pred.len() as f64));
    for s in &registry.scorers {
        let name = s.name().to_string();
        let scores = catch_unwind(AssertUnwindSafe(|| s.score(pred, gt)))
            .map_err(|panic| AsukaError::Plugin { name: name.clone(), message: panic_message(&panic) })?
            .map_err(|e| AsukaError::Plugin { name: name.clone(), message: e.to_string() })?;
        for (k, v) in scores {
            out.insert(k, ScoreValue::Value(v));
        }
    }
    for m in EXTERNAL_METRICS {
        out.entry(m.to_string()).or_insert(ScoreValue::Unavailable);
    }
    Ok(out)
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "scorer panicked".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::rect_mask;
    use crate::rng::seeded;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    /// Direct-definition oracle: band by explicit window scans, differences by
    /// explicit pair enumeration.
    fn oracle(pred: &Image, gt: &Image, mask: &Mask, w: usize) -> f64 {
        let (h, wd) = mask.dims();
        let win = |r: usize, c: usize, any: bool| {
            let mut hit = !any;
            for rr in r.saturating_sub(w)..=(r + w).min(h - 1) {
                for cc in c.saturating_sub(w)..=(c + w).min(wd - 1) {
                    if any && mask.get(rr, cc) {
                        hit = true;
                    }
                    if !any && !mask.get(rr, cc) {
                        hit = false;
                    }
                }
            }
            hit
        };
        let band: Vec<Vec<bool>> = (0..h).map(|r| (0..wd).map(|c| win(r, c, true) && !win(r, c, false)).collect()).collect();
        let mut sum = 0.0;
        let mut n = 0;
        for r in 0..h {
            for c in 0..wd {
                if !band[r][c] {
                    continue;
                }
                n += 1;
                for ch in 0..3 {
                    if c + 1 < wd && band[r][c + 1] {
                        let dp = pred.pixel(r, c + 1)[ch] * 255.0 - pred.pixel(r, c)[ch] * 255.0;
                        let dg = gt.pixel(r, c + 1)[ch] * 255.0 - gt.pixel(r, c)[ch] * 255.0;
                        sum += (dp - dg).abs();
                    }
                    if r + 1 < h && band[r + 1][c] {
                        let dp = pred.pixel(r + 1, c)[ch] * 255.0 - pred.pixel(r, c)[ch] * 255.0;
                        let dg = gt.pixel(r + 1, c)[ch] * 255.0 - gt.pixel(r, c)[ch] * 255.0;
                        sum += (dp - dg).abs();
                    }
                }
            }
        }
        sum / (3 * n) as f64
    }

    fn random_image(rng: &mut crate::rng::ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn hand_computed_four_by_four() {
        let gt = Image::from_fn(4, 4, |r, c| [0.1 * r as f64, 0.05 * c as f64, 0.3]);
        let mask = Mask::from_fn(4, 4, |_, c| c < 2);
        let pred = Image::from_fn(4, 4, |r, c| {
            let p = gt.pixel(r, c);
            if c < 2 { p.map(|v| v + 10.0 / 255.0) } else { p }
        });
        // Band width 2 covers all 16 pixels; only the 4 horizontal pairs
        // crossing column 1→2 differ, by 10 in each of 3 channels: 120 / 48.
        let v2 = gradient_at_edge(&pred, &gt, &mask).unwrap();
        assert!((v2 - 2.5).abs() < 1e-12, "{v2}");
        // Band width 1 is columns 1 and 2 (8 pixels): 120 / 24.
        let v1 = gradient_at_edge_with(&pred, &gt, &mask, 1).unwrap();
        assert!((v1 - 5.0).abs() < 1e-12, "{v1}");
    }

    #[test]
    fn identical_images_score_zero_and_degenerate_masks_fail() {
        let mut rng = seeded(1);
        let img = random_image(&mut rng, 16, 16);
        let m = rect_mask(16, 16, (4, 12), (4, 12));
        assert_eq!(gradient_at_edge(&img, &img, &m).unwrap(), 0.0);
        for bad in [Mask::zeros(16, 16), Mask::ones(16, 16)] {
            assert!(matches!(gradient_at_edge(&img, &img, &bad), Err(AsukaError::UndefinedMetric(_))));
        }
        assert!(gradient_at_edge(&img, &random_image(&mut rng, 8, 8), &m).is_err());
    }

    #[test]
    fn deep_interior_changes_do_not_matter() {
        let mut rng = seeded(2);
        let gt = random_image(&mut rng, 32, 32);
        let pred = random_image(&mut rng, 32, 32);
        let m = rect_mask(32, 32, (4, 28), (4, 28));
        let band = boundary_band(&m, 2).unwrap();
        let before = gradient_at_edge(&pred, &gt, &m).unwrap();
        let mut changed = pred.clone();
        for r in 0..32 {
            for c in 0..32 {
                if !band.get(r, c) {
                    changed.set_pixel(r, c, [rng.random(), rng.random(), rng.random()]);
                }
            }
        }
        assert_eq!(gradient_at_edge(&changed, &gt, &m).unwrap(), before);
    }

    proptest! {
        #[test]
        fn matches_direct_oracle_and_is_symmetric(seed in 0u64..300, w in 1usize..4) {
            let mut rng = seeded(seed);
            let (h, wd) = (rng.random_range(6..20), rng.random_range(6..20));
            let mask = Mask::from_fn(h, wd, |r, c| (r * 7 + c * 3 + seed as usize) % 5 < 2);
            let mask = if mask.count() == 0 || mask.count() == h * wd { rect_mask(h, wd, (1, 3), (1, 3)) } else { mask };
            let a = random_image(&mut rng, h, wd);
            let b = random_image(&mut rng, h, wd);
            match gradient_at_edge_with(&a, &b, &mask, w) {
                Ok(v) => {
                    prop_assert!(v >= 0.0);
                    prop_assert!((v - oracle(&a, &b, &mask, w)).abs() < 1e-9);
                    prop_assert_eq!(v, gradient_at_edge_with(&b, &a, &mask, w).unwrap());
                }
                Err(e) => prop_assert!(matches!(e, AsukaError::UndefinedMetric(_))),
            }
        }

        #[test]
        fn band_excludes_the_deep_interior(seed in 0u64..200, w in 1usize..4) {
            let mut rng = seeded(seed);
            let m = Mask::from_vec(24, 24, (0..576).map(|_| rng.random_bool(0.5) as u8).collect()).unwrap();
            let band = boundary_band(&m, w).unwrap();
            let interior = erode(&m, w as i64).unwrap();
            prop_assert!(band.intersect(&interior).unwrap().count() == 0);
            prop_assert!(band.is_subset_of(&dilate(&m, w as i64).unwrap()));
        }
    }

    #[test]
    fn composite_layout() {
        let mut rng = seeded(3);
        let input = random_image(&mut rng, 8, 8);
        let result = random_image(&mut rng, 8, 8);
        let m = rect_mask(8, 8, (0, 4), (0, 8));
        let style = CompositeStyle { alpha: 0.0, ..CompositeStyle::default() };
        let out = make_judge_composite(&input, &m, &result, &style).unwrap();
        assert_eq!(out.dims(), (8, 8 + 16 + 8));
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(out.pixel(r, c), input.pixel(r, c));
                assert_eq!(out.pixel(r, c + 24), result.pixel(r, c));
            }
            assert_eq!(out.pixel(r, 10), [1.0; 3]);
        }
        let opaque = CompositeStyle { alpha: 1.0, ..CompositeStyle::default() };
        let out = make_judge_composite(&input, &Mask::ones(8, 8), &result, &opaque).unwrap();
        assert_eq!(out.pixel(3, 3), [0.5; 3]);
        let big = make_judge_composite(&Image::new(4, 512), &Mask::zeros(4, 512), &Image::new(4, 512), &CompositeStyle::default()).unwrap();
        assert_eq!(big.width, 1040);
        assert!(make_judge_composite(&input, &m, &random_image(&mut rng, 8, 9), &style).is_err());
        let half = make_judge_composite(&input, &m, &result, &CompositeStyle::default()).unwrap();
        assert_eq!(half, make_judge_composite(&input, &m, &result, &CompositeStyle::default()).unwrap());
        assert_eq!(half.pixel(1, 1), input.pixel(1, 1).map(|v| 0.5 * v + 0.25));
    }

    #[test]
    fn verdict_parsing() {
        assert!(parse_verdict("thinking...\nANSWER: YES").unwrap());
        assert!(!parse_verdict("ANSWER: YES\nwait, no.\n**ANSWER: NO**").unwrap());
        assert!(parse_verdict("yes").unwrap());
        assert!(!parse_verdict(" No. ").unwrap());
        for bad in ["The sky is blue.", "ANSWER: maybe", ""] {
            match parse_verdict(bad) {
                Err(AsukaError::Protocol { raw_response, .. }) => assert_eq!(raw_response, bad),
                other => panic!("{other:?}"),
            }
        }
    }

    struct Constant;
    impl Scorer for Constant {
        fn name(&self) -> &str {
            "constant"
        }
        fn score(&self, _: &[Image], _: &[Image]) -> Result<BTreeMap<String, f64>> {
            Ok(BTreeMap::from([("test".to_string(), 1.0)]))
        }
    }

    struct Crashing;
    impl Scorer for Crashing {
        fn name(&self) -> &str {
            "crashing"
        }
        fn score(&self, _: &[Image], _: &[Image]) -> Result<BTreeMap<String, f64>> {
            panic!("model weights missing")
        }
    }

    #[test]
    fn plugin_registry() {
        let mut rng = seeded(4);
        let pred = vec![random_image(&mut rng, 8, 8)];
        let gt = vec![random_image(&mut rng, 8, 8)];
        let masks = vec![rect_mask(8, 8, (2, 6), (2, 6))];
        let empty = score_with_plugins(&ScorerRegistry::new(), &pred, &gt, &masks).unwrap();
        for m in EXTERNAL_METRICS {
            assert_eq!(empty[m], ScoreValue::Unavailable);
        }
        assert!(empty[GAE_METRIC].value().is_some());
        let mut reg = ScorerRegistry::new();
        reg.register(Box::new(Constant)).unwrap();
        assert!(reg.register(Box::new(Constant)).is_err());
        let scored = score_with_plugins(&reg, &pred, &gt, &masks).unwrap();
        assert_eq!(scored["test"], ScoreValue::Value(1.0));
        assert!(scored.contains_key(GAE_METRIC));
        reg.register(Box::new(Crashing)).unwrap();
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let err = score_with_plugins(&reg, &pred, &gt, &masks);
        std::panic::set_hook(prev);
        match err {
            Err(AsukaError::Plugin { name, message }) => {
                assert_eq!(name, "crashing");
                assert!(message.contains("weights"));
            }
            other => panic!("{other:?}"),
        }
    }
}
