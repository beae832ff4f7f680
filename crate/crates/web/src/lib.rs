//! Browser demos over `asuka-core`: mask sampling with dilation and jagged
//! downsampling, noise-schedule curves, and G@e on a color-shifted fill.

use asuka_core::align::PriorSchedule;
use asuka_core::mask::{dilate, jagged_downsample, rect_mask, sample_mask, synthetic_object_pool, Mask, MaskRecipe};
use asuka_core::metrics::{boundary_band, gradient_at_edge_with};
use asuka_core::models::corpus::toy_item;
use asuka_core::rng::seeded;
use asuka_core::schedule::NoiseSchedule;
use asuka_core::Image;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// An RGBA pixel buffer ready for `ImageData`.
#[wasm_bindgen]
#[derive(Clone)]
pub struct Panel {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Panel {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Panel {
    fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut rgba = Vec::with_capacity(height * width * 4);
        for r in 0..height {
            for c in 0..width {
                rgba.extend(f(r, c));
                rgba.push(255);
            }
        }
        Self { width, height, rgba }
    }

    fn mask(m: &Mask, on: [u8; 3]) -> Self {
        let (h, w) = m.dims();
        Self::from_fn(h, w, |r, c| if m.get(r, c) { on } else { [24, 24, 28] })
    }

    fn image(img: &Image) -> Self {
        let px = img.to_rgb8();
        Self::from_fn(img.height, img.width, |r, c| {
            let i = (r * img.width + c) * 3;
            [px[i], px[i + 1], px[i + 2]]
        })
    }
}

#[wasm_bindgen]
pub struct MaskDemo {
    base: String,
    combined: bool,
    fallback: bool,
    ratio: f64,
    dilated_ratio: f64,
    original: Panel,
    dilated: Panel,
    jagged: Panel,
}

#[wasm_bindgen]
impl MaskDemo {
    #[wasm_bindgen(getter)]
    pub fn base(&self) -> String {
        self.base.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn combined(&self) -> bool {
        self.combined
    }

    #[wasm_bindgen(getter)]
    pub fn fallback(&self) -> bool {
        self.fallback
    }

    #[wasm_bindgen(getter)]
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    #[wasm_bindgen(getter)]
    pub fn dilated_ratio(&self) -> f64 {
        self.dilated_ratio
    }

    pub fn original(&self) -> Panel {
        self.original.clone()
    }

    pub fn dilated(&self) -> Panel {
        self.dilated.clone()
    }

    /// The low-resolution mask, shown at its own size.
    pub fn jagged(&self) -> Panel {
        self.jagged.clone()
    }
}

/// One draw from the default mixture on a `side × side` frame, dilated by
/// `radius` pixels and downsampled by `factor` with nearest-neighbour picks.
#[wasm_bindgen]
pub fn mask_demo(seed: u64, side: usize, radius: u32, factor: usize) -> Result<MaskDemo, JsError> {
    if factor == 0 || side % factor != 0 {
        return Err(JsError::new(&format!("side {side} is not a multiple of factor {factor}")));
    }
    let mut rng = seeded(seed);
    let pool = synthetic_object_pool(&mut rng, 16, side / 2);
    let s = sample_mask(&mut rng, side, side, &pool, &MaskRecipe::default()).map_err(err)?;
    let grown = dilate(&s.mask, radius as i64).map_err(err)?;
    let low = jagged_downsample(&grown, factor).map_err(err)?;
    Ok(MaskDemo {
        base: s.base.as_str().to_string(),
        combined: s.combined,
        fallback: s.fallback,
        ratio: s.mask.ratio(),
        dilated_ratio: grown.ratio(),
        original: Panel::mask(&s.mask, [240, 240, 240]),
        dilated: Panel::from_fn(side, side, |r, c| match (s.mask.get(r, c), grown.get(r, c)) {
            (true, _) => [240, 240, 240],
            (false, true) => [230, 120, 60],
            _ => [24, 24, 28],
        }),
        jagged: Panel::mask(&low, [120, 190, 240]),
    })
}

/// `[a(0), b(0), a(1), b(1), ...]` for `family` = `diffusion` or `rectified-flow`.
#[wasm_bindgen]
pub fn schedule_curves(family: &str, steps: usize) -> Result<Vec<f64>, JsError> {
    if steps == 0 {
        return Err(JsError::new("steps must be positive"));
    }
    let s = match family {
        "diffusion" => NoiseSchedule::diffusion(steps),
        "rectified-flow" => NoiseSchedule::rectified_flow(steps),
        other => return Err(JsError::new(&format!("unknown schedule family `{other}`"))),
    };
    let mut out = Vec::with_capacity(2 * steps);
    for t in 0..steps {
        let (a, b) = s.ab_coeffs(t).map_err(err)?;
        out.extend([a, b]);
    }
    Ok(out)
}

/// Probability of the reconstructed prior at steps `0..=max_step`.
#[wasm_bindgen]
pub fn p_schedule(p0: f64, p_final: f64, decay_steps: usize, max_step: usize) -> Vec<f64> {
    let s = PriorSchedule { p0, p_final, decay_steps };
    (0..=max_step).map(|k| s.p(k)).collect()
}

#[wasm_bindgen]
pub struct ShiftDemo {
    gae: f64,
    band_pixels: usize,
    truth: Panel,
    shifted: Panel,
    overlay: Panel,
}

#[wasm_bindgen]
impl ShiftDemo {
    /// G@e of the shifted fill against the original.
    #[wasm_bindgen(getter)]
    pub fn gae(&self) -> f64 {
        self.gae
    }

    #[wasm_bindgen(getter)]
    pub fn band_pixels(&self) -> usize {
        self.band_pixels
    }

    pub fn truth(&self) -> Panel {
        self.truth.clone()
    }

    pub fn shifted(&self) -> Panel {
        self.shifted.clone()
    }

    /// Shifted image with the boundary band tinted.
    pub fn overlay(&self) -> Panel {
        self.overlay.clone()
    }
}

/// A toy image whose masked rectangle is tinted by `shift` (added to red,
/// half to green, subtracted from blue), scored with G@e at `band_width`.
#[wasm_bindgen]
pub fn color_shift_demo(seed: u64, shift: f64, band_width: usize) -> Result<ShiftDemo, JsError> {
    let side = 64;
    let (truth, _) = toy_item(seed, 0, side);
    let mask = rect_mask(side, side, (16, 44), (12, 48));
    let tint = [shift, 0.5 * shift, -shift];
    let shifted = Image::from_fn(side, side, |r, c| {
        let p = truth.pixel(r, c);
        if mask.get(r, c) { std::array::from_fn(|k| (p[k] + tint[k]).clamp(0.0, 1.0)) } else { p }
    });
    let band = boundary_band(&mask, band_width).map_err(err)?;
    let gae = gradient_at_edge_with(&shifted, &truth, &mask, band_width).map_err(err)?;
    let shown = Panel::image(&shifted);
    let overlay = Panel::from_fn(side, side, |r, c| {
        let i = (r * side + c) * 4;
        let px = [shown.rgba[i], shown.rgba[i + 1], shown.rgba[i + 2]];
        if band.get(r, c) { px.map(|v| ((v as u16 + 255 * 2) / 3) as u8) } else { px }
    });
    Ok(ShiftDemo { gae, band_pixels: band.count(), truth: Panel::image(&truth), shifted: shown, overlay })
}
