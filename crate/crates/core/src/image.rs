//! RGB images with `f64` channels in `[0, 1]` and patch re-indexing helpers.

use std::path::Path;
use std::rc::Rc;

use crate::error::{AsukaError, Result};
use crate::nn::Mat;

/// H×W×3 image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn clamped(&self) -> Image {
        self.map(|x| x.clamp(0.0, 1.0))
    }

    /// Pixels as an `(H·W) × 3` matrix.
    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.height * self.width, 3, self.data.clone())
    }

    pub fn from_mat(height: usize, width: usize, m: &Mat) -> Result<Image> {
        if m.len() != height * width * 3 {
            return Err(AsukaError::shape(format!("{}x{} matrix is not a {height}x{width} image", m.rows, m.cols)));
        }
        Ok(Image { height, width, data: m.data.clone() })
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_sq_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != height * width * 3 {
            return Err(AsukaError::shape("rgb8 buffer length does not match dimensions"));
        }
        Ok(Image { height, width, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ColorType::Rgb8)
            .map_err(|e| AsukaError::Image(format!("{}: {e}", path.display())))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| AsukaError::Image(e.to_string()))?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| AsukaError::Image(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb8();
        Image::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }
}

/// Index map sending an `(H·W) × C` pixel matrix to a
/// `(H/p · W/p) × (p·p·C)` patch matrix (patches row-major, pixels inside a
/// patch row-major, channels innermost).
pub fn patchify_map(height: usize, width: usize, channels: usize, patch: usize) -> Rc<Vec<Option<usize>>> {
    assert!(height % patch == 0 && width % patch == 0, "dims not divisible by patch");
    let (gr, gc) = (height / patch, width / patch);
    let mut map = Vec::with_capacity(height * width * channels);
    for pr in 0..gr {
        for pc in 0..gc {
            for dy in 0..patch {
                for dx in 0..patch {
                    let pix = (pr * patch + dy) * width + pc * patch + dx;
                    for ch in 0..channels {
                        map.push(Some(pix * channels + ch));
                    }
                }
            }
        }
    }
    Rc::new(map)
}

/// Inverse of [`patchify_map`].
pub fn unpatchify_map(height: usize, width: usize, channels: usize, patch: usize) -> Rc<Vec<Option<usize>>> {
    let fwd = patchify_map(height, width, channels, patch);
    let mut inv = vec![None; fwd.len()];
    for (dst, src) in fwd.iter().enumerate() {
        inv[src.expect("patchify map is total")] = Some(dst);
    }
    Rc::new(inv)
}

/// Applies an index map outside the autodiff tape.
pub fn apply_map(src: &Mat, rows: usize, cols: usize, map: &[Option<usize>]) -> Mat {
    Mat::from_vec(rows, cols, map.iter().map(|s| s.map_or(0.0, |i| src.data[i])).collect())
}
