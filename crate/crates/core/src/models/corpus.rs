//! Procedural toy images: smooth gradients, flat shapes and mild texture.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::rng::{stream, ChaCha8Rng};

/// Palette families loosely mirroring the four benchmark domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Indoor,
    Landscape,
    Building,
    Background,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Indoor, Domain::Landscape, Domain::Building, Domain::Background];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Indoor => "indoor",
            Domain::Landscape => "landscape",
            Domain::Building => "building",
            Domain::Background => "background",
        }
    }

    fn base_color(self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let j = |rng: &mut ChaCha8Rng, c: f64| (c + rng.random_range(-0.15..0.15f64)).clamp(0.0, 1.0);
        let c = match self {
            Domain::Indoor => [0.75, 0.62, 0.48],
            Domain::Landscape => [0.35, 0.6, 0.3],
            Domain::Building => [0.55, 0.55, 0.6],
            Domain::Background => [0.5, 0.7, 0.9],
        };
        [j(rng, c[0]), j(rng, c[1]), j(rng, c[2])]
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// One toy image of `side × side` pixels.
pub fn toy_image(rng: &mut ChaCha8Rng, side: usize, domain: Domain) -> Image {
    let c0 = domain.base_color(rng);
    let c1 = random_color(rng);
    let mix = rng.random_range(0.2..0.6);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let n_shapes = rng.random_range(1..=3);
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            (
                rng.random_bool(0.5),
                rng.random_range(0.15..0.85),
                rng.random_range(0.15..0.85),
                rng.random_range(0.08..0.3),
                rng.random_range(0.08..0.3),
                random_color(rng),
            )
        })
        .collect();
    let freq = rng.random_range(2.0..6.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let s = side as f64;
    Image::from_fn(side, side, |r, c| {
        let (y, x) = ((r as f64 + 0.5) / s, (c as f64 + 0.5) / s);
        let u = (((y - 0.5) * dy + (x - 0.5) * dx) + 0.7).clamp(0.0, 1.4) / 1.4 * mix;
        let mut px = [0.0; 3];
        for k in 0..3 {
            px[k] = c0[k] * (1.0 - u) + c1[k] * u;
        }
        for &(round, cy, cx, ry, rx, col) in &shapes {
            let (ey, ex) = ((y - cy) / ry, (x - cx) / rx);
            let inside = if round { ey * ey + ex * ex <= 1.0 } else { ey.abs() <= 1.0 && ex.abs() <= 1.0 };
            if inside {
                px = col;
            }
        }
        let tex = 0.03 * ((freq * std::f64::consts::TAU * (x + 0.5 * y)) + phase).sin();
        [(px[0] + tex).clamp(0.0, 1.0), (px[1] + tex).clamp(0.0, 1.0), (px[2] + tex).clamp(0.0, 1.0)]
    })
}

/// Item `index` of the toy corpus rooted at `seed`. Domains cycle with the index.
pub fn toy_item(seed: u64, index: usize, side: usize) -> (Image, Domain) {
    let domain = Domain::ALL[index % 4];
    (toy_image(&mut stream(seed, index as u64), side, domain), domain)
}

pub fn toy_corpus(seed: u64, n: usize, side: usize) -> Vec<Image> {
    (0..n).map(|i| toy_item(seed, i, side).0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn items_are_reproducible_and_in_range() {
        let (a, _) = toy_item(3, 17, 64);
        let (b, _) = toy_item(3, 17, 64);
        assert_eq!(a, b);
        assert_ne!(a, toy_item(3, 18, 64).0);
        assert!(a.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
