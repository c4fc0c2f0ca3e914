//! Photometric noise for the student input. Geometry is never changed, so labels stay valid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::shapes::gaussian_blur;
use crate::data::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotoConfig {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Fraction of the hue circle.
    pub hue: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for PhotoConfig {
    fn default() -> Self {
        Self {
            brightness: (0.7, 1.3),
            contrast: (0.7, 1.3),
            saturation: (0.7, 1.3),
            hue: (-0.1, 0.1),
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.0),
        }
    }
}

impl PhotoConfig {
    pub fn identity() -> Self {
        Self {
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            hue: (0.0, 0.0),
            blur_prob: 0.0,
            blur_sigma: (0.1, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(lo <= hi) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is not ordered")));
            }
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return Err(Error::Config(format!("blur probability {} outside [0, 1]", self.blur_prob)));
        }
        if self.brightness.0 < 0.0 || self.contrast.0 < 0.0 || self.saturation.0 < 0.0 || self.blur_sigma.0 <= 0.0 {
            return Err(Error::Config("photometric factors must be non-negative".into()));
        }
        Ok(())
    }
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
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
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation and hue jitter followed by an optional blur,
/// clamping to `[0, 1]` after every step.
pub fn photometric<R: Rng>(image: &Image, cfg: &PhotoConfig, rng: &mut R) -> Image {
    let brightness = draw(rng, cfg.brightness) as f32;
    let contrast = draw(rng, cfg.contrast) as f32;
    let saturation = draw(rng, cfg.saturation) as f32;
    let hue = draw(rng, cfg.hue) as f32;
    let blur = cfg.blur_prob > 0.0 && rng.gen::<f64>() < cfg.blur_prob;
    let sigma = if blur { draw(rng, cfg.blur_sigma) } else { 0.0 };

    let mut out = image.clone();
    if brightness != 1.0 {
        out.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let (h, w, _) = out.dim();
        let mut mean = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                mean += gray(out[[y, x, 0]], out[[y, x, 1]], out[[y, x, 2]]) as f64;
            }
        }
        let mean = (mean / (h * w) as f64) as f32;
        out.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    }
    if saturation != 1.0 || hue != 0.0 {
        for mut px in out.rows_mut() {
            let (mut r, mut g, mut b) = (px[0], px[1], px[2]);
            if saturation != 1.0 {
                let l = gray(r, g, b);
                r = ((r - l) * saturation + l).clamp(0.0, 1.0);
                g = ((g - l) * saturation + l).clamp(0.0, 1.0);
                b = ((b - l) * saturation + l).clamp(0.0, 1.0);
            }
            if hue != 0.0 {
                let (h, s, v) = rgb_to_hsv(r, g, b);
                (r, g, b) = hsv_to_rgb(h + hue, s, v);
            }
            px[0] = r.clamp(0.0, 1.0);
            px[1] = g.clamp(0.0, 1.0);
            px[2] = b.clamp(0.0, 1.0);
        }
    }
    if blur {
        let blurred = gaussian_blur(&out.mapv(f64::from), sigma);
        out = blurred.mapv(|v| (v as f32).clamp(0.0, 1.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Image {
        Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y * 8 + x) * 3 + c) as f32 / 192.0)
    }

    #[test]
    fn identity_config_is_identity() {
        let img = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(photometric(&img, &PhotoConfig::identity(), &mut rng), img);
    }

    #[test]
    fn brightness_clamps() {
        let img = Array3::from_elem((2, 2, 3), 0.9f32);
        let cfg = PhotoConfig {
            brightness: (1.3, 1.3),
            ..PhotoConfig::identity()
        };
        let out = photometric(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn seeded_and_bounded() {
        let img = ramp();
        let cfg = PhotoConfig::default();
        for seed in 0..20 {
            let a = photometric(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = photometric(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
            assert_eq!(a.dim(), img.dim());
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5f32, 0.9f32), (0.9, 0.1, 0.1), (0.3, 0.3, 0.3), (0.0, 1.0, 0.5)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_unordered_range() {
        let cfg = PhotoConfig {
            contrast: (1.2, 0.8),
            ..PhotoConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
