//! ShiftShapes: seeded synthetic segmentation scenes with a controllable appearance shift.
//!
//! Geometry (which shapes, where) and appearance (colours, texture, lighting,
//! noise, blur) are drawn from independent random streams, so two domains
//! generated with the same seed share label maps exactly.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataItem, Dataset, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Bar,
    Diamond,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 7] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Bar,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    /// Shape drawn for foreground class `class` (1-based).
    pub fn for_class(class: usize) -> ShapeKind {
        Self::ALL[(class - 1) % Self::ALL.len()]
    }
}

/// One placed shape; `half` is the half-extent of its bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub class: u8,
    pub kind: ShapeKind,
    pub center_y: f64,
    pub center_x: f64,
    pub half: f64,
}

impl ShapeInstance {
    /// Point-in-shape test at continuous coordinates.
    pub fn contains(&self, py: f64, px: f64) -> bool {
        let dy = py - self.center_y;
        let dx = px - self.center_x;
        let a = self.half;
        match self.kind {
            ShapeKind::Circle => dy * dy + dx * dx <= a * a,
            ShapeKind::Square => dy.abs() <= a * 0.8 && dx.abs() <= a * 0.8,
            ShapeKind::Triangle => {
                // apex up, base at dy = a
                if dy > a || dy < -a {
                    return false;
                }
                let t = (dy + a) / (2.0 * a);
                dx.abs() <= t * a
            }
            ShapeKind::Bar => dy.abs() <= a * 0.35 && dx.abs() <= a,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= a,
            ShapeKind::Cross => {
                let t = a * 0.33;
                (dy.abs() <= t && dx.abs() <= a) || (dx.abs() <= t && dy.abs() <= a)
            }
            ShapeKind::Ring => {
                let r2 = dy * dy + dx * dx;
                r2 <= a * a && r2 >= (0.55 * a) * (0.55 * a)
            }
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.center_y - self.half,
            self.center_x - self.half,
            self.center_y + self.half,
            self.center_x + self.half,
        )
    }

    fn overlaps(&self, other: &ShapeInstance, margin: f64) -> bool {
        let (a0, b0, a1, b1) = self.bbox();
        let (c0, d0, c1, d1) = other.bbox();
        !(a1 + margin < c0 || c1 + margin < a0 || b1 + margin < d0 || d1 + margin < b0)
    }
}

/// Scene layout distribution, shared between domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometrySpec {
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Bounding-box half-extent range, as a fraction of the image size.
    pub half_range: (f64, f64),
    /// Relative frequency of each foreground class; cycled if shorter than `C − 1`.
    pub class_weights: Vec<f64>,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            min_shapes: 1,
            max_shapes: 4,
            half_range: (0.09, 0.19),
            class_weights: vec![1.0, 1.0, 0.8, 0.6, 0.45],
        }
    }
}

/// Appearance of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSpec {
    /// Base RGB colour per class; index 0 is the background. Cycled if shorter than `C`.
    pub palette: Vec<[f64; 3]>,
    /// Uniform per-instance colour jitter, per channel.
    pub color_jitter: f64,
    pub texture_frequency: f64,
    pub texture_amplitude: f64,
    pub gain: f64,
    pub bias: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::source()
    }
}

impl DomainSpec {
    /// Clean, saturated rendering used as the labelled source domain.
    pub fn source() -> Self {
        Self {
            palette: vec![
                [0.45, 0.45, 0.45],
                [0.85, 0.20, 0.20],
                [0.20, 0.75, 0.25],
                [0.20, 0.35, 0.85],
                [0.85, 0.80, 0.20],
                [0.75, 0.25, 0.80],
                [0.20, 0.80, 0.80],
                [0.95, 0.55, 0.15],
            ],
            color_jitter: 0.06,
            texture_frequency: 3.0,
            texture_amplitude: 0.08,
            gain: 1.0,
            bias: 0.0,
            noise_sigma: 0.03,
            blur_sigma: 0.0,
        }
    }

    /// Shifted rendering: hue-drifted palette, darker low-contrast lighting,
    /// stronger texture, sensor noise and blur.
    pub fn target() -> Self {
        Self {
            palette: vec![
                [0.42, 0.47, 0.40],
                [0.70, 0.38, 0.20],
                [0.38, 0.68, 0.32],
                [0.36, 0.38, 0.72],
                [0.66, 0.75, 0.34],
                [0.66, 0.32, 0.60],
                [0.30, 0.62, 0.70],
                [0.80, 0.60, 0.30],
            ],
            color_jitter: 0.08,
            texture_frequency: 5.0,
            texture_amplitude: 0.12,
            gain: 0.75,
            bias: 0.08,
            noise_sigma: 0.07,
            blur_sigma: 0.7,
        }
    }

    /// Linear blend of every appearance parameter; `t = 0` is `self`, `t = 1` is `other`.
    ///
    /// Palettes are blended entry by entry up to the shorter of the two.
    pub fn blend(&self, other: &Self, t: f64) -> Self {
        let mix = |a: f64, b: f64| a + t * (b - a);
        Self {
            palette: self
                .palette
                .iter()
                .zip(&other.palette)
                .map(|(a, b)| [mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2])])
                .collect(),
            color_jitter: mix(self.color_jitter, other.color_jitter),
            texture_frequency: mix(self.texture_frequency, other.texture_frequency),
            texture_amplitude: mix(self.texture_amplitude, other.texture_amplitude),
            gain: mix(self.gain, other.gain),
            bias: mix(self.bias, other.bias),
            noise_sigma: mix(self.noise_sigma, other.noise_sigma),
            blur_sigma: mix(self.blur_sigma, other.blur_sigma),
        }
    }

    /// No texture, noise, blur or jitter: every pixel is exactly its class colour.
    pub fn flat() -> Self {
        Self {
            color_jitter: 0.0,
            texture_amplitude: 0.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            ..Self::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.is_empty() {
            return Err(Error::Config("domain palette is empty".into()));
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("palette colours must lie in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 || self.blur_sigma < 0.0 || self.color_jitter < 0.0 {
            return Err(Error::Config("noise, blur and jitter must be non-negative".into()));
        }
        Ok(())
    }

    fn color(&self, class: usize) -> [f64; 3] {
        self.palette[class % self.palette.len()]
    }
}

/// Samples the layout of one scene.
fn sample_layout(rng: &mut ChaCha8Rng, geometry: &GeometrySpec, size: usize, num_classes: usize, forced: Option<u8>) -> Vec<ShapeInstance> {
    let fg = num_classes - 1;
    let weights: Vec<f64> = (0..fg)
        .map(|i| geometry.class_weights.get(i % geometry.class_weights.len().max(1)).copied().unwrap_or(1.0))
        .collect();
    let total: f64 = weights.iter().sum();
    let count = rng.gen_range(geometry.min_shapes..=geometry.max_shapes);
    let mut shapes: Vec<ShapeInstance> = Vec::with_capacity(count);
    let s = size as f64;
    let mut attempts = 0;
    while shapes.len() < count && attempts < 200 {
        attempts += 1;
        let class = if shapes.is_empty() && forced.is_some() {
            forced.unwrap()
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = fg;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    chosen = i + 1;
                    break;
                }
                r -= w;
            }
            chosen.min(fg) as u8
        };
        let half = rng.gen_range(geometry.half_range.0..=geometry.half_range.1) * s;
        let lo = half + 1.0;
        let hi = s - half - 1.0;
        if hi <= lo {
            continue;
        }
        let cand = ShapeInstance {
            class,
            kind: ShapeKind::for_class(class as usize),
            center_y: rng.gen_range(lo..hi),
            center_x: rng.gen_range(lo..hi),
            half,
        };
        if shapes.iter().all(|o| !o.overlaps(&cand, 2.0)) {
            shapes.push(cand);
        }
    }
    shapes
}

/// Label map of a layout, sampled at pixel centres.
pub fn rasterize(shapes: &[ShapeInstance], size: usize) -> Array2<u8> {
    let mut labels = Array2::<u8>::zeros((size, size));
    for sh in shapes {
        let y0 = (sh.center_y - sh.half).floor().max(0.0) as usize;
        let y1 = ((sh.center_y + sh.half).ceil() as usize).min(size);
        let x0 = (sh.center_x - sh.half).floor().max(0.0) as usize;
        let x1 = ((sh.center_x + sh.half).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                if sh.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[[y, x]] = sh.class;
                }
            }
        }
    }
    labels
}

fn render(rng: &mut ChaCha8Rng, spec: &DomainSpec, shapes: &[ShapeInstance], labels: &Array2<u8>) -> Image {
    let size = labels.nrows();
    let s = size as f64;
    let theta = rng.gen::<f64>() * std::f64::consts::PI;
    let phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut img = Array3::<f64>::zeros((size, size, 3));
    let bg = spec.color(0);
    for y in 0..size {
        for x in 0..size {
            let t = spec.texture_amplitude
                * (std::f64::consts::TAU * spec.texture_frequency * (x as f64 * ct + y as f64 * st) / s + phase).sin();
            for c in 0..3 {
                img[[y, x, c]] = bg[c] + t;
            }
        }
    }
    for sh in shapes {
        let base = spec.color(sh.class as usize);
        let jitter: Vec<f64> = (0..3)
            .map(|_| if spec.color_jitter > 0.0 { rng.gen_range(-spec.color_jitter..=spec.color_jitter) } else { 0.0 })
            .collect();
        for ((y, x), &l) in labels.indexed_iter() {
            if l == sh.class && sh.contains(y as f64 + 0.5, x as f64 + 0.5) {
                for c in 0..3 {
                    img[[y, x, c]] = base[c] + jitter[c];
                }
            }
        }
    }
    img.mapv_inplace(|v| spec.gain * v + spec.bias);
    if spec.blur_sigma > 0.0 {
        img = gaussian_blur(&img, spec.blur_sigma);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma checked");
        img.mapv_inplace(|v| v + normal.sample(rng));
    }
    img.mapv(|v| v.clamp(0.0, 1.0) as f32)
}

/// Separable Gaussian blur with edge clamping; radius `ceil(3σ)`.
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, c) = img.dim();
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * img[[y, xx, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[[yy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// A generated dataset together with the layouts that produced its label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: Dataset,
    pub layouts: Vec<Vec<ShapeInstance>>,
}

pub fn gen_shiftshapes(spec: &DomainSpec, n: usize, size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    gen_shiftshapes_with(spec, &GeometrySpec::default(), n, size, num_classes, seed).map(|g| g.dataset)
}

pub fn gen_shiftshapes_with(
    spec: &DomainSpec,
    geometry: &GeometrySpec,
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Generated> {
    if num_classes < 2 || num_classes > ShapeKind::ALL.len() + 1 {
        return Err(Error::Config(format!(
            "ShiftShapes supports 2..={} classes, got {num_classes}",
            ShapeKind::ALL.len() + 1
        )));
    }
    if n == 0 {
        return Err(Error::Config("dataset must contain at least one image".into()));
    }
    if size < 16 {
        return Err(Error::Config(format!("image size {size} too small")));
    }
    if geometry.min_shapes == 0 || geometry.min_shapes > geometry.max_shapes {
        return Err(Error::Config("shape count range is invalid".into()));
    }
    spec.validate()?;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(seed);
    geo_rng.set_stream(0);
    let mut app_rng = ChaCha8Rng::seed_from_u64(seed);
    app_rng.set_stream(1);
    let mut items = Vec::with_capacity(n);
    let mut layouts = Vec::with_capacity(n);
    for i in 0..n {
        // the first C−1 scenes each lead with a different class so every class is covered
        let forced = (i < num_classes - 1).then_some((i + 1) as u8);
        let shapes = sample_layout(&mut geo_rng, geometry, size, num_classes, forced);
        let labels = rasterize(&shapes, size);
        let image = render(&mut app_rng, spec, &shapes, &labels);
        items.push(DataItem {
            image,
            label: Some(labels),
        });
        layouts.push(shapes);
    }
    Ok(Generated {
        dataset: Dataset {
            items,
            num_classes,
            split: "shiftshapes".into(),
        },
        layouts,
    })
}
