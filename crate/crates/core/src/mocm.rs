//! Metric-based online ClassMix.
//!
//! Connected class regions of the teacher's pseudo-labels whose mean metric
//! distance to their class proxy is small are kept in per-class FIFO buffers
//! as (image, pseudo-label, reliability, mask) crops. Mixing pastes crops from
//! randomly chosen classes back at their original coordinates.

use std::collections::VecDeque;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Image;
use crate::error::{shape_err, Error, Result};
use crate::metric::ReliabilityMap;
use crate::teacher::{PseudoLabelMap, IGNORE_INDEX};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub image: Array3<f32>,
    pub labels: Array2<u8>,
    pub reliability: Array2<f32>,
    pub mask: Array2<bool>,
    pub class: u8,
    /// Top-left corner of the crop in the frame it was cut from.
    pub origin: (usize, usize),
    pub mean_distance: f64,
}

impl PatchRecord {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

/// Class regions of the label map as patch candidates.
///
/// Every 4-connected component with `min_area ≤ area ≤ max_area` becomes one
/// record cropped to its bounding box. `distances` holds each pixel's metric
/// distance to the proxy of its predicted class.
pub fn extract_candidate_patches(
    image: &Image,
    labels: &PseudoLabelMap,
    reliability: &ReliabilityMap,
    distances: &Array2<f64>,
    min_area: usize,
    max_area: usize,
) -> Result<Vec<PatchRecord>> {
    let (h, w) = labels.classes.dim();
    if (image.dim().0, image.dim().1) != (h, w) || reliability.dim() != (h, w) || distances.dim() != (h, w) {
        return Err(shape_err!("patch extraction inputs are not spatially aligned"));
    }
    let mut visited = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            let class = labels.classes[[sy, sx]];
            if visited[[sy, sx]] || class == IGNORE_INDEX {
                continue;
            }
            component.clear();
            visited[[sy, sx]] = true;
            stack.push((sy, sx));
            while let Some((y, x)) = stack.pop() {
                component.push((y, x));
                let neighbours = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && !visited[[ny, nx]] && labels.classes[[ny, nx]] == class {
                        visited[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            if component.len() < min_area || component.len() > max_area {
                continue;
            }
            let y0 = component.iter().map(|p| p.0).min().unwrap();
            let y1 = component.iter().map(|p| p.0).max().unwrap() + 1;
            let x0 = component.iter().map(|p| p.1).min().unwrap();
            let x1 = component.iter().map(|p| p.1).max().unwrap() + 1;
            let mut mask = Array2::<bool>::from_elem((y1 - y0, x1 - x0), false);
            let mut dsum = 0.0;
            for &(y, x) in &component {
                mask[[y - y0, x - x0]] = true;
                dsum += distances[[y, x]];
            }
            out.push(PatchRecord {
                image: image.slice(s![y0..y1, x0..x1, ..]).to_owned(),
                labels: labels.classes.slice(s![y0..y1, x0..x1]).to_owned(),
                reliability: reliability.slice(s![y0..y1, x0..x1]).to_owned(),
                mask,
                class,
                origin: (y0, x0),
                mean_distance: dsum / component.len() as f64,
            });
        }
    }
    Ok(out)
}

/// One bounded FIFO queue of patches per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBuffers {
    capacity: usize,
    queues: Vec<VecDeque<PatchRecord>>,
}

impl PatchBuffers {
    pub fn new(num_classes: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("patch buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            queues: vec![VecDeque::with_capacity(capacity); num_classes],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn queue(&self, class: usize) -> &VecDeque<PatchRecord> {
        &self.queues[class]
    }

    pub fn occupancy(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn non_empty_classes(&self) -> Vec<usize> {
        (0..self.queues.len()).filter(|&c| !self.queues[c].is_empty()).collect()
    }

    /// Enqueues the patch iff its mean distance is strictly below `tau`, evicting the oldest when full.
    pub fn admit(&mut self, patch: PatchRecord, tau: f64) -> bool {
        if !(patch.mean_distance < tau) {
            return false;
        }
        let Some(q) = self.queues.get_mut(patch.class as usize) else {
            return false;
        };
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(patch);
        true
    }

    pub(crate) fn push_unchecked(&mut self, patch: PatchRecord) {
        let q = &mut self.queues[patch.class as usize];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(patch);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub image: Image,
    pub labels: Array2<u8>,
    pub reliability: ReliabilityMap,
    /// Classes pasted, in paste order.
    pub pasted: Vec<u8>,
}

/// Pastes one random patch from each of `min(n, #non-empty)` random classes.
pub fn sample_mix<R: Rng>(
    image: &Image,
    labels: &Array2<u8>,
    reliability: &ReliabilityMap,
    buffers: &PatchBuffers,
    n_mocm: usize,
    rng: &mut R,
) -> Result<Mixed> {
    let (h, w) = labels.dim();
    if (image.dim().0, image.dim().1) != (h, w) || reliability.dim() != (h, w) {
        return Err(shape_err!("mixing inputs are not spatially aligned"));
    }
    let mut out = Mixed {
        image: image.clone(),
        labels: labels.clone(),
        reliability: reliability.clone(),
        pasted: Vec::new(),
    };
    let candidates = buffers.non_empty_classes();
    let k = n_mocm.min(candidates.len());
    if k == 0 {
        return Ok(out);
    }
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.shuffle(rng);
    for class in chosen {
        let q = buffers.queue(class);
        let patch = &q[rng.gen_range(0..q.len())];
        let (ph, pw) = patch.dims();
        let (oy, ox) = patch.origin;
        for py in 0..ph {
            let y = oy + py;
            if y >= h {
                break;
            }
            for px in 0..pw {
                let x = ox + px;
                if x >= w {
                    break;
                }
                if !patch.mask[[py, px]] {
                    continue;
                }
                for c in 0..3 {
                    out.image[[y, x, c]] = patch.image[[py, px, c]];
                }
                out.labels[[y, x]] = patch.labels[[py, px]];
                out.reliability[[y, x]] = patch.reliability[[py, px]];
            }
        }
        out.pasted.push(class as u8);
    }
    Ok(out)
}

fn class_color(class: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [40, 40, 40],
        [230, 60, 60],
        [60, 200, 80],
        [70, 110, 230],
        [230, 210, 60],
        [200, 70, 210],
        [60, 210, 210],
        [250, 150, 40],
    ];
    if class == IGNORE_INDEX {
        [255, 255, 255]
    } else {
        PALETTE[class as usize % PALETTE.len()]
    }
}

/// Debug dump: input | mixed image | mixed labels blended over the mixed image.
pub fn write_triptych(path: &Path, input: &Image, mixed: &Mixed) -> Result<()> {
    let (h, w, _) = input.dim();
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf = RgbImage::from_fn((3 * w) as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let panel = x / w;
        let x = x % w;
        let px = match panel {
            0 => [to_u8(input[[y, x, 0]]), to_u8(input[[y, x, 1]]), to_u8(input[[y, x, 2]])],
            1 => [
                to_u8(mixed.image[[y, x, 0]]),
                to_u8(mixed.image[[y, x, 1]]),
                to_u8(mixed.image[[y, x, 2]]),
            ],
            _ => {
                let c = class_color(mixed.labels[[y, x]]);
                let mut o = [0u8; 3];
                for k in 0..3 {
                    o[k] = ((c[k] as f32 * 0.6) + mixed.image[[y, x, k]].clamp(0.0, 1.0) * 255.0 * 0.4) as u8;
                }
                o
            }
        };
        image::Rgb(px)
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
