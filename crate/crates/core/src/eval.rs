//! Segmentation scores, metric-space cluster quality and multi-scale inference.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::map::SpatialMap;
use crate::segnet::layers::resize_bilinear;
use crate::segnet::{LogitMap, NetworkParams, SegNet};
use crate::teacher::IGNORE_INDEX;

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// `None` for classes absent from both predictions and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// Rows are ground truth, columns predictions.
    pub confusion: Array2<u64>,
}

impl IoUReport {
    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.confusion.sum();
        let hit: u64 = self.confusion.diag().sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

/// Per-class IoU from the confusion matrix of all non-ignored pixels.
pub fn iou_report(preds: &[Array2<u8>], gts: &[Array2<u8>], num_classes: usize) -> Result<IoUReport> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!("{} predictions for {} label maps", preds.len(), gts.len())));
    }
    let mut confusion = Array2::<u64>::zeros((num_classes, num_classes));
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.dim() != g.dim() {
            return Err(Error::Data(format!("map {i}: prediction {:?} vs label {:?}", p.dim(), g.dim())));
        }
        for (&pc, &gc) in p.iter().zip(g.iter()) {
            if gc == IGNORE_INDEX {
                continue;
            }
            if gc as usize >= num_classes || pc as usize >= num_classes {
                return Err(Error::Data(format!("map {i}: class id outside {num_classes} classes")));
            }
            confusion[[gc as usize, pc as usize]] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[[c, c]];
        let fn_ = confusion.row(c).sum() - tp;
        let fp = confusion.column(c).sum() - tp;
        let denom = tp + fp + fn_;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Undefined("no evaluated pixels".into()));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IoUReport {
        per_class,
        miou,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteReport {
    /// Mean over all points, ×100.
    pub overall: f64,
    /// Mean over each cluster's points, ×100.
    pub per_class: BTreeMap<usize, f64>,
}

/// Silhouette scores for an arbitrary pairwise distance.
///
/// Points in singleton clusters score zero. Fewer than two clusters is undefined.
pub fn silhouette_with(labels: &[usize], dist: impl Fn(usize, usize) -> f64) -> Result<SilhouetteReport> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::Undefined(format!("silhouette needs two clusters, got {}", members.len())));
    }
    let clusters: Vec<(usize, &Vec<usize>)> = members.iter().map(|(&k, v)| (k, v)).collect();
    let mut scores = vec![0.0; labels.len()];
    let mut sums = vec![0.0; clusters.len()];
    for (ci, &(_, own)) in clusters.iter().enumerate() {
        if own.len() == 1 {
            continue;
        }
        for &i in own {
            sums.iter_mut().for_each(|s| *s = 0.0);
            for (cj, &(_, other)) in clusters.iter().enumerate() {
                sums[cj] = other.iter().map(|&j| dist(i, j)).sum();
            }
            let a = sums[ci] / (own.len() - 1) as f64;
            let b = clusters
                .iter()
                .enumerate()
                .filter(|&(cj, _)| cj != ci)
                .map(|(cj, &(_, other))| sums[cj] / other.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            scores[i] = if m > 0.0 { (b - a) / m } else { 0.0 };
        }
    }
    let per_class = clusters
        .iter()
        .map(|&(k, idx)| (k, 100.0 * idx.iter().map(|&i| scores[i]).sum::<f64>() / idx.len() as f64))
        .collect();
    Ok(SilhouetteReport {
        overall: 100.0 * scores.iter().sum::<f64>() / scores.len() as f64,
        per_class,
    })
}

/// Silhouette scores of row vectors under the normalised squared distance.
pub fn silhouette(points: ArrayView2<f64>, labels: &[usize]) -> Result<SilhouetteReport> {
    if points.nrows() != labels.len() {
        return Err(Error::Data(format!("{} points, {} labels", points.nrows(), labels.len())));
    }
    let mut unit = points.to_owned();
    for mut row in unit.rows_mut() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) {
            return Err(Error::Numeric("silhouette point with zero norm".into()));
        }
        row.mapv_inplace(|v| v / n);
    }
    let gram = unit.dot(&unit.t());
    silhouette_with(labels, |i, j| (2.0 - 2.0 * gram[[i, j]]).max(0.0))
}

/// Softmax probabilities averaged over rescaled copies of the input, returned as log-probabilities.
pub fn multi_scale_predict<N: SegNet>(
    net: &N,
    params: &NetworkParams<f32>,
    image: &Image,
    scales: &[f64],
) -> Result<LogitMap<f32>> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("scales must be positive, got {scales:?}")));
    }
    let (h, w, _) = image.dim();
    let stride = net.stride();
    let base = SpatialMap::from_hwc(image.view());
    let mut acc = SpatialMap::<f64>::zeros(h, w, net.num_classes());
    for &s in scales {
        let round = |v: usize| ((v as f64 * s / stride as f64).round() as usize) * stride;
        let (sh, sw) = (round(h), round(w));
        if sh < stride || sw < stride {
            return Err(Error::Range(format!("scale {s} shrinks {h}x{w} below the network stride {stride}")));
        }
        let input = if (sh, sw) == (h, w) {
            image.clone()
        } else {
            resize_bilinear(&base, sh, sw).to_hwc()
        };
        let out = net.forward(params, input.view())?;
        let probs = out.logits.softmax();
        let probs = if (sh, sw) == (h, w) {
            probs
        } else {
            resize_bilinear(&probs, h, w)
        };
        *acc.matrix_mut() += &probs.matrix().mapv(f64::from);
    }
    let n = scales.len() as f64;
    Ok(acc.map_scalar(|v| (v / n).max(f64::MIN_POSITIVE).ln() as f32))
}

/// Per-pixel argmax, ties to the lowest class index.
pub fn argmax_map(logits: &LogitMap<f32>) -> Array2<u8> {
    let m = logits.matrix();
    let classes: Vec<u8> = m
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Array2::from_shape_vec((logits.height(), logits.width()), classes).expect("pixel count")
}

pub fn predict<N: SegNet>(net: &N, params: &NetworkParams<f32>, image: &Image, mst: Option<&[f64]>) -> Result<Array2<u8>> {
    let logits = match mst {
        Some(scales) => multi_scale_predict(net, params, image, scales)?,
        None => net.forward(params, image.view())?.logits,
    };
    Ok(argmax_map(&logits))
}

/// mIoU of `params` on a labelled dataset.
pub fn evaluate<N: SegNet>(
    net: &N,
    params: &NetworkParams<f32>,
    dataset: &Dataset,
    mst: Option<&[f64]>,
) -> Result<IoUReport> {
    if !dataset.is_labeled() {
        return Err(Error::Data("evaluation needs labels".into()));
    }
    let mut preds = Vec::with_capacity(dataset.len());
    let mut gts = Vec::with_capacity(dataset.len());
    for item in &dataset.items {
        preds.push(predict(net, params, &item.image, mst)?);
        gts.push(item.label.clone().expect("checked"));
    }
    iou_report(&preds, &gts, dataset.num_classes)
}

/// Silhouette of metric embeddings grouped by ground-truth class, averaged over images.
///
/// Up to `pixels_per_image` non-ignored pixels are drawn per image; images
/// whose sample covers a single class are skipped.
pub fn metric_silhouette<N: SegNet, R: Rng>(
    net: &N,
    params: &NetworkParams<f32>,
    metric: &NetworkParams<f32>,
    dataset: &Dataset,
    pixels_per_image: usize,
    rng: &mut R,
) -> Result<SilhouetteReport> {
    let mut overall = Vec::new();
    let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for item in &dataset.items {
        let Some(label) = &item.label else { continue };
        let out = net.forward(params, item.image.view())?;
        let (emb, _) = net.forward_metric(metric, &out.features, label.dim())?;
        let valid: Vec<usize> = label
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l != IGNORE_INDEX)
            .map(|(i, _)| i)
            .collect();
        let k = pixels_per_image.min(valid.len());
        let mut picked: Vec<usize> = rand::seq::index::sample(rng, valid.len(), k)
            .into_iter()
            .map(|i| valid[i])
            .collect();
        picked.sort_unstable();
        let labels: Vec<usize> = picked.iter().map(|&p| label.as_slice().expect("standard layout")[p] as usize).collect();
        let points = Array2::from_shape_fn((picked.len(), emb.channels()), |(i, c)| emb.matrix()[[picked[i], c]] as f64);
        match silhouette(points.view(), &labels) {
            Ok(r) => {
                overall.push(r.overall);
                for (c, v) in r.per_class {
                    per_class.entry(c).or_default().push(v);
                }
            }
            Err(Error::Undefined(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if overall.is_empty() {
        return Err(Error::Undefined("no image had two classes in its sample".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SilhouetteReport {
        overall: mean(&overall),
        per_class: per_class.iter().map(|(&c, v)| (c, mean(v))).collect(),
    })
}
