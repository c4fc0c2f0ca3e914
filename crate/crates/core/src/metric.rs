//! Reliability metric learning.
//!
//! Confident teacher predictions are selected per class with moving-average
//! quantile thresholds, sampled in equal numbers per class, and used to train
//! the metric head together with one trainable proxy per class under a
//! temperature-scaled NCA loss. The distance between a pixel's embedding and
//! the proxy of its predicted class is then squashed by a reverse sigmoid into
//! a reliability weight.

use ndarray::{Array1, Array2, ArrayView1, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::map::SpatialMap;
use crate::segnet::MetricFeatureMap;
use crate::teacher::{ConfidenceMap, PseudoLabelMap, IGNORE_INDEX};

/// Per-class confidence thresholds tracked as a moving average of per-frame quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub thresholds: Vec<Option<f64>>,
    pub momentum: f64,
    /// Fraction of each class's most confident pixels to keep.
    pub quantile: f64,
}

impl ThresholdState {
    pub fn new(num_classes: usize, momentum: f64, quantile: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("threshold momentum must lie in [0, 1), got {momentum}")));
        }
        if !(quantile > 0.0 && quantile < 1.0) {
            return Err(Error::Config(format!("metric quantile must lie in (0, 1), got {quantile}")));
        }
        Ok(Self {
            thresholds: vec![None; num_classes],
            momentum,
            quantile,
        })
    }

    pub fn update(&mut self, conf: &ConfidenceMap, labels: &PseudoLabelMap) -> Result<()> {
        if conf.dim() != labels.classes.dim() {
            return Err(shape_err!("confidence {:?} vs labels {:?}", conf.dim(), labels.classes.dim()));
        }
        let per_class = confidences_by_class(conf, labels, self.thresholds.len());
        for (c, mut values) in per_class.into_iter().enumerate() {
            if values.is_empty() {
                continue;
            }
            let frame = lower_quantile(&mut values, 1.0 - self.quantile);
            self.thresholds[c] = Some(match self.thresholds[c] {
                None => frame,
                Some(prev) => self.momentum * prev + (1.0 - self.momentum) * frame,
            });
        }
        Ok(())
    }
}

fn confidences_by_class(conf: &ConfidenceMap, labels: &PseudoLabelMap, num_classes: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); num_classes];
    for (&c, &p) in labels.classes.iter().zip(conf.iter()) {
        if c != IGNORE_INDEX && (c as usize) < num_classes {
            out[c as usize].push(p);
        }
    }
    out
}

/// Empirical quantile with "lower" interpolation: the sorted element at `floor(level·(n−1))`.
pub fn lower_quantile(values: &mut [f64], level: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let pos = (level.clamp(0.0, 1.0) * (values.len() - 1) as f64 + 1e-9).floor() as usize;
    values[pos.min(values.len() - 1)]
}

/// Selected class per pixel, or [`IGNORE_INDEX`] where the pixel is not used for metric training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricLabelMask {
    pub selected: Array2<u8>,
    pub num_classes: usize,
}

impl MetricLabelMask {
    pub fn count(&self, class: u8) -> usize {
        self.selected.iter().filter(|&&c| c == class).count()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.iter().all(|&c| c == IGNORE_INDEX)
    }
}

/// A pixel is kept iff its confidence is strictly above its predicted class's threshold.
pub fn select_metric_pseudo_labels(
    conf: &ConfidenceMap,
    labels: &PseudoLabelMap,
    state: &ThresholdState,
) -> MetricLabelMask {
    let selected = ndarray::Zip::from(&labels.classes).and(conf).map_collect(|&c, &p| {
        match state.thresholds.get(c as usize).copied().flatten() {
            Some(tau) if c != IGNORE_INDEX && p > tau => c,
            _ => IGNORE_INDEX,
        }
    });
    MetricLabelMask {
        selected,
        num_classes: labels.num_classes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub y: usize,
    pub x: usize,
    pub class: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draws the same number of pixels, without replacement, from every class present in the mask.
pub fn balanced_sample<R: Rng>(mask: &MetricLabelMask, cap_per_class: usize, rng: &mut R) -> SampleSet {
    assert!(cap_per_class >= 1, "cap_per_class must be positive");
    let w = mask.selected.ncols();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); mask.num_classes];
    for (p, &c) in mask.selected.iter().enumerate() {
        if c != IGNORE_INDEX && (c as usize) < mask.num_classes {
            by_class[c as usize].push(p);
        }
    }
    let Some(k) = by_class.iter().filter(|v| !v.is_empty()).map(Vec::len).min() else {
        return SampleSet::default();
    };
    let k = k.min(cap_per_class);
    let mut samples = Vec::with_capacity(k * mask.num_classes);
    for (c, pixels) in by_class.iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        for i in rand::seq::index::sample(rng, pixels.len(), k) {
            let p = pixels[i];
            samples.push(Sample {
                y: p / w,
                x: p % w,
                class: c as u8,
            });
        }
    }
    SampleSet { samples }
}

fn norm<T: NdFloat>(v: &ArrayView1<T>) -> T {
    v.dot(v).sqrt()
}

/// Squared Euclidean distance between the L2-normalised arguments; lies in `[0, 4]`.
pub fn proxy_distance<T: NdFloat>(x: ArrayView1<T>, y: ArrayView1<T>) -> Result<T> {
    if x.len() != y.len() {
        return Err(shape_err!("vector lengths differ: {} vs {}", x.len(), y.len()));
    }
    let nx = norm(&x);
    let ny = norm(&y);
    if !(nx > T::zero() && ny > T::zero()) {
        return Err(Error::Numeric("distance undefined for a zero-norm vector".into()));
    }
    Ok(x.iter()
        .zip(y.iter())
        .map(|(&a, &b)| {
            let d = a / nx - b / ny;
            d * d
        })
        .fold(T::zero(), |acc, v| acc + v))
}

/// One trainable embedding per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank<T> {
    pub proxies: Array2<T>,
}

impl<T: NdFloat> ProxyBank<T> {
    /// Unit-normalised standard-normal draws, one row per class.
    pub fn init(num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proxies = Array2::<T>::zeros((num_classes, dim));
        for mut row in proxies.rows_mut() {
            loop {
                row.mapv_inplace(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::from(z).unwrap()
                });
                let n = norm(&row.view());
                if n > T::zero() {
                    row.mapv_inplace(|v| v / n);
                    break;
                }
            }
        }
        Self { proxies }
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.nrows()
    }

    pub fn dim(&self) -> usize {
        self.proxies.ncols()
    }

    pub fn proxy(&self, class: usize) -> ArrayView1<'_, T> {
        self.proxies.row(class)
    }

    pub fn validate(&self) -> Result<()> {
        for (c, row) in self.proxies.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("proxy {c} is not finite")));
            }
            if norm(&row) == T::zero() {
                return Err(Error::Numeric(format!("proxy {c} is the zero vector")));
            }
        }
        Ok(())
    }

    fn unit_rows(&self) -> Result<(Array2<T>, Array1<T>)> {
        self.validate()?;
        let norms = self.proxies.map_axis(ndarray::Axis(1), |r| norm(&r));
        let mut unit = self.proxies.clone();
        for (mut row, &n) in unit.rows_mut().into_iter().zip(norms.iter()) {
            row.mapv_inplace(|v| v / n);
        }
        Ok((unit, norms))
    }
}

/// Loss value and its gradients with respect to the embedding map and the proxies.
#[derive(Debug, Clone)]
pub struct NcaOutput<T> {
    pub loss: T,
    pub d_features: MetricFeatureMap<T>,
    pub d_proxies: Array2<T>,
}

/// Temperature-scaled proxy-NCA loss averaged over the sample set.
pub fn nca_loss<T: NdFloat>(
    features: &MetricFeatureMap<T>,
    samples: &SampleSet,
    proxies: &ProxyBank<T>,
    temperature: f64,
) -> Result<NcaOutput<T>> {
    if samples.is_empty() {
        return Err(Error::Data("NCA loss needs at least one sample".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if features.channels() != proxies.dim() {
        return Err(shape_err!(
            "embedding width {} vs proxy width {}",
            features.channels(),
            proxies.dim()
        ));
    }
    let inv_t = T::from(1.0 / temperature).unwrap();
    let two = T::from(2.0).unwrap();
    let n = T::from(samples.len()).unwrap();
    let nc = proxies.num_classes();
    let (unit_p, p_norms) = proxies.unit_rows()?;

    let mut loss = T::zero();
    let mut d_features = SpatialMap::<T>::zeros(features.height(), features.width(), features.channels());
    let mut d_unit_p = Array2::<T>::zeros(unit_p.raw_dim());
    let mut dist = vec![T::zero(); nc];
    let mut coef = vec![T::zero(); nc];

    for s in &samples.samples {
        let label = s.class as usize;
        if label >= nc {
            return Err(shape_err!("sample class {label} has no proxy"));
        }
        if s.y >= features.height() || s.x >= features.width() {
            return Err(shape_err!("sample ({}, {}) outside the map", s.y, s.x));
        }
        let f = features.pixel(s.y, s.x);
        let f_norm = norm(&f);
        if !(f_norm > T::zero()) {
            return Err(Error::Numeric(format!("zero embedding at ({}, {})", s.y, s.x)));
        }
        let u = f.mapv(|v| v / f_norm);
        for c in 0..nc {
            let diff = &u - &unit_p.row(c);
            dist[c] = diff.dot(&diff);
        }
        // −log softmax(−d/T)[label] = d_label/T + logsumexp(−d/T)
        let max_logit = dist.iter().fold(T::neg_infinity(), |m, &d| m.max(-d * inv_t));
        let sum_exp = dist
            .iter()
            .fold(T::zero(), |acc, &d| acc + (-d * inv_t - max_logit).exp());
        loss += dist[label] * inv_t + max_logit + sum_exp.ln();

        // dL/dd_c = (δ_c,label − softmax_c) / T
        for c in 0..nc {
            let sm = (-dist[c] * inv_t - max_logit).exp() / sum_exp;
            let delta = if c == label { T::one() } else { T::zero() };
            coef[c] = (delta - sm) * inv_t / n;
        }
        // d d_c / d u = 2(u − v_c); d d_c / d v_c = 2(v_c − u)
        let mut g_u = Array1::<T>::zeros(u.len());
        for c in 0..nc {
            let diff = &u - &unit_p.row(c);
            g_u.scaled_add(two * coef[c], &diff);
            d_unit_p.row_mut(c).scaled_add(-two * coef[c], &diff);
        }
        let radial = u.dot(&g_u);
        let g_f = (&g_u - &u.mapv(|v| v * radial)).mapv(|v| v / f_norm);
        d_features.pixel_mut(s.y, s.x).scaled_add(T::one(), &g_f);
    }

    let mut d_proxies = Array2::<T>::zeros(proxies.proxies.raw_dim());
    for c in 0..nc {
        let v = unit_p.row(c);
        let g = d_unit_p.row(c);
        let radial = v.dot(&g);
        let out = (&g - &v.mapv(|x| x * radial)).mapv(|x| x / p_norms[c]);
        d_proxies.row_mut(c).assign(&out);
    }

    Ok(NcaOutput {
        loss: loss / n,
        d_features,
        d_proxies,
    })
}

/// Distance from every pixel's embedding to the proxy of its predicted class.
pub fn distance_map<T: NdFloat>(
    features: &MetricFeatureMap<T>,
    labels: &PseudoLabelMap,
    proxies: &ProxyBank<T>,
) -> Result<Array2<f64>> {
    if (features.height(), features.width()) != labels.classes.dim() {
        return Err(shape_err!(
            "embedding map {}x{} vs labels {:?}",
            features.height(),
            features.width(),
            labels.classes.dim()
        ));
    }
    if features.channels() != proxies.dim() {
        return Err(shape_err!("embedding width {} vs proxy width {}", features.channels(), proxies.dim()));
    }
    let (unit_p, _) = proxies.unit_rows()?;
    let w = features.width();
    let mut out = Array2::<f64>::zeros(labels.classes.dim());
    for (p, f) in features.matrix().outer_iter().enumerate() {
        let c = labels.classes[[p / w, p % w]];
        if c == IGNORE_INDEX {
            out[[p / w, p % w]] = 4.0;
            continue;
        }
        let c = c as usize;
        if c >= proxies.num_classes() {
            return Err(shape_err!("label {c} has no proxy"));
        }
        let f_norm = norm(&f);
        if !(f_norm > T::zero()) {
            return Err(Error::Numeric("zero embedding in distance map".into()));
        }
        let d = f
            .iter()
            .zip(unit_p.row(c).iter())
            .map(|(&a, &b)| {
                let t = a / f_norm - b;
                t * t
            })
            .fold(T::zero(), |acc, v| acc + v);
        out[[p / w, p % w]] = d.to_f64().unwrap();
    }
    Ok(out)
}

/// Reverse sigmoid of the distance: `1 / (1 + exp(−α(β − d)))`.
pub fn reliability_weight(distance: f64, alpha: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (-alpha * (beta - distance)).exp())
}

/// Per-pixel gradient-scaling weights, strictly inside `(0, 1)`.
pub type ReliabilityMap = Array2<f32>;

const W_MIN: f32 = f32::MIN_POSITIVE;
const W_MAX: f32 = 1.0 - f32::EPSILON / 2.0;

pub fn reliability_from_distances(distances: &Array2<f64>, alpha: f64, beta: f64) -> ReliabilityMap {
    distances.mapv(|d| (reliability_weight(d, alpha, beta) as f32).clamp(W_MIN, W_MAX))
}

pub fn reliability_map<T: NdFloat>(
    features: &MetricFeatureMap<T>,
    labels: &PseudoLabelMap,
    proxies: &ProxyBank<T>,
    alpha: f64,
    beta: f64,
) -> Result<ReliabilityMap> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("reliability sharpness must be positive, got {alpha}")));
    }
    let d = distance_map(features, labels, proxies)?;
    Ok(reliability_from_distances(&d, alpha, beta))
}
