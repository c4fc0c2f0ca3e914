//! Source training and the self-training adaptation loop.

mod loss;
mod optim;
mod state;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use loss::{mean_ce_loss, poly_lr, weighted_ce_loss};
pub use optim::{Adam, Sgd};
pub use state::{BatchSampler, RngStreams, RunState};

use crate::augment::{photometric, PhotoConfig};
use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::metric::{
    balanced_sample, distance_map, nca_loss, reliability_from_distances, select_metric_pseudo_labels,
    ReliabilityMap,
};
use crate::mocm::{extract_candidate_patches, sample_mix};
use crate::segnet::{FeatureMap, NetworkParams, ParamGroup, SegNet};
use crate::teacher::{pseudo_labels, ConfidenceMap, EmaConfig, PseudoLabelMap, IGNORE_INDEX};

/// Components of the adaptation objective that can be switched on one by one.
/// Serialised as the comma-separated list also accepted on the command line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Flags {
    /// Self-training on pseudo-labels.
    pub st: bool,
    /// Photometric noise on the student input.
    pub aug: bool,
    /// Separate EMA teacher.
    pub mt: bool,
    /// Reliability-weighted gradients.
    pub mgs: bool,
    /// Metric-based online ClassMix.
    pub mocm: bool,
}

impl Flags {
    pub const ALL: Flags = Flags {
        st: true,
        aug: true,
        mt: true,
        mgs: true,
        mocm: true,
    };

    pub fn validate(&self) -> Result<()> {
        if (self.aug || self.mt) && !self.st {
            return Err(Error::Config("Aug and MT only make sense with ST".into()));
        }
        if self.mgs && !self.mt {
            return Err(Error::Config("MGS requires MT".into()));
        }
        if self.mocm && !self.mgs {
            return Err(Error::Config("MOCM requires MGS".into()));
        }
        Ok(())
    }

    pub fn adapts(&self) -> bool {
        self.st
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.st, "ST"),
            (self.aug, "Aug"),
            (self.mt, "MT"),
            (self.mgs, "MGS"),
            (self.mocm, "MOCM"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, n)| n)
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for Flags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Flags::default();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "none" => {}
                "st" => flags.st = true,
                "aug" => flags.aug = true,
                "mt" => flags.mt = true,
                "mgs" => flags.mgs = true,
                "mocm" => flags.mocm = true,
                other => return Err(Error::Config(format!("unknown flag `{other}`"))),
            }
        }
        flags.validate()?;
        Ok(flags)
    }
}

impl TryFrom<String> for Flags {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Flags> for String {
    fn from(f: Flags) -> String {
        f.to_string()
    }
}

/// The six rows of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Source,
    St,
    StAug,
    StMt,
    StvmRaw,
    Stvm,
}

impl Variant {
    pub const LADDER: [Variant; 6] = [
        Variant::Source,
        Variant::St,
        Variant::StAug,
        Variant::StMt,
        Variant::StvmRaw,
        Variant::Stvm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Source => "Source",
            Variant::St => "ST",
            Variant::StAug => "ST_Aug",
            Variant::StMt => "ST_MT",
            Variant::StvmRaw => "STvM_Raw",
            Variant::Stvm => "STvM",
        }
    }

    pub fn flags(self) -> Flags {
        let on = |st, aug, mt, mgs, mocm| Flags { st, aug, mt, mgs, mocm };
        match self {
            Variant::Source => Flags::default(),
            Variant::St => on(true, false, false, false, false),
            Variant::StAug => on(true, true, false, false, false),
            Variant::StMt => on(true, true, true, false, false),
            Variant::StvmRaw => on(true, true, true, true, false),
            Variant::Stvm => Flags::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_feature: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 4,
            lr_feature: 2.5e-4,
            lr_classifier: 2.5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub flags: Flags,
    /// NCA temperature.
    pub temperature: f64,
    /// Fraction of each class's most confident pixels used for metric training.
    pub metric_quantile: f64,
    pub threshold_momentum: f64,
    /// Upper bound on metric samples drawn per class and image.
    pub samples_per_class: usize,
    pub buffer_capacity: usize,
    /// Reliability sharpness.
    pub alpha: f64,
    /// Distance at which reliability is one half.
    pub beta: f64,
    pub tau_mocm: f64,
    pub n_mocm: usize,
    pub min_patch_area: usize,
    /// Largest admissible patch as a fraction of the frame area.
    pub max_patch_fraction: f64,
    pub lr_feature: f64,
    pub lr_classifier: f64,
    pub lr_metric: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub ema: EmaConfig,
    pub iterations: u64,
    pub batch_size: usize,
    /// Square random crop side; `None` trains on whole images.
    pub crop_size: Option<usize>,
    pub photo: PhotoConfig,
    /// Keep only this class-balanced top fraction of pseudo-labels for the student loss.
    pub supervision_quantile: Option<f64>,
    pub source: SourceConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            flags: Flags::ALL,
            temperature: 0.25,
            metric_quantile: 0.2,
            threshold_momentum: 0.99,
            samples_per_class: 128,
            buffer_capacity: 50,
            alpha: 2.0,
            beta: 0.6,
            tau_mocm: 0.8,
            n_mocm: 10,
            min_patch_area: 64,
            max_patch_fraction: 0.25,
            lr_feature: 2.5e-4,
            lr_classifier: 2.5e-3,
            lr_metric: 3e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            ema: EmaConfig::default(),
            iterations: 2000,
            batch_size: 4,
            crop_size: None,
            photo: PhotoConfig::default(),
            supervision_quantile: None,
            source: SourceConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        self.ema.validate()?;
        self.photo.validate()?;
        let positive = [
            ("temperature", self.temperature),
            ("alpha", self.alpha),
            ("lr_feature", self.lr_feature),
            ("lr_classifier", self.lr_classifier),
            ("lr_metric", self.lr_metric),
            ("source.lr_feature", self.source.lr_feature),
            ("source.lr_classifier", self.source.lr_classifier),
            ("tau_mocm", self.tau_mocm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.metric_quantile > 0.0 && self.metric_quantile < 1.0) {
            return Err(Error::Config(format!("metric_quantile must lie in (0, 1), got {}", self.metric_quantile)));
        }
        if let Some(q) = self.supervision_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("supervision quantile must lie in (0, 1], got {q}")));
            }
        }
        if !(0.0..1.0).contains(&self.threshold_momentum) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momenta must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.source.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.samples_per_class == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("samples_per_class and buffer_capacity must be positive".into()));
        }
        if !(self.max_patch_fraction > 0.0 && self.max_patch_fraction <= 1.0) {
            return Err(Error::Config("max_patch_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn lr_for(&self, group: ParamGroup, iter: u64) -> Result<f64> {
        let base = match group {
            ParamGroup::FeatureExtractor => self.lr_feature,
            ParamGroup::Classifier => self.lr_classifier,
            ParamGroup::MetricHead => self.lr_metric,
        };
        poly_lr(base, iter, self.iterations, self.poly_power)
    }
}

/// Named, independent rng stream derived from the root seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const MOCM: u64 = 3;
    pub const METRIC: u64 = 4;
    pub const EVAL: u64 = 5;
}

/// Random `size × size` crop with a stride-aligned corner.
pub fn random_crop<R: Rng>(image: &Image, size: usize, align: usize, rng: &mut R) -> Image {
    let (h, w, _) = image.dim();
    if size >= h && size >= w {
        return image.clone();
    }
    let pick = |extent: usize, rng: &mut R| {
        let slots = (extent.saturating_sub(size)) / align;
        rng.gen_range(0..=slots) * align
    };
    let y = pick(h, rng);
    let x = pick(w, rng);
    image
        .slice(ndarray::s![y..(y + size).min(h), x..(x + size).min(w), ..])
        .to_owned()
}

/// Supervised source training with mean cross-entropy.
pub fn train_source<N: SegNet>(net: &N, dataset: &Dataset, cfg: &SourceConfig, seed: u64) -> Result<NetworkParams<f32>> {
    if dataset.is_empty() || !dataset.is_labeled() {
        return Err(Error::Data("source training needs a non-empty labelled dataset".into()));
    }
    dataset.validate()?;
    let init_seed = rng_stream(seed, streams::INIT).gen::<u64>();
    let mut params = net.init_network::<f32>(init_seed);
    let mut opt = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let mut sampler = BatchSampler::new(dataset.len());
    let mut rng = rng_stream(seed, streams::DATA);
    for iter in 0..cfg.iterations {
        let mut grads = params.zeros_like();
        for _ in 0..cfg.batch_size {
            let item = &dataset.items[sampler.next(&mut rng)];
            let out = net.forward(&params, item.image.view())?;
            let (_, d_logits) = mean_ce_loss(&out.logits, item.label.as_ref().expect("labelled"))?;
            let g = net.backward(&params, &out.tape, &d_logits)?;
            grads.add_scaled(&g, 1.0 / cfg.batch_size as f32);
        }
        let lr_fe = poly_lr(cfg.lr_feature, iter, cfg.iterations, cfg.poly_power)?;
        let lr_cls = poly_lr(cfg.lr_classifier, iter, cfg.iterations, cfg.poly_power)?;
        opt.step(&mut params, &grads, |g| match g {
            ParamGroup::Classifier => lr_cls,
            _ => lr_fe,
        })?;
        if !params.is_finite() {
            return Err(Error::Numeric(format!("source parameters diverged at iteration {iter}")));
        }
    }
    Ok(params)
}

/// Scalars describing one adaptation step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub ce_loss: f64,
    /// `None` when no image in the batch produced metric samples.
    pub nca_loss: Option<f64>,
    pub mean_reliability: f64,
    pub admitted: usize,
    pub buffer_occupancy: usize,
    pub ema_updated: bool,
}

struct Frame {
    image: Image,
    features: FeatureMap<f32>,
    labels: PseudoLabelMap,
    conf: ConfidenceMap,
}

/// One adaptation iteration over a batch of target images.
pub fn adapt_step<N: SegNet>(net: &N, state: &mut RunState, batch: &[Image], cfg: &TrainConfig) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let flags = cfg.flags;
    let iter = state.iteration;
    let mut stats = StepStats::default();

    // teacher on clean inputs
    let mut frames = Vec::with_capacity(batch.len());
    for image in batch {
        let out = net.forward(state.teacher_params(), image.view())?;
        let (labels, conf) = pseudo_labels(&out.logits)?;
        state.thresholds.update(&conf, &labels)?;
        frames.push(Frame {
            image: image.clone(),
            features: out.features,
            labels,
            conf,
        });
    }

    // metric head and proxies
    let mut metric_grads = state.metric.zeros_like();
    let mut proxy_grads = Array2::<f32>::zeros(state.proxies.proxies.raw_dim());
    let mut used = 0usize;
    let mut nca_sum = 0.0;
    for f in &frames {
        let mask = select_metric_pseudo_labels(&f.conf, &f.labels, &state.thresholds);
        let samples = balanced_sample(&mask, cfg.samples_per_class, &mut state.rng.metric);
        if samples.is_empty() {
            continue;
        }
        let hw = f.labels.classes.dim();
        let (emb, tape) = net.forward_metric(&state.metric, &f.features, hw)?;
        let nca = nca_loss(&emb, &samples, &state.proxies, cfg.temperature)?;
        let g = net.backward_metric(&state.metric, &tape, &nca.d_features)?;
        metric_grads.add_scaled(&g, 1.0);
        proxy_grads += &nca.d_proxies;
        nca_sum += nca.loss as f64;
        used += 1;
    }
    if used > 0 {
        let inv = 1.0 / used as f32;
        metric_grads.scale(inv);
        proxy_grads.mapv_inplace(|v| v * inv);
        let lr = cfg.lr_for(ParamGroup::MetricHead, iter)?;
        let mut params: Vec<_> = state.metric.entries_mut().iter_mut().map(|e| e.value.view_mut()).collect();
        params.push(state.proxies.proxies.view_mut().into_dyn());
        let mut grads: Vec<_> = metric_grads.entries().iter().map(|e| e.value.view()).collect();
        grads.push(proxy_grads.view().into_dyn());
        state.metric_opt.step(lr, params, grads)?;
        if !state.metric.is_finite() {
            return Err(Error::Numeric(format!("metric head diverged at iteration {iter}")));
        }
        state.proxies.validate()?;
        stats.nca_loss = Some(nca_sum / used as f64);
    }

    // student
    let mut grads = state.student.zeros_like();
    let mut rel_sum = 0.0;
    let inv_batch = 1.0 / batch.len() as f32;
    for f in &frames {
        let hw = f.labels.classes.dim();
        let mut weights: ReliabilityMap = Array2::ones(hw);
        let mut distances = None;
        if flags.mgs || flags.mocm {
            let (emb, _) = net.forward_metric(&state.metric, &f.features, hw)?;
            let d = distance_map(&emb, &f.labels, &state.proxies)?;
            if flags.mgs {
                weights = reliability_from_distances(&d, cfg.alpha, cfg.beta);
            }
            distances = Some(d);
        }
        if let Some(sup) = state.supervision.as_mut() {
            sup.update(&f.conf, &f.labels)?;
            let keep = select_metric_pseudo_labels(&f.conf, &f.labels, sup);
            weights.zip_mut_with(&keep.selected, |w, &k| {
                if k == IGNORE_INDEX {
                    *w = 0.0;
                }
            });
        }
        rel_sum += weights.iter().map(|&w| w as f64).sum::<f64>() / weights.len() as f64;

        if flags.mocm {
            let max_area = ((hw.0 * hw.1) as f64 * cfg.max_patch_fraction) as usize;
            let patches = extract_candidate_patches(
                &f.image,
                &f.labels,
                &weights,
                distances.as_ref().expect("computed above"),
                cfg.min_patch_area,
                max_area,
            )?;
            for p in patches {
                if state.buffers.admit(p, cfg.tau_mocm) {
                    stats.admitted += 1;
                }
            }
        }

        let mut input = if flags.aug {
            photometric(&f.image, &cfg.photo, &mut state.rng.augment)
        } else {
            f.image.clone()
        };
        let mut targets = f.labels.classes.clone();
        if flags.mocm {
            let mixed = sample_mix(&input, &targets, &weights, &state.buffers, cfg.n_mocm, &mut state.rng.mocm)?;
            input = mixed.image;
            targets = mixed.labels;
            weights = mixed.reliability;
        }

        let out = net.forward(&state.student, input.view())?;
        let (loss, d_logits) = weighted_ce_loss(&out.logits, &targets, &weights)?;
        let g = net.backward(&state.student, &out.tape, &d_logits)?;
        grads.add_scaled(&g, inv_batch);
        stats.ce_loss += loss as f64 / batch.len() as f64;
    }
    let (lr_fe, lr_cls) = (
        cfg.lr_for(ParamGroup::FeatureExtractor, iter)?,
        cfg.lr_for(ParamGroup::Classifier, iter)?,
    );
    state.student_opt.step(&mut state.student, &grads, |g| match g {
        ParamGroup::Classifier => lr_cls,
        _ => lr_fe,
    })?;
    if !state.student.is_finite() {
        return Err(Error::Numeric(format!("student diverged at iteration {iter}")));
    }
    state.iteration += 1;
    if let Some(teacher) = state.teacher.as_mut() {
        stats.ema_updated = teacher.ema_update(&state.student, state.iteration)?;
    }
    stats.mean_reliability = rel_sum / frames.len() as f64;
    stats.buffer_occupancy = state.buffers.occupancy();
    Ok(stats)
}

/// Draws the next training batch from the target set, cropping if configured.
pub fn next_batch<N: SegNet>(net: &N, state: &mut RunState, dataset: &Dataset, cfg: &TrainConfig) -> Vec<Image> {
    (0..cfg.batch_size)
        .map(|_| {
            let idx = state.sampler.next(&mut state.rng.data);
            let image = &dataset.items[idx].image;
            match cfg.crop_size {
                Some(size) => random_crop(image, size, net.stride(), &mut state.rng.data),
                None => image.clone(),
            }
        })
        .collect()
}
