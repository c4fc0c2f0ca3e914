//! Segmentation network contract and the desk-scale `TinySeg` reference model.
//!
//! A segmentation network is a feature extractor followed by a classifier.
//! The metric head shares the classifier's layout and reads the extractor's
//! features, treating them as constants.

pub mod checkpoint;
pub mod layers;
mod params;

use ndarray::{Array2, ArrayD, ArrayView3, IxDyn, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use params::{NetworkParams, ParamEntry, ParamGroup};

use crate::error::{shape_err, Error, Result};
use crate::map::SpatialMap;
use layers::{affine, affine_backward, col2im3x3, im2col3x3, relu_backward_inplace, relu_inplace, Bilinear};

/// Extractor output at stride `s`: `(H/s)·(W/s) × D`.
pub type FeatureMap<T> = SpatialMap<T>;
/// Classifier scores upsampled to input resolution: `H·W × C`.
pub type LogitMap<T> = SpatialMap<T>;
/// Per-pixel metric embedding at input resolution: `H·W × N_f`.
pub type MetricFeatureMap<T> = SpatialMap<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub num_classes: usize,
    pub metric_dim: usize,
    /// Width of the hidden 1x1 layer in both the classifier and the metric head.
    pub head_hidden: usize,
    /// 3x3 conv + ReLU blocks; the last block's width is the feature dimension.
    pub blocks: Vec<ConvBlock>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            metric_dim: 128,
            head_hidden: 64,
            blocks: vec![
                ConvBlock { channels: 16, stride: 2 },
                ConvBlock { channels: 32, stride: 2 },
                ConvBlock { channels: 64, stride: 1 },
                ConvBlock { channels: 64, stride: 1 },
            ],
        }
    }
}

impl ArchConfig {
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }

    pub fn stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("at most 255 classes are supported".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("feature extractor needs at least one block".into()));
        }
        if self.feature_dim() < 8 {
            return Err(Error::Config(format!("feature dimension must be >= 8, got {}", self.feature_dim())));
        }
        if self.metric_dim < 2 {
            return Err(Error::Config(format!("metric dimension must be >= 2, got {}", self.metric_dim)));
        }
        if self.head_hidden == 0 || self.blocks.iter().any(|b| b.channels == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.blocks.iter().any(|b| b.stride != 1 && b.stride != 2) {
            return Err(Error::Config("block strides must be 1 or 2".into()));
        }
        Ok(())
    }
}

/// Activations retained by a segmentation forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct SegTape<T> {
    block_inputs: Vec<(usize, usize, usize)>,
    cols: Vec<Array2<T>>,
    block_outputs: Vec<Array2<T>>,
    hidden: Array2<T>,
    upsample: Bilinear,
    feature_hw: (usize, usize),
}

/// Activations retained by a metric-head forward pass.
#[derive(Debug, Clone)]
pub struct MetricTape<T> {
    input: Array2<T>,
    hidden: Array2<T>,
    upsample: Bilinear,
    feature_hw: (usize, usize),
}

pub struct SegOutput<T> {
    pub features: FeatureMap<T>,
    pub logits: LogitMap<T>,
    pub tape: SegTape<T>,
}

/// The contract every segmentation backbone plugged into training must satisfy.
pub trait SegNet {
    fn arch(&self) -> &ArchConfig;

    fn stride(&self) -> usize {
        self.arch().stride()
    }

    fn num_classes(&self) -> usize {
        self.arch().num_classes
    }

    fn init_network<T: NdFloat>(&self, seed: u64) -> NetworkParams<T>;

    fn init_metric_head<T: NdFloat>(&self, seed: u64) -> NetworkParams<T>;

    fn forward<T: NdFloat>(&self, params: &NetworkParams<T>, image: ArrayView3<T>) -> Result<SegOutput<T>>;

    /// Gradients of every extractor and classifier parameter given `d loss / d logits`.
    fn backward<T: NdFloat>(
        &self,
        params: &NetworkParams<T>,
        tape: &SegTape<T>,
        d_logits: &LogitMap<T>,
    ) -> Result<NetworkParams<T>>;

    fn forward_metric<T: NdFloat>(
        &self,
        metric_params: &NetworkParams<T>,
        features: &FeatureMap<T>,
        output_hw: (usize, usize),
    ) -> Result<(MetricFeatureMap<T>, MetricTape<T>)>;

    /// Gradients of the metric-head parameters only; nothing flows back into the features.
    fn backward_metric<T: NdFloat>(
        &self,
        metric_params: &NetworkParams<T>,
        tape: &MetricTape<T>,
        d_out: &MetricFeatureMap<T>,
    ) -> Result<NetworkParams<T>>;
}

/// Four 3x3 conv blocks (two at stride 2) feeding a two-layer 1x1 classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TinySeg {
    arch: ArchConfig,
}

impl TinySeg {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch })
    }

    fn classifier_index(&self) -> usize {
        2 * self.arch.blocks.len()
    }

    fn kaiming<T: NdFloat>(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> ArrayD<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let z: f64 = StandardNormal.sample(rng);
            T::from(z * std).unwrap()
        })
    }

    fn push_layer<T: NdFloat>(
        entries: &mut Vec<ParamEntry<T>>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) {
        entries.push(ParamEntry {
            name: format!("{prefix}.weight"),
            group,
            value: Self::kaiming(rng, fan_in, &[fan_in, fan_out]),
        });
        entries.push(ParamEntry {
            name: format!("{prefix}.bias"),
            group,
            value: ArrayD::zeros(IxDyn(&[fan_out])),
        });
    }

    fn check_image<T: NdFloat>(&self, image: &ArrayView3<T>) -> Result<()> {
        let (h, w, c) = image.dim();
        let s = self.stride();
        if c != 3 {
            return Err(shape_err!("expected 3 image channels, got {c}"));
        }
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(shape_err!("image {h}x{w} not divisible by network stride {s}"));
        }
        Ok(())
    }
}

impl SegNet for TinySeg {
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn init_network<T: NdFloat>(&self, seed: u64) -> NetworkParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut cin = 3;
        for (i, block) in self.arch.blocks.iter().enumerate() {
            Self::push_layer(
                &mut entries,
                &mut rng,
                &format!("feature_extractor.block{i}"),
                ParamGroup::FeatureExtractor,
                9 * cin,
                block.channels,
            );
            cin = block.channels;
        }
        let d = self.arch.feature_dim();
        let hid = self.arch.head_hidden;
        Self::push_layer(&mut entries, &mut rng, "classifier.hidden", ParamGroup::Classifier, d, hid);
        Self::push_layer(
            &mut entries,
            &mut rng,
            "classifier.out",
            ParamGroup::Classifier,
            hid,
            self.arch.num_classes,
        );
        NetworkParams::new(entries)
    }

    fn init_metric_head<T: NdFloat>(&self, seed: u64) -> NetworkParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let d = self.arch.feature_dim();
        let hid = self.arch.head_hidden;
        Self::push_layer(&mut entries, &mut rng, "metric_head.hidden", ParamGroup::MetricHead, d, hid);
        Self::push_layer(
            &mut entries,
            &mut rng,
            "metric_head.out",
            ParamGroup::MetricHead,
            hid,
            self.arch.metric_dim,
        );
        NetworkParams::new(entries)
    }

    fn forward<T: NdFloat>(&self, params: &NetworkParams<T>, image: ArrayView3<T>) -> Result<SegOutput<T>> {
        self.check_image(&image)?;
        let (h, w, _) = image.dim();
        let mut x = SpatialMap::from_hwc(image);
        let mut block_inputs = Vec::with_capacity(self.arch.blocks.len());
        let mut cols = Vec::with_capacity(self.arch.blocks.len());
        let mut block_outputs = Vec::with_capacity(self.arch.blocks.len());
        for (i, block) in self.arch.blocks.iter().enumerate() {
            block_inputs.push((x.height(), x.width(), x.channels()));
            let (col, ho, wo) = im2col3x3(&x, block.stride);
            let mut out = affine(&col.view(), &params.matrix(2 * i), &params.vector(2 * i + 1));
            relu_inplace(&mut out);
            x = SpatialMap::from_matrix(ho, wo, out.clone())?;
            cols.push(col);
            block_outputs.push(out);
        }
        let k = self.classifier_index();
        let feature_hw = (x.height(), x.width());
        let mut hidden = affine(&x.matrix().view(), &params.matrix(k), &params.vector(k + 1));
        relu_inplace(&mut hidden);
        let low = affine(&hidden.view(), &params.matrix(k + 2), &params.vector(k + 3));
        let upsample = Bilinear::new(feature_hw, (h, w));
        let logits = upsample.forward(&SpatialMap::from_matrix(feature_hw.0, feature_hw.1, low)?);
        Ok(SegOutput {
            features: x,
            logits,
            tape: SegTape {
                block_inputs,
                cols,
                block_outputs,
                hidden,
                upsample,
                feature_hw,
            },
        })
    }

    fn backward<T: NdFloat>(
        &self,
        params: &NetworkParams<T>,
        tape: &SegTape<T>,
        d_logits: &LogitMap<T>,
    ) -> Result<NetworkParams<T>> {
        if d_logits.channels() != self.arch.num_classes {
            return Err(shape_err!("logit gradient has {} channels", d_logits.channels()));
        }
        let mut grads = params.zeros_like();
        let k = self.classifier_index();
        let d_low = tape.upsample.backward(d_logits).into_matrix();
        let (d_hidden, gw, gb) = affine_backward(&tape.hidden.view(), &params.matrix(k + 2), &d_low, true);
        set_grad(&mut grads, k + 2, gw, gb);
        let mut d_hidden = d_hidden.expect("requested");
        relu_backward_inplace(&mut d_hidden, &tape.hidden);
        let features = tape.block_outputs.last().expect("at least one block");
        let (d_feat, gw, gb) = affine_backward(&features.view(), &params.matrix(k), &d_hidden, true);
        set_grad(&mut grads, k, gw, gb);
        let mut d_out = d_feat.expect("requested");
        for i in (0..self.arch.blocks.len()).rev() {
            relu_backward_inplace(&mut d_out, &tape.block_outputs[i]);
            let (d_col, gw, gb) = affine_backward(&tape.cols[i].view(), &params.matrix(2 * i), &d_out, i > 0);
            set_grad(&mut grads, 2 * i, gw, gb);
            if let Some(d_col) = d_col {
                let (ih, iw, ic) = tape.block_inputs[i];
                d_out = col2im3x3(&d_col, ih, iw, ic, self.arch.blocks[i].stride).into_matrix();
            }
        }
        debug_assert_eq!(tape.feature_hw.0 * tape.feature_hw.1, features.nrows());
        Ok(grads)
    }

    fn forward_metric<T: NdFloat>(
        &self,
        metric_params: &NetworkParams<T>,
        features: &FeatureMap<T>,
        output_hw: (usize, usize),
    ) -> Result<(MetricFeatureMap<T>, MetricTape<T>)> {
        let d = metric_params.matrix(0).nrows();
        if features.channels() != d {
            return Err(shape_err!(
                "metric head expects {d} feature channels, got {}",
                features.channels()
            ));
        }
        let input = features.matrix().clone();
        let mut hidden = affine(&input.view(), &metric_params.matrix(0), &metric_params.vector(1));
        relu_inplace(&mut hidden);
        let low = affine(&hidden.view(), &metric_params.matrix(2), &metric_params.vector(3));
        let feature_hw = (features.height(), features.width());
        let upsample = Bilinear::new(feature_hw, output_hw);
        let out = upsample.forward(&SpatialMap::from_matrix(feature_hw.0, feature_hw.1, low)?);
        Ok((
            out,
            MetricTape {
                input,
                hidden,
                upsample,
                feature_hw,
            },
        ))
    }

    fn backward_metric<T: NdFloat>(
        &self,
        metric_params: &NetworkParams<T>,
        tape: &MetricTape<T>,
        d_out: &MetricFeatureMap<T>,
    ) -> Result<NetworkParams<T>> {
        let mut grads = metric_params.zeros_like();
        let d_low = tape.upsample.backward(d_out).into_matrix();
        debug_assert_eq!(d_low.nrows(), tape.feature_hw.0 * tape.feature_hw.1);
        let (d_hidden, gw, gb) = affine_backward(&tape.hidden.view(), &metric_params.matrix(2), &d_low, true);
        set_grad(&mut grads, 2, gw, gb);
        let mut d_hidden = d_hidden.expect("requested");
        relu_backward_inplace(&mut d_hidden, &tape.hidden);
        let (_, gw, gb) = affine_backward(&tape.input.view(), &metric_params.matrix(0), &d_hidden, false);
        set_grad(&mut grads, 0, gw, gb);
        Ok(grads)
    }
}

fn set_grad<T: NdFloat>(grads: &mut NetworkParams<T>, idx: usize, gw: Array2<T>, gb: ndarray::Array1<T>) {
    let entries = grads.entries_mut();
    entries[idx].value = gw.into_dyn();
    entries[idx + 1].value = gb.into_dyn();
}
