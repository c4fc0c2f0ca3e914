//! Teacher path: exponential moving average of the student and pseudo-labels from clean inputs.

use ndarray::{Array2, Array3, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{LogitMap, NetworkParams};

/// Class value marking pixels excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    /// Weight of the student in each update, in `(0, 1]`.
    pub smoothing: f64,
    /// Minimum number of iterations between updates.
    pub update_period: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            smoothing: 1e-3,
            update_period: 100,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::Config(format!("EMA smoothing must lie in (0, 1], got {}", self.smoothing)));
        }
        if self.update_period == 0 {
            return Err(Error::Config("EMA update period must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<T> {
    pub params: NetworkParams<T>,
    pub config: EmaConfig,
    pub last_update_iter: u64,
}

impl<T: NdFloat> TeacherState<T> {
    pub fn new(params: NetworkParams<T>, config: EmaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params,
            config,
            last_update_iter: 0,
        })
    }

    pub fn is_due(&self, iter: u64) -> bool {
        iter.saturating_sub(self.last_update_iter) >= self.config.update_period
    }

    /// `θ_T ← (1−λ)·θ_T + λ·θ_S` when an update is due; returns whether one happened.
    pub fn ema_update(&mut self, student: &NetworkParams<T>, iter: u64) -> Result<bool> {
        self.params.check_same_structure(student)?;
        if !self.is_due(iter) {
            return Ok(false);
        }
        let lambda = T::from(self.config.smoothing).unwrap();
        let keep = T::one() - lambda;
        for (t, s) in self.params.entries_mut().iter_mut().zip(student.entries()) {
            ndarray::Zip::from(&mut t.value)
                .and(&s.value)
                .for_each(|t, &s| *t = keep * *t + lambda * s);
        }
        self.last_update_iter = iter;
        Ok(true)
    }
}

/// Per-pixel class indices; the one-hot view is available through [`PseudoLabelMap::one_hot`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub classes: Array2<u8>,
    pub num_classes: usize,
}

impl PseudoLabelMap {
    pub fn new(classes: Array2<u8>, num_classes: usize) -> Self {
        Self { classes, num_classes }
    }

    pub fn height(&self) -> usize {
        self.classes.nrows()
    }

    pub fn width(&self) -> usize {
        self.classes.ncols()
    }

    pub fn one_hot(&self) -> Array3<u8> {
        let (h, w) = self.classes.dim();
        let mut out = Array3::zeros((h, w, self.num_classes));
        for ((y, x), &c) in self.classes.indexed_iter() {
            if (c as usize) < self.num_classes {
                out[[y, x, c as usize]] = 1;
            }
        }
        out
    }
}

/// Maximum softmax probability per pixel.
pub type ConfidenceMap = Array2<f64>;

/// Arg-max pseudo-labels (ties go to the lowest class index) and their softmax confidence.
pub fn pseudo_labels<T: NdFloat>(logits: &LogitMap<T>) -> Result<(PseudoLabelMap, ConfidenceMap)> {
    logits.check_finite("logits")?;
    let (h, w, c) = (logits.height(), logits.width(), logits.channels());
    let mut classes = Array2::<u8>::zeros((h, w));
    let mut conf = Array2::<f64>::zeros((h, w));
    for (p, row) in logits.matrix().outer_iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = row[0].to_f64().unwrap();
        for k in 1..c {
            let v = row[k].to_f64().unwrap();
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        let denom: f64 = row.iter().map(|v| (v.to_f64().unwrap() - best_v).exp()).sum();
        classes[[p / w, p % w]] = best as u8;
        conf[[p / w, p % w]] = 1.0 / denom;
    }
    Ok((PseudoLabelMap::new(classes, c), conf))
}
