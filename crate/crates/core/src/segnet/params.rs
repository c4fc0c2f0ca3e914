use std::fmt;

use ndarray::{ArrayD, ArrayView1, ArrayView2, Ix1, Ix2, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FeatureExtractor,
    Classifier,
    MetricHead,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::FeatureExtractor => "feature_extractor",
            ParamGroup::Classifier => "classifier",
            ParamGroup::MetricHead => "metric_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "feature_extractor" => Some(ParamGroup::FeatureExtractor),
            "classifier" => Some(ParamGroup::Classifier),
            "metric_head" => Some(ParamGroup::MetricHead),
            _ => None,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<T>,
}

/// Named, ordered parameter arrays. Order is fixed by the architecture that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: NdFloat> NetworkParams<T> {
    pub fn new(entries: Vec<ParamEntry<T>>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub(crate) fn matrix(&self, idx: usize) -> ArrayView2<'_, T> {
        self.entries[idx]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("weight entries are 2-d")
    }

    pub(crate) fn vector(&self, idx: usize) -> ArrayView1<'_, T> {
        self.entries[idx]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias entries are 1-d")
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: ArrayD::zeros(e.value.raw_dim()),
                })
                .collect(),
        }
    }

    /// Same names, groups and shapes, in the same order.
    pub fn check_same_structure(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(shape_err!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            ));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.group != b.group || a.value.shape() != b.value.shape() {
                return Err(shape_err!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                ));
            }
        }
        Ok(())
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.scaled_add(scale, &b.value);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for e in &mut self.entries {
            e.value.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: NdFloat>(&self) -> NetworkParams<U> {
        NetworkParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.mapv(|v| U::from(v).expect("float cast")),
                })
                .collect(),
        }
    }

    /// Flat view of every scalar, in entry order.
    pub fn flat(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|e| e.value.iter().copied())
            .collect()
    }

    /// Mutable access to the `index`-th scalar in [`NetworkParams::flat`] order.
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut T {
        for e in &mut self.entries {
            if index < e.value.len() {
                return e.value.iter_mut().nth(index).expect("index in range");
            }
            index -= e.value.len();
        }
        panic!("scalar index out of range");
    }
}
