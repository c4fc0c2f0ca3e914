use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rng_stream, streams, Adam, Sgd, TrainConfig};
use crate::error::{Error, Result};
use crate::metric::{ProxyBank, ThresholdState};
use crate::mocm::{PatchBuffers, PatchRecord};
use crate::segnet::checkpoint::Archive;
use crate::segnet::{NetworkParams, SegNet};
use crate::teacher::{EmaConfig, TeacherState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub data: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub mocm: ChaCha8Rng,
    pub metric: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: rng_stream(seed, streams::DATA),
            augment: rng_stream(seed, streams::AUGMENT),
            mocm: rng_stream(seed, streams::MOCM),
            metric: rng_stream(seed, streams::METRIC),
        }
    }
}

/// Visits every index once per epoch in a freshly shuffled order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    len: usize,
}

impl BatchSampler {
    pub fn new(len: usize) -> Self {
        Self {
            order: Vec::new(),
            cursor: 0,
            len,
        }
    }

    pub fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Everything an adaptation run needs to continue exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub iteration: u64,
    pub student: NetworkParams<f32>,
    /// `None` when the teacher is the student itself.
    pub teacher: Option<TeacherState<f32>>,
    pub metric: NetworkParams<f32>,
    pub proxies: ProxyBank<f32>,
    pub thresholds: ThresholdState,
    /// Class-balanced filter on the student's pseudo-labels, used by the quantile baseline.
    pub supervision: Option<ThresholdState>,
    pub buffers: PatchBuffers,
    pub student_opt: Sgd,
    pub metric_opt: Adam,
    pub sampler: BatchSampler,
    pub rng: RngStreams,
}

#[derive(Serialize, Deserialize)]
struct PatchMeta {
    class: u8,
    origin: (usize, usize),
    mean_distance: f64,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    iteration: u64,
    teacher: Option<(EmaConfig, u64)>,
    thresholds: ThresholdState,
    supervision: Option<ThresholdState>,
    buffer_capacity: usize,
    num_classes: usize,
    patches: Vec<Vec<PatchMeta>>,
    sgd: (f32, f32),
    adam: Adam,
    sampler: BatchSampler,
    rng: RngStreams,
}

impl RunState {
    /// Fresh state seeded from a source model.
    pub fn new<N: SegNet>(net: &N, source: &NetworkParams<f32>, dataset_len: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let probe = net.init_network::<f32>(0);
        probe.check_same_structure(source)?;
        let nc = net.num_classes();
        let mut init = rng_stream(cfg.seed, streams::INIT);
        let _network_seed: u64 = init.gen();
        let metric_seed: u64 = init.gen();
        let proxy_seed: u64 = init.gen();
        let metric = net.init_metric_head::<f32>(metric_seed);
        let proxies = ProxyBank::<f32>::init(nc, net.arch().metric_dim, proxy_seed);
        let mut shapes: Vec<Vec<usize>> = metric.entries().iter().map(|e| e.value.shape().to_vec()).collect();
        shapes.push(proxies.proxies.shape().to_vec());
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let teacher = if cfg.flags.mt {
            Some(TeacherState::new(source.clone(), cfg.ema)?)
        } else {
            None
        };
        let supervision = match cfg.supervision_quantile {
            Some(q) if q < 1.0 => Some(ThresholdState::new(nc, cfg.threshold_momentum, q)?),
            _ => None,
        };
        Ok(Self {
            iteration: 0,
            student: source.clone(),
            teacher,
            metric,
            proxies,
            thresholds: ThresholdState::new(nc, cfg.threshold_momentum, cfg.metric_quantile)?,
            supervision,
            buffers: PatchBuffers::new(nc, cfg.buffer_capacity)?,
            student_opt: Sgd::new(source, cfg.momentum, cfg.weight_decay),
            metric_opt: Adam::new(&shape_refs),
            sampler: BatchSampler::new(dataset_len),
            rng: RngStreams::new(cfg.seed),
        })
    }

    /// Parameters producing pseudo-labels and evaluated at the end of the run.
    pub fn teacher_params(&self) -> &NetworkParams<f32> {
        self.teacher.as_ref().map_or(&self.student, |t| &t.params)
    }

    pub fn to_archive(&self) -> Archive {
        let patches = (0..self.buffers.num_classes())
            .map(|c| {
                self.buffers
                    .queue(c)
                    .iter()
                    .map(|p| PatchMeta {
                        class: p.class,
                        origin: p.origin,
                        mean_distance: p.mean_distance,
                    })
                    .collect()
            })
            .collect();
        let meta = StateMeta {
            kind: "run_state".into(),
            iteration: self.iteration,
            teacher: self.teacher.as_ref().map(|t| (t.config, t.last_update_iter)),
            thresholds: self.thresholds.clone(),
            supervision: self.supervision.clone(),
            buffer_capacity: self.buffers.capacity(),
            num_classes: self.buffers.num_classes(),
            patches,
            sgd: (self.student_opt.momentum, self.student_opt.weight_decay),
            adam: self.metric_opt.clone(),
            sampler: self.sampler.clone(),
            rng: self.rng.clone(),
        };
        let mut ar = Archive::new(serde_json::to_value(&meta).expect("state metadata serialises"));
        ar.push_params("student.", &self.student);
        if let Some(t) = &self.teacher {
            ar.push_params("teacher.", &t.params);
        }
        ar.push_params("metric.", &self.metric);
        ar.push_params("sgd.", &self.student_opt.buffers);
        push_array(&mut ar, "proxies", &self.proxies.proxies.clone().into_dyn());
        for (i, (m, v)) in self.metric_opt.first.iter().zip(&self.metric_opt.second).enumerate() {
            push_array(&mut ar, &format!("adam.first.{i}"), m);
            push_array(&mut ar, &format!("adam.second.{i}"), v);
        }
        for c in 0..self.buffers.num_classes() {
            for (i, p) in self.buffers.queue(c).iter().enumerate() {
                let key = format!("patch.{c}.{i}");
                push_array(&mut ar, &format!("{key}.image"), &p.image.clone().into_dyn());
                push_array(&mut ar, &format!("{key}.labels"), &p.labels.mapv(f32::from).into_dyn());
                push_array(&mut ar, &format!("{key}.reliability"), &p.reliability.clone().into_dyn());
                push_array(
                    &mut ar,
                    &format!("{key}.mask"),
                    &p.mask.mapv(|m| if m { 1.0 } else { 0.0 }).into_dyn(),
                );
            }
        }
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(ar.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("run state metadata: {e}")))?;
        if meta.kind != "run_state" {
            return Err(Error::Checkpoint(format!("expected a run state, found `{}`", meta.kind)));
        }
        let student = ar.params("student.")?;
        let teacher = match meta.teacher {
            Some((config, last)) => Some(TeacherState {
                params: ar.params("teacher.")?,
                config,
                last_update_iter: last,
            }),
            None => None,
        };
        let sgd_buffers = ar.params("sgd.")?;
        student.check_same_structure(&sgd_buffers)?;
        let proxies = ProxyBank {
            proxies: read_array(ar, "proxies")?
                .into_dimensionality()
                .map_err(|e| Error::Checkpoint(format!("proxies: {e}")))?,
        };
        let mut adam = meta.adam;
        let metric = ar.params("metric.")?;
        let tensors = metric.len() + 1;
        for i in 0..tensors {
            adam.first.push(read_array(ar, &format!("adam.first.{i}"))?);
            adam.second.push(read_array(ar, &format!("adam.second.{i}"))?);
        }
        let mut buffers = PatchBuffers::new(meta.num_classes, meta.buffer_capacity)?;
        for (c, queue) in meta.patches.into_iter().enumerate() {
            for (i, pm) in queue.into_iter().enumerate() {
                let key = format!("patch.{c}.{i}");
                let dims = |a: ArrayD<f32>| -> Result<Array2<f32>> {
                    a.into_dimensionality().map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
                };
                let image: Array3<f32> = read_array(ar, &format!("{key}.image"))?
                    .into_dimensionality()
                    .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))?;
                let labels = dims(read_array(ar, &format!("{key}.labels"))?)?.mapv(|v| v as u8);
                let reliability = dims(read_array(ar, &format!("{key}.reliability"))?)?;
                let mask = dims(read_array(ar, &format!("{key}.mask"))?)?.mapv(|v| v != 0.0);
                buffers.push_unchecked(PatchRecord {
                    image,
                    labels,
                    reliability,
                    mask,
                    class: pm.class,
                    origin: pm.origin,
                    mean_distance: pm.mean_distance,
                });
            }
        }
        Ok(Self {
            iteration: meta.iteration,
            student,
            teacher,
            metric,
            proxies,
            thresholds: meta.thresholds,
            supervision: meta.supervision,
            buffers,
            student_opt: Sgd {
                momentum: meta.sgd.0,
                weight_decay: meta.sgd.1,
                buffers: sgd_buffers,
            },
            metric_opt: adam,
            sampler: meta.sampler,
            rng: meta.rng,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn push_array(ar: &mut Archive, name: &str, a: &ArrayD<f32>) {
    ar.push(name, a.shape().to_vec(), a.iter().copied().collect());
}

fn read_array(ar: &Archive, name: &str) -> Result<ArrayD<f32>> {
    let a = ar.require(name)?;
    ArrayD::from_shape_vec(IxDyn(&a.shape), a.data.clone()).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
}
