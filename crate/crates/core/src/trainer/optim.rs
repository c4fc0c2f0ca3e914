use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::segnet::{NetworkParams, ParamGroup};

/// SGD with Nesterov momentum and L2 weight decay, in the usual deep-learning form:
/// `g ← ∇ + wd·θ; b ← μ·b + g; θ ← θ − lr·(g + μ·b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub buffers: NetworkParams<f32>,
}

impl Sgd {
    pub fn new(params: &NetworkParams<f32>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            buffers: params.zeros_like(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut NetworkParams<f32>,
        grads: &NetworkParams<f32>,
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        params.check_same_structure(grads)?;
        params.check_same_structure(&self.buffers)?;
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), b) in params
            .entries_mut()
            .iter_mut()
            .zip(grads.entries())
            .zip(self.buffers.entries_mut())
        {
            let lr = lr(p.group) as f32;
            Zip::from(&mut p.value)
                .and(&g.value)
                .and(&mut b.value)
                .for_each(|p, &g, b| {
                    let g = g + wd * *p;
                    *b = mu * *b + g;
                    *p -= lr * (g + mu * *b);
                });
        }
        Ok(())
    }
}

/// Adam over an arbitrary list of tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    #[serde(skip)]
    pub first: Vec<ArrayD<f32>>,
    #[serde(skip)]
    pub second: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: shapes.iter().map(|s| ArrayD::zeros(s.to_vec())).collect(),
            second: shapes.iter().map(|s| ArrayD::zeros(s.to_vec())).collect(),
        }
    }

    pub fn step(&mut self, lr: f64, params: Vec<ArrayViewMutD<'_, f32>>, grads: Vec<ArrayViewD<'_, f32>>) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(shape_err!(
                "Adam tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(shape_err!("Adam tensor shape {:?} vs grad {:?}", p.shape(), g.shape()));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let step_size = (lr / (1.0 - b1.powi(t))) as f32;
        let bias2 = (1.0 - b2.powi(t)).sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        for (((mut p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bias2 + eps);
            });
        }
        Ok(())
    }
}
