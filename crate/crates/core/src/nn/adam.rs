use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{DenseNet, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear decay `lr0 · max(1 − epoch/total, floor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub total_epochs: usize,
    pub floor: f64,
}

impl LrSchedule {
    pub fn new(lr0: f64, total_epochs: usize) -> Self {
        Self {
            lr0,
            total_epochs,
            floor: 1e-2,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let frac = 1.0 - epoch as f64 / self.total_epochs.max(1) as f64;
        self.lr0 * frac.max(self.floor)
    }
}

/// First and second moments for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        let zeros = Gradients::zeros_like(net).layers;
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update of `net` in place.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[l];
            let (mw, mb) = &mut self.m[l];
            let (vw, vb) = &mut self.v[l];
            Zip::from(&mut layer.w)
                .and(mw)
                .and(vw)
                .and(gw)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.b)
                .and(mb)
                .and(vb)
                .and(gb)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}
