use super::param::Param;
use super::Phase;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with learnable affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}
crate::impl_module!(BatchNorm { gamma, beta, running_mean, running_var });

pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
    phase: Phase,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::constant(vec![channels], 1.0),
            beta: Param::constant(vec![channels], 0.0),
            running_mean: Param::frozen(vec![channels], 0.0),
            running_var: Param::frozen(vec![channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> (Tensor, BatchNormCache) {
        let [n, c, h, w] = x.shape();
        debug_assert_eq!(c, self.channels());
        let plane = h * w;
        let count = n * plane;
        let (mean, var) = match phase {
            Phase::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in x.data().chunks(c * plane) {
                    for (ch, p) in s.chunks(plane).enumerate() {
                        mean[ch] += p.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for s in x.data().chunks(c * plane) {
                    for (ch, p) in s.chunks(plane).enumerate() {
                        var[ch] += p.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var)
            }
            Phase::Eval => (self.running_mean.value.clone(), self.running_var.value.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for (xs, ys) in xhat.data_mut().chunks_mut(c * plane).zip(y.data_mut().chunks_mut(c * plane)) {
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for (xv, yv) in xs[ch * plane..(ch + 1) * plane].iter_mut().zip(&mut ys[ch * plane..(ch + 1) * plane]) {
                    *xv = (*xv - mean[ch]) * inv_std[ch];
                    *yv = g * *xv + b;
                }
            }
        }
        let cache = BatchNormCache { xhat, inv_std, batch_mean: mean, batch_var: var, count, phase };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let [_, c, h, w] = dy.shape();
        let plane = h * w;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (gs, xs) in dy.data().chunks(c * plane).zip(cache.xhat.data().chunks(c * plane)) {
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (g, xh) in gs[r.clone()].iter().zip(&xs[r]) {
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * xh;
                }
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] += sum_dy[ch];
            self.gamma.grad[ch] += sum_dy_xhat[ch];
        }
        let m = cache.count as f64;
        let mut dx = dy.clone();
        for (ds, xs) in dx.data_mut().chunks_mut(c * plane).zip(cache.xhat.data().chunks(c * plane)) {
            for ch in 0..c {
                let k = self.gamma.value[ch] * cache.inv_std[ch];
                let r = ch * plane..(ch + 1) * plane;
                for (d, xh) in ds[r.clone()].iter_mut().zip(&xs[r]) {
                    *d = match cache.phase {
                        Phase::Train => k * (*d - sum_dy[ch] / m - xh * sum_dy_xhat[ch] / m),
                        Phase::Eval => k * *d,
                    };
                }
            }
        }
        dx
    }

    /// Folds the batch statistics of a training-mode forward into the running estimates.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        if cache.phase != Phase::Train {
            return;
        }
        let unbias = if cache.count > 1 { cache.count as f64 / (cache.count - 1) as f64 } else { 1.0 };
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * cache.batch_mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * cache.batch_var[ch] * unbias;
        }
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Gradient through a leaky ReLU given its *output* (sign is preserved).
pub fn leaky_relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v < 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
