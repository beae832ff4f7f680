//! Decoupled-weight-decay Adam and learning-rate schedules.

use super::store::ParamStore;
use super::tensor::Mat;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store.values().iter().map(|v| Mat::zeros(v.rows, v.cols)).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, value) in store.values_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            // biases, norm gains and scalars (single-row tensors) are not decayed
            let wd = if value.rows > 1 { self.weight_decay } else { 0.0 };
            for j in 0..value.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                let p = &mut value.data[j];
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *p);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Sums per-sample gradients into `acc`.
pub fn accumulate(acc: &mut Option<Vec<Mat>>, grads: Vec<Mat>) {
    match acc {
        Some(a) => {
            for (x, g) in a.iter_mut().zip(&grads) {
                x.add_assign(g);
            }
        }
        None => *acc = Some(grads),
    }
}

pub fn scale_all(grads: &mut [Mat], s: f64) {
    for g in grads.iter_mut() {
        for x in g.data.iter_mut() {
            *x *= s;
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
