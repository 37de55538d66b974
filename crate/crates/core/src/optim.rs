//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplier on the learning rate of [`ParamKind::Arch`] entries.
    pub arch_lr_scale: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(weight_decay: f64, arch_lr_scale: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, arch_lr_scale, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moments are kept in f64 whatever the parameter type.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (rate, decay) = match store.kind(*id) {
                ParamKind::Weight => (lr, self.weight_decay),
                ParamKind::Arch => (lr * self.arch_lr_scale, 0.0),
                ParamKind::Buffer => continue,
            };
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
            let w = store.get_mut(*id).data_mut();
            for i in 0..g.len() {
                let gi = g[i].to_f64_lossless();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let mut wi = w[i].to_f64_lossless();
                wi -= rate * decay * wi;
                wi -= rate * mh / (vh.sqrt() + self.eps);
                w[i] = T::lit(wi);
            }
        }
    }
}

/// Cosine annealing from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic_and_skips_decay_on_arch() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamKind::Weight, Tensor::scalar(5.0));
        let a = store.add("a", ParamKind::Arch, Tensor::scalar(5.0));
        let mut opt = AdamW::new(0.0, 1.0);
        for _ in 0..2000 {
            let gw = 2.0 * store.get(w).item();
            let ga = 2.0 * store.get(a).item();
            opt.step(&mut store, &[(w, vec![gw]), (a, vec![ga])], 0.05);
        }
        assert!(store.get(w).item().abs() < 1e-2);

        // zero gradient: only decay moves the weight
        let mut opt = AdamW::new(0.5, 1.0);
        let before = (store.get(w).item(), store.get(a).item());
        opt.step(&mut store, &[(w, vec![0.0]), (a, vec![0.0])], 0.1);
        assert!((store.get(w).item() - before.0 * 0.95).abs() < 1e-12);
        assert_eq!(store.get(a).item(), before.1);
    }
}
