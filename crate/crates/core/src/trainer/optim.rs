//! Adam with decoupled weight decay and global-norm clipping.

use ndarray::Array2;

use crate::detector::{ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    backbone_mult: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, backbone_mult: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Self { lr, backbone_mult, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update; `grads[i]` belongs to parameter `i`, `None` meaning zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>], lr_factor: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<ParamId> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let lr = self.lr * lr_factor * if param.group == ParamGroup::Backbone { self.backbone_mult } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if let Some(g) = &grads[i] {
                m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
                v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            } else {
                m.mapv_inplace(|m| self.beta1 * m);
                v.mapv_inplace(|v| self.beta2 * v);
            }
            let decay = 1.0 - lr * self.weight_decay;
            ndarray::Zip::from(&mut param.value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p = *p * decay - lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Array2<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
