//! AdamW with decoupled weight decay and per-prefix parameter groups.

use super::param::{GradStore, ParamId, ParamStore};
use super::{Real, Tensor};

/// Hyperparameters for one prefix-matched group.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    /// Name prefix this group applies to; "" matches everything.
    pub prefix: String,
    pub lr: Real,
    pub weight_decay: Real,
}

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// Longest matching prefix wins; a catch-all "" group must be present.
    pub groups: Vec<ParamGroup>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups: vec![ParamGroup { prefix: String::new(), lr: 1e-4, weight_decay: 1e-4 }],
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        assert!(
            cfg.groups.iter().any(|g| g.prefix.is_empty()),
            "AdamW needs a catch-all group"
        );
        AdamW {
            cfg,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: 0,
        }
    }

    fn group_for<'a>(cfg: &'a AdamWConfig, name: &str) -> &'a ParamGroup {
        cfg.groups
            .iter()
            .filter(|g| name.starts_with(&g.prefix))
            .max_by_key(|g| g.prefix.len())
            .expect("catch-all group")
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Scale every group's learning rate in place. Moment state is kept, so
    /// this implements step-decay schedules.
    pub fn scale_lr(&mut self, factor: Real) {
        assert!(factor > 0.0);
        for g in &mut self.cfg.groups {
            g.lr *= factor;
        }
    }

    /// One update over every trainable parameter with a gradient, in
    /// insertion order. Decay is decoupled: θ ← θ·(1 − lr·wd) before the
    /// bias-corrected moment update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let eps = self.cfg.eps;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<ParamId>>() {
            if !store.trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let group = Self::group_for(&self.cfg, store.name(id)).clone();
            if self.m[id.0].is_none() {
                self.m[id.0] = Some(Tensor::zeros(g.shape()));
                self.v[id.0] = Some(Tensor::zeros(g.shape()));
            }
            let m = self.m[id.0].as_mut().unwrap().data_mut();
            let v = self.v[id.0].as_mut().unwrap().data_mut();
            let theta = store.value_mut(id).data_mut();
            let decay = 1.0 - group.lr * group.weight_decay;
            for i in 0..theta.len() {
                let gi = g.data()[i];
                theta[i] *= decay;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                theta[i] -= group.lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
