use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction. Parameters whose gradient is `None` in a step
/// are left untouched and do not advance their moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.values().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: store.values().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
