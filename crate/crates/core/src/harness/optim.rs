use crate::numeric::ParamStore;

/// Adam with decoupled weight decay, applied to the gradients held in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data().to_vec();
            for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *x -= self.lr * (update + self.weight_decay * *x);
            }
        }
    }
}
