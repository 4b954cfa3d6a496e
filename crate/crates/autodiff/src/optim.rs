use crate::{AutodiffError, ParamStore, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip applied before the update; off by default.
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `store` and clears the grads.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        if let Some((index, e)) = store.entries().iter().enumerate().find(|(_, e)| e.grad.is_none()) {
            return Err(AutodiffError::MissingGrad { index, name: e.name.clone() });
        }
        if self.first.is_empty() {
            self.first = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != store.len() {
            return Err(AutodiffError::Contract(format!(
                "optimizer state tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = store.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let g = e.grad.take().expect("checked above");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &gv), mv), vv) in e.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gv = gv * clip;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
