use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
/// index and persist across steps.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    lr_scale: Vec<f32>,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl AdamW {
    pub fn new(lr: f32, betas: (f32, f32), weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&betas.0) || !(0.0..1.0).contains(&betas.1) {
            return Err(invalid(format!("betas must lie in [0, 1), got {betas:?}")));
        }
        if weight_decay < 0.0 {
            return Err(invalid("weight decay must be non-negative"));
        }
        Ok(Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            lr_scale: Vec::new(),
            moments: Vec::new(),
        })
    }

    /// Multiplies the learning rate (and with it the decay) of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f32) -> Result<()> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(invalid(format!("learning rate scale must be positive, got {scale}")));
        }
        if self.lr_scale.len() <= id.index() {
            self.lr_scale.resize(id.index() + 1, 1.0);
        }
        self.lr_scale[id.index()] = scale;
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for id in store.ids() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            let lr = self.lr * self.lr_scale.get(id.index()).copied().unwrap_or(1.0);
            let decay = 1.0 - lr * self.weight_decay;
            let grad = p.grad.data();
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
