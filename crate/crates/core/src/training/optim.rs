use ndarray::Zip;

use super::TrainConfig;
use crate::model::checkpoint::Moments;
use crate::model::{ModelConfig, Weights};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub moments: Moments,
    pub step: u64,
}

impl AdamW {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            moments: Moments {
                first: Weights::zeros(cfg),
                second: Weights::zeros(cfg),
            },
            step: 0,
        }
    }

    pub fn update(&mut self, w: &mut Weights<f32>, g: &Weights<f32>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.adam_eps);
        let grads = g.tensors();
        let Moments { first, second } = &mut self.moments;
        for (((mut wt, (name, gt)), mut mt), mut vt) in w
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(first.tensors_mut())
            .zip(second.tensors_mut())
        {
            let decay = if name.ends_with(".w") { cfg.weight_decay } else { 0.0 };
            Zip::from(&mut wt)
                .and(&gt)
                .and(&mut mt)
                .and(&mut vt)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m as f64 / c1;
                    let vhat = *v as f64 / c2;
                    let wd = *w as f64;
                    *w = (wd - lr * (mhat / (vhat.sqrt() + eps) + decay * wd)) as f32;
                });
        }
    }
}
