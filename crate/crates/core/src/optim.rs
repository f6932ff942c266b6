//! RMSProp with per-group learning-rate multipliers and a polynomial
//! learning-rate decay.

use crate::params::{ParamGroup, ParamStore};

pub const RMSPROP_DECAY: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// `lr(step) = base_lr * (1 - step / total_steps) ^ power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub power: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            base_lr,
            total_steps,
            power: 1.0,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let frac = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.base_lr * (1.0 - frac).powf(self.power)
    }
}

#[derive(Debug, Clone)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    pub backbone_multiplier: f64,
    pub main_multiplier: f64,
    square_avg: Vec<Vec<f64>>,
}

impl RmsProp {
    /// Zero-initialised state for every parameter in `store`.
    pub fn new(store: &ParamStore) -> Self {
        RmsProp {
            decay: RMSPROP_DECAY,
            eps: RMSPROP_EPS,
            backbone_multiplier: 0.1,
            main_multiplier: 1.0,
            square_avg: store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn multiplier(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone_multiplier,
            ParamGroup::Main => self.main_multiplier,
        }
    }

    pub fn square_avg(&self) -> &[Vec<f64>] {
        &self.square_avg
    }

    /// `v = decay * v + (1 - decay) * g^2; p -= lr * mult * g / (sqrt(v) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let (decay, eps) = (self.decay, self.eps);
        let mults = (self.backbone_multiplier, self.main_multiplier);
        for (p, v) in store.iter_mut().zip(self.square_avg.iter_mut()) {
            let m = match p.group {
                ParamGroup::Backbone => mults.0,
                ParamGroup::Main => mults.1,
            };
            let rate = lr * m;
            let grad = p.grad.data().to_vec();
            for ((w, g), s) in p.value.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                *s = decay * *s + (1.0 - decay) * g * g;
                *w -= rate * g / (s.sqrt() + eps);
            }
        }
    }
}
