//! AdamW with decoupled weight decay, plus the warmup+cosine schedule used by
//! the language-model stages.

use super::nn::ParamStore;
use super::{Arr, Grads};

pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step_count: u64,
    m: Vec<Option<Arr>>,
    v: Vec<Option<Arr>>,
}

impl AdamW {
    pub fn new(n_slots: usize, weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: (0..n_slots).map(|_| None).collect(),
            v: (0..n_slots).map(|_| None).collect(),
        }
    }

    /// One update over every slot that has a gradient and is marked trainable.
    /// Decay is decoupled and applies only to slots registered with decay=true.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, trainable: &[bool], lr: f32) {
        self.step_count += 1;
        let t = self.step_count as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for slot in 0..store.len() {
            if !trainable[slot] {
                continue;
            }
            let Some(g) = grads.slots[slot].as_ref() else { continue };
            if self.m[slot].is_none() {
                self.m[slot] = Some(Arr::zeros(g.raw_dim()));
                self.v[slot] = Some(Arr::zeros(g.raw_dim()));
            }
            let m = self.m[slot].as_mut().unwrap();
            let v = self.v[slot].as_mut().unwrap();
            m.zip_mut_with(g, |m, &gi| *m = self.beta1 * *m + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |v, &gi| *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi);
            let decay = if store.decays(slot) { self.weight_decay } else { 0.0 };
            let (beps, b1, b2) = (self.eps, bc1, bc2);
            store.update_in_place(slot, |p| {
                ndarray::Zip::from(&mut *p)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|p, &m, &v| {
                        let mhat = m / b1;
                        let vhat = v / b2;
                        *p -= lr * (mhat / (vhat.sqrt() + beps) + decay * *p);
                    });
            });
        }
    }
}

/// Learning-rate schedule. `CosineWarmup` ramps linearly over the warmup steps
/// then follows a half cosine down to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    CosineWarmup { warmup_steps: usize, total_steps: usize },
}

impl Schedule {
    pub fn cosine(warmup_frac: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_frac * total_steps as f64).round() as usize;
        Schedule::CosineWarmup { warmup_steps, total_steps }
    }

    /// Multiplier for the base lr at 0-indexed step `t`.
    pub fn factor(&self, t: usize) -> f32 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::CosineWarmup { warmup_steps, total_steps } => {
                if warmup_steps > 0 && t < warmup_steps {
                    (t + 1) as f32 / warmup_steps as f32
                } else {
                    let total = total_steps.max(warmup_steps + 1);
                    let progress = (t - warmup_steps) as f32 / (total - warmup_steps) as f32;
                    0.5 * (1.0 + (std::f32::consts::PI * progress.min(1.0)).cos())
                }
            }
        }
    }

    pub fn warmup_steps(&self) -> usize {
        match *self {
            Schedule::Constant => 0,
            Schedule::CosineWarmup { warmup_steps, .. } => warmup_steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_step_count_is_rounded_fraction() {
        let s = Schedule::cosine(0.03, 1000);
        assert_eq!(s.warmup_steps(), 30);
        let s = Schedule::cosine(0.03, 155);
        assert_eq!(s.warmup_steps(), (0.03f64 * 155.0).round() as usize);
    }

    #[test]
    fn cosine_decays_to_zero() {
        let s = Schedule::cosine(0.1, 100);
        assert!(s.factor(0) < s.factor(9));
        assert!((s.factor(9) - 1.0).abs() < 1e-6);
        assert!(s.factor(99) < 0.01);
    }
}
