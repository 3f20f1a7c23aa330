//! AdamW with decoupled weight decay and the epoch learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{ParamStore, RateGroup};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning rate in effect for each group during one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub fresh: f64,
    pub pretrained: f64,
}

impl GroupRates {
    pub fn uniform(rate: f64) -> Self {
        GroupRates {
            fresh: rate,
            pretrained: rate,
        }
    }

    pub fn for_group(&self, group: RateGroup) -> f64 {
        match group {
            RateGroup::Fresh => self.fresh,
            RateGroup::Pretrained => self.pretrained,
        }
    }
}

/// Moment accumulators, one pair per parameter slot of the store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update to every trainable parameter using the gradients
    /// accumulated in `store`. A non-finite gradient aborts before any
    /// parameter is modified.
    pub fn step(&mut self, store: &mut ParamStore, rates: GroupRates) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::invalid("adamw", "optimizer state does not match parameter table"));
        }
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.trainable && !p.grad.is_finite())
        {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let lr = rates.for_group(p.group);
            let decay = if p.decays() { weight_decay } else { 0.0 };
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let g = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                *w -= lr * decay * *w;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by step decay, evaluated per (1-based) epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Schedule {
    /// Multiplier on a group's base rate during `epoch`. Warmup ramps
    /// linearly from 1/100 of the base rate; each decay epoch already
    /// reached divides by `decay_factor`.
    pub fn multiplier(&self, epoch: usize) -> f64 {
        let warm = if self.warmup_epochs > 0 && epoch <= self.warmup_epochs {
            let frac = (epoch.saturating_sub(1)) as f64 / self.warmup_epochs as f64;
            0.01 + 0.99 * frac
        } else {
            1.0
        };
        let drops = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        warm / self.decay_factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn single(w: f64, g: f64, kind: ParamKind) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![w]), kind);
        store.accumulate_grad(id, &[g]);
        store
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let mut store = single(1.0, 1.0, ParamKind::Bias);
        let cfg = AdamWConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, GroupRates::uniform(lr)).unwrap();
        // Bias-corrected first moments for a single step.
        let mhat = ((1.0 - b1) * 1.0) / (1.0 - b1);
        let vhat = ((1.0 - b2) * 1.0) / (1.0 - b2);
        let want = 1.0 - lr * mhat / (vhat.sqrt() + eps);
        assert!((store.value(store.id("w").unwrap()).item() - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = single(0.7, 0.0, ParamKind::Weight);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, GroupRates::uniform(0.1)).unwrap();
        assert_eq!(store.value(store.id("w").unwrap()).item(), 0.7);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let (w, lr, d) = (2.0, 0.1, 0.3);
        let mut store = single(w, 0.0, ParamKind::Weight);
        let cfg = AdamWConfig {
            weight_decay: d,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, GroupRates::uniform(lr)).unwrap();
        assert!((store.value(store.id("w").unwrap()).item() - w * (1.0 - lr * d)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_parameters() {
        let mut store = single(1.0, f64::NAN, ParamKind::Weight);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, GroupRates::uniform(0.1)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(opt.step, 0);
        assert_eq!(store.value(store.id("w").unwrap()).item(), 1.0);
    }

    #[test]
    fn group_rates_are_selected_per_parameter() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(vec![1.0]), ParamKind::Bias);
        let b = store.add("b", Tensor::from_vec(vec![1.0]), ParamKind::Bias);
        store.set_group("b", RateGroup::Pretrained);
        store.accumulate_grad(a, &[1.0]);
        store.accumulate_grad(b, &[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, GroupRates { fresh: 0.1, pretrained: 0.01 }).unwrap();
        let da = 1.0 - store.value(a).item();
        let db = 1.0 - store.value(b).item();
        assert!((da / db - 10.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_warms_up_then_steps_down() {
        let s = Schedule {
            warmup_epochs: 5,
            decay_epochs: vec![35, 45],
            decay_factor: 10.0,
        };
        assert!((s.multiplier(1) - 0.01).abs() < 1e-15);
        assert!(s.multiplier(2) < s.multiplier(3));
        assert_eq!(s.multiplier(6), 1.0);
        assert_eq!(s.multiplier(34), 1.0);
        assert!((s.multiplier(36) - s.multiplier(34) / 10.0).abs() < 1e-15);
        assert!((s.multiplier(46) - s.multiplier(34) / 100.0).abs() < 1e-15);
    }
}
