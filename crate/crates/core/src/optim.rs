//! AdamW with per-group learning rates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

/// Learning rate per parameter group. A rate of exactly 0 freezes the group:
/// neither its parameters nor its moment estimates are touched.
pub type LrMap = BTreeMap<Group, f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// First and second moment estimates, indexed like the parameter store.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied to each group so far.
    pub steps: BTreeMap<Group, u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: BTreeMap::new(),
        }
    }

    /// One update from the gradients accumulated on `store`. Parameters
    /// without an accumulated gradient are updated as if it were zero.
    pub fn step(&mut self, store: &mut ParamStore, lr: &LrMap) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid("adamw_step", "optimizer state does not match parameter store"));
        }
        for g in Group::ALL {
            if !lr.contains_key(&g) {
                return Err(Error::invalid("adamw_step", format!("no learning rate for group '{g}'")));
            }
        }
        let active: Vec<Group> = Group::ALL.into_iter().filter(|g| lr[g] != 0.0).collect();
        for g in &active {
            *self.steps.entry(*g).or_insert(0) += 1;
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (i, p) in store.iter_mut().enumerate() {
            let rate = lr[&p.group];
            if rate == 0.0 {
                continue;
            }
            let t = self.steps[&p.group] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let grad = p.tensor.grad.take();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] * (1.0 - rate * weight_decay) - rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self, index: usize, shape: &[usize]) -> (Tensor, Tensor) {
        (
            Tensor::new(shape.to_vec(), self.m[index].clone()).expect("moment shape"),
            Tensor::new(shape.to_vec(), self.v[index].clone()).expect("moment shape"),
        )
    }
}

/// Scales the accumulated gradients of `groups` so their joint L2 norm is at
/// most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, groups: &[Group], max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|(_, p)| groups.contains(&p.group))
        .filter_map(|(_, p)| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut().filter(|p| groups.contains(&p.group)) {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

pub fn uniform_lr(rate: f64) -> LrMap {
    Group::ALL.into_iter().map(|g| (g, rate)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_scalar(group: Group, value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("theta", group, Tensor::scalar(value)).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = one_scalar(Group::Encoder, 1.5);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        s.iter_mut().next().unwrap().tensor.accumulate_grad(&[0.0]);
        opt.step(&mut s, &uniform_lr(0.1)).unwrap();
        assert_eq!(s.by_name("theta").unwrap().tensor.item(), 1.5);
    }

    #[test]
    fn single_step_closed_form() {
        // g = 1 at t = 1: m_hat = 1, v_hat = 1, so the step is -lr / (1 + eps).
        let mut s = one_scalar(Group::Decoder, 0.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        s.iter_mut().next().unwrap().tensor.accumulate_grad(&[1.0]);
        opt.step(&mut s, &uniform_lr(0.1)).unwrap();
        let theta = s.by_name("theta").unwrap().tensor.item();
        assert!((theta - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{theta}");
        assert!((theta + 0.1).abs() < 1e-8);
    }

    #[test]
    fn frozen_group_is_bit_identical() {
        let mut s = ParamStore::new();
        s.register("frozen", Group::Encoder, Tensor::full(&[3], 0.3)).unwrap();
        s.register("live", Group::Enhancer, Tensor::full(&[3], 0.3)).unwrap();
        let before = s.by_name("frozen").unwrap().tensor.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut lr = uniform_lr(1e-2);
        lr.insert(Group::Encoder, 0.0);
        for k in 0..100 {
            for p in s.iter_mut() {
                p.tensor.accumulate_grad(&[k as f64, -1.0, 0.5]);
            }
            opt.step(&mut s, &lr).unwrap();
        }
        assert!(s.by_name("frozen").unwrap().tensor.bit_eq(&before));
        assert!(opt.m[0].iter().all(|&v| v == 0.0));
        assert_ne!(s.by_name("live").unwrap().tensor.data()[0], 0.3);
    }

    #[test]
    fn all_zero_rates_are_identity() {
        let mut s = one_scalar(Group::Projector, 2.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let before = opt.clone();
        s.iter_mut().next().unwrap().tensor.accumulate_grad(&[3.0]);
        opt.step(&mut s, &uniform_lr(0.0)).unwrap();
        assert_eq!(opt, before);
        assert_eq!(s.by_name("theta").unwrap().tensor.item(), 2.0);
    }

    #[test]
    fn missing_group_is_an_error() {
        let mut s = one_scalar(Group::Projector, 2.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut lr = uniform_lr(0.1);
        lr.remove(&Group::Decoder);
        assert!(opt.step(&mut s, &lr).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::new();
        s.register("a", Group::Enhancer, Tensor::zeros(&[2])).unwrap();
        s.iter_mut().next().unwrap().tensor.accumulate_grad(&[3.0, 4.0]);
        let n = clip_grad_norm(&mut s, &[Group::Enhancer], 1.0);
        assert_eq!(n, 5.0);
        let g = s.by_name("a").unwrap().tensor.grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
