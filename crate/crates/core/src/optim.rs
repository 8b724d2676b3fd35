//! Adam with per-tensor moments and milestone learning-rate schedules.

use std::fmt;

use crate::error::{Error, Result};
use crate::net::ParameterStore;
use crate::tensor::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments for every trainable tensor, plus the shared
/// step counter. Tensors absent from the gradient store are an error; frozen
/// tensors are expected to arrive with zero gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParameterStore<T>,
    pub v: ParameterStore<T>,
}

impl<T: Element> AdamState<T> {
    /// Zero moments shaped like the trainable tensors of `params`.
    pub fn new(params: &ParameterStore<T>) -> Self {
        let mut m = ParameterStore::new();
        let mut v = ParameterStore::new();
        for (name, t) in params.trainable() {
            m.set(name, t.zeros_like());
            v.set(name, t.zeros_like());
        }
        AdamState {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &ParameterStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        for (name, _) in self.m.iter() {
            let g = grads.require(name)?;
            let p = params.require(name)?;
            p.ensure_same_shape(g, "adam_step")?;
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { tensor: name.to_string() });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let corr1 = 1.0 - self.beta1.powf(t);
        let corr2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((name, m), (_, v)) in self.m.iter_mut().zip(self.v.iter_mut()) {
            let g = grads.require(name)?.data();
            let p = params.require_mut(name)?.data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                let g = g.as_f64();
                let mn = b1 * m.as_f64() + (1.0 - b1) * g;
                let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::from_f64(mn);
                *v = T::from_f64(vn);
                let update = lr * (mn / corr1) / ((vn / corr2).sqrt() + eps);
                *p = T::from_f64((*p).as_f64() - update);
            }
        }
        Ok(())
    }

    /// Restores moments saved in a checkpoint, checking they match `params`.
    pub fn from_parts(params: &ParameterStore<T>, step: u64, m: ParameterStore<T>, v: ParameterStore<T>) -> Result<Self> {
        let fresh = Self::new(params);
        for (store, label) in [(&m, "m"), (&v, "v")] {
            let same = store.len() == fresh.m.len()
                && store
                    .iter()
                    .zip(fresh.m.iter())
                    .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
            if !same {
                return Err(Error::ParameterMismatch(format!(
                    "optimizer `{label}` moments do not match the parameters"
                )));
            }
        }
        Ok(AdamState { step, m, v, ..fresh })
    }

    pub fn moment(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }
}

/// Piecewise-constant schedule: the base rate times every multiplier whose
/// milestone epoch has been reached. Epochs count from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(base_lr: f64, milestones: Vec<(usize, f64)>) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {base_lr}")));
        }
        if milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::config("milestones", "epochs must be strictly ascending"));
        }
        if let Some((e, m)) = milestones.iter().find(|(_, m)| !(*m > 0.0 && *m <= 1.0)) {
            return Err(Error::config("milestones", format!("multiplier {m} at epoch {e} is outside (0, 1]")));
        }
        Ok(LrSchedule { base_lr, milestones })
    }

    pub fn constant(base_lr: f64) -> Result<Self> {
        Self::new(base_lr, Vec::new())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.base_lr, |lr, (_, m)| lr * m)
    }

    /// Parses `e1:m1,e2:m2`; an empty string means no milestones.
    pub fn parse_milestones(text: &str) -> Result<Vec<(usize, f64)>> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(',')
            .map(|part| {
                let bad = || Error::config("milestones", format!("expected epoch:multiplier, got `{part}`"));
                let (e, m) = part.split_once(':').ok_or_else(bad)?;
                Ok((e.trim().parse().map_err(|_| bad())?, m.trim().parse().map_err(|_| bad())?))
            })
            .collect()
    }

    pub fn milestones_text(&self) -> String {
        self.milestones
            .iter()
            .map(|(e, m)| format!("{e}:{m}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lr={}; milestones={}", self.base_lr, self.milestones_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("theta", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(1.5);
        let mut state = AdamState::new(&p);
        state.step(&mut p, &scalar(0.0), 0.1).unwrap();
        assert_eq!(p.get("theta").unwrap().data(), &[1.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new(&p);
        state.step(&mut p, &scalar(1.0), 0.1).unwrap();
        let theta = p.get("theta").unwrap().data()[0];
        assert!((theta - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{theta}");
    }

    #[test]
    fn descends_a_parabola() {
        let mut p = scalar(5.0);
        let mut state = AdamState::new(&p);
        for _ in 0..100 {
            let theta = p.get("theta").unwrap().data()[0];
            state.step(&mut p, &scalar(2.0 * theta), 0.1).unwrap();
        }
        assert!(p.get("theta").unwrap().data()[0].abs() < 0.5);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new(&p);
        let err = state.step(&mut p, &scalar(f64::NAN), 0.1).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn buffers_get_no_moments() {
        let mut p = scalar(0.0);
        p.insert("bn.running_mean", Tensor::zeros(&[2]).unwrap()).unwrap();
        let state = AdamState::new(&p);
        assert_eq!(state.m.len(), 1);
    }

    #[test]
    fn schedule_milestones() {
        let s = LrSchedule::new(1e-4, vec![(60, 0.1), (90, 0.1)]).unwrap();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(59), 1e-4);
        assert!((s.lr_at(60) - 1e-5).abs() < 1e-18);
        assert!((s.lr_at(95) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn schedule_rejects_bad_milestones() {
        assert!(LrSchedule::new(1e-3, vec![(5, 0.1), (3, 0.1)]).is_err());
        assert!(LrSchedule::new(1e-3, vec![(5, 1.5)]).is_err());
        assert!(LrSchedule::new(0.0, vec![]).is_err());
    }

    #[test]
    fn milestone_text_round_trip() {
        let parsed = LrSchedule::parse_milestones("60:0.1, 90:0.1").unwrap();
        let s = LrSchedule::new(1e-4, parsed).unwrap();
        assert_eq!(s.milestones_text(), "60:0.1,90:0.1");
        assert_eq!(LrSchedule::parse_milestones(&s.milestones_text()).unwrap(), s.milestones);
        assert!(LrSchedule::parse_milestones("60").is_err());
    }

    proptest! {
        #[test]
        fn first_step_is_bounded_by_lr(g in -1e3f64..1e3, lr in 1e-5f64..1.0) {
            let mut p = scalar(0.0);
            let mut state = AdamState::new(&p);
            state.step(&mut p, &scalar(g), lr).unwrap();
            prop_assert!(p.get("theta").unwrap().data()[0].abs() <= lr * (1.0 + 1e-9));
        }
    }
}
