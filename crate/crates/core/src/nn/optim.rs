use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are created lazily to mirror the store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update from the gradients held in `store`. Non-finite
    /// gradients abort before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.params.len() {
            return Err(Error::Shape("optimizer state does not match the parameter list".into()));
        }
        for (p, m) in store.params.iter().zip(&self.m) {
            if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
                return Err(Error::Shape(format!("parameter {} changed shape", p.name)));
            }
            if !p.grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {} at step {}",
                    p.name,
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one_b1 = T::lit(1.0 - c.beta1);
        let one_b2 = T::lit(1.0 - c.beta2);
        let corr1 = T::lit(1.0 / (1.0 - c.beta1.powi(t)));
        let corr2 = T::lit(1.0 / (1.0 - c.beta2.powi(t)));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for ((p, m), v) in store.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + one_b1 * g[i];
                vd[i] = b2 * vd[i] + one_b2 * g[i] * g[i];
                let m_hat = md[i] * corr1;
                let v_hat = vd[i] * corr2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("p", Tensor::full(&[1], value));
        s.params[0].grad = Tensor::full(&[1], grad);
        s
    }

    #[test]
    fn first_step_unit_gradient() {
        let mut s = scalar_store(0.0, 1.0);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut s).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((s.params[0].value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = scalar_store(0.7, 0.0);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.params[0].value.data()[0], 0.7);
    }

    #[test]
    fn deterministic_from_equal_state() {
        let mut a = scalar_store(0.2, 0.3);
        let mut b = a.clone();
        let mut oa = Adam::new(AdamConfig::default());
        let mut ob = oa.clone();
        oa.step(&mut a).unwrap();
        ob.step(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa.moments().0, ob.moments().0);
    }

    #[test]
    fn nan_gradient_is_numeric_error() {
        let mut s = scalar_store(0.2, f64::NAN);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut s), Err(Error::Numeric(_))));
        assert_eq!(s.params[0].value.data()[0], 0.2);
    }
}
