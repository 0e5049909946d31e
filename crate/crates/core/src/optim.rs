//! Adam optimizer over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores saved moments; shapes must match `params`.
    pub fn from_state(
        config: AdamConfig,
        params: &ParamSet<T>,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self> {
        let ok = m.len() == params.len()
            && v.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(m.iter().zip(&v))
                .all(|(p, (a, b))| p.shape() == a.shape() && p.shape() == b.shape());
        if !ok {
            return Err(Error::Data("optimizer state does not match parameters".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update in f64 arithmetic.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for {:?}", g.shape(), p.shape())));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi.as_f64();
                let mn = c.beta1 * mi.as_f64() + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * vi.as_f64() + (1.0 - c.beta2) * gi * gi;
                *mi = T::lit(mn);
                *vi = T::lit(vn);
                let delta = c.learning_rate * (mn / bc1) / ((vn / bc2).sqrt() + c.epsilon);
                *pi = T::lit(pi.as_f64() - delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamSet::<f64>::new();
        params.push("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), &params);
        let grads = vec![Tensor::new(&[2], vec![3.0, -0.5]).unwrap()];
        adam.update(&mut params, &grads).unwrap();
        let w = params.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = ParamSet::<f64>::new();
        params.push("w", Tensor::new(&[1], vec![5.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), &params);
        for _ in 0..500 {
            let w = params.tensors()[0].data()[0];
            adam.update(&mut params, &[Tensor::new(&[1], vec![2.0 * (w - 2.0)]).unwrap()]).unwrap();
        }
        assert!((params.tensors()[0].data()[0] - 2.0).abs() < 1e-2);
    }
}
