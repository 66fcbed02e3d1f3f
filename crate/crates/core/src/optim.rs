//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{real, Parameterized, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter array in
/// the owner's `params()` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &impl Parameterized<T>) -> Self {
        let sizes: Vec<usize> = params.params().iter().map(|p| p.data.len()).collect();
        Adam {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Descends along `grads` (same layout as `params`).
    pub fn update(&mut self, params: &mut impl Parameterized<T>, grads: &impl Parameterized<T>) -> Result<()> {
        let grads = grads.params();
        let params = params.params_mut();
        if grads.len() != params.len() || params.len() != self.first.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1: T = real(c.beta1);
        let b2: T = real(c.beta2);
        let one = T::one();
        let correction1: T = real(1.0 - c.beta1.powi(t));
        let correction2: T = real(1.0 - c.beta2.powi(t));
        let lr: T = real(c.learning_rate);
        let eps: T = real(c.epsilon);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.data.len() != g.data.len() || p.data.len() != self.first[i].len() {
                return Err(Error::Shape(format!("parameter {} changed size", p.name)));
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / correction1;
                let vhat = v[j] / correction2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Dense::<f64>::zeros(2, 1);
        let mut g = Dense::<f64>::zeros(2, 1);
        g.weight[[0, 0]] = 3.0;
        g.weight[[0, 1]] = -0.01;
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.update(&mut p, &g).unwrap();
        assert!((p.weight[[0, 0]] + 1e-4).abs() < 1e-9);
        assert!((p.weight[[0, 1]] - 1e-4).abs() < 1e-9);
        assert_eq!(p.bias[0], 0.0);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = Dense::<f64>::zeros(1, 1);
        p.weight[[0, 0]] = 2.0;
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let mut g = Dense::<f64>::zeros(1, 1);
            g.weight[[0, 0]] = 2.0 * (p.weight[[0, 0]] - 0.5);
            g.bias[0] = 2.0 * (p.bias[0] + 1.0);
            adam.update(&mut p, &g).unwrap();
        }
        assert!((p.weight[[0, 0]] - 0.5).abs() < 1e-3);
        assert!((p.bias[0] + 1.0).abs() < 1e-3);
    }
}
