//! Adam with per-parameter state keyed by variable name.

use std::collections::BTreeMap;
use std::path::Path;

use tch::Tensor;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Clears the gradients of `params`.
    pub fn zero_grad(params: &[(String, Tensor)]) {
        for (_, p) in params {
            let mut g = p.grad();
            if g.defined() {
                let _ = g.zero_();
            }
        }
    }

    /// One update of every parameter; a parameter without a gradient is
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        tch::no_grad(|| {
            for (name, p) in params {
                let g = p.grad();
                let g = if g.defined() { g } else { p.zeros_like() };
                let m = self.first.entry(name.clone()).or_insert_with(|| p.zeros_like());
                let _ = m.g_mul_scalar_(self.beta1);
                let _ = m.g_add_(&(&g * (1.0 - self.beta1)));
                let v = self.second.entry(name.clone()).or_insert_with(|| p.zeros_like());
                let _ = v.g_mul_scalar_(self.beta2);
                let _ = v.g_add_(&(g.square() * (1.0 - self.beta2)));
                let update = (&*m / bc1) / ((&*v / bc2).sqrt() + self.eps) * self.lr;
                let _ = p.shallow_clone().g_sub_(&update);
            }
        });
    }

    /// Moment tensors under `m.<name>` and `v.<name>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let m = self.first.iter().map(|(n, t)| (format!("m.{n}"), t.shallow_clone()));
        let v = self.second.iter().map(|(n, t)| (format!("v.{n}"), t.shallow_clone()));
        m.chain(v).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let state = self.state_tensors();
        Tensor::write_safetensors(&state, path)?;
        Ok(())
    }

    /// Restores moments saved by [`Adam::save`] after `steps` updates.
    pub fn load(&mut self, path: &Path, steps: u64) -> Result<()> {
        self.first.clear();
        self.second.clear();
        for (name, t) in Tensor::read_safetensors(path)? {
            if let Some(n) = name.strip_prefix("m.") {
                self.first.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("v.") {
                self.second.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry {name}")));
            }
        }
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Kind;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = Tensor::from_slice(&[1.0f64, -2.0, 0.5]).set_requires_grad(true);
        let params = vec![("p".to_string(), p.shallow_clone())];
        let loss = (&p * Tensor::from_slice(&[3.0f64, -1.0, 0.0])).sum(Kind::Double);
        loss.backward();
        let mut adam = Adam::new(0.1).unwrap();
        adam.step(&params);
        let got: Vec<f64> = Vec::try_from(&p.detach()).unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] - -1.9).abs() < 1e-6);
        assert_eq!(got[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let p = Tensor::from_slice(&[5.0f64, -3.0]).set_requires_grad(true);
        let params = vec![("p".to_string(), p.shallow_clone())];
        let mut adam = Adam::new(0.05).unwrap();
        for _ in 0..2000 {
            Adam::zero_grad(&params);
            p.square().sum(Kind::Double).backward();
            adam.step(&params);
        }
        assert!(p.abs().max().double_value(&[]) < 1e-2);
    }

    #[test]
    fn rejects_bad_lr() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(f64::NAN).is_err());
    }
}
