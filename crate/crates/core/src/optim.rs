use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[DenseMatrix] {
        &self.m
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[DenseMatrix]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (k, g) in grads.iter().enumerate() {
            if g.shape() != params.values()[k].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient shape differs for {}", params.names()[k]),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {}",
                    params.names()[k]
                )));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
