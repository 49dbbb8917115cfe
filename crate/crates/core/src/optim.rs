//! Deterministic first-order optimisers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::Sgd, lr)
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update. A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension {
                op: "optimizer_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (i, (p, g)) in params.values().iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    params.name(crate::nn::ParamId(i))
                )));
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values_mut().iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.second = self.first.clone();
                }
                self.steps += 1;
                let c1 = 1.0 - self.beta1.powi(self.steps);
                let c2 = 1.0 - self.beta2.powi(self.steps);
                for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gv;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gv * gv;
                        *pv -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("p", Tensor::scalar(v));
        p
    }

    #[test]
    fn sgd_examples() {
        let mut p = single(1.0);
        Optimizer::sgd(0.1).step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        assert!((p.values()[0].data()[0] - 0.8).abs() < 1e-15);

        let mut p = single(1.0);
        Optimizer::sgd(0.1).step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.values()[0].data()[0], 1.0);
    }

    #[test]
    fn two_sgd_steps_equal_summed_displacement() {
        let mut a = single(0.5);
        let mut opt = Optimizer::sgd(0.05);
        opt.step(&mut a, &[Tensor::scalar(1.5)]).unwrap();
        opt.step(&mut a, &[Tensor::scalar(1.5)]).unwrap();
        let mut b = single(0.5);
        Optimizer::sgd(0.1).step(&mut b, &[Tensor::scalar(1.5)]).unwrap();
        assert!((a.values()[0].data()[0] - b.values()[0].data()[0]).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = single(1.0);
        let err = Optimizer::sgd(0.1).step(&mut p, &[Tensor::scalar(f64::NAN)]);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(p.values()[0].data()[0], 1.0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = single(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        opt.step(&mut p, &[Tensor::scalar(3.0)]).unwrap();
        assert!((p.values()[0].data()[0] - 0.99).abs() < 1e-9);
    }
}
