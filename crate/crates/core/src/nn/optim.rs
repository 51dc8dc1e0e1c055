//! SGD and Adam over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, Parameterized, TensorRole};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f32,
    #[serde(flatten)]
    pub kind: OptimizerKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f32) -> Self {
        Self {
            lr,
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }

    pub fn sgd(lr: f32) -> Self {
        Self {
            lr,
            kind: OptimizerKind::Sgd { momentum: 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so that frozen runs are expressible.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter of `model`. Every
    /// parameter must have a gradient of matching shape.
    pub fn step(&mut self, model: &mut dyn Parameterized, grads: &ParamGrads) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.config.lr;
        let kind = self.config.kind;
        let first = &mut self.first;
        let second = &mut self.second;
        let mut failure = None;
        model.visit_mut("", &mut |name, role, param| {
            if role != TensorRole::Param || failure.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else {
                failure = Some(Error::Shape(format!("no gradient for parameter {name}")));
                return;
            };
            if g.shape() != param.shape() {
                failure = Some(Error::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    param.shape()
                )));
                return;
            }
            match kind {
                OptimizerKind::Sgd { momentum } if momentum == 0.0 => {
                    for (p, &gv) in param.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let v = first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
                    for ((p, &gv), vv) in param.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vv = momentum * *vv + gv;
                        *p -= lr * *vv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
                    let v = second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((p, &gv), mm), vv) in param
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mm = beta1 * *mm + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mm / c1;
                        let vhat = *vv / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv1d, Padding};
    use crate::tensor::Tensor;

    fn scalar_model(w: f32) -> Conv1d {
        let mut c = Conv1d::new(1, 1, 1, 1, 1, Padding::Causal, false).unwrap();
        c.weight.data_mut()[0] = w;
        c
    }

    fn grads(g: f32) -> ParamGrads {
        let mut pg = ParamGrads::new();
        pg.insert("weight".into(), Tensor::new(vec![1, 1, 1], vec![g]).unwrap()).unwrap();
        pg
    }

    #[test]
    fn sgd_step() {
        let mut m = scalar_model(2.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        opt.step(&mut m, &grads(3.0)).unwrap();
        assert!((m.weight.data()[0] - 1.7).abs() < 1e-7);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::adam(0.1)] {
            let mut m = scalar_model(2.0);
            let mut opt = Optimizer::new(cfg).unwrap();
            for _ in 0..3 {
                opt.step(&mut m, &grads(0.0)).unwrap();
            }
            assert_eq!(m.weight.data()[0], 2.0);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut m = scalar_model(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        assert!(opt.step(&mut m, &ParamGrads::new()).is_err());
    }

    #[test]
    fn negative_lr_rejected() {
        assert!(Optimizer::new(OptimizerConfig::sgd(-1.0)).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = scalar_model(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01)).unwrap();
        opt.step(&mut m, &grads(5.0)).unwrap();
        assert!((m.weight.data()[0] + 0.01).abs() < 1e-6);
    }
}
