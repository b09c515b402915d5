use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one update from the gradients stored on the parameters.
/// Parameters without a gradient buffer are treated as having zero gradient.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        config: OptimizerConfig,
        step: u32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, params: &ParamSet) -> Self {
        match config.kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
                Optimizer::Adam {
                    config: config.clone(),
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        match self {
            Optimizer::Sgd => {
                for t in params.tensors_mut() {
                    let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
                    t.data_mut().iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * g);
                }
            }
            Optimizer::Adam { config, step, m, v } => {
                *step += 1;
                let bc1 = 1.0 - config.beta1.powi(*step as i32);
                let bc2 = 1.0 - config.beta2.powi(*step as i32);
                for (i, t) in params.tensors_mut().iter_mut().enumerate() {
                    let g = t.grad().map(<[f64]>::to_vec);
                    let (m, v) = (&mut m[i], &mut v[i]);
                    for (j, w) in t.data_mut().iter_mut().enumerate() {
                        let gj = g.as_ref().map_or(0.0, |g| g[j]);
                        m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
                        v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + config.eps);
                    }
                }
            }
        }
    }
}
