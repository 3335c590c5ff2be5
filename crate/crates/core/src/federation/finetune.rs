use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{check_device_args, stoc_grad_block, Block, PartitionedProblem, StocGradSpec};
use crate::sampling::{Purpose, StreamKey};
use crate::solvers::guard;

/// Optional proximal term added to the device objective during finetuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FinetuneReg {
    #[default]
    None,
    /// `(lambda/2) ||v - anchor||^2`; the anchor defaults to the starting point.
    L2 {
        lambda: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anchor: Option<DVector<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub reg: FinetuneReg,
    #[serde(default)]
    pub noise: StocGradSpec,
    #[serde(default)]
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(epochs: usize, lr: f64) -> Self {
        Self {
            epochs,
            lr,
            reg: FinetuneReg::None,
            noise: StocGradSpec::Exact,
            seed: 0,
        }
    }

    fn steps_per_epoch<P: PartitionedProblem + ?Sized>(&self, problem: &P, i: usize) -> usize {
        match (self.noise, problem.sample_count(i)) {
            (StocGradSpec::Minibatch { batch_size }, Some(count)) => count.div_ceil(batch_size.max(1)),
            _ => 1,
        }
    }
}

/// SGD on the personal block of device `i` with `u` held fixed.
pub fn finetune<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    cfg: &FinetuneConfig,
) -> Result<DVector<f64>> {
    check_device_args(problem, i, u, v)?;
    cfg.noise.validate()?;
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("finetune learning rate {} is invalid", cfg.lr)));
    }
    let (lambda, anchor) = match &cfg.reg {
        FinetuneReg::None => (0.0, v.clone()),
        FinetuneReg::L2 { lambda, anchor } => {
            if !(lambda.is_finite() && *lambda >= 0.0) {
                return Err(Error::InvalidArgument(format!("regularization weight {lambda} is invalid")));
            }
            let anchor = anchor.clone().unwrap_or_else(|| v.clone());
            if anchor.len() != v.len() {
                return Err(Error::DimensionMismatch {
                    what: "finetune anchor",
                    device: Some(i),
                    expected: v.len(),
                    found: anchor.len(),
                });
            }
            (*lambda, anchor)
        }
    };
    let steps = cfg.steps_per_epoch(problem, i);
    let mut cur = v.clone();
    for epoch in 0..cfg.epochs {
        for k in 0..steps {
            let key = StreamKey::new(cfg.seed, Purpose::NoiseV).device(i).round(epoch).step(k);
            let mut g = stoc_grad_block(problem, i, u, &cur, Block::Personal, &cfg.noise, key)?;
            if lambda > 0.0 {
                g.axpy(lambda, &(&cur - &anchor), 1.0);
            }
            cur.axpy(-cfg.lr, &g, 1.0);
            guard(&cur, epoch * steps + k).map_err(|e| e.on_device(i))?;
        }
    }
    Ok(cur)
}
