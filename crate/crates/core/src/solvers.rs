//! Device-local update procedures run within one round.
//!
//! `local_alt` updates the personal block first with `u` frozen, then the
//! shared block against the new personal block (Gauss-Seidel order).
//! `local_sim` steps both blocks from gradients taken at the same point
//! (Jacobi order).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{check_device_args, stoc_grad_block, stoc_grads, Block, PartitionedProblem, StocGradSpec};
use crate::sampling::{Purpose, StreamKey};

/// Iterates with a norm above this abort the solve.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Local step sizes and step counts. `tau_u`/`tau_v` drive the alternating
/// procedure, `tau` the simultaneous one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalHyper {
    pub gamma_u: f64,
    pub gamma_v: f64,
    pub tau_u: usize,
    pub tau_v: usize,
    pub tau: usize,
}

impl LocalHyper {
    pub fn new(gamma_u: f64, gamma_v: f64, tau: usize) -> Self {
        Self {
            gamma_u,
            gamma_v,
            tau_u: tau,
            tau_v: tau,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma_u", self.gamma_u), ("gamma_v", self.gamma_v)] {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and positive, got {g}")));
            }
        }
        for (name, t) in [("tau_u", self.tau_u), ("tau_v", self.tau_v), ("tau", self.tau)] {
            if t == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Identifies the noise streams of one device in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalKeys {
    pub seed: u64,
    pub device: usize,
    pub round: usize,
}

impl LocalKeys {
    pub fn new(seed: u64, device: usize, round: usize) -> Self {
        Self { seed, device, round }
    }

    pub fn key(&self, purpose: Purpose, step: usize) -> StreamKey {
        StreamKey::new(self.seed, purpose)
            .device(self.device)
            .round(self.round)
            .step(step)
    }
}

pub(crate) fn guard(x: &DVector<f64>, step: usize) -> Result<()> {
    let norm = x.norm();
    if norm.is_finite() && norm <= DIVERGENCE_NORM {
        Ok(())
    } else {
        Err(Error::Diverged {
            device: None,
            step,
            norm,
        })
    }
}

/// Alternating local update: `tau_v` personal steps at the broadcast `u`,
/// then `tau_u` shared steps at the updated personal block.
pub fn local_alt<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    hp: &LocalHyper,
    spec: &StocGradSpec,
    keys: LocalKeys,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_device_args(problem, i, u, v)?;
    hp.validate()?;
    let run = || -> Result<(DVector<f64>, DVector<f64>)> {
        let mut v_cur = v.clone();
        for k in 0..hp.tau_v {
            let g = stoc_grad_block(problem, i, u, &v_cur, Block::Personal, spec, keys.key(Purpose::NoiseV, k))?;
            v_cur.axpy(-hp.gamma_v, &g, 1.0);
            guard(&v_cur, k)?;
        }
        let mut u_cur = u.clone();
        for k in 0..hp.tau_u {
            let g = stoc_grad_block(problem, i, &u_cur, &v_cur, Block::Shared, spec, keys.key(Purpose::NoiseU, k))?;
            u_cur.axpy(-hp.gamma_u, &g, 1.0);
            guard(&u_cur, hp.tau_v + k)?;
        }
        Ok((u_cur, v_cur))
    };
    run().map_err(|e| e.on_device(i))
}

/// Simultaneous local update: `tau` steps, each stepping both blocks from
/// one stochastic draw at the current point.
pub fn local_sim<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    hp: &LocalHyper,
    spec: &StocGradSpec,
    keys: LocalKeys,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_device_args(problem, i, u, v)?;
    hp.validate()?;
    let run = || -> Result<(DVector<f64>, DVector<f64>)> {
        let mut u_cur = u.clone();
        let mut v_cur = v.clone();
        for k in 0..hp.tau {
            let (gu, gv) = stoc_grads(
                problem,
                i,
                &u_cur,
                &v_cur,
                spec,
                keys.key(Purpose::NoiseU, k),
                keys.key(Purpose::NoiseV, k),
            )?;
            v_cur.axpy(-hp.gamma_v, &gv, 1.0);
            u_cur.axpy(-hp.gamma_u, &gu, 1.0);
            guard(&v_cur, k)?;
            guard(&u_cur, k)?;
        }
        Ok((u_cur, v_cur))
    };
    run().map_err(|e| e.on_device(i))
}
