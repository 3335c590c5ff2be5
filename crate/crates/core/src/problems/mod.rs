//! Synthetic problem families with closed-form smoothness constants.

mod additive;
mod container;
mod frozen;
mod full;
mod quadratic;

pub use additive::{make_additive_model, AdditiveDevice, AdditiveModel, AdditiveSpec};
pub use container::Container;
pub use frozen::FrozenPersonal;
pub use full::{make_full_personalization, FullPersonalization, FullPersonalizationSpec, QuadraticBase, SmoothObjective};
pub use quadratic::{
    make_quadratic_ensemble, GeneratedSpectra, QuadraticDevice, QuadraticEnsemble, QuadraticEnsembleSpec,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{shared_gradient, ParamState, PartitionedProblem};

/// Smoothness, variance and diversity constants consumed by the rate formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SmoothnessProfile {
    pub l_u: f64,
    pub l_v: f64,
    pub l_uv: f64,
    pub l_vu: f64,
    pub chi: f64,
    pub sigma_u2: f64,
    pub sigma_v2: f64,
    pub delta2: f64,
    pub rho2: f64,
}

impl SmoothnessProfile {
    /// Profile with `chi` derived from the Lipschitz constants and all
    /// variance/diversity terms zero.
    pub fn from_lipschitz(l_u: f64, l_v: f64, l_uv: f64, l_vu: f64) -> Self {
        Self {
            l_u,
            l_v,
            l_uv,
            l_vu,
            chi: cross_sensitivity(l_u, l_v, l_uv, l_vu),
            ..Default::default()
        }
    }

    pub fn chi2(&self) -> f64 {
        self.chi * self.chi
    }
}

/// `max(L_uv, L_vu) / sqrt(L_u L_v)`, taken as zero when `L_u L_v = 0`.
pub fn cross_sensitivity(l_u: f64, l_v: f64, l_uv: f64, l_vu: f64) -> f64 {
    let denom = (l_u * l_v).sqrt();
    if denom > 0.0 {
        l_uv.max(l_vu) / denom
    } else {
        0.0
    }
}

pub(crate) fn lambda_max(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.max()
}

pub(crate) fn lambda_min(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

pub(crate) fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Lipschitz constants of a quadratic ensemble read off its blocks.
pub fn closed_form_constants<P: PartitionedProblem + ?Sized>(problem: &P) -> Result<SmoothnessProfile> {
    let q = problem
        .as_quadratic()
        .ok_or_else(|| Error::Unsupported("closed-form constants need a quadratic ensemble".into()))?;
    let mut l_u: f64 = 0.0;
    let mut l_v: f64 = 0.0;
    let mut l_c: f64 = 0.0;
    for dev in q.devices() {
        l_u = l_u.max(lambda_max(&dev.a));
        l_v = l_v.max(lambda_max(&dev.b));
        l_c = l_c.max(op_norm(&dev.c));
    }
    Ok(SmoothnessProfile::from_lipschitz(l_u, l_v, l_c, l_c))
}

/// Joint minimizer `(u*, V*)` and optimal value of a quadratic ensemble.
pub fn closed_form_minimum<P: PartitionedProblem + ?Sized>(problem: &P) -> Result<(ParamState, f64)> {
    let q = problem
        .as_quadratic()
        .ok_or_else(|| Error::Unsupported("closed-form minimum needs a quadratic ensemble".into()))?;
    q.minimizer()
}

/// `max` over the given states of `(1/n) sum_i ||grad_u F_i(u, v_i) - grad_u F(u, V)||^2`.
pub fn estimate_diversity<P: PartitionedProblem + ?Sized>(problem: &P, states: &[ParamState]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("no states to estimate diversity from".into()));
    }
    let n = problem.num_devices();
    let mut worst: f64 = 0.0;
    for state in states {
        let mean = shared_gradient(problem, state)?;
        let spread: f64 = state
            .v
            .iter()
            .enumerate()
            .map(|(i, vi)| (problem.device_grad_u(i, &state.u, vi) - &mean).norm_squared())
            .sum::<f64>()
            / n as f64;
        worst = worst.max(spread);
    }
    Ok(worst)
}

pub(crate) fn symmetric_from_spectrum(q: &DMatrix<f64>, eigs: &DVector<f64>) -> DMatrix<f64> {
    let scaled = q * DMatrix::from_diagonal(eigs);
    let m = scaled * q.transpose();
    // exact symmetry
    (&m + m.transpose()) * 0.5
}
