//! Full model personalization cast as a partitioned problem:
//! `F_i(u, v_i) = F~_i(v_i) + (lambda_i / 2) ||v_i - u||^2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::quadratic::{gaussian_matrix, orthonormal, uniform_in};
use super::{symmetric_from_spectrum, SmoothnessProfile};
use crate::error::{Error, Result};
use crate::objective::{PartitionedProblem, Weights};
use crate::sampling::{Purpose, StreamKey};

/// A smooth single-block objective.
pub trait SmoothObjective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Lipschitz constant of the gradient.
    fn smoothness(&self) -> f64;
}

/// `1/2 x'Hx + g'x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBase {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: f64,
    lipschitz: f64,
}

impl QuadraticBase {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>, c: f64) -> Result<Self> {
        if !h.is_square() || h.nrows() != g.len() {
            return Err(Error::Construction("quadratic base: H must be square and match g".into()));
        }
        let eig = h.clone().symmetric_eigen().eigenvalues;
        let lipschitz = eig.iter().fold(0.0f64, |acc, e| acc.max(e.abs()));
        Ok(Self { h, g, c, lipschitz })
    }
}

impl SmoothObjective for QuadraticBase {
    fn dim(&self) -> usize {
        self.g.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x) + self.c
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.g
    }

    fn smoothness(&self) -> f64 {
        self.lipschitz
    }
}

/// Random convex quadratic bases with curvature in `curvature` and linear
/// terms spread by `heterogeneity`, combined with per-device `lambdas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullPersonalizationSpec {
    pub n: usize,
    pub dim: usize,
    pub lambdas: Vec<f64>,
    pub curvature: (f64, f64),
    pub heterogeneity: f64,
    pub seed: u64,
}

impl FullPersonalizationSpec {
    pub fn generate(&self) -> Result<FullPersonalization<QuadraticBase>> {
        let (lo, hi) = self.curvature;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::Construction(format!("curvature range [{lo}, {hi}] is invalid")));
        }
        if self.lambdas.len() != self.n {
            return Err(Error::DimensionMismatch {
                what: "lambdas",
                device: None,
                expected: self.n,
                found: self.lambdas.len(),
            });
        }
        let bases = (0..self.n)
            .map(|i| {
                let key = StreamKey::new(self.seed, Purpose::Init).device(i);
                let q = orthonormal(self.dim, self.dim, key.step(0));
                let eigs = DVector::from_vec(uniform_in(self.curvature, self.dim, key.step(1)));
                let g = gaussian_matrix(self.dim, 1, key.step(2)).column(0) * self.heterogeneity;
                QuadraticBase::new(symmetric_from_spectrum(&q, &eigs), g, 0.0)
            })
            .collect::<Result<Vec<_>>>()?;
        make_full_personalization(bases, self.lambdas.clone())
    }
}

#[derive(Debug, Clone)]
pub struct FullPersonalization<B> {
    bases: Vec<B>,
    lambdas: Vec<f64>,
    weights: Weights,
    dim: usize,
}

/// Wraps per-device base objectives into the partitioned form.
pub fn make_full_personalization<B: SmoothObjective>(bases: Vec<B>, lambdas: Vec<f64>) -> Result<FullPersonalization<B>> {
    let n = bases.len();
    FullPersonalization::new(bases, lambdas, Weights::uniform(n))
}

impl<B: SmoothObjective> FullPersonalization<B> {
    pub fn new(bases: Vec<B>, lambdas: Vec<f64>, weights: Weights) -> Result<Self> {
        let dim = bases
            .first()
            .map(|b| b.dim())
            .ok_or_else(|| Error::Construction("need at least one base objective".into()))?;
        if let Some(i) = bases.iter().position(|b| b.dim() != dim) {
            return Err(Error::DimensionMismatch {
                what: "personal block (must equal the shared dimension)",
                device: Some(i),
                expected: dim,
                found: bases[i].dim(),
            });
        }
        if lambdas.len() != bases.len() || weights.len() != bases.len() {
            return Err(Error::Construction("one lambda and one weight per device required".into()));
        }
        if let Some(i) = lambdas.iter().position(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Construction(format!("lambda of device {i} must be finite and nonnegative")));
        }
        Ok(Self {
            bases,
            lambdas,
            weights,
            dim,
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn bases(&self) -> &[B] {
        &self.bases
    }

    /// `L_u = max lambda_i`, `L_v = max (L_i + lambda_i)`, `L_uv = L_vu = max lambda_i`.
    pub fn constants(&self) -> SmoothnessProfile {
        let l_u = self.lambdas.iter().copied().fold(0.0, f64::max);
        let l_v = self
            .bases
            .iter()
            .zip(&self.lambdas)
            .map(|(b, l)| b.smoothness() + l)
            .fold(0.0, f64::max);
        SmoothnessProfile::from_lipschitz(l_u, l_v, l_u, l_u)
    }
}

impl<B: SmoothObjective> PartitionedProblem for FullPersonalization<B> {
    fn num_devices(&self) -> usize {
        self.bases.len()
    }

    fn shared_dim(&self) -> usize {
        self.dim
    }

    fn personal_dim(&self, _i: usize) -> usize {
        self.dim
    }

    fn weights(&self) -> &Weights {
        &self.weights
    }

    fn device_value(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.bases[i].value(v) + 0.5 * self.lambdas[i] * (v - u).norm_squared()
    }

    fn device_grads(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let lam = self.lambdas[i];
        let diff = u - v;
        let gu = &diff * lam;
        let gv = self.bases[i].grad(v) - diff * lam;
        (gu, gv)
    }
}
