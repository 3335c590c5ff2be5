//! The partitioned-objective abstraction shared by every other module.
//!
//! A problem is a family of `n` device objectives `F_i(u, v_i)` where `u` is
//! shared by all devices and `v_i` is personal to device `i`. The global
//! objective is `F(u, V) = sum_i alpha_i F_i(u, v_i)`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::QuadraticEnsemble;
use crate::sampling::StreamKey;

/// Device weights `alpha_i`: strictly positive and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn uniform(n: usize) -> Self {
        Weights(vec![1.0 / n as f64; n])
    }

    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("no device weights".into()));
        }
        if let Some(i) = alpha.iter().position(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "weight of device {i} must be positive, got {}",
                alpha[i]
            )));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "device weights sum to {total}, expected 1"
            )));
        }
        Ok(Weights(alpha))
    }

    /// Weights proportional to the given positive counts.
    pub fn proportional(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("all counts are zero".into()));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }
}

/// A family of device objectives with exact partial gradients.
///
/// The `device_*` methods are unchecked: callers go through
/// [`eval_objective`], [`partial_grads`] and friends, which validate indices
/// and dimensions first.
pub trait PartitionedProblem: Send + Sync {
    fn num_devices(&self) -> usize;
    fn shared_dim(&self) -> usize;
    fn personal_dim(&self, i: usize) -> usize;
    fn weights(&self) -> &Weights;

    fn device_value(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> f64;
    fn device_grads(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>)
        -> (DVector<f64>, DVector<f64>);

    fn device_grad_u(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.device_grads(i, u, v).0
    }

    fn device_grad_v(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.device_grads(i, u, v).1
    }

    /// Number of training samples on device `i`, for finite-data problems.
    fn sample_count(&self, _i: usize) -> Option<usize> {
        None
    }

    /// Gradients of the loss averaged over the given sample indices.
    fn batch_grads(
        &self,
        _i: usize,
        _u: &DVector<f64>,
        _v: &DVector<f64>,
        _batch: &[usize],
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        None
    }

    /// Loss on held-out data of device `i`, when the problem carries any.
    fn heldout_value(&self, _i: usize, _u: &DVector<f64>, _v: &DVector<f64>) -> Option<f64> {
        None
    }

    fn as_quadratic(&self) -> Option<&QuadraticEnsemble> {
        None
    }

    fn personal_dims(&self) -> Vec<usize> {
        (0..self.num_devices()).map(|i| self.personal_dim(i)).collect()
    }
}

/// Shared vector `u` plus the ragged personal vectors `V = (v_1, ..., v_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub u: DVector<f64>,
    pub v: Vec<DVector<f64>>,
}

impl ParamState {
    pub fn new(u: DVector<f64>, v: Vec<DVector<f64>>) -> Self {
        Self { u, v }
    }

    pub fn zeros<P: PartitionedProblem + ?Sized>(problem: &P) -> Self {
        Self {
            u: DVector::zeros(problem.shared_dim()),
            v: (0..problem.num_devices())
                .map(|i| DVector::zeros(problem.personal_dim(i)))
                .collect(),
        }
    }

    /// Gaussian point with per-coordinate standard deviation `scale`.
    pub fn random<P: PartitionedProblem + ?Sized>(problem: &P, scale: f64, key: StreamKey) -> Self {
        let mut rng = key.stream();
        let mut draw = |d: usize| DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let u = draw(problem.shared_dim());
        let v = (0..problem.num_devices())
            .map(|i| draw(problem.personal_dim(i)))
            .collect();
        Self { u, v }
    }

    pub fn validate<P: PartitionedProblem + ?Sized>(&self, problem: &P) -> Result<()> {
        check_len("shared vector", None, problem.shared_dim(), self.u.len())?;
        check_len("device count", None, problem.num_devices(), self.v.len())?;
        for (i, vi) in self.v.iter().enumerate() {
            check_len("personal vector", Some(i), problem.personal_dim(i), vi.len())?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter().flatten()).all(|x| x.is_finite())
    }
}

fn check_len(what: &'static str, device: Option<usize>, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            device,
            expected,
            found,
        })
    }
}

pub(crate) fn check_device_args<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<()> {
    let n = problem.num_devices();
    if i >= n {
        return Err(Error::DeviceOutOfRange { index: i, n });
    }
    check_len("shared vector", Some(i), problem.shared_dim(), u.len())?;
    check_len("personal vector", Some(i), problem.personal_dim(i), v.len())
}

/// `sum_i alpha_i F_i(u, v_i)`.
pub fn eval_objective<P: PartitionedProblem + ?Sized>(problem: &P, state: &ParamState) -> Result<f64> {
    state.validate(problem)?;
    let alpha = problem.weights().as_slice();
    Ok(state
        .v
        .iter()
        .enumerate()
        .map(|(i, vi)| alpha[i] * problem.device_value(i, &state.u, vi))
        .sum())
}

/// `F_i(u, v_i)` for a single device.
pub fn device_objective<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<f64> {
    check_device_args(problem, i, u, v)?;
    Ok(problem.device_value(i, u, v))
}

/// Exact `(grad_u F_i, grad_v F_i)` at `(u, v_i)`.
pub fn partial_grads<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_device_args(problem, i, u, v)?;
    Ok(problem.device_grads(i, u, v))
}

/// Which block of parameters a gradient refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Shared,
    Personal,
}

/// How stochastic gradients are produced.
///
/// `sigma_u` and `sigma_v` are total standard deviations: the squared norm
/// of the noise has expectation `sigma^2`, spread evenly over coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum StocGradSpec {
    #[default]
    Exact,
    AdditiveGaussian { sigma_u: f64, sigma_v: f64 },
    Minibatch { batch_size: usize },
}

impl StocGradSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StocGradSpec::Exact => Ok(()),
            StocGradSpec::AdditiveGaussian { sigma_u, sigma_v } => {
                if sigma_u.is_finite() && sigma_v.is_finite() && sigma_u >= 0.0 && sigma_v >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "noise scales must be finite and nonnegative (sigma_u={sigma_u}, sigma_v={sigma_v})"
                    )))
                }
            }
            StocGradSpec::Minibatch { batch_size } => {
                if batch_size >= 1 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument("batch size must be positive".into()))
                }
            }
        }
    }

    pub fn sigma(&self, block: Block) -> f64 {
        match (*self, block) {
            (StocGradSpec::AdditiveGaussian { sigma_u, .. }, Block::Shared) => sigma_u,
            (StocGradSpec::AdditiveGaussian { sigma_v, .. }, Block::Personal) => sigma_v,
            _ => 0.0,
        }
    }
}

fn add_noise(g: &mut DVector<f64>, sigma: f64, key: StreamKey) {
    if sigma == 0.0 || g.is_empty() {
        return;
    }
    let scale = sigma / (g.len() as f64).sqrt();
    let mut rng = key.stream();
    for x in g.iter_mut() {
        *x += scale * rng.sample::<f64, _>(StandardNormal);
    }
}

fn draw_batch<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    batch_size: usize,
    key: StreamKey,
) -> Result<Vec<usize>> {
    let count = problem.sample_count(i).ok_or_else(|| {
        Error::Unsupported("minibatch gradients need a problem with finite per-device data".into())
    })?;
    let size = batch_size.min(count);
    let mut rng = key.stream();
    let mut batch = rand::seq::index::sample(&mut rng, count, size).into_vec();
    batch.sort_unstable();
    Ok(batch)
}

fn minibatch_grads<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    batch_size: usize,
    key: StreamKey,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let batch = draw_batch(problem, i, batch_size, key)?;
    problem
        .batch_grads(i, u, v, &batch)
        .ok_or_else(|| Error::Unsupported("problem does not expose per-sample gradients".into()))
}

/// Stochastic partial gradients for both blocks from a single draw.
///
/// Gaussian noise on the shared block comes from `key_u`, noise on the
/// personal block from `key_v`; a minibatch is sampled once from `key_u` and
/// used for both blocks.
pub fn stoc_grads<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    spec: &StocGradSpec,
    key_u: StreamKey,
    key_v: StreamKey,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_device_args(problem, i, u, v)?;
    match *spec {
        StocGradSpec::Exact => Ok(problem.device_grads(i, u, v)),
        StocGradSpec::AdditiveGaussian { sigma_u, sigma_v } => {
            let (mut gu, mut gv) = problem.device_grads(i, u, v);
            add_noise(&mut gu, sigma_u, key_u);
            add_noise(&mut gv, sigma_v, key_v);
            Ok((gu, gv))
        }
        StocGradSpec::Minibatch { batch_size } => minibatch_grads(problem, i, u, v, batch_size, key_u),
    }
}

/// Stochastic gradient of one block, drawn from `key`.
pub fn stoc_grad_block<P: PartitionedProblem + ?Sized>(
    problem: &P,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    block: Block,
    spec: &StocGradSpec,
    key: StreamKey,
) -> Result<DVector<f64>> {
    check_device_args(problem, i, u, v)?;
    let exact = |p: &P| match block {
        Block::Shared => p.device_grad_u(i, u, v),
        Block::Personal => p.device_grad_v(i, u, v),
    };
    match *spec {
        StocGradSpec::Exact => Ok(exact(problem)),
        StocGradSpec::AdditiveGaussian { .. } => {
            let mut g = exact(problem);
            add_noise(&mut g, spec.sigma(block), key);
            Ok(g)
        }
        StocGradSpec::Minibatch { batch_size } => {
            let (gu, gv) = minibatch_grads(problem, i, u, v, batch_size, key)?;
            Ok(match block {
                Block::Shared => gu,
                Block::Personal => gv,
            })
        }
    }
}

/// Stationarity measures at a point: `Delta_u = ||grad_u F(u, V)||^2` and
/// `Delta_v = (1/n) sum_i ||grad_v F_i(u, v_i)||^2`.
pub fn stationarity<P: PartitionedProblem + ?Sized>(problem: &P, state: &ParamState) -> Result<(f64, f64)> {
    state.validate(problem)?;
    let alpha = problem.weights().as_slice();
    let n = problem.num_devices();
    let mut grad_u = DVector::zeros(problem.shared_dim());
    let mut dv = 0.0;
    for (i, vi) in state.v.iter().enumerate() {
        let (gu, gv) = problem.device_grads(i, &state.u, vi);
        grad_u.axpy(alpha[i], &gu, 1.0);
        dv += gv.norm_squared();
    }
    Ok((grad_u.norm_squared(), dv / n as f64))
}

/// `grad_u F(u, V) = sum_i alpha_i grad_u F_i(u, v_i)`.
pub fn shared_gradient<P: PartitionedProblem + ?Sized>(problem: &P, state: &ParamState) -> Result<DVector<f64>> {
    state.validate(problem)?;
    let alpha = problem.weights().as_slice();
    let mut g = DVector::zeros(problem.shared_dim());
    for (i, vi) in state.v.iter().enumerate() {
        g.axpy(alpha[i], &problem.device_grad_u(i, &state.u, vi), 1.0);
    }
    Ok(g)
}
