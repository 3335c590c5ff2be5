//! Brute-force oracles for the analysis machinery.
//!
//! Each check recomputes its quantity by enumeration or from hand-assembled
//! formulas and compares against the library or the published bound. Reports
//! are deterministic given the seed.

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{ParamState, PartitionedProblem, Weights};
use crate::problems::{
    closed_form_constants, make_quadratic_ensemble, AdditiveSpec, FullPersonalization, QuadraticBase,
    QuadraticEnsembleSpec, SmoothObjective, SmoothnessProfile,
};
use crate::sampling::{subset_mean_variance, Purpose, Stream, StreamKey};

pub const MAX_ENUMERATION_DEVICES: usize = 8;
pub const MAX_ENUMERATION_COHORTS: usize = 70;
pub const MAX_SAMPLING_DEVICES: usize = 10;
/// Monte-Carlo slack in standard errors.
pub const SE_SLACK: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::NotApplicable => "n/a",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub instances: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl OracleReport {
    /// Fails iff the residual exceeds the tolerance (or is not a number).
    pub fn judge(name: impl Into<String>, instances: usize, max_residual: f64, tolerance: f64) -> Self {
        let status = if max_residual <= tolerance {
            Status::Pass
        } else {
            Status::Fail
        };
        Self {
            name: name.into(),
            instances,
            max_residual,
            tolerance,
            status,
            note: None,
        }
    }

    pub fn not_applicable(name: impl Into<String>, note: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            max_residual: 0.0,
            tolerance: 0.0,
            status: Status::NotApplicable,
            note: Some(note.into()),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn failed(&self) -> bool {
        self.status == Status::Fail
    }

    /// Combines same-kind reports into one with the worst residual.
    pub fn merge(name: impl Into<String>, tolerance: f64, reports: &[OracleReport]) -> Self {
        let instances = reports.iter().map(|r| r.instances).sum();
        let worst = reports.iter().map(|r| r.max_residual).fold(0.0, f64::max);
        let worst = if reports.iter().any(|r| r.max_residual.is_nan()) {
            f64::NAN
        } else {
            worst
        };
        Self::judge(name, instances, worst, tolerance)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "check={} status={} instances={} max_residual={:e} tolerance={:e}",
            self.name, self.status, self.instances, self.max_residual, self.tolerance
        )?;
        if let Some(note) = &self.note {
            write!(f, " note={note:?}")?;
        }
        Ok(())
    }
}

fn gaussian(rng: &mut Stream, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn shared_grad_at<P: PartitionedProblem + ?Sized>(problem: &P, u: &DVector<f64>, v: &[DVector<f64>]) -> DVector<f64> {
    let mut g = DVector::zeros(problem.shared_dim());
    for (i, (a, vi)) in problem.weights().as_slice().iter().zip(v).enumerate() {
        g.axpy(*a, &problem.device_grad_u(i, u, vi), 1.0);
    }
    g
}

/// Outcome of the virtual-full-participation check.
#[derive(Debug, Clone, PartialEq)]
pub struct VfpOutcome {
    /// Expectation commutes with the inner product when the gradient is
    /// taken at the virtual full-participation personal state.
    pub decoupled: OracleReport,
    /// Same comparison with the actual post-round personal state; nonzero
    /// whenever the gradient depends on which devices were sampled.
    pub coupled_residual: f64,
}

/// One FedAlt round with single local steps, enumerated over every cohort.
pub fn check_vfp_identity<P: PartitionedProblem + ?Sized>(
    problem: &P,
    state: &ParamState,
    m: usize,
    gamma_u: f64,
    gamma_v: f64,
) -> Result<VfpOutcome> {
    state.validate(problem)?;
    let n = problem.num_devices();
    if n > MAX_ENUMERATION_DEVICES {
        return Err(Error::InvalidArgument(format!(
            "enumeration is limited to {MAX_ENUMERATION_DEVICES} devices, got {n}"
        )));
    }
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("cohort size {m} outside 1..={n}")));
    }
    let u = &state.u;
    let alpha = problem.weights().as_slice();
    let v_tilde: Vec<_> = (0..n)
        .map(|i| &state.v[i] - gamma_v * problem.device_grad_v(i, u, &state.v[i]))
        .collect();
    let u_steps: Vec<_> = (0..n)
        .map(|i| -gamma_u * problem.device_grad_u(i, u, &v_tilde[i]))
        .collect();
    let g_tilde = shared_grad_at(problem, u, &v_tilde);

    let d0 = problem.shared_dim();
    let mut count = 0usize;
    let mut mean_step = DVector::zeros(d0);
    let mut mean_grad = DVector::zeros(d0);
    let mut decoupled_lhs = 0.0;
    let mut coupled_lhs = 0.0;
    for cohort in (0..n).combinations(m) {
        let mass: f64 = cohort.iter().map(|&i| alpha[i]).sum();
        let mut step = DVector::zeros(d0);
        for &i in &cohort {
            step.axpy(alpha[i] / mass, &u_steps[i], 1.0);
        }
        let mut v_next = state.v.clone();
        for &i in &cohort {
            v_next[i] = v_tilde[i].clone();
        }
        let g = shared_grad_at(problem, u, &v_next);
        decoupled_lhs += g_tilde.dot(&step);
        coupled_lhs += g.dot(&step);
        mean_step += &step;
        mean_grad += &g;
        count += 1;
    }
    let c = count as f64;
    mean_step /= c;
    mean_grad /= c;
    decoupled_lhs /= c;
    coupled_lhs /= c;
    let decoupled_rhs = g_tilde.dot(&mean_step);
    let coupled_rhs = mean_grad.dot(&mean_step);
    let rel = |lhs: f64, rhs: f64| (lhs - rhs).abs() / rhs.abs().max(1.0);
    Ok(VfpOutcome {
        decoupled: OracleReport::judge("vfp/decoupled", count, rel(decoupled_lhs, decoupled_rhs), 1e-12),
        coupled_residual: rel(coupled_lhs, coupled_rhs),
    })
}

/// Negative-control switches that corrupt one copied formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    #[default]
    None,
    /// Flips `n - m` to `m - n` in the sampling-variance closed form.
    SamplingSign,
    /// Flips the sign of the linear terms in the block-smoothness bound.
    SmoothnessSign,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fault::None),
            "sampling-sign" => Ok(Fault::SamplingSign),
            "smoothness-sign" => Ok(Fault::SmoothnessSign),
            other => Err(Error::InvalidArgument(format!("unknown fault {other:?}"))),
        }
    }
}

fn faulty_subset_variance(vectors: &[DVector<f64>], m: usize) -> f64 {
    let n = vectors.len() as f64;
    let mean = vectors.iter().fold(DVector::zeros(vectors[0].len()), |acc, x| acc + x) / n;
    let spread = vectors.iter().map(|x| (x - &mean).norm_squared()).sum::<f64>() / n;
    if vectors.len() == 1 {
        return 0.0;
    }
    (m as f64 - n) / (n - 1.0) / m as f64 * spread
}

/// Exhaustive expectation of the subset-mean deviation against the closed form.
pub fn check_sampling_lemma(vectors: &[DVector<f64>], m: usize) -> Result<OracleReport> {
    sampling_lemma(vectors, m, Fault::None)
}

fn sampling_lemma(vectors: &[DVector<f64>], m: usize, fault: Fault) -> Result<OracleReport> {
    let n = vectors.len();
    if n > MAX_SAMPLING_DEVICES {
        return Err(Error::InvalidArgument(format!(
            "enumeration is limited to {MAX_SAMPLING_DEVICES} vectors, got {n}"
        )));
    }
    let closed = match fault {
        Fault::SamplingSign => {
            subset_mean_variance(vectors, m)?;
            faulty_subset_variance(vectors, m)
        }
        _ => subset_mean_variance(vectors, m)?,
    };
    let dim = vectors[0].len();
    let mean = vectors.iter().fold(DVector::zeros(dim), |acc, x| acc + x) / n as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for subset in (0..n).combinations(m) {
        let s = subset.iter().fold(DVector::zeros(dim), |acc, &i| acc + &vectors[i]) / m as f64;
        total += (s - &mean).norm_squared();
        count += 1;
    }
    let enumerated = total / count as f64;
    Ok(OracleReport::judge("sampling/lemma", count, (enumerated - closed).abs(), 1e-12))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftVariant {
    /// `sum_{t<tau} ||w_t - w_0||^2 <= 8 g^2 tau^2 (tau-1) ||grad||^2 + 4 g^2 tau^2 (tau-1) sigma^2`.
    Sum,
    /// `||w_tau - w_0||^2 <= 16 g^2 tau^2 ||grad||^2 + 8 g^2 tau^2 sigma^2`.
    Endpoint,
}

impl DriftVariant {
    fn name(self) -> &'static str {
        match self {
            DriftVariant::Sum => "sum",
            DriftVariant::Endpoint => "endpoint",
        }
    }

    /// Largest step size covered by the lemma.
    pub fn max_step(self, tau: usize, l: f64) -> f64 {
        match self {
            DriftVariant::Sum => 1.0 / (2f64.sqrt() * tau as f64 * l),
            DriftVariant::Endpoint => 1.0 / (2.0 * tau as f64 * l),
        }
    }

    pub fn bound(self, gamma: f64, tau: usize, grad_norm2: f64, sigma: f64) -> f64 {
        let g2t2 = gamma * gamma * (tau * tau) as f64;
        match self {
            DriftVariant::Sum => {
                let k = (tau - 1) as f64;
                8.0 * g2t2 * k * grad_norm2 + 4.0 * g2t2 * k * sigma * sigma
            }
            DriftVariant::Endpoint => 16.0 * g2t2 * grad_norm2 + 8.0 * g2t2 * sigma * sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSetup {
    pub variant: DriftVariant,
    pub gamma: f64,
    pub tau: usize,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Monte-Carlo mean of the drift statistic of SGD with additive Gaussian
/// noise (total variance `sigma^2`) against the lemma's bound.
pub fn check_client_drift<F: SmoothObjective + ?Sized>(f: &F, w0: &DVector<f64>, setup: &DriftSetup) -> OracleReport {
    let name = format!("drift/{}/tau={}", setup.variant.name(), setup.tau);
    let l = f.smoothness();
    if setup.tau == 0 || setup.trials == 0 || w0.len() != f.dim() {
        return OracleReport::not_applicable(name, "degenerate setup");
    }
    if !(setup.gamma > 0.0 && setup.gamma <= setup.variant.max_step(setup.tau, l)) {
        return OracleReport::not_applicable(name, format!("step {} violates the precondition", setup.gamma));
    }
    let dim = w0.len();
    let per_coord = setup.sigma / (dim as f64).sqrt();
    let stats: Vec<f64> = (0..setup.trials)
        .map(|trial| {
            let mut w = w0.clone();
            let mut acc = 0.0;
            for k in 0..setup.tau {
                if setup.variant == DriftVariant::Sum {
                    acc += (&w - w0).norm_squared();
                }
                let mut rng = StreamKey::new(setup.seed, Purpose::NoiseU).round(trial).step(k).stream();
                let g = f.grad(&w) + gaussian(&mut rng, dim, per_coord);
                w.axpy(-setup.gamma, &g, 1.0);
            }
            match setup.variant {
                DriftVariant::Sum => acc,
                DriftVariant::Endpoint => (&w - w0).norm_squared(),
            }
        })
        .collect();
    let t = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / t;
    let se = if stats.len() > 1 {
        (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (t - 1.0) / t).sqrt()
    } else {
        0.0
    };
    let bound = setup
        .variant
        .bound(setup.gamma, setup.tau, f.grad(w0).norm_squared(), setup.sigma);
    let excess = (mean - bound - SE_SLACK * se).max(0.0);
    OracleReport::judge(name, setup.trials, excess, 1e-12 * bound.max(1.0))
        .with_note(format!("mean={mean:e} se={se:e} bound={bound:e}"))
}

/// Quadratic-term factor in the two-block descent inequality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockBound {
    /// `(1 + chi^2)` on both blocks, as published. Bounding the cross term
    /// `chi sqrt(L_u L_v) |du| |dv|` by `chi^2 (L_u |du|^2 + L_v |dv|^2) / 2`
    /// needs `chi^2 >= chi`, so this is only guaranteed for `chi = 0` or
    /// `chi >= 1`.
    Published,
    /// `(1 + chi)` on both blocks, valid for every `chi`.
    Young,
}

impl BlockBound {
    pub fn factor(self, chi: f64) -> f64 {
        match self {
            BlockBound::Published => 1.0 + chi * chi,
            BlockBound::Young => 1.0 + chi,
        }
    }

    /// Whether the bound is a theorem for this `chi`.
    pub fn valid_for(self, chi: f64) -> bool {
        match self {
            BlockBound::Published => chi >= 1.0 || chi == 0.0,
            BlockBound::Young => true,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BlockBound::Published => "published",
            BlockBound::Young => "young",
        }
    }
}

/// `rhs - lhs` of the two-block descent inequality for device `i`.
pub fn block_smoothness_slack<P: PartitionedProblem + ?Sized>(
    problem: &P,
    profile: &SmoothnessProfile,
    bound: BlockBound,
    i: usize,
    (u, v): (&DVector<f64>, &DVector<f64>),
    (u2, v2): (&DVector<f64>, &DVector<f64>),
) -> f64 {
    smoothness_slack(problem, profile, bound, i, (u, v), (u2, v2), Fault::None)
}

fn smoothness_slack<P: PartitionedProblem + ?Sized>(
    problem: &P,
    profile: &SmoothnessProfile,
    bound: BlockBound,
    i: usize,
    (u, v): (&DVector<f64>, &DVector<f64>),
    (u2, v2): (&DVector<f64>, &DVector<f64>),
    fault: Fault,
) -> f64 {
    let (gu, gv) = problem.device_grads(i, u, v);
    let (du, dv) = (u2 - u, v2 - v);
    let scale = bound.factor(profile.chi);
    let sign = if fault == Fault::SmoothnessSign { -1.0 } else { 1.0 };
    let rhs = sign * (gu.dot(&du) + gv.dot(&dv))
        + 0.5 * profile.l_u * scale * du.norm_squared()
        + 0.5 * profile.l_v * scale * dv.norm_squared();
    rhs - (problem.device_value(i, u2, v2) - problem.device_value(i, u, v))
}

/// Minimum slack over `trials` random point pairs with standard normal
/// coordinates. Reported as not applicable (with the measured residual in the
/// note) when `bound` is not a theorem for the profile's `chi`.
pub fn check_block_smoothness<P: PartitionedProblem + ?Sized>(
    problem: &P,
    profile: &SmoothnessProfile,
    bound: BlockBound,
    i: usize,
    trials: usize,
    seed: u64,
) -> Result<OracleReport> {
    block_smoothness(problem, profile, bound, i, trials, seed, Fault::None)
}

/// Smallest slack over the sampled pairs (`+inf` when `trials == 0`).
pub fn min_block_smoothness_slack<P: PartitionedProblem + ?Sized>(
    problem: &P,
    profile: &SmoothnessProfile,
    bound: BlockBound,
    i: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    min_slack(problem, profile, bound, i, trials, seed, Fault::None)
}

fn min_slack<P: PartitionedProblem + ?Sized>(
    problem: &P,
    profile: &SmoothnessProfile,
    bound: BlockBound,
    i: usize,
    trials: usize,
    seed: u64,
    fault: Fault,
) -> Result<f64> {
    let n = problem.num_devices();
    if i >= n {
        return Err(Error::DeviceOutOfRange { index: i, n });
    }
    let (d0, di) = (problem.shared_dim(), problem.personal_dim(i));
    let mut worst = f64::INFINITY;
    for t in 0..trials {
        let mut rng = StreamKey::new(seed, Purpose::Init).device(i).round(t).stream();
        let u = gaussian(&mut rng, d0, 1.0);
        let v = gaussian(&mut rng, di, 1.0);
        let u2 = gaussian(&mut rng, d0, 1.0);
        let v2 = gaussian(&mut rng, di, 1.0);
        worst = worst.min(smoothness_slack(problem, profile, bound, i, (&u, &v), (&u2, &v2), fault));
    }
    Ok(worst)
}

fn block_smoothness<P: PartitionedProblem + ?Sized>(
    problem: &P,
    profile: &SmoothnessProfile,
    bound: BlockBound,
    i: usize,
    trials: usize,
    seed: u64,
    fault: Fault,
) -> Result<OracleReport> {
    let worst = min_slack(problem, profile, bound, i, trials, seed, fault)?;
    let residual = if trials == 0 { 0.0 } else { (-worst).max(0.0) };
    let name = format!("smoothness/{}/device={i}", bound.name());
    if !bound.valid_for(profile.chi) {
        let mut report = OracleReport::not_applicable(name, format!("bound not guaranteed at chi = {}", profile.chi));
        report.instances = trials;
        report.max_residual = residual;
        return Ok(report);
    }
    Ok(OracleReport::judge(name, trials, residual, 1e-10))
}

pub const FD_STEP: f64 = 1e-5;

/// Largest central-difference error over `points` random evaluation points,
/// relative to `max(1, ||grad||_inf)`.
pub fn check_gradients<P: PartitionedProblem + ?Sized>(problem: &P, name: &str, points: usize, seed: u64) -> OracleReport {
    let n = problem.num_devices();
    let mut worst: f64 = 0.0;
    for k in 0..points {
        let i = k % n;
        let state = ParamState::random(problem, 1.0, StreamKey::new(seed, Purpose::Init).round(k));
        let (u, v) = (&state.u, &state.v[i]);
        let (gu, gv) = problem.device_grads(i, u, v);
        let mut fd_u = DVector::zeros(u.len());
        for j in 0..u.len() {
            let (mut up, mut dn) = (u.clone(), u.clone());
            up[j] += FD_STEP;
            dn[j] -= FD_STEP;
            fd_u[j] = (problem.device_value(i, &up, v) - problem.device_value(i, &dn, v)) / (2.0 * FD_STEP);
        }
        let mut fd_v = DVector::zeros(v.len());
        for j in 0..v.len() {
            let (mut up, mut dn) = (v.clone(), v.clone());
            up[j] += FD_STEP;
            dn[j] -= FD_STEP;
            fd_v[j] = (problem.device_value(i, u, &up) - problem.device_value(i, u, &dn)) / (2.0 * FD_STEP);
        }
        let scale = gu.amax().max(gv.amax()).max(1.0);
        let err = (fd_u - gu).amax().max((fd_v - gv).amax()) / scale;
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    OracleReport::judge(format!("gradient/{name}"), points, worst, 1e-6)
}

/// Full-personalization gradients against `lambda (u - v)` and
/// `grad F~(v) - lambda (u - v)`, evaluated by hand.
pub fn check_reduction_gradients(problem: &FullPersonalization<QuadraticBase>, points: usize, seed: u64) -> OracleReport {
    let n = problem.num_devices();
    let mut worst: f64 = 0.0;
    for k in 0..points {
        let state = ParamState::random(problem, 1.0, StreamKey::new(seed, Purpose::Init).round(k));
        for i in 0..n {
            let (u, v) = (&state.u, &state.v[i]);
            let base = &problem.bases()[i];
            let lambda = problem.lambdas()[i];
            let diff = u - v;
            let want_u = lambda * &diff;
            let want_v = &base.h * v + &base.g - lambda * &diff;
            let (gu, gv) = problem.device_grads(i, u, v);
            worst = worst.max((gu - want_u).amax()).max((gv - want_v).amax());
        }
    }
    OracleReport::judge("reduction/gradients", points * n, worst, 1e-12)
}

/// `chi^2 = lambda / (lambda + L)` on quadratic bases with top eigenvalue `L`.
pub fn check_reduction_chi(lambdas: &[f64], smoothness: &[f64], dim: usize) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for &l in smoothness {
        for &lambda in lambdas {
            let mut diag = DVector::from_element(dim, l / 2.0);
            diag[0] = l;
            let base = QuadraticBase::new(DMatrix::from_diagonal(&diag), DVector::zeros(dim), 0.0)?;
            let p = FullPersonalization::new(vec![base], vec![lambda], Weights::uniform(1))?;
            worst = worst.max((p.constants().chi2() - lambda / (lambda + l)).abs());
            count += 1;
        }
    }
    Ok(OracleReport::judge("reduction/chi", count, worst, 1e-14))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    All,
    Gradients,
    Sampling,
    Vfp,
    Drift,
    Smoothness,
    Reduction,
}

impl Suite {
    pub const NAMES: [&'static str; 7] = ["all", "gradients", "sampling", "vfp", "drift", "smoothness", "reduction"];

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "gradients" => Suite::Gradients,
            "sampling" => Suite::Sampling,
            "vfp" => Suite::Vfp,
            "drift" => Suite::Drift,
            "smoothness" => Suite::Smoothness,
            "reduction" => Suite::Reduction,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown suite {other:?}; expected one of {}",
                    Suite::NAMES.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    pub fault: Fault,
}

/// Random quadratic bases `F~_i(x) = 1/2 x'Hx + g'x` with `H` symmetric.
pub fn random_quadratic_bases(n: usize, dim: usize, seed: u64) -> Result<Vec<QuadraticBase>> {
    (0..n)
        .map(|i| {
            let mut rng = StreamKey::new(seed, Purpose::Init).device(i).stream();
            let m = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let h = (&m + m.transpose()) * 0.5;
            QuadraticBase::new(h, gaussian(&mut rng, dim, 1.0), 0.0)
        })
        .collect()
}

/// Coupled ensemble used by the participation checks; `chi` is about 0.6.
pub fn coupled_spec(n: usize, d0: usize, di: usize, seed: u64) -> QuadraticEnsembleSpec {
    QuadraticEnsembleSpec {
        shared_eigs: (1.5, 2.0),
        personal_eigs: (1.5, 2.0),
        coupling: 1.2,
        heterogeneity: 1.0,
        ..QuadraticEnsembleSpec::uniform(n, d0, di, seed)
    }
}

type Job<'a> = Box<dyn Fn() -> Result<Vec<OracleReport>> + Send + Sync + 'a>;

fn gradient_jobs(seed: u64) -> Vec<Job<'static>> {
    vec![
        Box::new(move || {
            let spec = QuadraticEnsembleSpec {
                personal_dims: vec![3, 2, 4, 1],
                ..coupled_spec(4, 4, 0, seed)
            };
            let p = make_quadratic_ensemble(&spec)?;
            Ok(vec![check_gradients(&p, "quadratic", 100, seed)])
        }),
        Box::new(move || {
            let p = AdditiveSpec {
                n: 4,
                d0: 4,
                personal_dim: 3,
                samples: 30,
                heldout_samples: 0,
                heterogeneity: 1.0,
                noise: 0.1,
                seed,
            }
            .generate()?;
            Ok(vec![check_gradients(&p, "additive", 100, seed)])
        }),
        Box::new(move || {
            let p = FullPersonalization::new(
                random_quadratic_bases(3, 4, seed)?,
                vec![0.5, 1.0, 2.0],
                Weights::uniform(3),
            )?;
            Ok(vec![check_gradients(&p, "full", 100, seed)])
        }),
    ]
}

fn sampling_job(seed: u64, fault: Fault) -> Job<'static> {
    Box::new(move || {
        let mut reports = Vec::new();
        for n in 1..=MAX_ENUMERATION_DEVICES {
            for set in 0..20 {
                let mut rng = StreamKey::new(seed, Purpose::Init).round(n).step(set).stream();
                let vectors: Vec<_> = (0..n).map(|_| gaussian(&mut rng, 3, 1.0)).collect();
                for m in 1..=n {
                    reports.push(sampling_lemma(&vectors, m, fault)?);
                }
            }
        }
        Ok(vec![OracleReport::merge("sampling/lemma", 1e-12, &reports)])
    })
}

/// Fraction of coupled instances whose coupled residual is at most `1e-6`
/// is reported as the residual of `vfp/coupled`, against a 5% allowance.
fn vfp_job(seed: u64) -> Job<'static> {
    Box::new(move || {
        let mut decoupled = Vec::new();
        let (mut coupled_total, mut coupled_small) = (0usize, 0usize);
        let mut independent: f64 = 0.0;
        let mut independent_count = 0;
        for n in 2..=6 {
            for rep in 0..4 {
                let s = seed.wrapping_add((n * 16 + rep) as u64);
                let p = make_quadratic_ensemble(&coupled_spec(n, 3, 2, s))?;
                let flat = make_quadratic_ensemble(&QuadraticEnsembleSpec {
                    coupling: 0.0,
                    ..coupled_spec(n, 3, 2, s)
                })?;
                let state = ParamState::random(&p, 1.0, StreamKey::new(s, Purpose::Init));
                for m in 1..=n {
                    let out = check_vfp_identity(&p, &state, m, 0.2, 0.2)?;
                    decoupled.push(out.decoupled);
                    if m < n {
                        coupled_total += 1;
                        coupled_small += usize::from(out.coupled_residual <= 1e-6);
                    }
                    let out = check_vfp_identity(&flat, &state, m, 0.2, 0.2)?;
                    decoupled.push(out.decoupled);
                    independent = independent.max(out.coupled_residual);
                    independent_count += 1;
                }
            }
        }
        Ok(vec![
            OracleReport::merge("vfp/decoupled", 1e-12, &decoupled),
            OracleReport::judge(
                "vfp/coupled",
                coupled_total,
                coupled_small as f64 / coupled_total as f64,
                0.05,
            )
            .with_note("residual is the fraction of partial-participation instances where the coupled identity holds"),
            OracleReport::judge("vfp/uncoupled-blocks", independent_count, independent, 1e-12),
        ])
    })
}

fn drift_jobs(seed: u64) -> Vec<Job<'static>> {
    let mut jobs: Vec<Job<'static>> = Vec::new();
    for variant in [DriftVariant::Sum, DriftVariant::Endpoint] {
        for tau in [2usize, 4, 8] {
            jobs.push(Box::new(move || {
                let f = random_quadratic_bases(1, 5, seed)?.remove(0);
                let w0 = DVector::from_element(5, 1.0);
                let gamma = variant.max_step(tau, f.smoothness());
                let noisy = DriftSetup {
                    variant,
                    gamma,
                    tau,
                    sigma: 1.0,
                    trials: 500,
                    seed,
                };
                let exact = DriftSetup {
                    sigma: 0.0,
                    trials: 1,
                    ..noisy
                };
                let mut det = check_client_drift(&f, &w0, &exact);
                det.name.push_str("/exact");
                Ok(vec![check_client_drift(&f, &w0, &noisy), det])
            }));
        }
    }
    jobs
}

/// Ensemble whose coupling exceeds the geometric mean curvature, so
/// `chi >= 1`. Devices are individually nonconvex; the aggregate stays
/// bounded below because each device couples only `di < d0` directions.
pub fn strongly_coupled_spec(n: usize, d0: usize, di: usize, seed: u64) -> QuadraticEnsembleSpec {
    QuadraticEnsembleSpec {
        shared_eigs: (1.5, 2.0),
        personal_eigs: (1.0, 1.2),
        coupling: 1.6,
        device_bounded_below: false,
        ..QuadraticEnsembleSpec::uniform(n, d0, di, seed)
    }
}

fn smoothness_job(seed: u64, fault: Fault) -> Job<'static> {
    Box::new(move || {
        let specs = [
            ("weak", QuadraticEnsembleSpec::uniform(4, 4, 3, seed)),
            ("coupled", coupled_spec(4, 4, 3, seed)),
            ("strong", strongly_coupled_spec(16, 8, 1, seed)),
        ];
        let mut reports = Vec::new();
        for (label, spec) in specs {
            let p = make_quadratic_ensemble(&spec)?;
            let profile = closed_form_constants(&p)?;
            for bound in [BlockBound::Published, BlockBound::Young] {
                let per_device: Vec<_> = (0..p.num_devices())
                    .map(|i| block_smoothness(&p, &profile, bound, i, 1000, seed, fault))
                    .collect::<Result<_>>()?;
                let name = format!("smoothness/{}/{label}", bound.name());
                let report = if per_device.iter().all(|r| r.status == Status::NotApplicable) {
                    let mut merged = OracleReport::merge(name, 1e-10, &per_device);
                    merged.status = Status::NotApplicable;
                    merged.with_note(format!("bound not guaranteed at chi = {}", profile.chi))
                } else {
                    OracleReport::merge(name, 1e-10, &per_device)
                };
                reports.push(report);
            }
        }
        Ok(reports)
    })
}

fn reduction_job(seed: u64) -> Job<'static> {
    Box::new(move || {
        let p = FullPersonalization::new(random_quadratic_bases(3, 4, seed)?, vec![0.0, 1.0, 10.0], Weights::uniform(3))?;
        Ok(vec![
            check_reduction_gradients(&p, 100, seed),
            check_reduction_chi(&[0.1, 1.0, 10.0], &[1.0, 3.0], 4)?,
        ])
    })
}

/// Runs the selected checks in parallel; reports come back sorted by name.
pub fn run_suite(suite: Suite, options: &SuiteOptions) -> Result<Vec<OracleReport>> {
    let seed = options.seed;
    let mut jobs: Vec<Job<'static>> = Vec::new();
    if suite.includes(Suite::Gradients) {
        jobs.extend(gradient_jobs(seed));
    }
    if suite.includes(Suite::Sampling) {
        jobs.push(sampling_job(seed, options.fault));
    }
    if suite.includes(Suite::Vfp) {
        jobs.push(vfp_job(seed));
    }
    if suite.includes(Suite::Drift) {
        jobs.extend(drift_jobs(seed));
    }
    if suite.includes(Suite::Smoothness) {
        jobs.push(smoothness_job(seed, options.fault));
    }
    if suite.includes(Suite::Reduction) {
        jobs.push(reduction_job(seed));
    }
    let mut reports: Vec<OracleReport> = jobs
        .par_iter()
        .map(|job| job())
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    reports.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(reports)
}
