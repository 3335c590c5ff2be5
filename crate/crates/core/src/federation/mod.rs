//! Outer training loops: FedAlt, FedSim and the FedAvg baseline.

mod finetune;
mod pipeline;

pub use finetune::{finetune, FinetuneConfig, FinetuneReg};
pub use pipeline::{run_pipeline, run_pipeline_with, DeviceDelta, PipelineConfig, PipelineOutput, Stage, StageError};

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{eval_objective, stationarity, ParamState, PartitionedProblem, StocGradSpec};
use crate::problems::FrozenPersonal;
use crate::sampling::{sample_cohort, Purpose, StreamKey};
use crate::solvers::{local_alt, local_sim, LocalHyper, LocalKeys};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAlt,
    FedSim,
    FedAvg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAlt => "fedalt",
            Algorithm::FedSim => "fedsim",
            Algorithm::FedAvg => "fedavg",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether personal parameters persist between a device's participations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Statefulness {
    #[default]
    Stateful,
    /// Every participation restarts the personal block from the warm-start
    /// reference. The trained block is still recorded in the state so it can
    /// be evaluated.
    Stateless,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub cohort_size: usize,
    pub hp: LocalHyper,
    pub noise: StocGradSpec,
    pub statefulness: Statefulness,
    /// Reference personal blocks for stateless devices.
    pub warm_start: Option<Vec<DVector<f64>>>,
    pub seed: u64,
    pub parallel: bool,
}

impl FedConfig {
    pub fn new(algorithm: Algorithm, rounds: usize, cohort_size: usize, hp: LocalHyper, seed: u64) -> Self {
        Self {
            algorithm,
            rounds,
            cohort_size,
            hp,
            noise: StocGradSpec::Exact,
            statefulness: Statefulness::Stateful,
            warm_start: None,
            seed,
            parallel: false,
        }
    }

    pub fn validate<P: PartitionedProblem + ?Sized>(&self, problem: &P) -> Result<()> {
        self.hp.validate()?;
        self.noise.validate()?;
        let n = problem.num_devices();
        if self.cohort_size < 1 || self.cohort_size > n {
            return Err(Error::InvalidArgument(format!(
                "cohort size {} must lie in 1..={n}",
                self.cohort_size
            )));
        }
        if self.statefulness == Statefulness::Stateless && self.algorithm != Algorithm::FedAvg {
            let ws = self
                .warm_start
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("stateless devices need a warm-start reference".into()))?;
            if ws.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "warm-start reference",
                    device: None,
                    expected: n,
                    found: ws.len(),
                });
            }
            for (i, w) in ws.iter().enumerate() {
                if w.len() != problem.personal_dim(i) {
                    return Err(Error::DimensionMismatch {
                        what: "warm-start reference",
                        device: Some(i),
                        expected: problem.personal_dim(i),
                        found: w.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Shared vector returned by a device to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub device: usize,
    pub shared: DVector<f64>,
}

/// One round's record. Stationarity and objective are measured over all
/// devices at the state the round started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub algorithm: Algorithm,
    pub cohort: Vec<usize>,
    pub delta_u: f64,
    pub delta_v: f64,
    pub objective: f64,
    #[serde(skip)]
    pub wall_clock: Duration,
    pub cohort_key: StreamKey,
    pub uploads: Vec<Upload>,
}

impl RoundTrace {
    /// `Delta_u / L_u + (m/n) Delta_v / L_v`.
    pub fn stationarity(&self, l_u: f64, l_v: f64, participation: f64) -> f64 {
        self.delta_u / l_u + participation * self.delta_v / l_v
    }
}

/// First round whose stationarity falls below `threshold`, if any.
pub fn rounds_to_threshold(traces: &[RoundTrace], threshold: f64, l_u: f64, l_v: f64, participation: f64) -> Option<usize> {
    traces
        .iter()
        .position(|t| t.stationarity(l_u, l_v, participation) < threshold)
}

/// Neumaier-compensated accumulation, one accumulator per coordinate.
struct CompensatedSum {
    sum: DVector<f64>,
    carry: DVector<f64>,
}

impl CompensatedSum {
    fn new(dim: usize) -> Self {
        Self {
            sum: DVector::zeros(dim),
            carry: DVector::zeros(dim),
        }
    }

    fn add_scaled(&mut self, w: f64, x: &DVector<f64>) {
        for ((s, c), xi) in self.sum.iter_mut().zip(self.carry.iter_mut()).zip(x.iter()) {
            let term = w * xi;
            let t = *s + term;
            if s.abs() >= term.abs() {
                *c += (*s - t) + term;
            } else {
                *c += (term - t) + *s;
            }
            *s = t;
        }
    }

    fn total(self) -> DVector<f64> {
        self.sum + self.carry
    }
}

/// Cohort-normalized weighted average `sum alpha_i u_i / sum alpha_i`,
/// accumulated in ascending device order as offsets from the first upload.
pub fn aggregate(uploads: &[Upload], alpha: &[f64]) -> Result<DVector<f64>> {
    let anchor = &uploads
        .first()
        .ok_or_else(|| Error::InvalidArgument("no uploads to aggregate".into()))?
        .shared;
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|up| up.device);
    let cohort_weight: f64 = order.iter().map(|up| alpha[up.device]).sum();
    let mut acc = CompensatedSum::new(anchor.len());
    for up in order {
        acc.add_scaled(alpha[up.device] / cohort_weight, &(&up.shared - anchor));
    }
    Ok(anchor + acc.total())
}

fn local_solve<P: PartitionedProblem + ?Sized>(
    problem: &P,
    solver: Algorithm,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    config: &FedConfig,
    round: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let keys = LocalKeys::new(config.seed, i, round);
    match solver {
        Algorithm::FedAlt => local_alt(problem, i, u, v, &config.hp, &config.noise, keys),
        _ => local_sim(problem, i, u, v, &config.hp, &config.noise, keys),
    }
}

/// Aggregated shared block, trained personal blocks by device, raw uploads.
type TrainedRound = (DVector<f64>, Vec<(usize, DVector<f64>)>, Vec<Upload>);

/// Runs the cohort's local solves and the server update on `train`.
#[allow(clippy::too_many_arguments)]
fn train_round<P: PartitionedProblem + ?Sized>(
    train: &P,
    solver: Algorithm,
    u: &DVector<f64>,
    v: &[DVector<f64>],
    config: &FedConfig,
    cohort: &[usize],
    round: usize,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<TrainedRound> {
    let start_v = |i: usize| warm_start.map_or(&v[i], |ws| &ws[i]);
    let solve = |&i: &usize| local_solve(train, solver, i, u, start_v(i), config, round).map(|r| (i, r));
    let results: Vec<(usize, _)> = if config.parallel {
        cohort.par_iter().map(solve).collect::<Result<_>>()?
    } else {
        cohort.iter().map(solve).collect::<Result<_>>()?
    };
    let mut uploads = Vec::with_capacity(results.len());
    let mut personal = Vec::with_capacity(results.len());
    for (i, (u_plus, v_plus)) in results {
        uploads.push(Upload { device: i, shared: u_plus });
        personal.push((i, v_plus));
    }
    let u_next = aggregate(&uploads, train.weights().as_slice())?;
    Ok((u_next, personal, uploads))
}

/// One communication round.
pub fn run_round<P: PartitionedProblem + ?Sized>(
    problem: &P,
    state: &ParamState,
    config: &FedConfig,
    t: usize,
) -> Result<(ParamState, RoundTrace)> {
    if t >= config.rounds {
        return Err(Error::InvalidArgument(format!("round {t} is past the configured {} rounds", config.rounds)));
    }
    config.validate(problem)?;
    state.validate(problem)?;
    let started = Instant::now();
    let (delta_u, delta_v) = stationarity(problem, state)?;
    let objective = eval_objective(problem, state)?;

    let n = problem.num_devices();
    let cohort_key = StreamKey::new(config.seed, Purpose::Cohort).round(t);
    let cohort = sample_cohort(n, config.cohort_size, cohort_key)?;

    let (u_next, v_next, uploads) = match config.algorithm {
        Algorithm::FedAvg => {
            let frozen = FrozenPersonal::new(problem, state.v.clone());
            let empty = frozen.empty_personal();
            let (u_next, _, uploads) =
                train_round(&frozen, Algorithm::FedSim, &state.u, &empty, config, &cohort.indices, t, None)?;
            (u_next, state.v.clone(), uploads)
        }
        solver => {
            let warm = match config.statefulness {
                Statefulness::Stateful => None,
                Statefulness::Stateless => config.warm_start.as_deref(),
            };
            let (u_next, personal, uploads) =
                train_round(problem, solver, &state.u, &state.v, config, &cohort.indices, t, warm)?;
            let mut v_next = state.v.clone();
            for (i, v_plus) in personal {
                v_next[i] = v_plus;
            }
            (u_next, v_next, uploads)
        }
    };

    let trace = RoundTrace {
        round: t,
        algorithm: config.algorithm,
        cohort: cohort.indices,
        delta_u,
        delta_v,
        objective,
        wall_clock: started.elapsed(),
        cohort_key,
        uploads,
    };
    Ok((ParamState::new(u_next, v_next), trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub traces: Vec<RoundTrace>,
    pub state: ParamState,
}

/// A run that stopped early. Traces up to the failing round are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentAborted {
    pub traces: Vec<RoundTrace>,
    pub state: ParamState,
    pub round: usize,
    pub error: Error,
}

impl std::fmt::Display for ExperimentAborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "experiment aborted in round {}: {}", self.round, self.error)
    }
}

impl std::error::Error for ExperimentAborted {}

/// Runs `config.rounds` rounds starting from `init`.
pub fn run_experiment<P: PartitionedProblem + ?Sized>(
    problem: &P,
    init: &ParamState,
    config: &FedConfig,
) -> std::result::Result<ExperimentOutput, ExperimentAborted> {
    run_experiment_with(problem, init, config, |_| {})
}

/// Like [`run_experiment`], calling `on_round` with each trace as it is produced.
pub fn run_experiment_with<P, F>(
    problem: &P,
    init: &ParamState,
    config: &FedConfig,
    mut on_round: F,
) -> std::result::Result<ExperimentOutput, ExperimentAborted>
where
    P: PartitionedProblem + ?Sized,
    F: FnMut(&RoundTrace),
{
    let mut traces = Vec::with_capacity(config.rounds);
    let mut state = init.clone();
    let abort = |traces: Vec<RoundTrace>, state: ParamState, round: usize, error: Error| ExperimentAborted {
        traces,
        state,
        round,
        error,
    };
    if let Err(e) = config.validate(problem).and_then(|_| init.validate(problem)) {
        return Err(abort(traces, state, 0, e));
    }
    for t in 0..config.rounds {
        match run_round(problem, &state, config, t) {
            Ok((next, trace)) => {
                on_round(&trace);
                traces.push(trace);
                state = next;
            }
            Err(e) => return Err(abort(traces, state, t, e)),
        }
    }
    Ok(ExperimentOutput { traces, state })
}
