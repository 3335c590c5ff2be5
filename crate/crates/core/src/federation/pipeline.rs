//! Three-stage training: (a) non-personalized FedAvg on the shared block,
//! (b) personalized FedAlt/FedSim warm-started from (a), and (c) per-device
//! finetuning of the personal block.

use serde::{Deserialize, Serialize};

use super::{finetune, run_experiment_with, Algorithm, ExperimentAborted, FedConfig, FinetuneConfig, RoundTrace, Statefulness};
use crate::error::{Error, Result};
use crate::objective::{eval_objective, ParamState, PartitionedProblem};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub shared: Option<FedConfig>,
    pub personalized: Option<FedConfig>,
    pub finetune: Option<FinetuneConfig>,
}

/// Per-device losses before personalization (the output of stage (a), or
/// the initial state when (a) is skipped) and after the last stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDelta {
    pub device: usize,
    pub train_before: f64,
    pub train_after: f64,
    pub heldout_before: Option<f64>,
    pub heldout_after: Option<f64>,
}

impl DeviceDelta {
    pub fn train_delta(&self) -> f64 {
        self.train_after - self.train_before
    }

    pub fn heldout_delta(&self) -> Option<f64> {
        Some(self.heldout_after? - self.heldout_before?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub after_shared: ParamState,
    pub after_personalized: ParamState,
    pub final_state: ParamState,
    pub shared_traces: Vec<RoundTrace>,
    pub personalized_traces: Vec<RoundTrace>,
    pub deltas: Vec<DeviceDelta>,
}

/// Error from a pipeline stage, with the stage name attached.
#[derive(Debug, Clone, PartialEq)]
pub struct StageError {
    pub stage: &'static str,
    pub aborted: Option<ExperimentAborted>,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> StageError {
    move |error| StageError {
        stage,
        aborted: None,
        error,
    }
}

fn losses<P: PartitionedProblem + ?Sized>(problem: &P, state: &ParamState) -> Vec<(f64, Option<f64>)> {
    state
        .v
        .iter()
        .enumerate()
        .map(|(i, vi)| (problem.device_value(i, &state.u, vi), problem.heldout_value(i, &state.u, vi)))
        .collect()
}

/// Federated stages of the pipeline, as reported to round callbacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Shared,
    Personalized,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Shared => "shared",
            Stage::Personalized => "personalized",
        }
    }
}

pub fn run_pipeline<P: PartitionedProblem + ?Sized>(
    problem: &P,
    init: &ParamState,
    config: &PipelineConfig,
) -> std::result::Result<PipelineOutput, StageError> {
    run_pipeline_with(problem, init, config, |_, _| {})
}

/// Like [`run_pipeline`], calling `on_round` after every federated round.
pub fn run_pipeline_with<P, F>(
    problem: &P,
    init: &ParamState,
    config: &PipelineConfig,
    mut on_round: F,
) -> std::result::Result<PipelineOutput, StageError>
where
    P: PartitionedProblem + ?Sized,
    F: FnMut(Stage, &RoundTrace),
{
    init.validate(problem).map_err(stage_err("init"))?;

    let mut run_stage = |stage: Stage, cfg: &FedConfig, from: &ParamState| {
        run_experiment_with(problem, from, cfg, |t| on_round(stage, t)).map_err(|ab| StageError {
            stage: stage.name(),
            error: ab.error.clone(),
            aborted: Some(ab),
        })
    };

    let (after_shared, shared_traces) = match &config.shared {
        Some(cfg) => {
            if cfg.algorithm != Algorithm::FedAvg {
                return Err(stage_err("shared")(Error::InvalidArgument(
                    "the non-personalized stage must use fedavg".into(),
                )));
            }
            let out = run_stage(Stage::Shared, cfg, init)?;
            (out.state, out.traces)
        }
        None => (init.clone(), Vec::new()),
    };

    let (after_personalized, personalized_traces) = match &config.personalized {
        Some(cfg) => {
            let mut cfg = cfg.clone();
            if cfg.statefulness == Statefulness::Stateless && cfg.warm_start.is_none() {
                cfg.warm_start = Some(after_shared.v.clone());
            }
            let out = run_stage(Stage::Personalized, &cfg, &after_shared)?;
            (out.state, out.traces)
        }
        None => (after_shared.clone(), Vec::new()),
    };

    let final_state = match &config.finetune {
        Some(ft) => {
            let v = after_personalized
                .v
                .iter()
                .enumerate()
                .map(|(i, vi)| finetune(problem, i, &after_personalized.u, vi, ft))
                .collect::<Result<Vec<_>>>()
                .map_err(stage_err("finetune"))?;
            ParamState::new(after_personalized.u.clone(), v)
        }
        None => after_personalized.clone(),
    };

    let deltas = losses(problem, &after_shared)
        .into_iter()
        .zip(losses(problem, &final_state))
        .enumerate()
        .map(|(device, ((train_before, heldout_before), (train_after, heldout_after)))| DeviceDelta {
            device,
            train_before,
            train_after,
            heldout_before,
            heldout_after,
        })
        .collect();

    Ok(PipelineOutput {
        after_shared,
        after_personalized,
        final_state,
        shared_traces,
        personalized_traces,
        deltas,
    })
}

impl PipelineOutput {
    /// `F(final) - F(before)`, the weighted sum of the per-device train deltas.
    pub fn aggregate_train_delta<P: PartitionedProblem + ?Sized>(&self, problem: &P) -> Result<f64> {
        Ok(eval_objective(problem, &self.final_state)? - eval_objective(problem, &self.after_shared)?)
    }
}
