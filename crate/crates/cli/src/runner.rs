//! Executes a resolved config and writes its artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fedpart::federation::{
    rounds_to_threshold, run_experiment_with, run_pipeline_with, Algorithm, DeviceDelta, FedConfig, RoundTrace,
};
use fedpart::objective::{eval_objective, ParamState, PartitionedProblem};
use fedpart::problems::{
    closed_form_constants, closed_form_minimum, AdditiveModel, Container, QuadraticEnsemble, SmoothnessProfile,
};
use fedpart::sampling::{Purpose, StreamKey};
use fedpart::solvers::LocalHyper;
use serde::{Deserialize, Serialize};

use crate::config::{CompareConfig, ExperimentConfig, InitConfig, Manifest, ProblemConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// A problem instance together with whatever closed-form facts it offers.
pub struct LoadedProblem {
    pub problem: Box<dyn PartitionedProblem>,
    pub profile: Option<SmoothnessProfile>,
    /// `F*`, when the joint minimum has a closed form.
    pub minimum: Option<f64>,
}

impl LoadedProblem {
    fn from_quadratic(q: QuadraticEnsemble) -> Result<Self> {
        let profile = closed_form_constants(&q)?;
        let minimum = closed_form_minimum(&q).ok().map(|(_, f)| f);
        Ok(Self {
            problem: Box::new(q),
            profile: Some(profile),
            minimum,
        })
    }
}

pub fn load_problem(cfg: &ProblemConfig, seed: u64) -> Result<LoadedProblem> {
    Ok(match cfg {
        ProblemConfig::Quadratic(q) => {
            let ens = fedpart::problems::make_quadratic_ensemble(&q.spec(seed)).context("building the quadratic ensemble")?;
            LoadedProblem::from_quadratic(ens)?
        }
        ProblemConfig::Additive(a) => LoadedProblem {
            problem: Box::new(a.spec(seed).generate().context("building the additive model")?),
            profile: None,
            minimum: None,
        },
        ProblemConfig::FullPersonalization(f) => {
            let p = f.spec(seed).generate().context("building the full-personalization problem")?;
            LoadedProblem {
                profile: Some(p.constants()),
                problem: Box::new(p),
                minimum: None,
            }
        }
        ProblemConfig::File { path } => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let c = Container::parse(&text)?;
            match c.kind() {
                "quadratic" => LoadedProblem::from_quadratic(QuadraticEnsemble::from_container(&c)?)?,
                "additive" => LoadedProblem {
                    problem: Box::new(AdditiveModel::from_container(&c)?),
                    profile: None,
                    minimum: None,
                },
                other => bail!("problem container kind {other:?} is not supported"),
            }
        }
    })
}

pub fn initial_state<P: PartitionedProblem + ?Sized>(problem: &P, init: &InitConfig, seed: u64) -> ParamState {
    match *init {
        InitConfig::Zeros => ParamState::zeros(problem),
        InitConfig::Random { scale, seed: s } => {
            ParamState::random(problem, scale, StreamKey::new(s.unwrap_or(seed), Purpose::Init))
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub stage: String,
    pub round: usize,
    pub algorithm: Algorithm,
    pub delta_u: f64,
    pub delta_v: f64,
    pub objective: f64,
    /// `Delta_u/L_u + (m/n) Delta_v/L_v`; absent without closed-form constants.
    pub stationarity: Option<f64>,
    pub cohort: Vec<usize>,
    /// Key of the stream the cohort was drawn from.
    pub cohort_key: StreamKey,
}

/// Single writer for the metric stream; every record is flushed so the file
/// stays valid line-delimited JSON if the run aborts.
pub struct MetricsWriter {
    out: BufWriter<File>,
    cadence: usize,
    profile: Option<SmoothnessProfile>,
    n: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, cadence: usize, profile: Option<SmoothnessProfile>, n: usize) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
            cadence,
            profile,
            n,
        })
    }

    pub fn record(&mut self, stage: &str, trace: &RoundTrace, total_rounds: usize) -> Result<()> {
        let last = trace.round + 1 == total_rounds;
        if !trace.round.is_multiple_of(self.cadence) && !last {
            return Ok(());
        }
        let rec = MetricRecord {
            schema_version: SCHEMA_VERSION,
            stage: stage.to_string(),
            round: trace.round,
            algorithm: trace.algorithm,
            delta_u: trace.delta_u,
            delta_v: trace.delta_v,
            objective: trace.objective,
            stationarity: self
                .profile
                .map(|p| trace.stationarity(p.l_u, p.l_v, trace.cohort.len() as f64 / self.n as f64)),
            cohort: trace.cohort.clone(),
            cohort_key: trace.cohort_key,
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// A run that stopped because a device diverged; partial artifacts remain.
#[derive(Debug)]
pub struct Diverged {
    pub stage: String,
    pub message: String,
}

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} aborted: {}", self.stage, self.message)
    }
}

impl std::error::Error for Diverged {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub rounds_to_threshold: Option<usize>,
    pub min_stationarity: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub deltas: Vec<DeviceDelta>,
    pub comparison: Option<Vec<ComparisonRow>>,
}

#[derive(Serialize)]
struct SummaryRow {
    device: String,
    train_before: Option<f64>,
    train_after: Option<f64>,
    train_delta: Option<f64>,
    heldout_before: Option<f64>,
    heldout_after: Option<f64>,
    heldout_delta: Option<f64>,
}

/// Per-device before/after losses plus a `mean` row. Held-out columns are
/// empty for problems without held-out data.
pub fn write_summary(path: &Path, deltas: &[DeviceDelta]) -> Result<()> {
    let mut out = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    // Serialized rows carry the header; an empty run still gets one.
    if deltas.is_empty() {
        out.write_record([
            "device",
            "train_before",
            "train_after",
            "train_delta",
            "heldout_before",
            "heldout_after",
            "heldout_delta",
        ])?;
    }
    for d in deltas {
        out.serialize(SummaryRow {
            device: d.device.to_string(),
            train_before: Some(d.train_before),
            train_after: Some(d.train_after),
            train_delta: Some(d.train_delta()),
            heldout_before: d.heldout_before,
            heldout_after: d.heldout_after,
            heldout_delta: d.heldout_delta(),
        })?;
    }
    if !deltas.is_empty() {
        let n = deltas.len() as f64;
        let mean = |f: &dyn Fn(&DeviceDelta) -> Option<f64>| deltas.iter().map(f).sum::<Option<f64>>().map(|s| s / n);
        out.serialize(SummaryRow {
            device: "mean".into(),
            train_before: mean(&|d| Some(d.train_before)),
            train_after: mean(&|d| Some(d.train_after)),
            train_delta: mean(&|d| Some(d.train_delta())),
            heldout_before: mean(&|d| d.heldout_before),
            heldout_after: mean(&|d| d.heldout_after),
            heldout_delta: mean(&|d| d.heldout_delta()),
        })?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ComparisonCsvRow {
    algorithm: Algorithm,
    rounds: usize,
    threshold: f64,
    rounds_to_threshold: Option<usize>,
    min_stationarity: f64,
    final_objective: f64,
}

fn write_comparison(path: &Path, rows: &[ComparisonRow], threshold: f64) -> Result<()> {
    let mut out = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        out.serialize(ComparisonCsvRow {
            algorithm: r.algorithm,
            rounds: r.rounds,
            threshold,
            rounds_to_threshold: r.rounds_to_threshold,
            min_stationarity: r.min_stationarity,
            final_objective: r.final_objective,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Step sizes for a paired comparison at matched `eta` (or explicit gammas).
pub fn compare_hyper(c: &CompareConfig, profile: Option<&SmoothnessProfile>) -> Result<LocalHyper> {
    match (c.eta, c.gamma_u, c.gamma_v) {
        (_, Some(gu), Some(gv)) => Ok(LocalHyper::new(gu, gv, c.tau)),
        (Some(eta), _, _) => {
            let p = profile.ok_or_else(|| {
                anyhow!("compare.eta needs closed-form constants; give compare.gamma_u and compare.gamma_v instead")
            })?;
            let tau = c.tau as f64;
            Ok(LocalHyper::new(eta / (tau * p.l_u), eta / (tau * p.l_v), c.tau))
        }
        _ => bail!("compare needs either eta or both gamma_u and gamma_v"),
    }
}

fn run_compare(
    loaded: &LoadedProblem,
    init: &ParamState,
    c: &CompareConfig,
    seed: u64,
    metrics: &mut MetricsWriter,
) -> Result<Vec<ComparisonRow>> {
    let profile = loaded
        .profile
        .ok_or_else(|| anyhow!("compare needs closed-form constants to measure stationarity"))?;
    let hp = compare_hyper(c, Some(&profile))?;
    let problem = &*loaded.problem;
    let participation = c.cohort_size as f64 / problem.num_devices() as f64;
    let mut rows = Vec::new();
    for algorithm in [Algorithm::FedAlt, Algorithm::FedSim] {
        let cfg = FedConfig {
            noise: c.noise,
            ..FedConfig::new(algorithm, c.rounds, c.cohort_size, hp, c.seed.unwrap_or(seed))
        };
        let stage = format!("compare-{algorithm}");
        let mut write_err = None;
        let out = run_experiment_with(problem, init, &cfg, |t| {
            if write_err.is_none() {
                write_err = metrics.record(&stage, t, c.rounds).err();
            }
        });
        if let Some(e) = write_err {
            return Err(e);
        }
        let out = out.map_err(|ab| Diverged {
            stage: stage.clone(),
            message: ab.to_string(),
        })?;
        rows.push(ComparisonRow {
            algorithm,
            rounds: c.rounds,
            rounds_to_threshold: rounds_to_threshold(&out.traces, c.threshold, profile.l_u, profile.l_v, participation),
            min_stationarity: out
                .traces
                .iter()
                .map(|t| t.stationarity(profile.l_u, profile.l_v, participation))
                .fold(f64::INFINITY, f64::min),
            final_objective: eval_objective(problem, &out.state)?,
        });
    }
    Ok(rows)
}

/// Runs `config` (resolving defaults first) into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    config.check()?;
    let manifest = Manifest::new(config);
    let cfg = &manifest.config;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(out_dir.join(MANIFEST_FILE), manifest.to_toml()?)?;

    let loaded = load_problem(&cfg.problem, cfg.seed)?;
    let problem = &*loaded.problem;
    let init = initial_state(problem, &cfg.init, cfg.seed);
    let pipeline = cfg.pipeline();
    for (name, stage) in [("shared", &pipeline.shared), ("personalized", &pipeline.personalized)] {
        if let Some(s) = stage {
            let mut probe = s.clone();
            if probe.statefulness == fedpart::federation::Statefulness::Stateless && probe.warm_start.is_none() {
                probe.warm_start = Some(init.v.clone());
            }
            probe.validate(problem).with_context(|| format!("invalid [{name}] stage"))?;
        }
    }

    let mut metrics = MetricsWriter::create(
        &out_dir.join(METRICS_FILE),
        cfg.metric_cadence,
        loaded.profile,
        problem.num_devices(),
    )?;
    let mut write_err = None;
    let result = run_pipeline_with(problem, &init, &pipeline, |stage, trace| {
        let total = match stage {
            fedpart::federation::Stage::Shared => pipeline.shared.as_ref().map_or(0, |s| s.rounds),
            fedpart::federation::Stage::Personalized => pipeline.personalized.as_ref().map_or(0, |s| s.rounds),
        };
        if write_err.is_none() {
            write_err = metrics.record(stage.name(), trace, total).err();
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let output = result.map_err(|e| match e.aborted {
        Some(_) => anyhow::Error::new(Diverged {
            stage: e.stage.to_string(),
            message: e.error.to_string(),
        }),
        None => anyhow!("stage {}: {}", e.stage, e.error),
    })?;
    write_summary(&out_dir.join(SUMMARY_FILE), &output.deltas)?;

    let comparison = match &cfg.compare {
        Some(c) => {
            let rows = run_compare(&loaded, &init, c, cfg.seed, &mut metrics)?;
            write_comparison(&out_dir.join(COMPARISON_FILE), &rows, c.threshold)?;
            Some(rows)
        }
        None => None,
    };
    Ok(RunReport {
        out_dir: out_dir.to_path_buf(),
        deltas: output.deltas,
        comparison,
    })
}

/// Re-runs a manifest; artifacts match the original run byte for byte.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<RunReport> {
    let manifest = Manifest::load(manifest_path)?;
    run(&manifest.config, out_dir)
}

/// Output directory: command line, then config, then `fedpart-out`.
pub fn output_dir(cli: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("fedpart-out"))
}

/// `F(init) - F*`, when the problem has a closed-form minimum.
pub fn initial_gap(loaded: &LoadedProblem, init: &ParamState) -> Result<Option<f64>> {
    match loaded.minimum {
        Some(f_star) => Ok(Some(eval_objective(&*loaded.problem, init)? - f_star)),
        None => Ok(None),
    }
}

pub fn divergence(err: &anyhow::Error) -> Option<&Diverged> {
    err.downcast_ref::<Diverged>()
}

/// Tolerates a missing directory when resolving paths in messages.
pub fn display_path(p: &Path) -> String {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}
