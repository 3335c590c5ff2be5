//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every tolerance and runtime budget is pinned below.

use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use fedpart::federation::{
    finetune, rounds_to_threshold, run_experiment, run_pipeline, Algorithm, FedConfig, FinetuneConfig, FinetuneReg,
    PipelineConfig, RoundTrace,
};
use fedpart::objective::{device_objective, eval_objective, ParamState, PartitionedProblem, StocGradSpec};
use fedpart::problems::{
    closed_form_constants, closed_form_minimum, estimate_diversity, make_full_personalization, make_quadratic_ensemble,
    AdditiveSpec, QuadraticEnsembleSpec, SmoothnessProfile,
};
use fedpart::sampling::{Purpose, StreamKey};
use fedpart::solvers::LocalHyper;
use fedpart::theory::{effective_variances, eta_caps, rate_bound, recommend, RateInputs};
use fedpart::verify::{
    check_reduction_chi, check_reduction_gradients, check_vfp_identity, coupled_spec, min_block_smoothness_slack,
    random_quadratic_bases, run_suite, strongly_coupled_spec, BlockBound, OracleReport, Status, Suite, SuiteOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADIENT_TOL: f64 = 1e-6;
const GRADIENT_POINTS: usize = 100;
const SAMPLING_TOL: f64 = 1e-12;
const SAMPLING_SETS: usize = 20;
const VFP_DECOUPLED_TOL: f64 = 1e-12;
const VFP_COUPLED_FLOOR: f64 = 1e-6;
const VFP_COUPLED_SHARE: f64 = 0.95;
const VFP_MIN_CHI: f64 = 0.5;
const DRIFT_TRIALS: usize = 500;
const SMOOTHNESS_SLACK: f64 = -1e-10;
const SMOOTHNESS_PAIRS: usize = 1000;
const REDUCTION_GRAD_TOL: f64 = 1e-12;
const REDUCTION_CHI_TOL: f64 = 1e-14;
const CONVERGENCE_TOL: f64 = 1e-6;
const CONVERGENCE_ROUNDS: usize = 2000;
/// Allowed rise of `F` between rounds, in units of `max(1, |F|)`. Once the
/// iterates sit at the minimizer the objective jitters by a few ulps.
const MONOTONE_SLACK: f64 = 4.0 * f64::EPSILON;
const REGIME_THRESHOLD: f64 = 1e-4;
const REGIME_SEEDS: u64 = 20;
const REGIME_SHARE: f64 = 0.8;
const THEORY_DRAWS: usize = 50;
const THEORY_TOL: f64 = 1e-14;
const DITTO_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion(id: u32, name: &str, budget: Duration, body: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = body();
    let elapsed = start.elapsed();
    let (pass, detail) = match result {
        Ok(o) if elapsed > budget => (false, format!("{} (over the {budget:?} budget)", o.detail)),
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    println!(
        "{} {id:>2} {name} [{:.2}s]: {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn suite(s: Suite) -> Result<Vec<OracleReport>> {
    Ok(run_suite(s, &SuiteOptions::default())?)
}

fn c1_gradients() -> Result<Outcome> {
    let reports = suite(Suite::Gradients)?;
    ensure!(reports.len() == 3, "expected three problem families, got {}", reports.len());
    let worst = reports.iter().map(|r| r.max_residual).fold(0.0, f64::max);
    let points_ok = reports.iter().all(|r| r.instances >= GRADIENT_POINTS);
    let names: Vec<_> = reports.iter().map(|r| r.name.as_str()).collect();
    Ok(outcome(
        points_ok && worst < GRADIENT_TOL,
        format!("{names:?} max relative error {worst:.2e} < {GRADIENT_TOL:e}"),
    ))
}

fn c2_sampling() -> Result<Outcome> {
    let r = suite(Suite::Sampling)?.remove(0);
    // Every cohort of every size for n <= 8, 20 vector sets each.
    let expected: usize = (1..=8u32).map(|n| (2usize.pow(n) - 1) * SAMPLING_SETS).sum();
    Ok(outcome(
        r.instances == expected && r.max_residual < SAMPLING_TOL,
        format!("{} enumerated cohorts, max residual {:.2e} < {SAMPLING_TOL:e}", r.instances, r.max_residual),
    ))
}

fn c3_vfp() -> Result<Outcome> {
    let (mut decoupled, mut coupled, mut separated, mut cases) = (0.0f64, 0usize, 0usize, 0usize);
    for n in 2..=6usize {
        for rep in 0..6u64 {
            let seed = 500 + 10 * n as u64 + rep;
            let p = make_quadratic_ensemble(&coupled_spec(n, 3, 2, seed))?;
            let chi = closed_form_constants(&p)?.chi;
            let state = ParamState::random(&p, 1.0, StreamKey::new(seed, Purpose::Init));
            for m in 1..=n {
                let out = check_vfp_identity(&p, &state, m, 0.2, 0.2)?;
                decoupled = decoupled.max(out.decoupled.max_residual);
                cases += 1;
                if m < n && chi >= VFP_MIN_CHI {
                    coupled += 1;
                    separated += usize::from(out.coupled_residual > VFP_COUPLED_FLOOR);
                }
            }
        }
    }
    let share = separated as f64 / coupled as f64;
    Ok(outcome(
        decoupled < VFP_DECOUPLED_TOL && coupled > 0 && share >= VFP_COUPLED_SHARE,
        format!(
            "decoupled residual {decoupled:.2e} < {VFP_DECOUPLED_TOL:e} over {cases} cases; coupled residual > {VFP_COUPLED_FLOOR:e} on {separated}/{coupled} partial-participation cases with chi >= {VFP_MIN_CHI}"
        ),
    ))
}

fn c4_drift() -> Result<Outcome> {
    let reports: Vec<_> = suite(Suite::Drift)?
        .into_iter()
        .filter(|r| !r.name.ends_with("/exact"))
        .collect();
    ensure!(reports.len() == 6, "expected 2 variants x 3 local step counts");
    let ok = reports
        .iter()
        .all(|r| r.status == Status::Pass && r.instances == DRIFT_TRIALS);
    let notes: Vec<_> = reports
        .iter()
        .map(|r| format!("{}:{}", r.name.trim_start_matches("drift/"), r.status))
        .collect();
    Ok(outcome(ok, format!("mean <= bound + 4 SE over {DRIFT_TRIALS} trials: {}", notes.join(" "))))
}

fn smoothness_ensembles() -> Result<Vec<(&'static str, fedpart::problems::QuadraticEnsemble)>> {
    Ok(vec![
        ("weak", make_quadratic_ensemble(&QuadraticEnsembleSpec::uniform(4, 4, 3, 0))?),
        ("coupled", make_quadratic_ensemble(&coupled_spec(4, 4, 3, 0))?),
        ("strong", make_quadratic_ensemble(&strongly_coupled_spec(16, 8, 1, 0))?),
    ])
}

fn c5_block_smoothness() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, p) in smoothness_ensembles()? {
        let profile = closed_form_constants(&p)?;
        let mut worst = [f64::INFINITY; 2];
        for (k, bound) in [BlockBound::Published, BlockBound::Young].into_iter().enumerate() {
            for i in 0..p.num_devices() {
                worst[k] = worst[k].min(min_block_smoothness_slack(&p, &profile, bound, i, SMOOTHNESS_PAIRS, 0)?);
            }
        }
        pass &= worst[0] >= SMOOTHNESS_SLACK;
        parts.push(format!(
            "{label} (chi {:.2}): published {:.2e}, young {:.2e}",
            profile.chi, worst[0], worst[1]
        ));
    }
    Ok(outcome(
        pass,
        format!("min slack over {SMOOTHNESS_PAIRS} pairs per device, need >= {SMOOTHNESS_SLACK:e}: {}", parts.join("; ")),
    ))
}

fn c6_reduction() -> Result<Outcome> {
    let p = make_full_personalization(random_quadratic_bases(3, 4, 0)?, vec![0.1, 1.0, 10.0])?;
    let grads = check_reduction_gradients(&p, 100, 0);
    let chi = check_reduction_chi(&[0.1, 1.0, 10.0], &[1.0, 3.0], 4)?;
    Ok(outcome(
        grads.max_residual <= REDUCTION_GRAD_TOL && chi.max_residual <= REDUCTION_CHI_TOL && chi.instances == 6,
        format!(
            "gradient error {:.2e} <= {REDUCTION_GRAD_TOL:e}; chi^2 error {:.2e} <= {REDUCTION_CHI_TOL:e} over {} (lambda, L) pairs",
            grads.max_residual, chi.max_residual, chi.instances
        ),
    ))
}

fn same_traces(a: &[RoundTrace], b: &[RoundTrace]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.cohort == y.cohort
                && x.delta_u.to_bits() == y.delta_u.to_bits()
                && x.delta_v.to_bits() == y.delta_v.to_bits()
                && x.objective.to_bits() == y.objective.to_bits()
                && x.uploads == y.uploads
        })
}

fn c7_decoupling() -> Result<Outcome> {
    let mut runs = 0;
    for seed in 0..4u64 {
        let p = make_quadratic_ensemble(&QuadraticEnsembleSpec {
            coupling: 0.0,
            ..QuadraticEnsembleSpec::uniform(8, 4, 3, seed)
        })?;
        let init = ParamState::random(&p, 1.0, StreamKey::new(seed, Purpose::Init));
        for noise in [
            StocGradSpec::Exact,
            StocGradSpec::AdditiveGaussian {
                sigma_u: 0.3,
                sigma_v: 0.5,
            },
        ] {
            let hp = LocalHyper::new(0.1, 0.15, 3);
            let run = |alg| {
                let cfg = FedConfig {
                    noise,
                    ..FedConfig::new(alg, 40, 3, hp, seed)
                };
                run_experiment(&p, &init, &cfg).map_err(|ab| ab.error)
            };
            let (alt, sim) = (run(Algorithm::FedAlt)?, run(Algorithm::FedSim)?);
            if !same_traces(&alt.traces, &sim.traces) || alt.state != sim.state {
                return Ok(outcome(false, format!("traces differ at seed {seed} with {noise:?}")));
            }
            runs += 1;
        }
    }
    Ok(outcome(true, format!("{runs} paired runs bitwise identical (exact and noisy gradients)")))
}

fn c8_convergence() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let p = make_quadratic_ensemble(&coupled_spec(32, 8, 8, seed))?;
        let mut profile = closed_form_constants(&p)?;
        let init = ParamState::zeros(&p);
        let (opt, f_star) = closed_form_minimum(&p)?;
        profile.delta2 = estimate_diversity(&p, &[init.clone(), opt])?;
        let delta_f0 = eval_objective(&p, &init)? - f_star;
        for alg in [Algorithm::FedAlt, Algorithm::FedSim] {
            let inputs = RateInputs {
                profile,
                m: 32,
                n: 32,
                tau_u: 1,
                tau_v: 1,
                tau: 1,
                rounds: CONVERGENCE_ROUNDS,
                delta_f0,
            };
            let rec = recommend(alg, &inputs)?;
            let hp = LocalHyper::new(rec.gamma_u, rec.gamma_v, 1);
            let out = run_experiment(&p, &init, &FedConfig::new(alg, CONVERGENCE_ROUNDS, 32, hp, seed))?;
            let best = out
                .traces
                .iter()
                .map(|t| t.stationarity(profile.l_u, profile.l_v, 1.0))
                .fold(f64::INFINITY, f64::min);
            let hit = rounds_to_threshold(&out.traces, CONVERGENCE_TOL, profile.l_u, profile.l_v, 1.0);
            let monotone = out
                .traces
                .windows(2)
                .all(|w| w[1].objective <= w[0].objective + MONOTONE_SLACK * w[0].objective.abs().max(1.0));
            pass &= hit.is_some() && monotone;
            parts.push(format!(
                "{alg}/seed{seed}: hit at {} (min {best:.1e}), monotone {monotone}",
                hit.map_or("never".into(), |t| t.to_string())
            ));
        }
    }
    Ok(outcome(
        pass,
        format!("n=32, d0=d_i=8, chi~0.6, tau=1, tuned eta; {}", parts.join("; ")),
    ))
}

fn c9_regime() -> Result<Outcome> {
    let (eta, tau, m) = (0.15, 4usize, 4usize);
    let mut wins = 0;
    let mut min_chi = f64::INFINITY;
    let mut min_delta2 = f64::INFINITY;
    let mut floors = [0.0f64; 2];
    for seed in 0..REGIME_SEEDS {
        let p = make_quadratic_ensemble(&QuadraticEnsembleSpec {
            heterogeneity: 0.2,
            ..strongly_coupled_spec(16, 8, 1, seed)
        })?;
        let profile = closed_form_constants(&p)?;
        let init = ParamState::zeros(&p);
        min_chi = min_chi.min(profile.chi);
        min_delta2 = min_delta2.min(estimate_diversity(&p, std::slice::from_ref(&init))?);
        let hp = LocalHyper::new(eta / (tau as f64 * profile.l_u), eta / (tau as f64 * profile.l_v), tau);
        let q = m as f64 / 16.0;
        let mut hits = [None; 2];
        for (k, alg) in [Algorithm::FedAlt, Algorithm::FedSim].into_iter().enumerate() {
            let out = run_experiment(&p, &init, &FedConfig::new(alg, 2000, m, hp, 1000 + seed))?;
            hits[k] = rounds_to_threshold(&out.traces, REGIME_THRESHOLD, profile.l_u, profile.l_v, q);
            floors[k] += out
                .traces
                .iter()
                .map(|t| t.stationarity(profile.l_u, profile.l_v, q))
                .fold(f64::INFINITY, f64::min)
                / REGIME_SEEDS as f64;
        }
        wins += usize::from(match hits {
            [Some(a), Some(s)] => a <= s,
            [Some(_), None] => true,
            _ => false,
        });
    }
    let share = wins as f64 / REGIME_SEEDS as f64;
    Ok(outcome(
        share >= REGIME_SHARE && min_chi >= 1.0 && min_delta2 > 0.0,
        format!(
            "FedAlt no slower in {wins}/{REGIME_SEEDS} seeds (need {REGIME_SHARE}); chi >= {min_chi:.3}, delta^2 >= {min_delta2:.2e}; mean best stationarity alt {:.2e} vs sim {:.2e}",
            floors[0], floors[1]
        ),
    ))
}

/// The published formulas, typed out again from the theorem statements.
mod script {
    pub struct Draw {
        pub lu: f64,
        pub lv: f64,
        pub luv: f64,
        pub lvu: f64,
        pub su2: f64,
        pub sv2: f64,
        pub d2: f64,
        pub r2: f64,
        pub m: f64,
        pub n: f64,
        pub tu: f64,
        pub tv: f64,
        pub t: f64,
        pub rounds: f64,
        pub f0: f64,
    }

    impl Draw {
        pub fn chi2(&self) -> f64 {
            let c = self.luv.max(self.lvu) / (self.lu * self.lv).sqrt();
            c * c
        }

        pub fn alt(&self) -> (f64, f64) {
            let (x, d) = (self.chi2(), self);
            (
                d.d2 / d.lu * (1.0 - d.m / d.n) + d.su2 / d.lu + d.sv2 * (d.m + x * (d.n - d.m)) / (d.lv * d.n),
                (d.su2 + d.d2) / d.lu * (1.0 - 1.0 / d.tu)
                    + d.sv2 * d.m / (d.lv * d.n) * (1.0 - 1.0 / d.tv)
                    + x * d.sv2 / d.lv,
            )
        }

        pub fn sim(&self) -> (f64, f64) {
            let (x, d) = (self.chi2(), self);
            (
                (1.0 + x) * (d.d2 / d.lu * (1.0 - d.m / d.n) + d.su2 / d.lu + d.sv2 * d.m / (d.lv * d.n)),
                (1.0 + x) * (d.d2 / d.lu + d.su2 / d.lu + d.sv2 / d.lv) * (1.0 - 1.0 / d.t),
            )
        }

        pub fn cap_alt(&self) -> f64 {
            let (x, d) = (self.chi2(), self);
            let a = 1.0 / (24.0 * (1.0 + d.r2));
            let b = if x == 0.0 || d.n == d.m {
                f64::INFINITY
            } else {
                d.m / (128.0 * x * (d.n - d.m))
            };
            let c = if x == 0.0 { f64::INFINITY } else { (d.m / (x * d.n)).sqrt() };
            a.min(b).min(c)
        }

        pub fn cap_sim(&self) -> f64 {
            let (x, d) = (self.chi2(), self);
            let a = 1.0 / (12.0 * (1.0 + x) * (1.0 + d.r2));
            let b = if d.t == 1.0 {
                f64::INFINITY
            } else {
                ((d.m / d.n) / (196.0 * (1.0 - 1.0 / d.t) * (1.0 + x) * (1.0 + d.r2))).sqrt()
            };
            a.min(b)
        }

        /// `gamma* = min{Gamma, sqrt(A/(B T)), (A/(C T))^(1/3)}` and the
        /// lemma's bound on `phi(gamma*)`.
        pub fn tuned(&self, cap: f64, (b, c): (f64, f64)) -> (f64, f64) {
            let (a, t) = (self.f0, self.rounds);
            let g = cap.min((a / (b * t)).sqrt()).min((a / (c * t)).powf(1.0 / 3.0));
            (g, a / (cap * t) + 2.0 * (a * b / t).sqrt() + 2.0 * c.powf(1.0 / 3.0) * (a / t).powf(2.0 / 3.0))
        }

        pub fn rate(&self, eta: f64, (s1, s2): (f64, f64)) -> f64 {
            self.f0 / (eta * self.rounds) + eta * s1 + eta * eta * s2
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= THEORY_TOL * a.abs().max(b.abs())
}

fn c10_theory() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for draw in 0..THEORY_DRAWS {
        let n = rng.random_range(2..=64usize);
        let d = script::Draw {
            lu: rng.random_range(0.1..10.0),
            lv: rng.random_range(0.1..10.0),
            luv: 0.0,
            lvu: 0.0,
            su2: rng.random_range(0.01..4.0),
            sv2: rng.random_range(0.01..4.0),
            d2: rng.random_range(0.01..4.0),
            r2: rng.random_range(0.0..2.0),
            m: rng.random_range(1..=n) as f64,
            n: n as f64,
            tu: rng.random_range(1..=8usize) as f64,
            tv: rng.random_range(1..=8usize) as f64,
            t: rng.random_range(1..=8usize) as f64,
            rounds: rng.random_range(1..=10_000usize) as f64,
            f0: rng.random_range(0.01..100.0),
        };
        let geo = (d.lu * d.lv).sqrt();
        let d = script::Draw {
            luv: rng.random_range(0.0..2.0) * geo,
            lvu: rng.random_range(0.0..2.0) * geo,
            ..d
        };
        let profile = SmoothnessProfile {
            sigma_u2: d.su2,
            sigma_v2: d.sv2,
            delta2: d.d2,
            rho2: d.r2,
            ..SmoothnessProfile::from_lipschitz(d.lu, d.lv, d.luv, d.lvu)
        };
        let inp = RateInputs {
            profile,
            m: d.m as usize,
            n,
            tau_u: d.tu as usize,
            tau_v: d.tv as usize,
            tau: d.t as usize,
            rounds: d.rounds as usize,
            delta_f0: d.f0,
        };
        for (alg, want, cap) in [
            (Algorithm::FedAlt, d.alt(), d.cap_alt()),
            (Algorithm::FedSim, d.sim(), d.cap_sim()),
        ] {
            let got = effective_variances(alg, &inp)?;
            let got_cap = eta_caps(alg, &inp);
            let rec = recommend(alg, &inp)?;
            let (eta, bound) = d.tuned(cap, want);
            let probe = eta * rng.random_range(0.05..1.0);
            let pairs = [
                (got.0, want.0),
                (got.1, want.1),
                (got_cap, cap),
                (rec.eta, eta),
                (rec.step.bound, bound),
                (rate_bound(alg, &inp, probe)?, d.rate(probe, want)),
            ];
            for (k, (a, b)) in pairs.into_iter().enumerate() {
                if !close(a, b) {
                    return Ok(outcome(false, format!("draw {draw} {alg} quantity {k}: {a:e} vs {b:e}")));
                }
                if a != b {
                    worst = worst.max((a - b).abs() / a.abs().max(b.abs()));
                }
                checked += 1;
            }
        }
    }
    Ok(outcome(
        true,
        format!("{checked} values over {THEORY_DRAWS} draws, max relative difference {worst:.1e} <= {THEORY_TOL:e}"),
    ))
}

const REPLAY_CONFIG: &str = r#"
seed = 12
metric_cadence = 2

[problem]
kind = "quadratic"
n = 10
d0 = 4
personal_dim = 3
coupling = 0.7

[shared]
rounds = 10
cohort_size = 4
gamma_u = 0.1
gamma_v = 0.1
tau = 3

[personalized]
algorithm = "fedalt"
rounds = 25
cohort_size = 3
gamma_u = 0.08
gamma_v = 0.1
tau_u = 2
tau_v = 4
noise = { mode = "additive-gaussian", sigma_u = 0.2, sigma_v = 0.4 }

[finetune]
epochs = 3
lr = 0.05
noise = { mode = "additive-gaussian", sigma_u = 0.0, sigma_v = 0.1 }

[compare]
rounds = 20
cohort_size = 2
eta = 0.1
tau = 2
threshold = 1e-3
"#;

fn c11_determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = fedpart_cli::ExperimentConfig::from_toml(REPLAY_CONFIG)?;
    fedpart_cli::run(&cfg, &dir.path().join("a"))?;
    fedpart_cli::replay(&dir.path().join("a/manifest.toml"), &dir.path().join("b"))?;
    let mut files = 0;
    for f in ["metrics.jsonl", "summary.csv", "comparison.csv", "manifest.toml"] {
        let a = std::fs::read(dir.path().join("a").join(f))?;
        let b = std::fs::read(dir.path().join("b").join(f))?;
        if a != b {
            return Ok(outcome(false, format!("{f} differs after replay")));
        }
        files += 1;
    }

    let quad = make_quadratic_ensemble(&coupled_spec(12, 4, 3, 3))?;
    let additive = AdditiveSpec {
        n: 12,
        d0: 4,
        personal_dim: 2,
        samples: 30,
        heldout_samples: 0,
        heterogeneity: 1.0,
        noise: 0.1,
        seed: 3,
    }
    .generate()?;
    let problems: [(&dyn PartitionedProblem, StocGradSpec); 2] = [
        (
            &quad,
            StocGradSpec::AdditiveGaussian {
                sigma_u: 0.3,
                sigma_v: 0.3,
            },
        ),
        (&additive, StocGradSpec::Minibatch { batch_size: 5 }),
    ];
    let mut pairs = 0;
    for (p, noise) in problems {
        let init = ParamState::random(p, 0.5, StreamKey::new(3, Purpose::Init));
        for alg in [Algorithm::FedAlt, Algorithm::FedSim, Algorithm::FedAvg] {
            let base = FedConfig {
                noise,
                ..FedConfig::new(alg, 15, 5, LocalHyper::new(0.02, 0.02, 3), 8)
            };
            let seq = run_experiment(p, &init, &FedConfig { parallel: false, ..base.clone() })?;
            let par = run_experiment(p, &init, &FedConfig { parallel: true, ..base })?;
            if !same_traces(&seq.traces, &par.traces) || seq.state != par.state {
                return Ok(outcome(false, format!("{alg} parallel run differs from sequential")));
            }
            pairs += 1;
        }
    }
    Ok(outcome(
        true,
        format!("{files} artifacts replay bitwise; {pairs} parallel/sequential pairs identical"),
    ))
}

fn c12_pipeline() -> Result<Outcome> {
    let p = AdditiveSpec {
        n: 8,
        d0: 3,
        personal_dim: 2,
        samples: 25,
        heldout_samples: 10,
        heterogeneity: 1.0,
        noise: 0.1,
        seed: 4,
    }
    .generate()?;
    let init = ParamState::random(&p, 0.5, StreamKey::new(4, Purpose::Init));

    let ft = FinetuneConfig {
        noise: StocGradSpec::Minibatch { batch_size: 5 },
        ..FinetuneConfig::new(4, 0.05)
    };
    let only_c = run_pipeline(
        &p,
        &init,
        &PipelineConfig {
            finetune: Some(ft.clone()),
            ..Default::default()
        },
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let direct: Vec<_> = (0..p.num_devices())
        .map(|i| finetune(&p, i, &init.u, &init.v[i], &ft))
        .collect::<fedpart::Result<_>>()?;
    let mut deltas_match = true;
    for d in &only_c.deltas {
        let after = device_objective(&p, d.device, &init.u, &direct[d.device])?;
        deltas_match &= d.train_after.to_bits() == after.to_bits();
    }
    let baseline = only_c.final_state.u == init.u && only_c.final_state.v == direct && deltas_match;

    let lambda = 1e8;
    let ditto = PipelineConfig {
        shared: Some(FedConfig::new(Algorithm::FedAvg, 10, 4, LocalHyper::new(0.05, 0.05, 2), 4)),
        finetune: Some(FinetuneConfig {
            reg: FinetuneReg::L2 { lambda, anchor: None },
            ..FinetuneConfig::new(3, 1.0 / (lambda + 10.0))
        }),
        ..Default::default()
    };
    let out = run_pipeline(&p, &init, &ditto).map_err(|e| anyhow::anyhow!("{e}"))?;
    let worst = out.deltas.iter().map(|d| d.train_delta().abs()).fold(0.0, f64::max);
    Ok(outcome(
        baseline && worst <= DITTO_TOL,
        format!(
            "finetune-only stage matches per-device finetuning bitwise: {baseline}; anchored finetune with lambda {lambda:e} moves device losses by at most {worst:.1e} <= {DITTO_TOL:e}"
        ),
    ))
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        criterion(1, "gradient correctness", secs(10), c1_gradients),
        criterion(2, "sampling lemma", secs(5), c2_sampling),
        criterion(3, "virtual full participation", secs(10), c3_vfp),
        criterion(4, "client drift", secs(30), c4_drift),
        criterion(5, "block smoothness", secs(5), c5_block_smoothness),
        criterion(6, "reduction consistency", Duration::MAX, c6_reduction),
        criterion(7, "decoupling equivalence", Duration::MAX, c7_decoupling),
        criterion(8, "convergence", secs(60), c8_convergence),
        criterion(9, "regime experiment", secs(120), c9_regime),
        criterion(10, "theory formulas", Duration::MAX, c10_theory),
        criterion(11, "determinism", Duration::MAX, c11_determinism),
        criterion(12, "pipeline semantics", Duration::MAX, c12_pipeline),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
