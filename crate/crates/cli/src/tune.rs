//! `fedpart tune`: fills the rate inputs and prints the prescribed steps.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use fedpart::objective::{Block, StocGradSpec};
use fedpart::problems::{closed_form_minimum, cross_sensitivity, estimate_diversity, SmoothnessProfile};
use fedpart::theory::{recommend, regime_classifier, RateInputs, Recommendation, Regime};

use crate::config::{ExperimentConfig, ProfileOverrides};
use crate::runner::{initial_gap, initial_state, load_problem};

/// Where each rate input came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Config,
    Problem,
    Noise,
    Estimated,
    Default,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Config => "config",
            Source::Problem => "closed-form",
            Source::Noise => "noise-model",
            Source::Estimated => "estimated",
            Source::Default => "default",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub inputs: RateInputs,
    pub sources: Vec<(&'static str, Source)>,
    pub recommendation: Recommendation,
    pub regime: Regime,
}

fn pick(
    name: &'static str,
    over: Option<f64>,
    fallback: Option<(f64, Source)>,
    sources: &mut Vec<(&'static str, Source)>,
) -> Result<f64> {
    let (x, src) = match (over, fallback) {
        (Some(x), _) => (x, Source::Config),
        (None, Some(f)) => f,
        (None, None) => bail!("tune.profile.{name} is required for this problem (no closed form available)"),
    };
    sources.push((name, src));
    Ok(x)
}

fn noise_variance(noise: &StocGradSpec, block: Block) -> Option<(f64, Source)> {
    match noise {
        StocGradSpec::Minibatch { .. } => None,
        _ => Some((noise.sigma(block).powi(2), Source::Noise)),
    }
}

pub fn tune(config: &ExperimentConfig) -> Result<TuneReport> {
    config.check()?;
    let cfg = config.resolved();
    let t = cfg.tune.as_ref().ok_or_else(|| anyhow!("the config has no [tune] table"))?;
    let loaded = load_problem(&cfg.problem, cfg.seed)?;
    let problem = &*loaded.problem;
    let init = initial_state(problem, &cfg.init, cfg.seed);
    let known = loaded.profile;
    let ov: ProfileOverrides = t.profile;
    let mut sources = Vec::new();
    let from = |f: fn(&SmoothnessProfile) -> f64| known.as_ref().map(|p| (f(p), Source::Problem));

    let l_u = pick("l_u", ov.l_u, from(|p| p.l_u), &mut sources)?;
    let l_v = pick("l_v", ov.l_v, from(|p| p.l_v), &mut sources)?;
    let l_uv = pick("l_uv", ov.l_uv, from(|p| p.l_uv), &mut sources)?;
    let l_vu = pick("l_vu", ov.l_vu, from(|p| p.l_vu), &mut sources)?;
    let sigma_u2 = pick("sigma_u2", ov.sigma_u2, noise_variance(&t.noise, Block::Shared), &mut sources)?;
    let sigma_v2 = pick("sigma_v2", ov.sigma_v2, noise_variance(&t.noise, Block::Personal), &mut sources)?;
    let delta2 = match ov.delta2 {
        Some(d) => {
            sources.push(("delta2", Source::Config));
            d
        }
        None => {
            // Diversity at the start point and, when known, at the optimum.
            let mut states = vec![init.clone()];
            if let Ok((opt, _)) = closed_form_minimum(problem) {
                states.push(opt);
            }
            sources.push(("delta2", Source::Estimated));
            estimate_diversity(problem, &states)?
        }
    };
    let rho2 = pick("rho2", ov.rho2, Some((0.0, Source::Default)), &mut sources)?;
    let delta_f0 = match t.delta_f0 {
        Some(d) => {
            sources.push(("delta_f0", Source::Config));
            d
        }
        None => {
            let gap = initial_gap(&loaded, &init)?
                .ok_or_else(|| anyhow!("tune.delta_f0 is required for this problem (no closed-form minimum)"))?;
            sources.push(("delta_f0", Source::Problem));
            gap
        }
    };

    let profile = SmoothnessProfile {
        l_u,
        l_v,
        l_uv,
        l_vu,
        chi: cross_sensitivity(l_u, l_v, l_uv, l_vu),
        sigma_u2,
        sigma_v2,
        delta2,
        rho2,
    };
    let inputs = RateInputs {
        profile,
        m: t.cohort_size,
        n: problem.num_devices(),
        tau_u: t.tau_u.unwrap_or(t.tau),
        tau_v: t.tau_v.unwrap_or(t.tau),
        tau: t.tau,
        rounds: t.rounds,
        delta_f0,
    };
    let recommendation = recommend(t.algorithm, &inputs).context("computing the tuned step")?;
    let regime = regime_classifier(&inputs)?;
    Ok(TuneReport {
        inputs,
        sources,
        recommendation,
        regime,
    })
}

impl TuneReport {
    /// `key = value` lines, one per quantity.
    pub fn render(&self) -> String {
        let r = &self.recommendation;
        let p = &self.inputs.profile;
        let mut s = String::new();
        let _ = writeln!(s, "algorithm = {}", r.algorithm);
        for (name, src) in &self.sources {
            let value = match *name {
                "l_u" => p.l_u,
                "l_v" => p.l_v,
                "l_uv" => p.l_uv,
                "l_vu" => p.l_vu,
                "sigma_u2" => p.sigma_u2,
                "sigma_v2" => p.sigma_v2,
                "delta2" => p.delta2,
                "rho2" => p.rho2,
                _ => self.inputs.delta_f0,
            };
            let _ = writeln!(s, "input.{name} = {value:e} source={}", src.name());
        }
        let _ = writeln!(s, "input.chi = {:e}", p.chi);
        let _ = writeln!(s, "sigma1 = {:e}", r.sigma1);
        let _ = writeln!(s, "sigma2 = {:e}", r.sigma2);
        for (name, value) in r.arguments() {
            let _ = writeln!(s, "argument.{name} = {value:e}");
        }
        let _ = writeln!(s, "active = {}", r.active());
        let _ = writeln!(s, "eta = {:e}", r.eta);
        let _ = writeln!(s, "gamma_u = {:e}", r.gamma_u);
        let _ = writeln!(s, "gamma_v = {:e}", r.gamma_v);
        let _ = writeln!(s, "bound = {:e}", r.step.bound);
        let regime = match self.regime {
            Regime::AltDominant => "fedalt",
            Regime::SimDominant => "fedsim",
            Regime::Indeterminate => "indeterminate",
        };
        let _ = writeln!(s, "regime = {regime}");
        s
    }
}
