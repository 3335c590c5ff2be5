//! Closed-form rate constants for FedAlt and FedSim.
//!
//! Everything here is a direct transcription of the published formulas. The
//! absolute constants the analysis hides behind `O(.)` are taken as 1 in
//! [`rate_bound`], so bounds are only meaningful for ordering comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::Algorithm;
use crate::problems::SmoothnessProfile;

/// Problem and schedule parameters fed to the rate formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    pub profile: SmoothnessProfile,
    pub m: usize,
    pub n: usize,
    pub tau_u: usize,
    pub tau_v: usize,
    pub tau: usize,
    pub rounds: usize,
    pub delta_f0: f64,
}

impl RateInputs {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.n {
            return Err(Error::InvalidArgument(format!("cohort size {} outside 1..={}", self.m, self.n)));
        }
        if self.tau_u == 0 || self.tau_v == 0 || self.tau == 0 {
            return Err(Error::InvalidArgument("local step counts must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be positive".into()));
        }
        if !(self.delta_f0 >= 0.0) {
            return Err(Error::InvalidArgument(format!("initial gap {} is negative", self.delta_f0)));
        }
        let p = &self.profile;
        for (name, x) in [
            ("chi", p.chi),
            ("sigma_u2", p.sigma_u2),
            ("sigma_v2", p.sigma_v2),
            ("delta2", p.delta2),
            ("rho2", p.rho2),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {x} must be finite and nonnegative")));
            }
        }
        if !(p.l_u > 0.0 && p.l_v > 0.0 && p.l_u.is_finite() && p.l_v.is_finite()) {
            return Err(Error::Domain(format!(
                "smoothness constants must be positive (l_u = {}, l_v = {})",
                p.l_u, p.l_v
            )));
        }
        Ok(())
    }

    fn participation(&self) -> f64 {
        self.m as f64 / self.n as f64
    }
}

fn inv(tau: usize) -> f64 {
    1.0 - 1.0 / tau as f64
}

/// `(sigma_alt1^2, sigma_alt2^2)`.
pub fn effective_variances_alt(inp: &RateInputs) -> Result<(f64, f64)> {
    inp.validate()?;
    let p = &inp.profile;
    let chi2 = p.chi2();
    let (m, n) = (inp.m as f64, inp.n as f64);
    let s1 = p.delta2 / p.l_u * (1.0 - m / n) + p.sigma_u2 / p.l_u + p.sigma_v2 * (m + chi2 * (n - m)) / (p.l_v * n);
    let s2 = (p.sigma_u2 + p.delta2) / p.l_u * inv(inp.tau_u)
        + p.sigma_v2 * m / (p.l_v * n) * inv(inp.tau_v)
        + chi2 * p.sigma_v2 / p.l_v;
    Ok((s1, s2))
}

/// `(sigma_sim1^2, sigma_sim2^2)`.
pub fn effective_variances_sim(inp: &RateInputs) -> Result<(f64, f64)> {
    inp.validate()?;
    let p = &inp.profile;
    let scale = 1.0 + p.chi2();
    let q = inp.participation();
    let s1 = scale * (p.delta2 / p.l_u * (1.0 - q) + p.sigma_u2 / p.l_u + p.sigma_v2 * q / p.l_v);
    let s2 = scale * (p.delta2 / p.l_u + p.sigma_u2 / p.l_u + p.sigma_v2 / p.l_v) * inv(inp.tau);
    Ok((s1, s2))
}

pub fn effective_variances(algorithm: Algorithm, inp: &RateInputs) -> Result<(f64, f64)> {
    match algorithm {
        Algorithm::FedAlt => effective_variances_alt(inp),
        Algorithm::FedSim | Algorithm::FedAvg => effective_variances_sim(inp),
    }
}

/// One argument of the step-size cap minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapTerm {
    pub name: &'static str,
    pub value: f64,
}

/// Individual arguments of the admissible-`eta` minimum. Terms whose
/// denominator vanishes (no coupling, full participation, a single local
/// step) are reported as `+inf`.
pub fn eta_cap_terms(algorithm: Algorithm, inp: &RateInputs) -> Vec<CapTerm> {
    let p = &inp.profile;
    let chi2 = p.chi2();
    let (m, n) = (inp.m as f64, inp.n as f64);
    let finite_or_inf = |den: f64, f: &dyn Fn() -> f64| if den > 0.0 { f() } else { f64::INFINITY };
    match algorithm {
        Algorithm::FedAlt => vec![
            CapTerm {
                name: "base",
                value: 1.0 / (24.0 * (1.0 + p.rho2)),
            },
            CapTerm {
                name: "participation",
                value: finite_or_inf(chi2 * (n - m), &|| m / (128.0 * chi2 * (n - m))),
            },
            CapTerm {
                name: "coupling",
                value: finite_or_inf(chi2, &|| (m / (chi2 * n)).sqrt()),
            },
        ],
        Algorithm::FedSim | Algorithm::FedAvg => {
            let growth = (1.0 + chi2) * (1.0 + p.rho2);
            let drift = inv(inp.tau);
            vec![
                CapTerm {
                    name: "base",
                    value: 1.0 / (12.0 * growth),
                },
                CapTerm {
                    name: "drift",
                    value: finite_or_inf(drift, &|| ((m / n) / (196.0 * drift * growth)).sqrt()),
                },
            ]
        }
    }
}

/// Largest `eta` admitted by the convergence theorem for `algorithm`.
/// FedAvg is analysed as FedSim (it runs as FedSim with no personal block).
pub fn eta_caps(algorithm: Algorithm, inp: &RateInputs) -> f64 {
    eta_cap_terms(algorithm, inp)
        .iter()
        .map(|t| t.value)
        .fold(f64::INFINITY, f64::min)
}

/// `phi(gamma) = A/(gamma T) + B gamma + C gamma^2`.
pub fn phi(gamma: f64, a: f64, b: f64, c: f64, t: f64) -> f64 {
    a / (gamma * t) + b * gamma + c * gamma * gamma
}

/// Which argument of the tuned-step minimum is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepBranch {
    Cap,
    Noise,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedStep {
    pub gamma: f64,
    pub bound: f64,
    pub cap: f64,
    pub noise: f64,
    pub drift: f64,
    pub branch: StepBranch,
}

/// Minimizes `phi` over `(0, Gamma]` up to constants.
///
/// `B = 0` or `C = 0` remove the corresponding candidate. Ties resolve to the
/// earlier branch in the order cap, noise, drift.
pub fn tuned_step(cap: f64, a: f64, b: f64, c: f64, rounds: usize) -> Result<TunedStep> {
    if !(cap > 0.0 && a > 0.0 && rounds > 0) || !(b >= 0.0 && c >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tuned step needs Gamma, A, T > 0 and B, C >= 0 (got {cap}, {a}, {b}, {c}, {rounds})"
        )));
    }
    let t = rounds as f64;
    let noise = if b > 0.0 { (a / (b * t)).sqrt() } else { f64::INFINITY };
    let drift = if c > 0.0 { (a / (c * t)).cbrt() } else { f64::INFINITY };
    let (gamma, branch) = if cap <= noise && cap <= drift {
        (cap, StepBranch::Cap)
    } else if noise <= drift {
        (noise, StepBranch::Noise)
    } else {
        (drift, StepBranch::Drift)
    };
    let bound = a / (cap * t) + 2.0 * (a * b / t).sqrt() + 2.0 * c.cbrt() * (a / t).powf(2.0 / 3.0);
    let value = phi(gamma, a, b, c, t);
    if value > bound * (1.0 + 1e-12) {
        return Err(Error::Domain(format!("phi(gamma*) = {value} exceeds the bound {bound}")));
    }
    Ok(TunedStep {
        gamma,
        bound,
        cap,
        noise,
        drift,
        branch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    AltDominant,
    SimDominant,
    Indeterminate,
}

pub const REGIME_TOLERANCE: f64 = 1e-12;

fn classify(lhs: f64, rhs: f64) -> Regime {
    if (lhs - rhs).abs() <= REGIME_TOLERANCE {
        Regime::Indeterminate
    } else if lhs < rhs {
        Regime::AltDominant
    } else {
        Regime::SimDominant
    }
}

/// The published condition for FedAlt to have the smaller leading variance:
/// `sigma_v^2/L_v (1 - 2m/n) < (sigma_u^2 + delta^2 (1 - m/n)) / (m L_u)`.
pub fn regime_classifier(inp: &RateInputs) -> Result<Regime> {
    inp.validate()?;
    let p = &inp.profile;
    let q = inp.participation();
    let lhs = p.sigma_v2 / p.l_v * (1.0 - 2.0 * q);
    let rhs = (p.sigma_u2 + p.delta2 * (1.0 - q)) / (inp.m as f64 * p.l_u);
    Ok(classify(lhs, rhs))
}

/// Orders the two leading variance terms directly.
pub fn leading_variance_order(inp: &RateInputs) -> Result<Regime> {
    let (alt, _) = effective_variances_alt(inp)?;
    let (sim, _) = effective_variances_sim(inp)?;
    Ok(classify(alt, sim))
}

/// `Delta F_0/(eta T) + eta sigma_1^2 + eta^2 sigma_2^2` with unit constants.
/// The lower-order `O(1/T)` tail of the first theorem has no published
/// constant and is left out.
pub fn rate_bound(algorithm: Algorithm, inp: &RateInputs, eta: f64) -> Result<f64> {
    let (s1, s2) = effective_variances(algorithm, inp)?;
    let cap = eta_caps(algorithm, inp);
    if !(eta > 0.0) || eta > cap {
        return Err(Error::Domain(format!("eta = {eta} outside (0, {cap}]")));
    }
    Ok(inp.delta_f0 / (eta * inp.rounds as f64) + eta * s1 + eta * eta * s2)
}

/// Step sizes prescribed by the tuned-rate corollaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub algorithm: Algorithm,
    pub caps: Vec<CapTerm>,
    pub step: TunedStep,
    pub eta: f64,
    pub gamma_u: f64,
    pub gamma_v: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Recommendation {
    /// Every argument of the minimum with its value, caps first.
    pub fn arguments(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<_> = self.caps.iter().map(|c| (c.name, c.value)).collect();
        out.push(("noise", self.step.noise));
        out.push(("drift", self.step.drift));
        out
    }

    /// Name of the argument that attains the minimum.
    pub fn active(&self) -> &'static str {
        match self.step.branch {
            StepBranch::Noise => "noise",
            StepBranch::Drift => "drift",
            StepBranch::Cap => self
                .caps
                .iter()
                .find(|c| c.value == self.step.cap)
                .map(|c| c.name)
                .unwrap_or("base"),
        }
    }
}

/// `eta = min{caps, sqrt(dF0/(T s1)), (dF0/(T s2))^(1/3)}` and the derived
/// block step sizes `gamma_u = eta/(tau_u L_u)`, `gamma_v = eta/(tau_v L_v)`
/// (FedSim uses `tau` for both blocks).
pub fn recommend(algorithm: Algorithm, inp: &RateInputs) -> Result<Recommendation> {
    let (sigma1, sigma2) = effective_variances(algorithm, inp)?;
    if !(inp.delta_f0 > 0.0) {
        return Err(Error::InvalidArgument("tuning needs a positive initial gap".into()));
    }
    let caps = eta_cap_terms(algorithm, inp);
    let cap = caps.iter().map(|t| t.value).fold(f64::INFINITY, f64::min);
    let step = tuned_step(cap, inp.delta_f0, sigma1, sigma2, inp.rounds)?;
    let eta = step.gamma;
    let (tu, tv) = match algorithm {
        Algorithm::FedAlt => (inp.tau_u, inp.tau_v),
        Algorithm::FedSim | Algorithm::FedAvg => (inp.tau, inp.tau),
    };
    Ok(Recommendation {
        algorithm,
        caps,
        step,
        eta,
        gamma_u: eta / (tu as f64 * inp.profile.l_u),
        gamma_v: eta / (tv as f64 * inp.profile.l_v),
        sigma1,
        sigma2,
    })
}
