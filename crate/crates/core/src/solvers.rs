//! First-principles solver pack.
//!
//! Each solver is a pure closed form or a fixed-step integration, used as the
//! ground truth that learned models are validated against. Units are SI
//! throughout (stress in MPa for crack growth, where the law is customarily
//! stated that way).

use crate::budget::{BudgetExceeded, Meter};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

/// Physical constants (CODATA 2018 exact or recommended values).
pub mod constants {
    /// Stefan-Boltzmann constant, W/(m^2 K^4).
    pub const STEFAN_BOLTZMANN: f64 = 5.670374419e-8;
    /// Molar gas constant, J/(mol K).
    pub const GAS_CONSTANT: f64 = 8.314462618;
    /// Standard gravity, m/s^2.
    pub const STANDARD_GRAVITY: f64 = 9.80665;
    /// Faraday constant, C/mol.
    pub const FARADAY: f64 = 96485.33212;
}

use constants::*;

/// Default integration step for the runaway integrator, seconds.
pub const DEFAULT_RUNAWAY_DT: f64 = 0.1;
/// Default step budget for the runaway integrator.
pub const DEFAULT_RUNAWAY_STEPS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no runaway within {horizon} s")]
    NoRunaway { horizon: f64 },
    #[error("crack-growth exponent m = 2 is not supported")]
    UnsupportedExponent,
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error(transparent)]
    Budget(#[from] BudgetExceeded),
}

type Result<T> = std::result::Result<T, SolverError>;

fn domain(msg: impl Into<String>) -> SolverError {
    SolverError::Domain(msg.into())
}

fn finite(name: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(domain(format!("{name} must be finite, got {x}")))
    }
}

fn positive(name: &str, x: f64) -> Result<f64> {
    finite(name, x)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err(domain(format!("{name} must be > 0, got {x}")))
    }
}

fn non_negative(name: &str, x: f64) -> Result<f64> {
    finite(name, x)?;
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(domain(format!("{name} must be >= 0, got {x}")))
    }
}

/// Cantilever tip deflection under an end load: F·L³/(3·E·I).
pub fn beam_deflection(force: f64, length: f64, modulus: f64, inertia: f64) -> Result<f64> {
    finite("F", force)?;
    positive("L", length)?;
    positive("E", modulus)?;
    positive("I", inertia)?;
    Ok(force * length.powi(3) / (3.0 * modulus * inertia))
}

/// Euler critical buckling load: π²·E·I/(K·L)².
pub fn euler_buckling(modulus: f64, inertia: f64, length: f64, k_factor: f64) -> Result<f64> {
    positive("E", modulus)?;
    positive("I", inertia)?;
    positive("L", length)?;
    positive("K", k_factor)?;
    let eff = k_factor * length;
    Ok(PI * PI * modulus * inertia / (eff * eff))
}

/// Fourier conduction through a slab: k·A·ΔT/L.
pub fn conduction(k: f64, area: f64, delta_t: f64, length: f64) -> Result<f64> {
    positive("k", k)?;
    positive("A", area)?;
    finite("dT", delta_t)?;
    positive("L", length)?;
    Ok(k * area * delta_t / length)
}

/// Newton cooling: h·A·ΔT.
pub fn convection(h: f64, area: f64, delta_t: f64) -> Result<f64> {
    positive("h", h)?;
    positive("A", area)?;
    finite("dT", delta_t)?;
    Ok(h * area * delta_t)
}

/// Net grey-body radiation: ε·σ·A·(T⁴ − T_amb⁴).
pub fn radiation(emissivity: f64, area: f64, temp: f64, ambient: f64) -> Result<f64> {
    finite("eps", emissivity)?;
    if !(0.0..=1.0).contains(&emissivity) {
        return Err(domain(format!("eps must lie in [0,1], got {emissivity}")));
    }
    positive("A", area)?;
    positive("T", temp)?;
    positive("T_amb", ambient)?;
    Ok(emissivity * STEFAN_BOLTZMANN * area * (temp.powi(4) - ambient.powi(4)))
}

/// Arrhenius rate constant: A·exp(−Ea/(R·T)).
pub fn arrhenius_rate(pre_exp: f64, activation: f64, temp: f64) -> Result<f64> {
    non_negative("A", pre_exp)?;
    non_negative("Ea", activation)?;
    positive("T", temp)?;
    Ok(pre_exp * (-activation / (GAS_CONSTANT * temp)).exp())
}

/// Zero-order adiabatic self-heating parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunawayParams {
    pub t0: f64,
    pub dt_ad: f64,
    pub pre_exp: f64,
    pub activation: f64,
    pub t_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunawaySettings {
    pub dt: f64,
    pub max_steps: u64,
}

impl Default for RunawaySettings {
    fn default() -> Self {
        Self {
            dt: DEFAULT_RUNAWAY_DT,
            max_steps: DEFAULT_RUNAWAY_STEPS,
        }
    }
}

/// Time until the temperature first reaches `t_max`, integrating
/// dT/dt = ΔT_ad·k(T) with fixed-step RK4.
pub fn time_to_runaway(params: RunawayParams, dt: f64) -> Result<f64> {
    time_to_runaway_with(
        params,
        RunawaySettings {
            dt,
            ..RunawaySettings::default()
        },
        &Meter::unlimited(),
    )
}

/// Metered form of [`time_to_runaway`]; charges one step per RK4 step.
///
/// Returns the first step time `n·dt` at which T ≥ T_max. Because the rate
/// is increasing in T, the loop stops early with `NoRunaway` once even the
/// rate at T_max over the remaining step budget cannot close the gap.
pub fn time_to_runaway_with(p: RunawayParams, s: RunawaySettings, meter: &Meter) -> Result<f64> {
    positive("T0", p.t0)?;
    positive("dT_ad", p.dt_ad)?;
    non_negative("A", p.pre_exp)?;
    non_negative("Ea", p.activation)?;
    positive("T_max", p.t_max)?;
    positive("dt", s.dt)?;
    if p.t0 >= p.t_max {
        return Err(domain("T0 must be below T_max"));
    }
    if s.max_steps == 0 {
        return Err(domain("step budget must be positive"));
    }
    let rate = |t: f64| p.dt_ad * p.pre_exp * (-p.activation / (GAS_CONSTANT * t)).exp();
    let ceiling = rate(p.t_max);
    let horizon = s.max_steps as f64 * s.dt;
    let h = s.dt;
    let mut temp = p.t0;
    for n in 1..=s.max_steps {
        meter.charge_steps(1)?;
        let k1 = rate(temp);
        let k2 = rate(temp + 0.5 * h * k1);
        let k3 = rate(temp + 0.5 * h * k2);
        let k4 = rate(temp + h * k3);
        temp += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if temp >= p.t_max {
            return Ok(n as f64 * h);
        }
        let remaining = (s.max_steps - n) as f64 * h;
        if !(remaining * ceiling >= p.t_max - temp) {
            return Err(SolverError::NoRunaway { horizon });
        }
    }
    Err(SolverError::NoRunaway { horizon })
}

/// Results of a constant power-per-volume stirred-tank scale-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaleup {
    pub re1: f64,
    pub re2: f64,
    pub p1: f64,
    pub p2: f64,
    pub n2: f64,
}

/// Scale an impeller from diameter `d1` to `d2` at constant P/V.
pub fn scaleup(n1: f64, d1: f64, d2: f64, rho: f64, mu: f64, np: f64) -> Result<Scaleup> {
    positive("N1", n1)?;
    positive("D1", d1)?;
    positive("D2", d2)?;
    positive("rho", rho)?;
    positive("mu", mu)?;
    positive("Np", np)?;
    let n2 = n1 * (d1 / d2).powf(2.0 / 3.0);
    let re = |n: f64, d: f64| rho * n * d * d / mu;
    let power = |n: f64, d: f64| np * rho * n.powi(3) * d.powi(5);
    Ok(Scaleup {
        re1: re(n1, d1),
        re2: re(n2, d2),
        p1: power(n1, d1),
        p2: power(n2, d2),
        n2,
    })
}

/// Arps decline rate. `b = 0` is exponential, `0 < b ≤ 1` hyperbolic.
pub fn arps_decline(qi: f64, di: f64, b: f64, t: f64) -> Result<f64> {
    positive("qi", qi)?;
    non_negative("Di", di)?;
    finite("b", b)?;
    if !(0.0..=1.0).contains(&b) {
        return Err(domain(format!("b must lie in [0,1], got {b}")));
    }
    non_negative("t", t)?;
    if b == 0.0 {
        Ok(qi * (-di * t).exp())
    } else {
        // ln_1p keeps the small-b limit continuous with the exponential branch
        Ok(qi * (-(b * di * t).ln_1p() / b).exp())
    }
}

/// Cycles to grow a crack from `a0` to `af` under Paris' law
/// da/dN = C·(Y·Δσ·√(πa))^m, for m ≠ 2.
pub fn paris_cycles(a0: f64, af: f64, c: f64, m: f64, dsigma: f64, y: f64) -> Result<f64> {
    positive("a0", a0)?;
    positive("af", af)?;
    positive("C", c)?;
    positive("m", m)?;
    positive("dsigma", dsigma)?;
    positive("Y", y)?;
    if a0 >= af {
        return Err(domain("a0 must be below af"));
    }
    if m == 2.0 {
        return Err(SolverError::UnsupportedExponent);
    }
    let p = 1.0 - m / 2.0;
    let growth = a0.powf(p) * (p * (af / a0).ln()).exp_m1();
    Ok(growth / (c * (y * dsigma * PI.sqrt()).powf(m) * p))
}

/// Stokes terminal settling velocity (positive = sinking).
pub fn stokes_velocity(radius: f64, rho_p: f64, rho_f: f64, mu: f64) -> Result<f64> {
    positive("r", radius)?;
    positive("rho_p", rho_p)?;
    positive("rho_f", rho_f)?;
    positive("mu", mu)?;
    Ok(2.0 * radius * radius * (rho_p - rho_f) * STANDARD_GRAVITY / (9.0 * mu))
}

/// Faraday electrolytic mass loss in grams.
pub fn faraday_mass_loss(current: f64, time: f64, molar_mass: f64, n: f64) -> Result<f64> {
    positive("I", current)?;
    non_negative("t", time)?;
    positive("M", molar_mass)?;
    finite("n", n)?;
    if n < 1.0 || n.fract() != 0.0 {
        return Err(domain(format!("n must be a positive integer, got {n}")));
    }
    Ok(current * time * molar_mass / (n * FARADAY))
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

/// Every solver in the pack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverId {
    BeamDeflection,
    EulerBuckling,
    Conduction,
    Convection,
    Radiation,
    ArrheniusRate,
    TimeToRunaway,
    Scaleup,
    ArpsDecline,
    ParisCycles,
    StokesVelocity,
    FaradayMassLoss,
}

/// A named field with its unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub unit: String,
}

fn fields(spec: &[(&str, &str)]) -> Vec<Field> {
    spec.iter()
        .map(|(n, u)| Field {
            name: n.to_string(),
            unit: u.to_string(),
        })
        .collect()
}

impl SolverId {
    pub const ALL: [SolverId; 12] = [
        SolverId::BeamDeflection,
        SolverId::EulerBuckling,
        SolverId::Conduction,
        SolverId::Convection,
        SolverId::Radiation,
        SolverId::ArrheniusRate,
        SolverId::TimeToRunaway,
        SolverId::Scaleup,
        SolverId::ArpsDecline,
        SolverId::ParisCycles,
        SolverId::StokesVelocity,
        SolverId::FaradayMassLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverId::BeamDeflection => "beam_deflection",
            SolverId::EulerBuckling => "euler_buckling",
            SolverId::Conduction => "conduction",
            SolverId::Convection => "convection",
            SolverId::Radiation => "radiation",
            SolverId::ArrheniusRate => "arrhenius_rate",
            SolverId::TimeToRunaway => "time_to_runaway",
            SolverId::Scaleup => "scaleup",
            SolverId::ArpsDecline => "arps_decline",
            SolverId::ParisCycles => "paris_cycles",
            SolverId::StokesVelocity => "stokes_velocity",
            SolverId::FaradayMassLoss => "faraday_mass_loss",
        }
    }

    /// Registry id of the solver's nano model.
    pub fn model_id(self) -> String {
        format!("solver/{}", self.name())
    }

    pub fn from_name(name: &str) -> Option<SolverId> {
        let name = name.strip_prefix("solver/").unwrap_or(name);
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Physical law implemented, for catalog listings.
    pub fn law(self) -> &'static str {
        match self {
            SolverId::BeamDeflection => "Euler-Bernoulli cantilever, end load",
            SolverId::EulerBuckling => "Euler critical buckling load",
            SolverId::Conduction => "Fourier's law",
            SolverId::Convection => "Newton's law of cooling",
            SolverId::Radiation => "Stefan-Boltzmann",
            SolverId::ArrheniusRate => "Arrhenius equation",
            SolverId::TimeToRunaway => "zero-order adiabatic self-heating (RK4)",
            SolverId::Scaleup => "Reynolds/power-number constant P/V scale-up",
            SolverId::ArpsDecline => "Arps decline curve",
            SolverId::ParisCycles => "Paris' law crack growth",
            SolverId::StokesVelocity => "Stokes' law settling",
            SolverId::FaradayMassLoss => "Faraday's law of electrolysis",
        }
    }

    pub fn domain(self) -> &'static str {
        match self {
            SolverId::BeamDeflection | SolverId::EulerBuckling | SolverId::ParisCycles => {
                "structural"
            }
            SolverId::Conduction | SolverId::Convection | SolverId::Radiation => "thermal",
            SolverId::ArrheniusRate | SolverId::TimeToRunaway | SolverId::FaradayMassLoss => {
                "chemical"
            }
            SolverId::Scaleup | SolverId::StokesVelocity | SolverId::ArpsDecline => "fluids",
        }
    }

    pub fn inputs(self) -> Vec<Field> {
        fields(match self {
            SolverId::BeamDeflection => &[("F", "N"), ("L", "m"), ("E", "Pa"), ("I", "m^4")],
            SolverId::EulerBuckling => &[("E", "Pa"), ("I", "m^4"), ("L", "m"), ("K", "1")],
            SolverId::Conduction => &[("k", "W/(m K)"), ("A", "m^2"), ("dT", "K"), ("L", "m")],
            SolverId::Convection => &[("h", "W/(m^2 K)"), ("A", "m^2"), ("dT", "K")],
            SolverId::Radiation => &[("eps", "1"), ("A", "m^2"), ("T", "K"), ("T_amb", "K")],
            SolverId::ArrheniusRate => &[("A", "1/s"), ("Ea", "J/mol"), ("T", "K")],
            SolverId::TimeToRunaway => &[
                ("T0", "K"),
                ("dT_ad", "K"),
                ("A", "1/s"),
                ("Ea", "J/mol"),
                ("T_max", "K"),
            ],
            SolverId::Scaleup => &[
                ("N1", "1/s"),
                ("D1", "m"),
                ("D2", "m"),
                ("rho", "kg/m^3"),
                ("mu", "Pa s"),
                ("Np", "1"),
            ],
            SolverId::ArpsDecline => &[("qi", "vol/time"), ("Di", "1/time"), ("b", "1"), ("t", "time")],
            SolverId::ParisCycles => &[
                ("a0", "m"),
                ("af", "m"),
                ("C", "m/cycle"),
                ("m", "1"),
                ("dsigma", "MPa"),
                ("Y", "1"),
            ],
            SolverId::StokesVelocity => {
                &[("r", "m"), ("rho_p", "kg/m^3"), ("rho_f", "kg/m^3"), ("mu", "Pa s")]
            }
            SolverId::FaradayMassLoss => &[("I", "A"), ("t", "s"), ("M", "g/mol"), ("n", "1")],
        })
    }

    pub fn outputs(self) -> Vec<Field> {
        fields(match self {
            SolverId::BeamDeflection => &[("delta", "m")],
            SolverId::EulerBuckling => &[("P_cr", "N")],
            SolverId::Conduction | SolverId::Convection | SolverId::Radiation => &[("q", "W")],
            SolverId::ArrheniusRate => &[("k", "1/s")],
            SolverId::TimeToRunaway => &[("t_runaway", "s"), ("reachable", "1")],
            SolverId::Scaleup => &[
                ("N2", "1/s"),
                ("Re1", "1"),
                ("Re2", "1"),
                ("P1", "W"),
                ("P2", "W"),
            ],
            SolverId::ArpsDecline => &[("q", "vol/time")],
            SolverId::ParisCycles => &[("N", "cycles")],
            SolverId::StokesVelocity => &[("v", "m/s")],
            SolverId::FaradayMassLoss => &[("m", "g")],
        })
    }

    /// A fixed, in-domain input record used by golden suites and benchmarks.
    pub fn probe_inputs(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            SolverId::BeamDeflection => &[("F", 100.0), ("L", 2.0), ("E", 200e9), ("I", 8e-6)],
            SolverId::EulerBuckling => &[("E", 200e9), ("I", 8e-6), ("L", 3.0), ("K", 1.0)],
            SolverId::Conduction => &[("k", 50.0), ("A", 2.0), ("dT", 30.0), ("L", 0.1)],
            SolverId::Convection => &[("h", 25.0), ("A", 2.0), ("dT", 30.0)],
            SolverId::Radiation => &[("eps", 0.9), ("A", 2.0), ("T", 500.0), ("T_amb", 300.0)],
            SolverId::ArrheniusRate => &[("A", 1e10), ("Ea", 8e4), ("T", 350.0)],
            SolverId::TimeToRunaway => &[
                ("T0", 300.0),
                ("dT_ad", 100.0),
                ("A", 1e10),
                ("Ea", 8e4),
                ("T_max", 400.0),
            ],
            SolverId::Scaleup => &[
                ("N1", 2.0),
                ("D1", 0.5),
                ("D2", 2.5),
                ("rho", 1000.0),
                ("mu", 0.001),
                ("Np", 5.0),
            ],
            SolverId::ArpsDecline => &[("qi", 1000.0), ("Di", 0.1), ("b", 0.5), ("t", 5.0)],
            SolverId::ParisCycles => &[
                ("a0", 0.001),
                ("af", 0.01),
                ("C", 1e-11),
                ("m", 3.0),
                ("dsigma", 100.0),
                ("Y", 1.12),
            ],
            SolverId::StokesVelocity => &[("r", 1e-4), ("rho_p", 2500.0), ("rho_f", 1000.0), ("mu", 1e-3)],
            SolverId::FaradayMassLoss => &[("I", 2.0), ("t", 3600.0), ("M", 55.85), ("n", 2.0)],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    /// Fixed coefficients carried by the solver's model artifact.
    pub fn default_coefficients(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            SolverId::Radiation => &[("sigma", STEFAN_BOLTZMANN)],
            SolverId::ArrheniusRate => &[("R", GAS_CONSTANT)],
            SolverId::TimeToRunaway => &[
                ("R", GAS_CONSTANT),
                ("dt", DEFAULT_RUNAWAY_DT),
                ("max_steps", DEFAULT_RUNAWAY_STEPS as f64),
            ],
            SolverId::StokesVelocity => &[("g", STANDARD_GRAVITY)],
            SolverId::FaradayMassLoss => &[("F", FARADAY)],
            _ => &[],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    /// Evaluate against named inputs, returning outputs in schema order.
    ///
    /// Only the runaway integrator reads its coefficient map (`dt`,
    /// `max_steps`); physical constants are fixed in code so that a changed
    /// coefficient map cannot silently alter the ground truth.
    pub fn evaluate(
        self,
        inputs: &BTreeMap<String, f64>,
        coefficients: &BTreeMap<String, f64>,
        meter: &Meter,
    ) -> Result<Vec<(String, f64)>> {
        let get = |name: &str| -> Result<f64> {
            inputs
                .get(name)
                .copied()
                .ok_or_else(|| SolverError::MissingInput(name.to_string()))
        };
        let one = |name: &str, v: f64| vec![(name.to_string(), v)];
        meter.charge_steps(1)?;
        Ok(match self {
            SolverId::BeamDeflection => {
                one("delta", beam_deflection(get("F")?, get("L")?, get("E")?, get("I")?)?)
            }
            SolverId::EulerBuckling => {
                one("P_cr", euler_buckling(get("E")?, get("I")?, get("L")?, get("K")?)?)
            }
            SolverId::Conduction => {
                one("q", conduction(get("k")?, get("A")?, get("dT")?, get("L")?)?)
            }
            SolverId::Convection => one("q", convection(get("h")?, get("A")?, get("dT")?)?),
            SolverId::Radiation => {
                one("q", radiation(get("eps")?, get("A")?, get("T")?, get("T_amb")?)?)
            }
            SolverId::ArrheniusRate => one("k", arrhenius_rate(get("A")?, get("Ea")?, get("T")?)?),
            SolverId::TimeToRunaway => {
                let params = RunawayParams {
                    t0: get("T0")?,
                    dt_ad: get("dT_ad")?,
                    pre_exp: get("A")?,
                    activation: get("Ea")?,
                    t_max: get("T_max")?,
                };
                let dt = coefficients.get("dt").copied().unwrap_or(DEFAULT_RUNAWAY_DT);
                let steps = coefficients
                    .get("max_steps")
                    .copied()
                    .unwrap_or(DEFAULT_RUNAWAY_STEPS as f64);
                if !(steps >= 1.0 && steps.is_finite()) {
                    return Err(domain("max_steps must be a positive finite count"));
                }
                let settings = RunawaySettings {
                    dt,
                    max_steps: steps as u64,
                };
                match time_to_runaway_with(params, settings, meter) {
                    Ok(t) => vec![("t_runaway".into(), t), ("reachable".into(), 1.0)],
                    Err(SolverError::NoRunaway { horizon }) => {
                        vec![("t_runaway".into(), horizon), ("reachable".into(), 0.0)]
                    }
                    Err(e) => return Err(e),
                }
            }
            SolverId::Scaleup => {
                let s = scaleup(
                    get("N1")?,
                    get("D1")?,
                    get("D2")?,
                    get("rho")?,
                    get("mu")?,
                    get("Np")?,
                )?;
                vec![
                    ("N2".into(), s.n2),
                    ("Re1".into(), s.re1),
                    ("Re2".into(), s.re2),
                    ("P1".into(), s.p1),
                    ("P2".into(), s.p2),
                ]
            }
            SolverId::ArpsDecline => {
                one("q", arps_decline(get("qi")?, get("Di")?, get("b")?, get("t")?)?)
            }
            SolverId::ParisCycles => one(
                "N",
                paris_cycles(
                    get("a0")?,
                    get("af")?,
                    get("C")?,
                    get("m")?,
                    get("dsigma")?,
                    get("Y")?,
                )?,
            ),
            SolverId::StokesVelocity => one(
                "v",
                stokes_velocity(get("r")?, get("rho_p")?, get("rho_f")?, get("mu")?)?,
            ),
            SolverId::FaradayMassLoss => {
                one("m", faraday_mass_loss(get("I")?, get("t")?, get("M")?, get("n")?)?)
            }
        })
    }
}

impl fmt::Display for SolverId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One catalog row: what the CLI prints as physics coverage.
#[derive(Clone, Debug, Serialize)]
pub struct CatalogEntry {
    pub model_id: String,
    pub domain: &'static str,
    pub law: &'static str,
    pub inputs: Vec<Field>,
    pub outputs: Vec<Field>,
}

pub fn catalog() -> Vec<CatalogEntry> {
    SolverId::ALL
        .iter()
        .map(|s| CatalogEntry {
            model_id: s.model_id(),
            domain: s.domain(),
            law: s.law(),
            inputs: s.inputs(),
            outputs: s.outputs(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn beam_examples() {
        assert_eq!(beam_deflection(0.0, 2.0, 200e9, 8e-6).unwrap(), 0.0);
        let d = beam_deflection(100.0, 2.0, 200e9, 8e-6).unwrap();
        assert!(rel(d, 1.0 / 6000.0) < 1e-12);
        let d2 = beam_deflection(100.0, 4.0, 200e9, 8e-6).unwrap();
        assert!(rel(d2, 8.0 * d) < 1e-12);
        assert!(beam_deflection(-5.0, 1.0, 1.0, 1.0).unwrap() < 0.0);
        assert!(matches!(beam_deflection(1.0, 0.0, 1.0, 1.0), Err(SolverError::Domain(_))));
        assert!(matches!(beam_deflection(1.0, 1.0, -1.0, 1.0), Err(SolverError::Domain(_))));
    }

    #[test]
    fn buckling_examples() {
        let p = euler_buckling(200e9, 8e-6, 2.0, 1.0).unwrap();
        assert!(rel(p, 3.947841760435743e6) < 1e-12);
        let p2 = euler_buckling(200e9, 8e-6, 2.0, 2.0).unwrap();
        assert!(rel(p2, p / 4.0) < 1e-12);
        let p3 = euler_buckling(200e9, 16e-6, 2.0, 1.0).unwrap();
        assert!(rel(p3, 2.0 * p) < 1e-12);
        assert!(euler_buckling(200e9, 8e-6, 2.0, 0.0).is_err());
    }

    #[test]
    fn heat_transfer_examples() {
        assert_eq!(conduction(50.0, 0.5, 0.0, 0.1).unwrap(), 0.0);
        assert!(rel(conduction(50.0, 0.5, 100.0, 0.1).unwrap(), 25_000.0) < 1e-12);
        assert!(rel(conduction(50.0, 0.5, 100.0, 0.2).unwrap(), 12_500.0) < 1e-12);
        assert!(conduction(0.0, 0.5, 100.0, 0.1).is_err());

        assert_eq!(convection(100.0, 2.0, 0.0).unwrap(), 0.0);
        assert!(rel(convection(100.0, 2.0, 30.0).unwrap(), 6000.0) < 1e-12);
        assert!(convection(100.0, 2.0, -30.0).unwrap() < 0.0);
        assert!(convection(-1.0, 2.0, 3.0).is_err());
    }

    #[test]
    fn radiation_examples() {
        assert_eq!(radiation(0.8, 1.0, 350.0, 350.0).unwrap(), 0.0);
        // 5.670374419e-8 * (400^4 - 300^4)
        let q = radiation(1.0, 1.0, 400.0, 300.0).unwrap();
        assert!(rel(q, 992.315523325) < 1e-10);
        assert_eq!(radiation(1.0, 1.0, 300.0, 400.0).unwrap(), -q);
        assert!(radiation(1.1, 1.0, 300.0, 400.0).is_err());
        assert!(radiation(0.5, 1.0, 0.0, 400.0).is_err());
    }

    #[test]
    fn arrhenius_examples() {
        assert_eq!(arrhenius_rate(5.0, 0.0, 300.0).unwrap(), 5.0);
        let k = arrhenius_rate(1e10, 8e4, 350.0).unwrap();
        // 1e10·exp(−8e4/(R·350)) = 1.1505e-2
        assert!(rel(k, 1.1505005466747506e-2) < 1e-12, "{k}");
        assert!(arrhenius_rate(1e10, 8e4, 360.0).unwrap() > k);
        assert!(arrhenius_rate(1e10, 8e4, 0.0).is_err());
    }

    #[test]
    fn runaway_examples() {
        let p = RunawayParams {
            t0: 300.0,
            dt_ad: 100.0,
            pre_exp: 1e10,
            activation: 8e4,
            t_max: 400.0,
        };
        let t = time_to_runaway(p, DEFAULT_RUNAWAY_DT).unwrap();
        assert!((500.0..1200.0).contains(&t), "{t}");
        let colder = time_to_runaway(RunawayParams { t0: 295.0, ..p }, DEFAULT_RUNAWAY_DT).unwrap();
        assert!(colder > t);
        let tiny = RunawayParams { dt_ad: 1e-30, ..p };
        assert!(matches!(
            time_to_runaway(tiny, DEFAULT_RUNAWAY_DT),
            Err(SolverError::NoRunaway { .. })
        ));
        assert!(time_to_runaway(RunawayParams { t0: 401.0, ..p }, 0.1).is_err());
    }

    #[test]
    fn runaway_halving_dt_converges() {
        let p = RunawayParams {
            t0: 300.0,
            dt_ad: 100.0,
            pre_exp: 1e10,
            activation: 8e4,
            t_max: 400.0,
        };
        let a = time_to_runaway(p, 0.1).unwrap();
        let b = time_to_runaway(p, 0.05).unwrap();
        assert!(rel(a, b) < 1e-3, "{a} vs {b}");
    }

    #[test]
    fn runaway_budget_is_metered() {
        let p = RunawayParams {
            t0: 300.0,
            dt_ad: 100.0,
            pre_exp: 1e10,
            activation: 8e4,
            t_max: 400.0,
        };
        let meter = Meter::new(crate::budget::Limits {
            steps: 1000,
            ..crate::budget::Limits::UNLIMITED
        });
        let r = time_to_runaway_with(p, RunawaySettings::default(), &meter);
        assert_eq!(r, Err(SolverError::Budget(BudgetExceeded::Steps)));
    }

    #[test]
    fn scaleup_examples() {
        let s = scaleup(2.0, 0.5, 0.5, 1000.0, 0.001, 5.0).unwrap();
        assert_eq!(s.n2, 2.0);
        assert!(rel(s.re1, 5e5) < 1e-12);
        assert!(rel(s.p1, 1250.0) < 1e-12);
        let s = scaleup(2.0, 0.5, 2.5, 1000.0, 0.001, 5.0).unwrap();
        assert!((s.n2 - 0.684).abs() < 1e-3);
        // constant power per volume, V ∝ D³
        assert!(rel(s.p2 / 2.5f64.powi(3), s.p1 / 0.5f64.powi(3)) < 1e-9);
    }

    #[test]
    fn arps_examples() {
        assert_eq!(arps_decline(1000.0, 0.1, 0.5, 0.0).unwrap(), 1000.0);
        assert!(rel(arps_decline(1000.0, 0.1, 0.5, 5.0).unwrap(), 640.0) < 1e-12);
        assert!((arps_decline(1000.0, 0.1, 0.0, 5.0).unwrap() - 606.53).abs() < 0.01);
        let near = arps_decline(1000.0, 0.1, 1e-9, 5.0).unwrap();
        let exp = arps_decline(1000.0, 0.1, 0.0, 5.0).unwrap();
        assert!(rel(near, exp) < 1e-6);
        assert!(arps_decline(1000.0, 0.1, 1.5, 5.0).is_err());
    }

    #[test]
    fn paris_examples() {
        let n = paris_cycles(1e-3, 1e-2, 1e-12, 4.0, 100.0, 1.0).unwrap();
        assert!(rel(n, 900.0 / (1e-4 * PI * PI)) < 1e-12, "{n}");
        let near = paris_cycles(1e-3, 1e-3 + 1e-12, 1e-12, 4.0, 100.0, 1.0).unwrap();
        assert!(near > 0.0 && near < 1e-2, "{near}");
        assert!(paris_cycles(1e-3, 1e-2, 1e-12, 4.0, 200.0, 1.0).unwrap() < n);
        assert_eq!(
            paris_cycles(1e-3, 1e-2, 1e-12, 2.0, 100.0, 1.0),
            Err(SolverError::UnsupportedExponent)
        );
        assert!(paris_cycles(1e-2, 1e-3, 1e-12, 4.0, 100.0, 1.0).is_err());
    }

    #[test]
    fn stokes_and_faraday_examples() {
        assert_eq!(stokes_velocity(1e-4, 1000.0, 1000.0, 1e-3).unwrap(), 0.0);
        let v = stokes_velocity(1e-4, 2500.0, 1000.0, 1e-3).unwrap();
        assert!((v - 3.27e-2).abs() < 0.01e-2);
        assert!(rel(stokes_velocity(2e-4, 2500.0, 1000.0, 1e-3).unwrap(), 4.0 * v) < 1e-12);
        assert!(stokes_velocity(1e-4, 500.0, 1000.0, 1e-3).unwrap() < 0.0);

        assert_eq!(faraday_mass_loss(0.1, 0.0, 55.85, 2.0).unwrap(), 0.0);
        let m = faraday_mass_loss(0.1, 3600.0, 55.85, 2.0).unwrap();
        assert!((m - 0.1042).abs() < 1e-4);
        assert!(rel(faraday_mass_loss(0.1, 3600.0, 55.85, 1.0).unwrap(), 2.0 * m) < 1e-12);
        assert!(faraday_mass_loss(0.1, 3600.0, 55.85, 0.0).is_err());
        assert!(faraday_mass_loss(0.1, 3600.0, 55.85, 1.5).is_err());
    }

    #[test]
    fn catalog_lists_every_solver() {
        let cat = catalog();
        assert_eq!(cat.len(), 12);
        for s in SolverId::ALL {
            assert_eq!(SolverId::from_name(&s.model_id()), Some(s));
        }
    }

    #[test]
    fn evaluate_by_name() {
        let inputs: BTreeMap<String, f64> = [("F", 100.0), ("L", 2.0), ("E", 200e9), ("I", 8e-6)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let out = SolverId::BeamDeflection
            .evaluate(&inputs, &BTreeMap::new(), &Meter::unlimited())
            .unwrap();
        assert_eq!(out[0].0, "delta");
        let mut partial = inputs.clone();
        partial.remove("I");
        assert_eq!(
            SolverId::BeamDeflection.evaluate(&partial, &BTreeMap::new(), &Meter::unlimited()),
            Err(SolverError::MissingInput("I".into()))
        );
    }
}
