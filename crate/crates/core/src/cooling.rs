//! Doppler-cooling temperature from the velocity dependence of the
//! fluorescence rate.
//!
//! The equilibrium temperature of a weakly driven motional mode is
//! `T = -h R / (lambda k_B R')`, with `R` the photon emission rate at rest and
//! `R' = dR/dV`. Two estimates of `R'` are provided:
//!
//! * quasi-static: a central difference of steady-state rates at fixed
//!   velocities, with a Richardson comparison at half the step;
//! * dynamic: the in-phase rate response of an ion oscillating at the trap
//!   frequency, obtained from first-order harmonic linear response or, as a
//!   cross-check on small ions, from direct time integration.

use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::constants::{BOLTZMANN, HBAR, PLANCK};
use crate::master::{build_liouvillian, velocity_generator, LaserBeam, Liouvillian, MasterError, C64};
use crate::scan::{ScanAxis, ScanError};
use crate::solve::{
    beam_absorption_rate, shifted_triplets, BorderedSolver, Factorization, SolveError,
    DEGENERACY_THRESHOLD,
};
use crate::structure::ZeemanBasis;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoolingError {
    #[error(transparent)]
    Master(#[from] MasterError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error("velocity step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("unknown level {0:?} in rate selection")]
    UnknownLevel(String),
    #[error("no decay channel {0} -> {1}")]
    UnknownChannel(String, String),
    #[error("no beams: the cooling wavelength is undefined")]
    NoWavelength,
    #[error("invalid dynamic options: {0}")]
    InvalidOptions(String),
    #[error("cycle-averaged response did not settle: halves differ by {relative:.1}%")]
    NotConverged { relative: f64 },
}

/// Which emitted photons count towards the fluorescence rate.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum RateKind {
    /// All spontaneous emission, every channel.
    #[default]
    TotalEmission,
    /// Emission on one channel, e.g. the detected blue photons only.
    Channel { upper: String, lower: String },
}

/// Per-state weights w_i such that R = sum_i w_i rho_ii, in s^-1.
pub fn rate_weights(basis: &ZeemanBasis, kind: &RateKind) -> Result<Vec<f64>, CoolingError> {
    let ion = &basis.ion;
    let mut w = vec![0.0; basis.len()];
    match kind {
        RateKind::TotalEmission => {
            for lvl in 0..ion.levels.len() {
                let a = ion.total_decay_rate(lvl);
                for i in basis.level_range(lvl) {
                    w[i] = a;
                }
            }
        }
        RateKind::Channel { upper, lower } => {
            let u = ion
                .level_index(upper)
                .ok_or_else(|| CoolingError::UnknownLevel(upper.clone()))?;
            let l = ion
                .level_index(lower)
                .ok_or_else(|| CoolingError::UnknownLevel(lower.clone()))?;
            let ch = ion
                .channel(u, l)
                .ok_or_else(|| CoolingError::UnknownChannel(upper.clone(), lower.clone()))?;
            for i in basis.level_range(u) {
                w[i] = ch.einstein_a;
            }
        }
    }
    Ok(w)
}

/// Applies rate weights to a (possibly complex, linear-response) vec(rho).
fn weighted_rate(weights: &[f64], rho: &[C64]) -> C64 {
    let n = weights.len();
    weights.iter().enumerate().map(|(i, w)| rho[i * n + i] * *w).sum()
}

/// Wavelength (nm) of the channel driven by the first beam.
pub fn default_wavelength_nm(basis: &ZeemanBasis, beams: &[LaserBeam]) -> Result<f64, CoolingError> {
    let b = beams.first().ok_or(CoolingError::NoWavelength)?;
    let ion = &basis.ion;
    let u = ion.level_index(&b.upper).ok_or_else(|| CoolingError::UnknownLevel(b.upper.clone()))?;
    let l = ion.level_index(&b.lower).ok_or_else(|| CoolingError::UnknownLevel(b.lower.clone()))?;
    ion.channel(u, l)
        .map(|c| c.wavelength_nm)
        .ok_or_else(|| CoolingError::UnknownChannel(b.upper.clone(), b.lower.clone()))
}

/// `-h R / (lambda k_B R')` in kelvin, with `R` in s^-1, `R'` in s^-1 per m/s.
pub fn temperature_from_slope(rate: f64, rprime: f64, wavelength_nm: f64) -> f64 {
    -PLANCK * rate / (wavelength_nm * 1e-9 * BOLTZMANN * rprime)
}

/// The same temperature from the slope of R against the Doppler shift of
/// the cooling beam in MHz, i.e. `dR/d(V/lambda)` expressed per MHz.
pub fn temperature_from_frequency_slope(rate: f64, slope_per_mhz: f64) -> f64 {
    -PLANCK * rate / (BOLTZMANN * slope_per_mhz * 1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoolingStatus {
    /// R' < 0: the light damps motion and T is defined.
    Cooling,
    /// R' >= 0: the light heats, there is no equilibrium.
    Heating,
}

impl fmt::Display for CoolingStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoolingStatus::Cooling => "cooling",
            CoolingStatus::Heating => "heating",
        })
    }
}

fn classify(rate: f64, rprime: f64, wavelength_nm: f64) -> (Option<f64>, CoolingStatus) {
    if rprime < 0.0 && rate > 0.0 {
        (Some(temperature_from_slope(rate, rprime, wavelength_nm)), CoolingStatus::Cooling)
    } else {
        (None, CoolingStatus::Heating)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoolingOptions {
    /// Finite-difference velocity step, m/s.
    pub velocity_step: f64,
    pub rate: RateKind,
    /// Defaults to the first beam's channel.
    pub wavelength_nm: Option<f64>,
    /// Relative disagreement between the h and h/2 slopes that triggers a warning.
    pub richardson_tolerance: f64,
}

impl Default for CoolingOptions {
    fn default() -> Self {
        CoolingOptions {
            velocity_step: 0.1,
            rate: RateKind::TotalEmission,
            wavelength_nm: None,
            richardson_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoolingResult {
    /// Emission rate at rest, s^-1.
    pub rate: f64,
    /// dR/dV, s^-1 per m/s.
    pub rprime: f64,
    /// Kelvin; `None` when the light heats.
    pub temperature: Option<f64>,
    pub status: CoolingStatus,
    pub wavelength_nm: f64,
    pub velocity_step: f64,
    /// |R'(h) - R'(h/2)| / |R'(h/2)|.
    pub richardson_difference: f64,
    pub warning: Option<String>,
}

/// Emission rate (s^-1) of the steady state at `velocity` (m/s).
pub fn rate_at_velocity(
    basis: &ZeemanBasis,
    beams: &[LaserBeam],
    velocity: f64,
    kind: &RateKind,
) -> Result<f64, CoolingError> {
    let w = rate_weights(basis, kind)?;
    let l = build_liouvillian(basis, beams, velocity)?;
    Ok(steady_rate(&l, &w)?)
}

fn steady_rate(l: &Liouvillian, weights: &[f64]) -> Result<f64, SolveError> {
    let rho = steady_vec(l)?;
    Ok(weighted_rate(weights, &rho).re)
}

fn steady_vec(l: &Liouvillian) -> Result<Vec<C64>, SolveError> {
    let solver = BorderedSolver::new(l)?;
    check_conditioning(&solver, l)?;
    Ok(solver.solve_traced(&vec![ZERO; l.dim()], ONE))
}

fn check_conditioning(solver: &BorderedSolver<'_>, l: &Liouvillian) -> Result<(), SolveError> {
    let c = solver.conditioning();
    if c.is_finite() && c >= DEGENERACY_THRESHOLD {
        Ok(())
    } else {
        Err(SolveError::Degenerate {
            ratio: c,
            closed_sets: crate::solve::closed_sets(l, None),
        })
    }
}

/// Steady-state rates at each velocity, computed in parallel.
pub fn response_vs_velocity(
    basis: &ZeemanBasis,
    beams: &[LaserBeam],
    velocities: &[f64],
    kind: &RateKind,
) -> Vec<Result<f64, CoolingError>> {
    velocities
        .par_iter()
        .map(|&v| rate_at_velocity(basis, beams, v, kind))
        .collect()
}

/// Quasi-static equilibrium temperature.
pub fn equilibrium_temperature(
    basis: &ZeemanBasis,
    beams: &[LaserBeam],
    options: &CoolingOptions,
) -> Result<CoolingResult, CoolingError> {
    let h = options.velocity_step;
    if !(h.is_finite() && h > 0.0) {
        return Err(CoolingError::InvalidStep(h));
    }
    let wavelength_nm = match options.wavelength_nm {
        Some(w) => w,
        None => default_wavelength_nm(basis, beams)?,
    };
    let weights = rate_weights(basis, &options.rate)?;
    let l0 = build_liouvillian(basis, beams, 0.0)?;
    let l1 = velocity_generator(basis, beams)?;
    let velocities = [0.0, h, -h, 0.5 * h, -0.5 * h];
    let rates = velocities
        .par_iter()
        .map(|&v| steady_rate(&l0.add_scaled(v, &l1), &weights))
        .collect::<Result<Vec<_>, _>>()?;
    let rate = rates[0];
    let rprime = (rates[1] - rates[2]) / (2.0 * h);
    let rprime_half = (rates[3] - rates[4]) / h;
    let richardson_difference = (rprime - rprime_half).abs() / rprime_half.abs().max(f64::MIN_POSITIVE);
    let warning = (richardson_difference > options.richardson_tolerance).then(|| {
        format!(
            "velocity step {h} m/s is too coarse: slopes at h and h/2 differ by {:.1}%",
            100.0 * richardson_difference
        )
    });
    let (temperature, status) = classify(rate, rprime, wavelength_nm);
    Ok(CoolingResult {
        rate,
        rprime,
        temperature,
        status,
        wavelength_nm,
        velocity_step: h,
        richardson_difference,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DynamicMethod {
    /// First-order response at the trap frequency, from one complex solve.
    Harmonic,
    /// Direct integration of the periodically driven master equation.
    TimeDomain { steps_per_cycle: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicOptions {
    pub trap_frequency_hz: f64,
    /// Oscillation amplitude, m/s. Only the time-domain method depends on it.
    pub velocity_amplitude: f64,
    /// Measured cycles (time domain).
    pub cycles: usize,
    /// Discarded cycles before measuring (time domain).
    pub transient_cycles: usize,
    pub method: DynamicMethod,
    pub rate: RateKind,
    pub wavelength_nm: Option<f64>,
}

impl Default for DynamicOptions {
    fn default() -> Self {
        DynamicOptions {
            trap_frequency_hz: 1e6,
            velocity_amplitude: 0.1,
            cycles: 20,
            transient_cycles: 40,
            method: DynamicMethod::Harmonic,
            rate: RateKind::TotalEmission,
            wavelength_nm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicResult {
    pub rate: f64,
    /// In-phase rate response per unit velocity, s^-1 per m/s.
    pub effective_rprime: f64,
    /// Out-of-phase part of the same response.
    pub quadrature_rprime: f64,
    /// Energy removed from the mode per unit time, W, for the given amplitude.
    pub cooling_power: f64,
    pub temperature: Option<f64>,
    pub status: CoolingStatus,
    pub wavelength_nm: f64,
}

/// Temperature of an ion oscillating at the trap frequency.
pub fn dynamic_response(
    basis: &ZeemanBasis,
    beams: &[LaserBeam],
    options: &DynamicOptions,
) -> Result<DynamicResult, CoolingError> {
    if !(options.trap_frequency_hz.is_finite() && options.trap_frequency_hz >= 0.0) {
        return Err(CoolingError::InvalidOptions(format!(
            "trap frequency {} Hz",
            options.trap_frequency_hz
        )));
    }
    let va = options.velocity_amplitude;
    if !(va.is_finite() && va > 0.0) {
        return Err(CoolingError::InvalidOptions(format!("velocity amplitude {va} m/s")));
    }
    let wavelength_nm = match options.wavelength_nm {
        Some(w) => w,
        None => default_wavelength_nm(basis, beams)?,
    };
    let weights = rate_weights(basis, &options.rate)?;
    let l0 = build_liouvillian(basis, beams, 0.0)?;
    let l1 = velocity_generator(basis, beams)?;
    let momenta = beam_momenta(basis, beams);

    let (rate, r1, force1) = match options.method {
        DynamicMethod::Harmonic => harmonic(&l0, &l1, &weights, &momenta, options.trap_frequency_hz)?,
        DynamicMethod::TimeDomain { steps_per_cycle } => {
            if options.trap_frequency_hz == 0.0 || steps_per_cycle < 8 || options.cycles < 2 {
                return Err(CoolingError::InvalidOptions(
                    "time-domain response needs a trap frequency, >= 8 steps and >= 2 cycles".into(),
                ));
            }
            time_domain(&l0, &l1, &weights, &momenta, options, steps_per_cycle)?
        }
    };
    let effective_rprime = r1.re;
    let cooling_power = -0.5 * va * va * force1.re;
    let (temperature, status) = classify(rate, effective_rprime, wavelength_nm);
    Ok(DynamicResult {
        rate,
        effective_rprime,
        quadrature_rprime: r1.im,
        cooling_power,
        temperature,
        status,
        wavelength_nm,
    })
}

/// hbar k_b * propagation sign for each beam, in kg m/s.
fn beam_momenta(basis: &ZeemanBasis, beams: &[LaserBeam]) -> Vec<f64> {
    let ion = &basis.ion;
    beams
        .iter()
        .map(|b| {
            let u = ion.level_index(&b.upper).expect("validated beam");
            let l = ion.level_index(&b.lower).expect("validated beam");
            let lambda = ion.channel(u, l).expect("validated beam").wavelength_nm * 1e-9;
            HBAR * 2.0 * std::f64::consts::PI / lambda * f64::from(b.propagation)
        })
        .collect()
}

fn force(l0: &Liouvillian, momenta: &[f64], rho: &[C64]) -> C64 {
    momenta
        .iter()
        .enumerate()
        .map(|(b, p)| beam_absorption_rate(l0, b, rho) * *p)
        .sum()
}

/// Returns (R0, R1, F1): rest rate, complex rate response and complex force
/// response per unit velocity amplitude.
fn harmonic(
    l0: &Liouvillian,
    l1: &Liouvillian,
    weights: &[f64],
    momenta: &[f64],
    trap_hz: f64,
) -> Result<(f64, C64, C64), CoolingError> {
    let solver = BorderedSolver::new(l0)?;
    check_conditioning(&solver, l0)?;
    let rho0 = solver.solve_traced(&vec![ZERO; l0.dim()], ONE);
    let drive = l1.apply(&rho0);
    // (i w - L0) rho1 = L1 rho0; at w = 0 the trace condition fixes the kernel
    let omega = 2.0 * std::f64::consts::PI * trap_hz * 1e-6;
    let rho1 = if omega == 0.0 {
        let rhs: Vec<C64> = drive.iter().map(|z| -z).collect();
        solver.solve_traced(&rhs, ZERO)
    } else {
        let lu = Factorization::new(l0.dim(), &shifted_triplets(l0, C64::new(0.0, omega), 1.0))?;
        lu.solve(&drive)
    };
    Ok((
        weighted_rate(weights, &rho0).re,
        weighted_rate(weights, &rho1),
        force(l0, momenta, &rho1),
    ))
}

fn time_domain(
    l0: &Liouvillian,
    l1: &Liouvillian,
    weights: &[f64],
    momenta: &[f64],
    options: &DynamicOptions,
    steps_per_cycle: usize,
) -> Result<(f64, C64, C64), CoolingError> {
    const G: f64 = 2.0 - std::f64::consts::SQRT_2;
    let solver = BorderedSolver::new(l0)?;
    check_conditioning(&solver, l0)?;
    let rho0 = solver.solve_traced(&vec![ZERO; l0.dim()], ONE);
    let rate0 = weighted_rate(weights, &rho0).re;

    let omega = 2.0 * std::f64::consts::PI * options.trap_frequency_hz * 1e-6;
    let period = 2.0 * std::f64::consts::PI / omega;
    let h = period / steps_per_cycle as f64;
    let d = 0.5 * G * h;
    let lu = Factorization::new(l0.dim(), &shifted_triplets(l0, ONE, d))?;
    let va = options.velocity_amplitude;
    let vel = |t: f64| va * (omega * t).cos();
    let c1 = 1.0 / (G * (2.0 - G));
    let c0 = (1.0 - G).powi(2) / (G * (2.0 - G));

    // (1 - d L0 - d v L1) y = rhs by fixed-point iteration on the small
    // velocity term around the constant factorization
    let implicit = |rhs: &[C64], v: f64, guess: &[C64]| -> Vec<C64> {
        let mut y = guess.to_vec();
        for _ in 0..30 {
            let ly = l1.apply(&y);
            let b: Vec<C64> = rhs.iter().zip(&ly).map(|(r, q)| r + q * (d * v)).collect();
            let next = lu.solve(&b);
            let change = next.iter().zip(&y).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            y = next;
            if change < 1e-15 {
                break;
            }
        }
        y
    };

    let total_steps = (options.transient_cycles + options.cycles) * steps_per_cycle;
    let first_measured = options.transient_cycles * steps_per_cycle;
    let half = options.cycles / 2;
    // per-half accumulators of integral(R cos) and integral(F v)
    let mut rate_cos = [0.0; 2];
    let mut power = [0.0; 2];
    let mut y = rho0.clone();
    let sample = |y: &[C64], t: f64| -> (f64, f64) {
        let r = weighted_rate(weights, y).re - rate0;
        let f = force(l0, momenta, y).re;
        (r * (omega * t).cos(), f * vel(t))
    };
    let mut prev = sample(&y, 0.0);
    for step in 0..total_steps {
        let t = step as f64 * h;
        let v_n = vel(t);
        let ly = l0.apply(&y);
        let l1y = l1.apply(&y);
        let rhs1: Vec<C64> = y
            .iter()
            .zip(ly.iter().zip(&l1y))
            .map(|(a, (b, c))| a + (b + c * v_n) * d)
            .collect();
        let y1 = implicit(&rhs1, vel(t + G * h), &y);
        let rhs2: Vec<C64> = y1.iter().zip(&y).map(|(a, b)| a * c1 - b * c0).collect();
        y = implicit(&rhs2, vel(t + h), &y1);
        let next = sample(&y, t + h);
        if step >= first_measured {
            let idx = usize::from((step - first_measured) / steps_per_cycle >= half);
            rate_cos[idx] += 0.5 * h * (prev.0 + next.0);
            power[idx] += 0.5 * h * (prev.1 + next.1);
        }
        prev = next;
    }
    let spans = [half as f64 * period, (options.cycles - half) as f64 * period];
    // <R cos> = Re(R1) va / 2, <F v> = Re(F1) va^2 / 2
    let r1 = [0, 1].map(|k| 2.0 * rate_cos[k] / (spans[k] * va));
    let f1 = [0, 1].map(|k| 2.0 * power[k] / (spans[k] * va * va));
    let relative = 100.0 * (r1[0] - r1[1]).abs() / r1[1].abs().max(f64::MIN_POSITIVE);
    if relative > 5.0 {
        return Err(CoolingError::NotConverged { relative });
    }
    let w = |x: [f64; 2]| (x[0] * spans[0] + x[1] * spans[1]) / (spans[0] + spans[1]);
    Ok((rate0, C64::from(w(r1)), C64::from(w(f1))))
}

/// How each point of a temperature scan estimates R'.
#[derive(Debug, Clone, PartialEq)]
pub enum TemperatureMethod {
    QuasiStatic(CoolingOptions),
    Dynamic(DynamicOptions),
}

/// Re-tunes one beam at every scan point to the detuning (from a grid of
/// offsets about its current value) giving the lowest temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Reoptimize {
    pub beam: String,
    pub offsets_mhz: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureScan {
    pub axis: ScanAxis,
    pub values: Vec<f64>,
    pub method: TemperatureMethod,
    pub reoptimize: Option<Reoptimize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointStatus {
    Cooling,
    Heating,
    Degenerate,
    Failed(String),
}

impl fmt::Display for PointStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointStatus::Cooling => f.write_str("cooling"),
            PointStatus::Heating => f.write_str("heating"),
            PointStatus::Degenerate => f.write_str("degenerate"),
            PointStatus::Failed(_) => f.write_str("error"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperaturePoint {
    pub value: f64,
    pub rate: Option<f64>,
    pub rprime: Option<f64>,
    pub temperature: Option<f64>,
    pub status: PointStatus,
    /// Detuning chosen by re-optimization, MHz.
    pub reoptimized_mhz: Option<f64>,
    pub warning: Option<String>,
}

struct Estimate {
    rate: f64,
    rprime: f64,
    temperature: Option<f64>,
    status: CoolingStatus,
    warning: Option<String>,
}

fn estimate(basis: &ZeemanBasis, beams: &[LaserBeam], method: &TemperatureMethod) -> Result<Estimate, CoolingError> {
    match method {
        TemperatureMethod::QuasiStatic(o) => {
            let r = equilibrium_temperature(basis, beams, o)?;
            Ok(Estimate {
                rate: r.rate,
                rprime: r.rprime,
                temperature: r.temperature,
                status: r.status,
                warning: r.warning,
            })
        }
        TemperatureMethod::Dynamic(o) => {
            let r = dynamic_response(basis, beams, o)?;
            Ok(Estimate {
                rate: r.rate,
                rprime: r.effective_rprime,
                temperature: r.temperature,
                status: r.status,
                warning: None,
            })
        }
    }
}

fn scan_point(
    basis: &ZeemanBasis,
    beams: &[LaserBeam],
    scan: &TemperatureScan,
    value: f64,
) -> Result<(Estimate, Option<f64>), CoolingError> {
    let beams = scan.axis.apply(beams, value)?;
    let Some(re) = &scan.reoptimize else {
        return Ok((estimate(basis, &beams, &scan.method)?, None));
    };
    let idx = beams
        .iter()
        .position(|b| b.name == re.beam)
        .ok_or_else(|| ScanError::UnknownBeam(re.beam.clone()))?;
    let centre = beams[idx].detuning_mhz;
    let mut best: Option<(Estimate, f64)> = None;
    let mut last_err = None;
    for off in &re.offsets_mhz {
        let mut trial = beams.clone();
        trial[idx].detuning_mhz = centre + off;
        match estimate(basis, &trial, &scan.method) {
            Ok(e) => {
                let better = match (&best, e.temperature) {
                    (None, _) => true,
                    (Some((b, _)), Some(t)) => b.temperature.is_none_or(|bt| t < bt),
                    (Some(_), None) => false,
                };
                if better {
                    best = Some((e, centre + off));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((e, det)) => Ok((e, Some(det))),
        None => Err(last_err.unwrap_or(CoolingError::InvalidOptions("empty re-optimization grid".into()))),
    }
}

/// Temperature at every scan value. Points are independent and run in
/// parallel; a failing point is reported in its status, not as an error.
pub fn temperature_scan(
    basis: &ZeemanBasis,
    beams: &[LaserBeam],
    scan: &TemperatureScan,
) -> Result<Vec<TemperaturePoint>, CoolingError> {
    crate::scan::check_monotone(&scan.values)?;
    if let Some(v) = scan.values.first() {
        scan.axis.apply(beams, *v)?;
    }
    Ok(scan
        .values
        .par_iter()
        .map(|&value| match scan_point(basis, beams, scan, value) {
            Ok((e, reoptimized_mhz)) => TemperaturePoint {
                value,
                rate: Some(e.rate),
                rprime: Some(e.rprime),
                temperature: e.temperature,
                status: match e.status {
                    CoolingStatus::Cooling => PointStatus::Cooling,
                    CoolingStatus::Heating => PointStatus::Heating,
                },
                reoptimized_mhz,
                warning: e.warning,
            },
            Err(err) => TemperaturePoint {
                value,
                rate: None,
                rprime: None,
                temperature: None,
                status: match err {
                    CoolingError::Solve(SolveError::Degenerate { .. }) => PointStatus::Degenerate,
                    other => PointStatus::Failed(other.to_string()),
                },
                reoptimized_mhz: None,
                warning: None,
            },
        })
        .collect())
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.9e}"))
}

/// Writes `value,R,Rprime,T_K,status` rows (plus the re-optimized detuning
/// when present). Missing values are empty cells.
pub fn write_temperature_csv<W: Write>(mut out: W, points: &[TemperaturePoint], reoptimized: bool) -> io::Result<()> {
    if reoptimized {
        writeln!(out, "value,R,Rprime,T_K,status,reoptimized_mhz")?;
    } else {
        writeln!(out, "value,R,Rprime,T_K,status")?;
    }
    for p in points {
        write!(
            out,
            "{},{},{},{},{}",
            p.value,
            cell(p.rate),
            cell(p.rprime),
            cell(p.temperature),
            p.status
        )?;
        if reoptimized {
            write!(out, ",{}", p.reoptimized_mhz.map_or_else(String::new, |d| d.to_string()))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::master::Polarization;
    use crate::scan::{linspace, BeamParameter};
    use crate::structure::{build_basis, IonModel};
    use std::f64::consts::PI;
    use std::sync::Arc;

    const A: f64 = 1.32e8;

    fn two_level() -> ZeemanBasis {
        build_basis(Arc::new(IonModel::bundled("two_level").unwrap()), 0.0).unwrap()
    }

    fn beam(s: f64, detuning: f64) -> LaserBeam {
        LaserBeam {
            name: "cool".into(),
            lower: "S1/2".into(),
            upper: "P3/2".into(),
            detuning_mhz: detuning,
            intensity: s / 2.0,
            polarization: Polarization::new(0.0, 0.0, 1.0),
            propagation: 1,
            linewidth_mhz: 0.0,
            ground_f: None,
            source: None,
        }
    }

    /// Doppler temperature of a two-level atom written in terms of the
    /// detuning derivative of the Lorentzian, delta and Gamma in Hz.
    fn lorentzian_temperature(s: f64, detuning_mhz: f64) -> f64 {
        let g = A / (2.0 * PI);
        let d = detuning_mhz * 1e6;
        -PLANCK * (1.0 + s + 4.0 * d * d / (g * g)) * g * g / (8.0 * d * BOLTZMANN)
    }

    #[test]
    fn two_level_matches_lorentzian_temperature() {
        let basis = two_level();
        let opts = CoolingOptions {
            velocity_step: 0.05,
            ..CoolingOptions::default()
        };
        let gamma_mhz = A / (2.0 * PI) * 1e-6;
        for &s in &[0.01, 0.1, 1.0] {
            for ratio in linspace(-3.0, -0.1, 12) {
                let det = ratio * gamma_mhz;
                let r = equilibrium_temperature(&basis, &[beam(s, det)], &opts).unwrap();
                let expected = lorentzian_temperature(s, det);
                let t = r.temperature.unwrap();
                assert!((t / expected - 1.0).abs() < 0.01, "s={s} det={det}: {t} vs {expected}");
                assert!(r.warning.is_none());
            }
        }
    }

    #[test]
    fn blue_detuning_heats() {
        let r = equilibrium_temperature(&two_level(), &[beam(0.1, 8.0)], &CoolingOptions::default()).unwrap();
        assert_eq!(r.status, CoolingStatus::Heating);
        assert!(r.temperature.is_none());
        assert!(r.rprime > 0.0);
    }

    #[test]
    fn coarse_step_warns() {
        let opts = CoolingOptions {
            velocity_step: 6.0,
            ..CoolingOptions::default()
        };
        let r = equilibrium_temperature(&two_level(), &[beam(0.01, -3.0)], &opts).unwrap();
        assert!(r.warning.is_some());
        assert!(matches!(
            equilibrium_temperature(&two_level(), &[beam(0.01, -3.0)], &CoolingOptions {
                velocity_step: 0.0,
                ..CoolingOptions::default()
            }),
            Err(CoolingError::InvalidStep(_))
        ));
    }

    #[test]
    fn temperature_two_ways() {
        // the SI and the MHz form of the same slope must agree to rounding
        let lambda_nm = 396.959;
        for &(rate, rprime) in &[(1.2e7, -3.4e6), (5.5e4, -2.0e2), (9.0e6, -1.0e9)] {
            let si = temperature_from_slope(rate, rprime, lambda_nm);
            let slope_per_mhz = rprime * lambda_nm * 1e-9 * 1e6;
            let mhz = temperature_from_frequency_slope(rate, slope_per_mhz);
            assert!((si / mhz - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn harmonic_response_tends_to_quasi_static() {
        let basis = two_level();
        let beams = [beam(0.5, -12.0)];
        let qs = equilibrium_temperature(&basis, &beams, &CoolingOptions::default()).unwrap();
        for f in [0.0, 1e3] {
            let dynamic = dynamic_response(
                &basis,
                &beams,
                &DynamicOptions {
                    trap_frequency_hz: f,
                    ..DynamicOptions::default()
                },
            )
            .unwrap();
            assert!((dynamic.effective_rprime / qs.rprime - 1.0).abs() < 1e-3, "{f}");
            assert!(dynamic.quadrature_rprime.abs() < 1e-2 * qs.rprime.abs());
        }
    }

    #[test]
    fn slow_oscillation_of_fast_system_is_quasi_static() {
        // 500 kHz is far below the 21 MHz linewidth
        let basis = two_level();
        let beams = [beam(0.5, -12.0)];
        let qs = equilibrium_temperature(&basis, &beams, &CoolingOptions::default()).unwrap();
        let dynamic = dynamic_response(
            &basis,
            &beams,
            &DynamicOptions {
                trap_frequency_hz: 5e5,
                ..DynamicOptions::default()
            },
        )
        .unwrap();
        let (t_qs, t_dyn) = (qs.temperature.unwrap(), dynamic.temperature.unwrap());
        assert!((t_dyn / t_qs - 1.0).abs() < 0.1, "{t_dyn} vs {t_qs}");
        assert!(dynamic.cooling_power > 0.0);
    }

    #[test]
    fn time_domain_agrees_with_harmonic() {
        let basis = two_level();
        let beams = [beam(1.0, -15.0)];
        let base = DynamicOptions {
            trap_frequency_hz: 4e6,
            velocity_amplitude: 0.05,
            cycles: 10,
            transient_cycles: 10,
            ..DynamicOptions::default()
        };
        let harm = dynamic_response(&basis, &beams, &base).unwrap();
        let td = dynamic_response(
            &basis,
            &beams,
            &DynamicOptions {
                method: DynamicMethod::TimeDomain { steps_per_cycle: 200 },
                ..base
            },
        )
        .unwrap();
        let rel = (td.effective_rprime / harm.effective_rprime - 1.0).abs();
        assert!(rel < 0.02, "R' {} vs {}", td.effective_rprime, harm.effective_rprime);
        let relp = (td.cooling_power / harm.cooling_power - 1.0).abs();
        assert!(relp < 0.02, "P {} vs {}", td.cooling_power, harm.cooling_power);
    }

    #[test]
    fn force_response_matches_rate_response_for_single_beam() {
        // with one beam the upper population is fed only by absorption and
        // drained at A, so absorption = R (1 + i w / A) at every frequency
        let basis = two_level();
        let beams = [beam(0.3, -8.0)];
        let f = 2e6;
        let r = dynamic_response(
            &basis,
            &beams,
            &DynamicOptions {
                trap_frequency_hz: f,
                velocity_amplitude: 0.2,
                ..DynamicOptions::default()
            },
        )
        .unwrap();
        let hk = HBAR * 2.0 * PI / (396.959e-9);
        let w = 2.0 * PI * f / A;
        let absorbed = r.effective_rprime - w * r.quadrature_rprime;
        let expected = -0.5 * 0.2 * 0.2 * hk * absorbed;
        assert!((r.cooling_power / expected - 1.0).abs() < 1e-6);
    }

    #[test]
    fn scan_reports_each_point() {
        let basis = two_level();
        let beams = vec![beam(0.01, -10.0)];
        let scan = TemperatureScan {
            axis: ScanAxis::new("cool", BeamParameter::Detuning),
            values: linspace(-30.0, 10.0, 9),
            method: TemperatureMethod::QuasiStatic(CoolingOptions::default()),
            reoptimize: None,
        };
        let pts = temperature_scan(&basis, &beams, &scan).unwrap();
        assert_eq!(pts.len(), 9);
        for p in &pts {
            if p.value < 0.0 {
                assert_eq!(p.status, PointStatus::Cooling);
            } else {
                assert_ne!(p.status, PointStatus::Cooling);
            }
        }
        let mut buf = Vec::new();
        write_temperature_csv(&mut buf, &pts, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("value,R,Rprime,T_K,status\n"));
        assert_eq!(text.lines().count(), 10);

        let zero = TemperatureScan {
            axis: ScanAxis::new("cool", BeamParameter::Intensity),
            values: vec![0.0, 0.1],
            ..scan
        };
        let pts = temperature_scan(&basis, &beams, &zero).unwrap();
        assert_eq!(pts[0].status, PointStatus::Degenerate);
        assert_eq!(pts[1].status, PointStatus::Cooling);
    }

    #[test]
    fn reoptimization_picks_coldest_detuning() {
        let basis = two_level();
        let beams = vec![beam(0.01, -10.0)];
        let scan = TemperatureScan {
            axis: ScanAxis::new("cool", BeamParameter::Intensity),
            values: vec![0.005],
            method: TemperatureMethod::QuasiStatic(CoolingOptions::default()),
            reoptimize: Some(Reoptimize {
                beam: "cool".into(),
                offsets_mhz: linspace(-6.0, 6.0, 7),
            }),
        };
        let p = &temperature_scan(&basis, &beams, &scan).unwrap()[0];
        assert_eq!(p.reoptimized_mhz, Some(-10.0));
    }
}
