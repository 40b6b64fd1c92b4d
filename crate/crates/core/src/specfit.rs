//! Stationary-ion fluorescence spectra, dark-resonance detection and
//! weighted least-squares calibration of beam parameters against scans.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::config::{ConfigError, Source};
use crate::lsq::{self, Bounds, LmError, LmOptions};
use crate::master::{build_liouvillian, LaserBeam};
use crate::scan::{check_monotone, BeamParameter, ScanAxis, ScanError};
use crate::solve::{steady_state, SolveError};
use crate::structure::ZeemanBasis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error("no beams: the detected transition is undefined")]
    NoBeams,
    #[error("detection efficiency must lie in [0, 1], got {0}")]
    Efficiency(f64),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointFlag {
    Ok,
    /// The steady state was not unique; the point is reported as dark.
    Degenerate,
    Failed(String),
}

/// A stationary-ion spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub axis: ScanAxis,
    pub values: Vec<f64>,
    /// Total population of the upper level of the first beam.
    pub population: Vec<f64>,
    /// Detected photons per second on the first beam's channel.
    pub detector_rate: Vec<f64>,
    pub flags: Vec<PointFlag>,
}

/// Upper level index and decay rate (s^-1) of the channel driven by the
/// first beam, which is the detected fluorescence.
fn detected_channel(basis: &ZeemanBasis, beams: &[LaserBeam]) -> Result<(usize, f64), SpecError> {
    let b = beams.first().ok_or(SpecError::NoBeams)?;
    let ion = &basis.ion;
    let unknown = |l: &str| SpecError::Invalid(format!("unknown level {l:?}"));
    let u = ion.level_index(&b.upper).ok_or_else(|| unknown(&b.upper))?;
    let l = ion.level_index(&b.lower).ok_or_else(|| unknown(&b.lower))?;
    let ch = ion
        .channel(u, l)
        .ok_or_else(|| SpecError::Invalid(format!("no channel {} -> {}", b.upper, b.lower)))?;
    Ok((u, ch.einstein_a))
}

/// Upper-level population of the steady state, with its flag.
pub fn stationary_population(basis: &ZeemanBasis, beams: &[LaserBeam], upper: usize) -> (f64, PointFlag) {
    let l = match build_liouvillian(basis, beams, 0.0) {
        Ok(l) => l,
        Err(e) => return (f64::NAN, PointFlag::Failed(e.to_string())),
    };
    match steady_state(&l) {
        Ok(rho) => (rho.level_population(basis, upper).clamp(0.0, 1.0), PointFlag::Ok),
        Err(SolveError::Degenerate { .. }) => (0.0, PointFlag::Degenerate),
        Err(e) => (f64::NAN, PointFlag::Failed(e.to_string())),
    }
}

/// Steady-state P population along a scan axis, points in parallel.
pub fn spectrum(
    basis: &ZeemanBasis,
    beams: &[LaserBeam],
    axis: &ScanAxis,
    values: &[f64],
    efficiency: f64,
) -> Result<ScanResult, SpecError> {
    if !(0.0..=1.0).contains(&efficiency) {
        return Err(SpecError::Efficiency(efficiency));
    }
    check_monotone(values)?;
    let (upper, a) = detected_channel(basis, beams)?;
    if let Some(v) = values.first() {
        axis.apply(beams, *v)?;
    }
    let points: Vec<(f64, PointFlag)> = values
        .par_iter()
        .map(|&v| match axis.apply(beams, v) {
            Ok(b) => stationary_population(basis, &b, upper),
            Err(e) => (f64::NAN, PointFlag::Failed(e.to_string())),
        })
        .collect();
    let (population, flags): (Vec<f64>, Vec<PointFlag>) = points.into_iter().unzip();
    let detector_rate = population.iter().map(|p| efficiency * a * p).collect();
    Ok(ScanResult {
        axis: axis.clone(),
        values: values.to_vec(),
        population,
        detector_rate,
        flags,
    })
}

impl ScanResult {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "value,P,detector_rate,status")?;
        for i in 0..self.values.len() {
            let status = match &self.flags[i] {
                PointFlag::Ok => "ok",
                PointFlag::Degenerate => "degenerate",
                PointFlag::Failed(_) => "error",
            };
            writeln!(
                out,
                "{},{:.9e},{:.9e},{}",
                self.values[i], self.population[i], self.detector_rate[i], status
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarkResonance {
    /// Interpolated position along the scan axis.
    pub position: f64,
    /// Interpolated population at the minimum.
    pub population: f64,
    /// Fractional depth relative to the lower of the two flanking maxima.
    pub depth: f64,
}

/// Vertex of the parabola through three points.
fn parabola_vertex(x: [f64; 3], y: [f64; 3]) -> Option<(f64, f64)> {
    let d1 = (y[1] - y[0]) / (x[1] - x[0]);
    let d2 = (y[2] - y[1]) / (x[2] - x[1]);
    let a = (d2 - d1) / (x[2] - x[0]);
    if !(a > 0.0) {
        return None;
    }
    let b = d1 - a * (x[0] + x[1]);
    let xv = -b / (2.0 * a);
    let yv = y[1] + (xv - x[1]) * (d1 + a * (xv - x[0]));
    Some((xv, yv))
}

/// Interior local minima whose depth is at least `depth_threshold`.
pub fn find_dark_resonances(scan: &ScanResult, depth_threshold: f64) -> Vec<DarkResonance> {
    let x = &scan.values;
    let p = &scan.population;
    let n = p.len();
    let mut out = Vec::new();
    if n < 3 || p.iter().any(|v| !v.is_finite()) {
        return out;
    }
    for i in 1..n - 1 {
        if !(p[i] < p[i - 1] && p[i] <= p[i + 1]) {
            continue;
        }
        // climb to the flanking maxima
        let mut l = i - 1;
        while l > 0 && p[l - 1] >= p[l] {
            l -= 1;
        }
        let mut r = i + 1;
        while r + 1 < n && p[r + 1] >= p[r] {
            r += 1;
        }
        let reference = p[l].min(p[r]);
        if reference <= 0.0 {
            continue;
        }
        let (position, population) =
            parabola_vertex([x[i - 1], x[i], x[i + 1]], [p[i - 1], p[i], p[i + 1]]).unwrap_or((x[i], p[i]));
        let population = population.max(0.0);
        let depth = (reference - population) / reference;
        if depth >= depth_threshold {
            out.push(DarkResonance {
                position,
                population,
                depth,
            });
        }
    }
    out
}

/// Golden-section search for the population minimum inside `bracket`.
pub fn refine_dark_resonance(
    basis: &ZeemanBasis,
    beams: &[LaserBeam],
    axis: &ScanAxis,
    bracket: Range<f64>,
    tolerance: f64,
) -> Result<DarkResonance, SpecError> {
    let (upper, _) = detected_channel(basis, beams)?;
    let eval = |v: f64| -> Result<f64, SpecError> {
        let b = axis.apply(beams, v)?;
        Ok(stationary_population(basis, &b, upper).0)
    };
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (bracket.start, bracket.end);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (eval(c)?, eval(d)?);
    while (b - a).abs() > tolerance {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = eval(d)?;
        }
    }
    let position = 0.5 * (a + b);
    let population = eval(position)?;
    let edge = eval(bracket.start)?.min(eval(bracket.end)?);
    Ok(DarkResonance {
        position,
        population,
        depth: if edge > 0.0 { (edge - population) / edge } else { 0.0 },
    })
}

/// Experimental scan: abscissa, signal and optional standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanData {
    pub x: Vec<f64>,
    pub signal: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
}

impl ScanData {
    /// Parses `abscissa, signal[, sigma]` rows; `#` starts a comment and a
    /// leading non-numeric row is taken as a header.
    pub fn from_csv_str(text: &str, origin: &str) -> Result<ScanData, ConfigError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let (mut x, mut signal, mut sigma) = (Vec::new(), Vec::new(), Vec::new());
        let mut columns = None;
        for (k, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| {
                ConfigError::new(origin, e.position().map(|p| p.line() as usize), e.to_string())
            })?;
            let line = rec.position().map(|p| p.line() as usize);
            if rec.iter().all(str::is_empty) {
                continue;
            }
            let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let Ok(values) = parsed else {
                if k == 0 {
                    continue;
                }
                return Err(ConfigError::new(origin, line, "expected numeric columns"));
            };
            if !(2..=3).contains(&values.len()) {
                return Err(ConfigError::new(origin, line, "expected 2 or 3 columns"));
            }
            if *columns.get_or_insert(values.len()) != values.len() {
                return Err(ConfigError::new(origin, line, "inconsistent column count"));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ConfigError::new(origin, line, "non-finite value"));
            }
            if values.len() == 3 && values[2] <= 0.0 {
                return Err(ConfigError::new(origin, line, "sigma must be positive"));
            }
            x.push(values[0]);
            signal.push(values[1]);
            if values.len() == 3 {
                sigma.push(values[2]);
            }
        }
        Ok(ScanData {
            x,
            signal,
            sigma: (columns == Some(3)).then_some(sigma),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# abscissa, signal");
        s.push_str(if self.sigma.is_some() { ", sigma\n" } else { "\n" });
        for i in 0..self.x.len() {
            match &self.sigma {
                Some(sig) => writeln!(s, "{},{:.12e},{:.12e}", self.x[i], self.signal[i], sig[i]),
                None => writeln!(s, "{},{:.12e}", self.x[i], self.signal[i]),
            }
            .expect("writing to a string");
        }
        s
    }
}

/// What a free parameter controls.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitParameter {
    /// Intensity of the first listed beam; the others keep their ratio to it.
    Intensity { beams: Vec<String> },
    /// Common detuning offset of the listed beams, so their separations are fixed.
    DetuningOffset { beams: Vec<String> },
    /// Common linewidth of the listed beams.
    Linewidth { beams: Vec<String> },
    /// Signal per unit population.
    Scale,
    /// Flat signal offset.
    Background,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FreeParameter {
    pub name: String,
    #[serde(flatten)]
    pub parameter: FitParameter,
    pub initial: f64,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// sigma from the data file, else unit weights.
    #[default]
    Auto,
    Uniform,
    /// sigma = sqrt(counts).
    Poisson,
}

/// Forward model `signal = scale * P(x) + background` with free parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitModel {
    pub axis: ScanAxis,
    pub free: Vec<FreeParameter>,
    /// Fixed values used when scale/background are not free.
    pub scale: f64,
    pub background: f64,
    /// Excluded abscissa intervals (inclusive).
    pub masks: Vec<(f64, f64)>,
    pub weighting: Weighting,
    /// MHz per abscissa unit; detuning offsets and linewidths use the same unit.
    pub frequency_unit_mhz: f64,
}

impl FitModel {
    pub fn new(axis: ScanAxis, free: Vec<FreeParameter>) -> Self {
        FitModel {
            axis,
            free,
            scale: 1.0,
            background: 0.0,
            masks: Vec::new(),
            weighting: Weighting::Auto,
            frequency_unit_mhz: 1.0,
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.free.iter().map(|f| f.name.clone()).collect()
    }

    pub fn initial(&self) -> Vec<f64> {
        self.free.iter().map(|f| f.initial).collect()
    }

    fn axis_unit(&self) -> f64 {
        match self.axis.parameter {
            BeamParameter::Detuning => self.frequency_unit_mhz,
            BeamParameter::Intensity => 1.0,
        }
    }

    fn check(&self, beams: &[LaserBeam]) -> Result<(), FitError> {
        let known = |n: &String| beams.iter().any(|b| &b.name == n);
        if !(self.frequency_unit_mhz.is_finite() && self.frequency_unit_mhz > 0.0) {
            return Err(FitError::Config("frequency unit must be positive".into()));
        }
        for f in &self.free {
            let list = match &f.parameter {
                FitParameter::Intensity { beams } | FitParameter::DetuningOffset { beams } | FitParameter::Linewidth { beams } => beams,
                _ => continue,
            };
            if list.is_empty() {
                return Err(FitError::Config(format!("parameter {} names no beams", f.name)));
            }
            if let Some(b) = list.iter().find(|b| !known(b)) {
                return Err(FitError::Config(format!("parameter {} names unknown beam {b:?}", f.name)));
            }
        }
        let mut names = self.names();
        names.sort();
        names.dedup();
        if names.len() != self.free.len() {
            return Err(FitError::Config("free parameter names must be unique".into()));
        }
        Ok(())
    }

    /// Beams at abscissa `x` for the parameter vector `p`.
    pub fn beams_at(&self, beams: &[LaserBeam], p: &[f64], x: f64) -> Result<Vec<LaserBeam>, ScanError> {
        let mut out = self.axis.apply(beams, x * self.axis_unit())?;
        let unit = self.frequency_unit_mhz;
        for (f, &v) in self.free.iter().zip(p) {
            match &f.parameter {
                FitParameter::Intensity { beams: names } => {
                    let base = out.iter().find(|b| b.name == names[0]).map_or(0.0, |b| b.intensity);
                    for b in out.iter_mut().filter(|b| names.contains(&b.name)) {
                        b.intensity = if base > 0.0 { b.intensity * (v / base) } else { v };
                    }
                }
                FitParameter::DetuningOffset { beams: names } => {
                    for b in out.iter_mut().filter(|b| names.contains(&b.name)) {
                        b.detuning_mhz += v * unit;
                    }
                }
                FitParameter::Linewidth { beams: names } => {
                    for b in out.iter_mut().filter(|b| names.contains(&b.name)) {
                        b.linewidth_mhz = v * unit;
                    }
                }
                FitParameter::Scale | FitParameter::Background => {}
            }
        }
        Ok(out)
    }

    fn scale_background(&self, p: &[f64]) -> (f64, f64) {
        let mut s = (self.scale, self.background);
        for (f, &v) in self.free.iter().zip(p) {
            match f.parameter {
                FitParameter::Scale => s.0 = v,
                FitParameter::Background => s.1 = v,
                _ => {}
            }
        }
        s
    }

    /// Model signal at each abscissa value.
    pub fn evaluate(&self, basis: &ZeemanBasis, beams: &[LaserBeam], p: &[f64], xs: &[f64]) -> Result<Vec<f64>, SpecError> {
        let (upper, _) = detected_channel(basis, beams)?;
        let (scale, background) = self.scale_background(p);
        xs.par_iter()
            .map(|&x| {
                let b = self.beams_at(beams, p, x)?;
                let (pop, flag) = stationary_population(basis, &b, upper);
                match flag {
                    PointFlag::Failed(msg) => Err(SpecError::Invalid(msg)),
                    _ => Ok(scale * pop + background),
                }
            })
            .collect()
    }

    pub fn is_masked(&self, x: f64) -> bool {
        self.masks.iter().any(|&(a, b)| x >= a.min(b) && x <= a.max(b))
    }

    fn bounds(&self, data: &ScanData) -> Bounds {
        let unit = self.frequency_unit_mhz;
        let peak = data.signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut typical = Vec::new();
        for f in &self.free {
            let (lo, typ) = match f.parameter {
                FitParameter::Intensity { .. } => (0.0, 1.0),
                FitParameter::DetuningOffset { .. } => (f64::NEG_INFINITY, 1.0 / unit),
                FitParameter::Linewidth { .. } => (0.0, 0.1 / unit),
                FitParameter::Scale => (0.0, 1e-300),
                FitParameter::Background => (f64::NEG_INFINITY, 1e-3 * peak.max(1e-300)),
            };
            lower.push(f.lower.unwrap_or(lo));
            upper.push(f.upper.unwrap_or(f64::INFINITY));
            typical.push(f.initial.abs().max(typ));
        }
        Bounds { lower, upper, typical }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub uncertainties: Vec<f64>,
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub degrees_of_freedom: usize,
    /// (abscissa, data - model) for every unmasked point.
    pub residuals: Vec<(f64, f64)>,
    pub iterations: usize,
    /// Objective after each accepted iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("fit configuration: {0}")]
    Config(String),
    #[error("{points} unmasked points is fewer than 3 x {params} free parameters")]
    TooFewPoints { points: usize, params: usize },
    #[error("model evaluation failed: {0}")]
    Model(String),
    #[error("fit did not converge after {iterations} iterations (chi2 = {chi2:.6e}); last parameters: {}", format_params(.params))]
    NotConverged { params: Vec<(String, f64)>, chi2: f64, iterations: usize },
    #[error("parameters are degenerate: {combination} is unconstrained")]
    Singular { combination: String },
}

fn format_params(params: &[(String, f64)]) -> String {
    params.iter().map(|(n, v)| format!("{n} = {v}")).collect::<Vec<_>>().join(", ")
}

/// Weighted least-squares fit of `model` to `data`.
pub fn fit_scan(
    basis: &ZeemanBasis,
    beams: &[LaserBeam],
    model: &FitModel,
    data: &ScanData,
    options: &LmOptions,
) -> Result<FitResult, FitError> {
    model.check(beams)?;
    if data.x.len() != data.signal.len() || data.sigma.as_ref().is_some_and(|s| s.len() != data.x.len()) {
        return Err(FitError::Config("data columns differ in length".into()));
    }
    check_monotone(&data.x).map_err(|e| FitError::Config(e.to_string()))?;
    if let (Some(lo), Some(hi)) = (
        data.x.iter().copied().reduce(f64::min),
        data.x.iter().copied().reduce(f64::max),
    ) {
        if let Some(m) = model.masks.iter().find(|(a, b)| a.min(*b) < lo || a.max(*b) > hi) {
            return Err(FitError::Config(format!("mask [{}, {}] lies outside the scan [{lo}, {hi}]", m.0, m.1)));
        }
    }
    let keep: Vec<usize> = (0..data.x.len()).filter(|&i| !model.is_masked(data.x[i])).collect();
    let n_free = model.free.len();
    if keep.len() < 3 * n_free || n_free == 0 {
        return Err(FitError::TooFewPoints {
            points: keep.len(),
            params: n_free,
        });
    }
    let xs: Vec<f64> = keep.iter().map(|&i| data.x[i]).collect();
    let ys: Vec<f64> = keep.iter().map(|&i| data.signal[i]).collect();
    let weights: Vec<f64> = keep
        .iter()
        .map(|&i| match (model.weighting, &data.sigma) {
            (Weighting::Poisson, _) => 1.0 / data.signal[i].max(1.0).sqrt(),
            (Weighting::Auto, Some(s)) => 1.0 / s[i],
            _ => 1.0,
        })
        .collect();

    let residuals = |p: &[f64]| -> Result<Vec<f64>, String> {
        let m = model.evaluate(basis, beams, p, &xs).map_err(|e| e.to_string())?;
        Ok(m.iter().zip(&ys).zip(&weights).map(|((m, y), w)| (m - y) * w).collect())
    };
    let bounds = model.bounds(data);
    let names = model.names();
    let report = lsq::minimize(residuals, &model.initial(), &bounds, options).map_err(|e| match e {
        LmError::Model(m) => FitError::Model(m),
        LmError::NotConverged { params, chi2, iterations } => FitError::NotConverged {
            params: names.iter().cloned().zip(params).collect(),
            chi2,
            iterations,
        },
        LmError::Singular { direction, .. } => FitError::Singular {
            combination: describe_combination(&names, &direction),
        },
        LmError::InvalidStart => FitError::Config("initial values violate the bounds".into()),
        LmError::Underdetermined { residuals, params } => FitError::TooFewPoints {
            points: residuals,
            params,
        },
    })?;
    let uncertainties = report.uncertainties();
    let model_values = model
        .evaluate(basis, beams, &report.params, &xs)
        .map_err(|e| FitError::Model(e.to_string()))?;
    Ok(FitResult {
        names,
        reduced_chi2: report.reduced_chi2(),
        values: report.params,
        uncertainties,
        chi2: report.chi2,
        degrees_of_freedom: report.degrees_of_freedom,
        residuals: xs.iter().zip(ys.iter().zip(&model_values)).map(|(x, (y, m))| (*x, y - m)).collect(),
        iterations: report.iterations,
        history: report.history,
    })
}

fn describe_combination(names: &[String], direction: &[f64]) -> String {
    let terms: Vec<String> = names
        .iter()
        .zip(direction)
        .filter(|(_, d)| d.abs() > 0.05)
        .map(|(n, d)| format!("{d:+.3}*{n}"))
        .collect();
    if terms.is_empty() {
        "an unknown combination".into()
    } else {
        terms.join(" ")
    }
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.values[i], self.uncertainties[i]))
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let width = self.names.iter().map(String::len).max().unwrap_or(0);
        writeln!(s, "fit converged after {} iterations", self.iterations).unwrap();
        for ((n, v), e) in self.names.iter().zip(&self.values).zip(&self.uncertainties) {
            writeln!(s, "  {n:<width$}  {v:>14.6} +- {e:.6}").unwrap();
        }
        writeln!(
            s,
            "chi2 = {:.6e} over {} degrees of freedom (reduced {:.4})",
            self.chi2, self.degrees_of_freedom, self.reduced_chi2
        )
        .unwrap();
        s
    }

    /// `key = value` lines, one per quantity.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for ((n, v), e) in self.names.iter().zip(&self.values).zip(&self.uncertainties) {
            writeln!(s, "{n} = {v:.12e}\n{n}_sigma = {e:.12e}").unwrap();
        }
        writeln!(s, "chi2 = {:.12e}", self.chi2).unwrap();
        writeln!(s, "reduced_chi2 = {:.12e}", self.reduced_chi2).unwrap();
        writeln!(s, "degrees_of_freedom = {}", self.degrees_of_freedom).unwrap();
        writeln!(s, "iterations = {}", self.iterations).unwrap();
        s
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitSpec {
    scan_beam: String,
    scan_parameter: BeamParameter,
    #[serde(default)]
    locked: bool,
    #[serde(default = "one")]
    scale: f64,
    #[serde(default)]
    background: f64,
    #[serde(default)]
    mask: Vec<[f64; 2]>,
    #[serde(default)]
    weighting: Weighting,
    #[serde(default = "one")]
    frequency_unit_mhz: f64,
    #[serde(default)]
    free: Vec<FreeParameter>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
struct FitFile {
    fit: toml::Spanned<FitSpec>,
}

impl FitModel {
    /// Reads the `[fit]` table of a scenario or fit file.
    pub fn from_toml_str(text: &str, origin: &str, beams: &[LaserBeam]) -> Result<FitModel, ConfigError> {
        let src = Source::new(origin, text);
        let file: FitFile = src.parse()?;
        let span = file.fit.span();
        let spec = file.fit.into_inner();
        let axis = if spec.locked {
            ScanAxis::locked(beams, &spec.scan_beam, spec.scan_parameter)
        } else if beams.iter().any(|b| b.name == spec.scan_beam) {
            Ok(ScanAxis::new(&spec.scan_beam, spec.scan_parameter))
        } else {
            Err(ScanError::UnknownBeam(spec.scan_beam.clone()))
        }
        .map_err(|e| src.error_at(span.clone(), e.to_string()))?;
        let model = FitModel {
            axis,
            free: spec.free,
            scale: spec.scale,
            background: spec.background,
            masks: spec.mask.iter().map(|m| (m[0], m[1])).collect(),
            weighting: spec.weighting,
            frequency_unit_mhz: spec.frequency_unit_mhz,
        };
        model.check(beams).map_err(|e| src.error_at(span, e.to_string()))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::master::Polarization;
    use crate::scan::linspace;
    use crate::structure::{build_basis, IonModel};
    use std::sync::Arc;

    fn two_level() -> ZeemanBasis {
        build_basis(Arc::new(IonModel::bundled("two_level").unwrap()), 0.0).unwrap()
    }

    fn probe(s: f64) -> LaserBeam {
        LaserBeam {
            name: "probe".into(),
            lower: "S1/2".into(),
            upper: "P3/2".into(),
            detuning_mhz: 0.0,
            intensity: s / 2.0,
            polarization: Polarization::new(0.0, 0.0, 1.0),
            propagation: 1,
            linewidth_mhz: 0.0,
            ground_f: None,
            source: None,
        }
    }

    #[test]
    fn lorentzian_spectrum_and_rates() {
        let basis = two_level();
        let axis = ScanAxis::new("probe", BeamParameter::Detuning);
        let xs = linspace(-60.0, 60.0, 41);
        let scan = spectrum(&basis, &[probe(1.0)], &axis, &xs, 0.01).unwrap();
        let g = 1.32e8 / (2.0 * std::f64::consts::PI) * 1e-6;
        for (i, &x) in xs.iter().enumerate() {
            let expected = 0.5 / (2.0 + (2.0 * x / g).powi(2));
            assert!((scan.population[i] - expected).abs() < 1e-10);
            assert!((scan.detector_rate[i] - 0.01 * 1.32e8 * expected).abs() < 1e-3);
            assert!((0.0..=0.5).contains(&scan.population[i]));
        }
        // a single Lorentzian has no interior minimum
        assert!(find_dark_resonances(&scan, 0.01).is_empty());
        let zero = spectrum(&basis, &[probe(1.0)], &axis, &xs, 0.0).unwrap();
        assert!(zero.detector_rate.iter().all(|r| *r == 0.0));
        assert!(spectrum(&basis, &[probe(1.0)], &axis, &[], 0.1).unwrap().values.is_empty());
        assert!(spectrum(&basis, &[probe(1.0)], &axis, &[1.0, 0.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn interpolated_minimum() {
        let xs = linspace(-5.0, 5.0, 51);
        let scan = ScanResult {
            axis: ScanAxis::new("probe", BeamParameter::Detuning),
            population: xs.iter().map(|&x| 0.5 - 0.45 * (-(x - 0.3f64).powi(2) / 0.5).exp()).collect(),
            detector_rate: vec![0.0; xs.len()],
            flags: vec![PointFlag::Ok; xs.len()],
            values: xs,
        };
        let found = find_dark_resonances(&scan, 0.5);
        assert_eq!(found.len(), 1);
        assert!((found[0].position - 0.3).abs() < 0.05, "{:?}", found[0]);
        assert!(find_dark_resonances(&scan, 0.95).is_empty());
    }

    #[test]
    fn csv_parsing() {
        let text = "# detuning_mhz, signal, sigma\ndetuning,signal,sigma\n-1.0, 2.0, 0.1\n0.5,3,0.2\n";
        let d = ScanData::from_csv_str(text, "scan.csv").unwrap();
        assert_eq!(d.x, vec![-1.0, 0.5]);
        assert_eq!(d.sigma, Some(vec![0.1, 0.2]));
        let back = ScanData::from_csv_str(&d.to_csv(), "again").unwrap();
        assert_eq!(back, d);
        let err = ScanData::from_csv_str("1,2\n3,x\n", "bad.csv").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(ScanData::from_csv_str("1,2,0\n", "bad.csv").is_err());
        assert!(ScanData::from_csv_str("1,2\n1,2,3\n", "bad.csv").is_err());
    }

    fn synthetic(model: &FitModel, basis: &ZeemanBasis, beams: &[LaserBeam], truth: &[f64], xs: &[f64]) -> ScanData {
        ScanData {
            x: xs.to_vec(),
            signal: model.evaluate(basis, beams, truth, xs).unwrap(),
            sigma: None,
        }
    }

    fn two_level_model() -> FitModel {
        let mut m = FitModel::new(
            ScanAxis::new("probe", BeamParameter::Detuning),
            vec![
                FreeParameter {
                    name: "intensity".into(),
                    parameter: FitParameter::Intensity { beams: vec!["probe".into()] },
                    initial: 0.8,
                    lower: None,
                    upper: None,
                },
                FreeParameter {
                    name: "offset".into(),
                    parameter: FitParameter::DetuningOffset { beams: vec!["probe".into()] },
                    initial: 1.0,
                    lower: None,
                    upper: None,
                },
                FreeParameter {
                    name: "scale".into(),
                    parameter: FitParameter::Scale,
                    initial: 900.0,
                    lower: None,
                    upper: None,
                },
                FreeParameter {
                    name: "background".into(),
                    parameter: FitParameter::Background,
                    initial: 5.0,
                    lower: None,
                    upper: None,
                },
            ],
        );
        m.scale = 1000.0;
        m
    }

    #[test]
    fn noise_free_recovery_and_monotone_objective() {
        let basis = two_level();
        let beams = [probe(1.0)];
        let model = two_level_model();
        let truth = [1.3, -2.5, 1000.0, 12.0];
        let xs = linspace(-80.0, 80.0, 41);
        let data = synthetic(&model, &basis, &beams, &truth, &xs);
        let fit = fit_scan(&basis, &beams, &model, &data, &LmOptions::default()).unwrap();
        for (v, t) in fit.values.iter().zip(&truth) {
            assert!((v - t).abs() <= 1e-6 * t.abs(), "{v} vs {t}");
        }
        assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.chi2 < 1e-12);
        assert!(fit.report().contains("offset"));
        assert!(fit.key_values().contains("offset_sigma = "));
    }

    #[test]
    fn abscissa_units_do_not_change_the_physics() {
        let basis = two_level();
        let beams = [probe(1.0)];
        let model = two_level_model();
        let truth = [1.3, -2.5, 1000.0, 12.0];
        let xs = linspace(-80.0, 80.0, 41);
        let mut data = synthetic(&model, &basis, &beams, &truth, &xs);
        // deterministic wiggle so the optimum is not exact
        for (i, y) in data.signal.iter_mut().enumerate() {
            *y += 3.0 * ((i * 7 % 5) as f64 - 2.0);
        }
        let mhz = fit_scan(&basis, &beams, &model, &data, &LmOptions::default()).unwrap();

        let mut ghz_model = model.clone();
        ghz_model.frequency_unit_mhz = 1000.0;
        ghz_model.free[1].initial /= 1000.0;
        let ghz_data = ScanData {
            x: data.x.iter().map(|x| x / 1000.0).collect(),
            ..data
        };
        let ghz = fit_scan(&basis, &beams, &ghz_model, &ghz_data, &LmOptions::default()).unwrap();
        let convert = [1.0, 1000.0, 1.0, 1.0];
        for k in 0..4 {
            let a = ghz.values[k] * convert[k];
            assert!((a - mhz.values[k]).abs() <= 1e-6 * mhz.values[k].abs().max(1.0), "{k}: {a} vs {}", mhz.values[k]);
            let e = ghz.uncertainties[k] * convert[k];
            assert!((e / mhz.uncertainties[k] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn degenerate_parameters_are_named() {
        // two offsets on the same beam only constrain their sum
        let basis = two_level();
        let beams = [probe(1.0)];
        let mut model = two_level_model();
        model.free[3] = FreeParameter {
            name: "offset2".into(),
            parameter: FitParameter::DetuningOffset { beams: vec!["probe".into()] },
            initial: 0.5,
            lower: None,
            upper: None,
        };
        let xs = linspace(-80.0, 80.0, 41);
        let data = synthetic(&model, &basis, &beams, &[1.3, -2.5, 1000.0, 0.0], &xs);
        match fit_scan(&basis, &beams, &model, &data, &LmOptions::default()) {
            Err(FitError::Singular { combination }) => {
                assert!(combination.contains("offset") && combination.contains("offset2"), "{combination}");
                assert!(!combination.contains("scale"), "{combination}");
            }
            other => panic!("expected a singular fit, got {other:?}"),
        }
    }

    #[test]
    fn preconditions() {
        let basis = two_level();
        let beams = [probe(1.0)];
        let model = two_level_model();
        let data = synthetic(&model, &basis, &beams, &[1.0, 0.0, 1000.0, 0.0], &linspace(-10.0, 10.0, 11));
        assert!(matches!(
            fit_scan(&basis, &beams, &model, &data, &LmOptions::default()),
            Err(FitError::TooFewPoints { .. })
        ));
        let mut masked = model.clone();
        masked.masks = vec![(5.0, 50.0)];
        assert!(matches!(
            fit_scan(&basis, &beams, &masked, &data, &LmOptions::default()),
            Err(FitError::Config(_))
        ));
        let mut unknown = model;
        unknown.free[0].parameter = FitParameter::Intensity { beams: vec!["nope".into()] };
        assert!(matches!(
            fit_scan(&basis, &beams, &unknown, &data, &LmOptions::default()),
            Err(FitError::Config(_))
        ));
    }

    #[test]
    fn fit_config_parses() {
        let text = r#"
[fit]
scan_beam = "probe"
scan_parameter = "detuning"
scale = 2.0
mask = [[10.0, 20.0]]

[[fit.free]]
name = "I"
kind = "intensity"
beams = ["probe"]
initial = 0.5
lower = 0.0

[[fit.free]]
name = "bg"
kind = "background"
initial = 0.0
"#;
        let m = FitModel::from_toml_str(text, "fit.toml", &[probe(1.0)]).unwrap();
        assert_eq!(m.names(), vec!["I", "bg"]);
        assert_eq!(m.masks, vec![(10.0, 20.0)]);
        assert!(m.is_masked(15.0) && !m.is_masked(25.0));
        let bad = text.replace("beams = [\"probe\"]", "beams = [\"L9\"]");
        let err = FitModel::from_toml_str(&bad, "fit.toml", &[probe(1.0)]).unwrap_err();
        assert_eq!(err.line, Some(2));
    }
}
