//! Raman sideband thermometry: mean phonon number from red/blue sideband
//! asymmetry and from thermal Rabi line-shape fits.

use std::f64::consts::PI;
use std::fmt::Write as _;

use thiserror::Error;

use crate::config::ConfigError;
use crate::lsq::{self, Bounds, LmError, LmOptions};

/// Carrier Rabi frequency of the reference Raman setup, kHz.
pub const REFERENCE_CARRIER_RABI_KHZ: f64 = 171.0;

/// Thermal weight below which the occupation sum is cut off.
const TRUNCATION: f64 = 1e-6;
const N_MAX: usize = 5000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThermometryError {
    #[error("red/blue ratio {ratio:.4} >= 1: saturated or non-thermal, no occupation defined")]
    NotThermal { ratio: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("thermal distribution with nbar = {nbar} needs more than {n_max} levels")]
    Truncation { nbar: f64, n_max: usize },
    #[error("a joint fit needs one red and one blue scan of the same mode, order and probe time: {0}")]
    Scans(String),
    #[error("fit did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("fit parameters are degenerate: {0}")]
    Singular(String),
}

/// One sideband scan. `order` is negative for red sidebands.
#[derive(Debug, Clone, PartialEq)]
pub struct SidebandScan {
    pub detuning_khz: Vec<f64>,
    pub p_flip: Vec<f64>,
    pub shots: Vec<u32>,
    pub probe_time_us: f64,
    pub order: i8,
    pub mode: String,
    pub mode_frequency_khz: f64,
}

impl SidebandScan {
    pub fn validate(&self) -> Result<(), ThermometryError> {
        let bad = |m: &str| Err(ThermometryError::Invalid(m.to_string()));
        if ![-2, -1, 1, 2].contains(&self.order) {
            return bad("sideband order must be +-1 or +-2");
        }
        if !(self.probe_time_us.is_finite() && self.probe_time_us > 0.0) {
            return bad("probe time must be positive");
        }
        if !(self.mode_frequency_khz.is_finite() && self.mode_frequency_khz > 0.0) {
            return bad("mode frequency must be positive");
        }
        if self.detuning_khz.len() != self.p_flip.len() || self.shots.len() != self.p_flip.len() {
            return bad("columns differ in length");
        }
        if self.p_flip.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.shots.contains(&0) {
            return bad("shots must be at least 1");
        }
        if self.detuning_khz.iter().any(|d| !d.is_finite()) {
            return bad("detunings must be finite");
        }
        Ok(())
    }

    pub fn is_red(&self) -> bool {
        self.order < 0
    }

    /// Reads `detuning_khz, p_flip, shots` rows; `#` starts a comment.
    pub fn from_csv_str(
        text: &str,
        origin: &str,
        order: i8,
        probe_time_us: f64,
        mode: &str,
        mode_frequency_khz: f64,
    ) -> Result<SidebandScan, ConfigError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut scan = SidebandScan {
            detuning_khz: Vec::new(),
            p_flip: Vec::new(),
            shots: Vec::new(),
            probe_time_us,
            order,
            mode: mode.to_string(),
            mode_frequency_khz,
        };
        for (k, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| ConfigError::new(origin, e.position().map(|p| p.line() as usize), e.to_string()))?;
            let line = rec.position().map(|p| p.line() as usize);
            if rec.len() != 3 {
                return Err(ConfigError::new(origin, line, "expected detuning_khz, p_flip, shots"));
            }
            let (d, p, n) = (rec[0].parse::<f64>(), rec[1].parse::<f64>(), rec[2].parse::<u32>());
            match (d, p, n) {
                (Ok(d), Ok(p), Ok(n)) => {
                    scan.detuning_khz.push(d);
                    scan.p_flip.push(p);
                    scan.shots.push(n);
                }
                _ if k == 0 => continue,
                _ => return Err(ConfigError::new(origin, line, "expected detuning_khz, p_flip, shots")),
            }
        }
        scan.validate().map_err(|e| ConfigError::new(origin, None, e.to_string()))?;
        Ok(scan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ratio,
    Lineshape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermometryResult {
    pub nbar: f64,
    pub nbar_sigma: f64,
    /// Lamb-Dicke parameter and its uncertainty, when fitted.
    pub eta: Option<(f64, f64)>,
    /// Carrier Rabi frequency (kHz) and uncertainty, when fitted.
    pub rabi_khz: Option<(f64, f64)>,
    /// Offset of the sideband centres from their nominal positions, kHz.
    pub centre_khz: Option<(f64, f64)>,
    pub method: Method,
    pub warnings: Vec<String>,
}

impl ThermometryResult {
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let method = match self.method {
            Method::Ratio => "ratio",
            Method::Lineshape => "lineshape",
        };
        writeln!(s, "method = \"{method}\"").unwrap();
        writeln!(s, "nbar = {:.9e}\nnbar_sigma = {:.9e}", self.nbar, self.nbar_sigma).unwrap();
        for (key, v) in [("eta", self.eta), ("rabi_khz", self.rabi_khz), ("centre_khz", self.centre_khz)] {
            if let Some((v, e)) = v {
                writeln!(s, "{key} = {v:.9e}\n{key}_sigma = {e:.9e}").unwrap();
            }
        }
        for w in &self.warnings {
            writeln!(s, "# warning: {w}").unwrap();
        }
        s
    }
}

/// Binomial standard error of an estimated probability, never below one
/// count's worth of resolution.
fn binomial_sigma(p: f64, shots: u32) -> f64 {
    let n = f64::from(shots);
    (p * (1.0 - p) / n).sqrt().max(1.0 / n)
}

/// n = r / (1 - r) from red and blue sideband peak heights.
pub fn nbar_ratio(red: f64, blue: f64, red_shots: u32, blue_shots: u32) -> Result<ThermometryResult, ThermometryError> {
    if !(0.0..=1.0).contains(&red) || !(0.0..=1.0).contains(&blue) {
        return Err(ThermometryError::Invalid("peak heights must lie in [0, 1]".into()));
    }
    if red_shots == 0 || blue_shots == 0 {
        return Err(ThermometryError::Invalid("shots must be at least 1".into()));
    }
    if blue == 0.0 {
        return Err(ThermometryError::NotThermal { ratio: f64::INFINITY });
    }
    let r = red / blue;
    if r >= 1.0 {
        return Err(ThermometryError::NotThermal { ratio: r });
    }
    let nbar = r / (1.0 - r);
    let (sr, sb) = (binomial_sigma(red, red_shots), binomial_sigma(blue, blue_shots));
    let sigma_r = ((sr / blue).powi(2) + (r * sb / blue).powi(2)).sqrt();
    Ok(ThermometryResult {
        nbar,
        nbar_sigma: sigma_r / (1.0 - r).powi(2),
        eta: None,
        rabi_khz: None,
        centre_khz: None,
        method: Method::Ratio,
        warnings: Vec::new(),
    })
}

/// Ratio method on the maxima of a red and a blue scan.
pub fn nbar_from_peaks(red: &SidebandScan, blue: &SidebandScan) -> Result<ThermometryResult, ThermometryError> {
    red.validate()?;
    blue.validate()?;
    if !red.is_red() || blue.is_red() {
        return Err(ThermometryError::Scans("first scan must be red, second blue".into()));
    }
    let peak = |s: &SidebandScan| {
        s.p_flip
            .iter()
            .zip(&s.shots)
            .fold(None, |best: Option<(f64, u32)>, (&p, &n)| match best {
                Some((bp, _)) if bp >= p => best,
                _ => Some((p, n)),
            })
            .ok_or_else(|| ThermometryError::Invalid("empty scan".into()))
    };
    let (r, rn) = peak(red)?;
    let (b, bn) = peak(blue)?;
    nbar_ratio(r, b, rn, bn)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineshapeParams {
    pub nbar: f64,
    pub eta: f64,
    /// Carrier Rabi frequency, kHz (Omega / 2 pi).
    pub rabi_khz: f64,
    /// Exponential damping rate of the Rabi oscillation, 1/us.
    pub decoherence_per_us: f64,
    /// Shift of the sideband centre from order x mode frequency, kHz.
    pub centre_khz: f64,
}

/// Thermal occupation probabilities up to cumulative weight 1 - 1e-6.
pub fn thermal_distribution(nbar: f64) -> Result<Vec<f64>, ThermometryError> {
    if !(nbar.is_finite() && nbar >= 0.0) {
        return Err(ThermometryError::Invalid(format!("nbar = {nbar}")));
    }
    if nbar == 0.0 {
        return Ok(vec![1.0]);
    }
    let q = nbar / (nbar + 1.0);
    let mut p = 1.0 / (nbar + 1.0);
    let mut out = Vec::new();
    let mut total = 0.0;
    while total < 1.0 - TRUNCATION {
        if out.len() >= N_MAX {
            return Err(ThermometryError::Truncation { nbar, n_max: N_MAX });
        }
        out.push(p);
        total += p;
        p *= q;
    }
    Ok(out)
}

/// Sideband Rabi frequency from |n> for order s (|s| <= 2), in units of the
/// carrier Rabi frequency.
fn sideband_coupling(n: usize, order: i8, eta: f64) -> f64 {
    let n = n as f64;
    match order {
        1 => eta * (n + 1.0).sqrt(),
        -1 => eta * n.sqrt(),
        2 => 0.5 * eta * eta * ((n + 1.0) * (n + 2.0)).sqrt(),
        -2 if n >= 2.0 => 0.5 * eta * eta * (n * (n - 1.0)).sqrt(),
        _ => 0.0,
    }
}

/// Warning text when the Lamb-Dicke expansion is doubtful.
pub fn lamb_dicke_warning(eta: f64, nbar: f64) -> Option<String> {
    let x = eta * eta * (2.0 * nbar + 1.0);
    (x > 0.3).then(|| format!("eta^2 (2 nbar + 1) = {x:.2} is outside the Lamb-Dicke regime"))
}

/// Spin-flip probability at each detuning of `scan` (the measured values
/// are ignored).
pub fn sideband_lineshape(scan: &SidebandScan, params: &LineshapeParams) -> Result<Vec<f64>, ThermometryError> {
    scan.validate()?;
    let LineshapeParams {
        nbar,
        eta,
        rabi_khz,
        decoherence_per_us,
        centre_khz,
    } = *params;
    if !(eta.is_finite() && eta >= 0.0 && rabi_khz.is_finite() && rabi_khz >= 0.0) {
        return Err(ThermometryError::Invalid("eta and Rabi frequency must be non-negative".into()));
    }
    if !(decoherence_per_us.is_finite() && decoherence_per_us >= 0.0) {
        return Err(ThermometryError::Invalid("decoherence rate must be non-negative".into()));
    }
    if let Some(w) = lamb_dicke_warning(eta, nbar) {
        log::warn!("{w}");
    }
    let pn = thermal_distribution(nbar)?;
    let t = scan.probe_time_us;
    let omega = 2.0 * PI * rabi_khz * 1e-3;
    let damping = (-decoherence_per_us * t).exp();
    let centre = f64::from(scan.order) * scan.mode_frequency_khz + centre_khz;
    let couplings: Vec<f64> = (0..pn.len()).map(|n| omega * sideband_coupling(n, scan.order, eta)).collect();
    Ok(scan
        .detuning_khz
        .iter()
        .map(|&d| {
            let delta = 2.0 * PI * (d - centre) * 1e-3;
            let p: f64 = pn
                .iter()
                .zip(&couplings)
                .filter(|(_, &w)| w > 0.0)
                .map(|(p, &w)| {
                    let w2 = w * w + delta * delta;
                    p * (w * w / w2) * 0.5 * (1.0 - damping * (w2.sqrt() * t).cos())
                })
                .sum();
            p.clamp(0.0, 1.0)
        })
        .collect())
}

/// u - ln(1 + u), accurate near zero.
fn log_excess(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        u * u * (0.5 - u / 3.0 + u * u / 4.0 - u * u * u / 5.0)
    } else {
        u - u.ln_1p()
    }
}

/// Per-shot binomial deviance of model probability `m` against observed
/// fraction `y`, written as a sum of non-negative terms.
fn binomial_deviance(y: f64, m: f64) -> f64 {
    let d = m - y;
    let lower = if y > 0.0 { y * log_excess(d / y) } else { m };
    let upper = if y < 1.0 { (1.0 - y) * log_excess(-d / (1.0 - y)) } else { 1.0 - m };
    lower + upper
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RabiMode {
    Fixed(f64),
    /// Floats the carrier Rabi frequency. Within first-order sidebands it
    /// only enters as the product with eta, so fix eta or expect a
    /// degenerate-fit error.
    Float { initial_khz: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidebandFitOptions {
    pub rabi: RabiMode,
    pub initial_nbar: f64,
    pub initial_eta: f64,
    pub decoherence_per_us: f64,
    pub lm: LmOptions,
}

impl Default for SidebandFitOptions {
    fn default() -> Self {
        SidebandFitOptions {
            rabi: RabiMode::Fixed(REFERENCE_CARRIER_RABI_KHZ),
            initial_nbar: 0.5,
            initial_eta: 0.1,
            decoherence_per_us: 0.0,
            lm: LmOptions::default(),
        }
    }
}

/// Joint least-squares fit of a red and a blue scan for nbar, eta, the
/// common centre offset and optionally the Rabi frequency.
pub fn fit_sidebands(scans: &[SidebandScan], options: &SidebandFitOptions) -> Result<ThermometryResult, ThermometryError> {
    for s in scans {
        s.validate()?;
    }
    let red = scans.iter().filter(|s| s.is_red()).collect::<Vec<_>>();
    let blue = scans.iter().filter(|s| !s.is_red()).collect::<Vec<_>>();
    let (red, blue) = match (red.as_slice(), blue.as_slice()) {
        ([r], [b]) => (*r, *b),
        _ => {
            return Err(ThermometryError::Scans(format!(
                "got {} red and {} blue",
                red.len(),
                blue.len()
            )))
        }
    };
    if red.order != -blue.order
        || red.mode != blue.mode
        || red.probe_time_us != blue.probe_time_us
        || red.mode_frequency_khz != blue.mode_frequency_khz
    {
        return Err(ThermometryError::Scans("scans do not match".into()));
    }
    let float_rabi = matches!(options.rabi, RabiMode::Float { .. });
    let fixed_rabi = match options.rabi {
        RabiMode::Fixed(r) => r,
        RabiMode::Float { initial_khz } => initial_khz,
    };
    let unpack = |p: &[f64]| LineshapeParams {
        nbar: p[0],
        eta: p[1],
        rabi_khz: if float_rabi { p[3] } else { fixed_rabi },
        decoherence_per_us: options.decoherence_per_us,
        centre_khz: p[2],
    };
    // deviance residuals: the sum of squares is the binomial deviance, so
    // the fit is maximum likelihood even for low counts
    let residuals = |p: &[f64]| -> Result<Vec<f64>, ThermometryError> {
        let params = unpack(p);
        let mut out = Vec::with_capacity(red.p_flip.len() + blue.p_flip.len());
        for s in [red, blue] {
            let model = sideband_lineshape(s, &params)?;
            out.extend(model.iter().zip(&s.p_flip).zip(&s.shots).map(|((&m, &y), &n)| {
                let m = m.clamp(1e-15, 1.0 - 1e-15);
                (m - y).signum() * (2.0 * f64::from(n) * binomial_deviance(y, m)).sqrt()
            }));
        }
        Ok(out)
    };
    let mut x0 = vec![options.initial_nbar, options.initial_eta, 0.0];
    let mut bounds = Bounds {
        lower: vec![0.0, 1e-6, f64::NEG_INFINITY],
        upper: vec![200.0, 1.0, f64::INFINITY],
        typical: vec![options.initial_nbar.max(0.1), options.initial_eta.max(0.01), 1.0],
    };
    if float_rabi {
        x0.push(fixed_rabi);
        bounds.lower.push(0.0);
        bounds.upper.push(f64::INFINITY);
        bounds.typical.push(fixed_rabi.max(1.0));
    }
    let names = ["nbar", "eta", "centre_khz", "rabi_khz"];
    let report = lsq::minimize(residuals, &x0, &bounds, &options.lm).map_err(|e| match e {
        LmError::Model(m) => m,
        LmError::NotConverged { iterations, .. } => ThermometryError::NotConverged { iterations },
        LmError::Singular { direction, params, .. } => {
            // relative changes, so parameters of very different size compare
            let rel: Vec<f64> = direction
                .iter()
                .zip(&params)
                .zip(&bounds.typical)
                .map(|((d, p), t)| d * p.abs().max(*t).recip())
                .collect();
            let norm = rel.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            ThermometryError::Singular(
                names
                    .iter()
                    .zip(&rel)
                    .filter(|(_, d)| d.abs() > 0.05 * norm)
                    .map(|(n, d)| format!("{:+.3}*d{n}/{n}", d / norm))
                    .collect::<Vec<_>>()
                    .join(" "),
            )
        }
        LmError::InvalidStart => ThermometryError::Invalid("initial values outside bounds".into()),
        LmError::Underdetermined { residuals, params } => {
            ThermometryError::Invalid(format!("{residuals} points cannot determine {params} parameters"))
        }
    })?;
    let err = report.uncertainties();
    let p = &report.params;
    let warnings = lamb_dicke_warning(p[1], p[0]).into_iter().collect();
    Ok(ThermometryResult {
        nbar: p[0],
        nbar_sigma: err[0],
        eta: Some((p[1], err[1])),
        rabi_khz: Some(if float_rabi { (p[3], err[3]) } else { (fixed_rabi, 0.0) }),
        centre_khz: Some((p[2], err[2])),
        method: Method::Lineshape,
        warnings,
    })
}
