//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use ioncool::lsq::LmOptions;
use ioncool::master::{LaserBeam, Polarization};
use ioncool::scan::linspace;
use ioncool::specfit::{fit_scan, FitModel, ScanData};
use ioncool::structure::{build_basis, IonModel, ZeemanBasis};
use ioncool::thermometry::{sideband_lineshape, LineshapeParams, SidebandScan, REFERENCE_CARRIER_RABI_KHZ};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};

/// Field at which the reference ion's |4,+4> - |4,+3> interval is 57.480 MHz.
pub const CLOCK_FIELD_GAUSS: f64 = 146.0942;

pub fn beam(name: &str, lower: &str, upper: &str, detuning: f64, intensity: f64, pol: Polarization) -> LaserBeam {
    LaserBeam {
        name: name.into(),
        lower: lower.into(),
        upper: upper.into(),
        detuning_mhz: detuning,
        intensity,
        polarization: pol,
        propagation: 1,
        linewidth_mhz: 0.0,
        ground_f: None,
        source: None,
    }
}

pub fn two_level_basis() -> ZeemanBasis {
    build_basis(Arc::new(IonModel::bundled("two_level").unwrap()), 0.0).unwrap()
}

/// Closed sigma+ beam on the spinless S1/2 - P3/2 ion.
pub fn two_level_beam(intensity: f64, detuning: f64) -> LaserBeam {
    beam("probe", "S1/2", "P3/2", detuning, intensity, Polarization::new(0.0, 0.0, 1.0))
}

pub fn lambda_basis(field_gauss: f64) -> ZeemanBasis {
    build_basis(Arc::new(IonModel::bundled("lambda").unwrap()), field_gauss).unwrap()
}

/// Cooling-style beams on the spinless lambda ion: pi + sigma+ at 397 nm
/// and sigma+- at 866 nm, counter-propagating.
pub fn lambda_beams(linewidths: bool) -> Vec<LaserBeam> {
    let mut l1 = beam("L1", "S1/2", "P1/2", -20.0, 1.0, Polarization::new(1.0 / 3.0, 0.0, 2.0 / 3.0));
    let mut l3 = beam("L3", "D3/2", "P1/2", -20.0, 20.0, Polarization::new(0.0, 0.5, 0.5));
    l3.propagation = -1;
    if linewidths {
        l1.linewidth_mhz = 1.5;
        l3.linewidth_mhz = 0.1;
    }
    vec![l1, l3]
}

const LAMBDA_FIT: &str = r#"
[fit]
scan_beam = "L3"
scan_parameter = "detuning"

[[fit.free]]
name = "I397"
kind = "intensity"
beams = ["L1"]
initial = 0.8
lower = 0.0

[[fit.free]]
name = "I866"
kind = "intensity"
beams = ["L3"]
initial = 15.0
lower = 0.0

[[fit.free]]
name = "offset866"
kind = "detuning_offset"
beams = ["L3"]
initial = 0.5

[[fit.free]]
name = "scale"
kind = "scale"
initial = 0.9
lower = 0.0
"#;

pub const LAMBDA_TRUTH: [f64; 4] = [1.0, 20.0, 0.0, 1.0];
pub const LAMBDA_FIELD: f64 = 5.0;

pub fn lambda_model(beams: &[LaserBeam]) -> FitModel {
    FitModel::from_toml_str(LAMBDA_FIT, "lambda_fit.toml", beams).unwrap()
}

pub fn lambda_abscissa() -> Vec<f64> {
    linspace(-60.0, 40.0, 61)
}

/// Noise-free 866 scan of the lambda ion at the generator parameters.
pub fn lambda_clean_scan() -> ScanData {
    let basis = lambda_basis(LAMBDA_FIELD);
    let beams = lambda_beams(true);
    let model = lambda_model(&beams);
    let x = lambda_abscissa();
    let signal = model.evaluate(&basis, &beams, &LAMBDA_TRUTH, &x).unwrap();
    ScanData { x, signal, sigma: None }
}

/// Adds Gaussian noise of `relative` times the signal, reported as sigma.
pub fn with_noise(clean: &ScanData, relative: f64, seed: u64) -> ScanData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma: Vec<f64> = clean.signal.iter().map(|y| relative * y).collect();
    let signal = clean
        .signal
        .iter()
        .zip(&sigma)
        .map(|(y, s)| y + Normal::new(0.0, *s).unwrap().sample(&mut rng))
        .collect();
    ScanData {
        x: clean.x.clone(),
        signal,
        sigma: Some(sigma),
    }
}

/// Fraction of repetitions in which each fitted parameter lies within its
/// reported 1-sigma interval of the truth.
pub fn coverage(reps: usize, relative: f64, seed: u64) -> Vec<f64> {
    let basis = lambda_basis(LAMBDA_FIELD);
    let beams = lambda_beams(true);
    let model = lambda_model(&beams);
    let clean = lambda_clean_scan();
    let mut hits = vec![0usize; LAMBDA_TRUTH.len()];
    for rep in 0..reps {
        let data = with_noise(&clean, relative, seed + rep as u64);
        let fit = fit_scan(&basis, &beams, &model, &data, &LmOptions::default()).unwrap();
        for (k, t) in LAMBDA_TRUTH.iter().enumerate() {
            if (fit.values[k] - t).abs() <= fit.uncertainties[k] {
                hits[k] += 1;
            }
        }
    }
    hits.iter().map(|&h| h as f64 / reps as f64).collect()
}

/// Red/blue first-sideband scans around a mode at `mode_khz`, with
/// binomially sampled counts when `shots` is given.
pub fn sideband_pair(
    truth: &LineshapeParams,
    mode_khz: f64,
    probe_us: f64,
    shots: Option<u32>,
    seed: u64,
) -> (SidebandScan, SidebandScan) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |order: i8, rng: &mut ChaCha8Rng| {
        let centre = f64::from(order) * mode_khz;
        let x = linspace(centre - 80.0, centre + 80.0, 41);
        let mut s = SidebandScan {
            p_flip: vec![0.0; x.len()],
            shots: vec![shots.unwrap_or(u32::MAX); x.len()],
            detuning_khz: x,
            probe_time_us: probe_us,
            order,
            mode: "x".into(),
            mode_frequency_khz: mode_khz,
        };
        let p = sideband_lineshape(&s, truth).unwrap();
        s.p_flip = match shots {
            None => p,
            Some(n) => p
                .iter()
                .map(|&p| Binomial::new(u64::from(n), p).unwrap().sample(rng) as f64 / f64::from(n))
                .collect(),
        };
        s
    };
    let red = make(-1, &mut rng);
    let blue = make(1, &mut rng);
    (red, blue)
}

pub fn lineshape(nbar: f64, eta: f64) -> LineshapeParams {
    LineshapeParams {
        nbar,
        eta,
        rabi_khz: REFERENCE_CARRIER_RABI_KHZ,
        decoherence_per_us: 0.0,
        centre_khz: 0.0,
    }
}
