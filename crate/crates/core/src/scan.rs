//! Scan axes over beam parameters, with locked partner beams.

use std::fmt;

use serde::Deserialize;
use thiserror::Error;

use crate::master::LaserBeam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamParameter {
    Detuning,
    Intensity,
}

impl fmt::Display for BeamParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeamParameter::Detuning => f.write_str("detuning_mhz"),
            BeamParameter::Intensity => f.write_str("intensity_is"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScanError {
    #[error("no beam named {0:?}")]
    UnknownBeam(String),
    #[error("cannot scale partners of beam {0:?} from zero intensity")]
    ZeroIntensity(String),
    #[error("scan value {0} is not finite")]
    NonFinite(f64),
    #[error("scan points must be strictly monotone")]
    NotMonotone,
}

/// The scanned quantity. Partners keep their offset from the scanned beam
/// (detuning) or their intensity ratio to it (intensity).
#[derive(Debug, Clone, PartialEq)]
pub struct ScanAxis {
    pub beam: String,
    pub parameter: BeamParameter,
    pub partners: Vec<String>,
}

impl ScanAxis {
    pub fn new(beam: &str, parameter: BeamParameter) -> Self {
        ScanAxis {
            beam: beam.to_string(),
            parameter,
            partners: Vec::new(),
        }
    }

    /// Axis whose partners are all other beams from the same laser source,
    /// e.g. the two frequencies of one EOM-modulated beam.
    pub fn locked(beams: &[LaserBeam], beam: &str, parameter: BeamParameter) -> Result<Self, ScanError> {
        let key = beams
            .iter()
            .find(|b| b.name == beam)
            .ok_or_else(|| ScanError::UnknownBeam(beam.to_string()))?
            .source_key();
        Ok(ScanAxis {
            beam: beam.to_string(),
            parameter,
            partners: beams
                .iter()
                .filter(|b| b.name != beam && b.source_key() == key)
                .map(|b| b.name.clone())
                .collect(),
        })
    }

    pub fn with_partner(mut self, name: &str) -> Self {
        if !self.partners.iter().any(|p| p == name) && name != self.beam {
            self.partners.push(name.to_string());
        }
        self
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.beam, self.parameter)
    }

    pub fn current(&self, beams: &[LaserBeam]) -> Result<f64, ScanError> {
        let b = find(beams, &self.beam)?;
        Ok(match self.parameter {
            BeamParameter::Detuning => b.detuning_mhz,
            BeamParameter::Intensity => b.intensity,
        })
    }

    /// Beams with the scanned parameter set to `value`.
    pub fn apply(&self, beams: &[LaserBeam], value: f64) -> Result<Vec<LaserBeam>, ScanError> {
        if !value.is_finite() {
            return Err(ScanError::NonFinite(value));
        }
        for p in &self.partners {
            find(beams, p)?;
        }
        let current = self.current(beams)?;
        let mut out = beams.to_vec();
        for b in &mut out {
            let is_main = b.name == self.beam;
            let is_partner = self.partners.iter().any(|p| *p == b.name);
            if !(is_main || is_partner) {
                continue;
            }
            match self.parameter {
                BeamParameter::Detuning => {
                    if is_main {
                        b.detuning_mhz = value;
                    } else {
                        b.detuning_mhz += value - current;
                    }
                }
                BeamParameter::Intensity => {
                    if is_main {
                        b.intensity = value;
                    } else if current == 0.0 {
                        return Err(ScanError::ZeroIntensity(self.beam.clone()));
                    } else {
                        b.intensity *= value / current;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn find<'a>(beams: &'a [LaserBeam], name: &str) -> Result<&'a LaserBeam, ScanError> {
    beams
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| ScanError::UnknownBeam(name.to_string()))
}

/// `points` evenly spaced values from `start` to `stop` inclusive.
pub fn linspace(start: f64, stop: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..points)
            .map(|k| start + (stop - start) * k as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Checks that the abscissa is strictly increasing or strictly decreasing.
pub fn check_monotone(values: &[f64]) -> Result<(), ScanError> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(ScanError::NonFinite(*v));
    }
    let up = values.windows(2).all(|w| w[1] > w[0]);
    let down = values.windows(2).all(|w| w[1] < w[0]);
    if up || down {
        Ok(())
    } else {
        Err(ScanError::NotMonotone)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::master::Polarization;

    fn beams() -> Vec<LaserBeam> {
        let b = |name: &str, lower: &str, det: f64, int: f64| LaserBeam {
            name: name.into(),
            lower: lower.into(),
            upper: "P1/2".into(),
            detuning_mhz: det,
            intensity: int,
            polarization: Polarization::new(1.0, 0.0, 0.0),
            propagation: 1,
            linewidth_mhz: 0.0,
            ground_f: None,
            source: None,
        };
        vec![
            b("L1", "S1/2", 1042.0, 1.05),
            b("L2", "S1/2", -1888.0, 1.24),
            b("L3", "D3/2", -159.0, 161.0),
        ]
    }

    #[test]
    fn locked_detuning_keeps_separation() {
        let beams = beams();
        let axis = ScanAxis::locked(&beams, "L1", BeamParameter::Detuning).unwrap();
        assert_eq!(axis.partners, vec!["L2".to_string()]);
        for v in linspace(900.0, 1200.0, 7) {
            let out = axis.apply(&beams, v).unwrap();
            assert_eq!(out[0].detuning_mhz - out[1].detuning_mhz, 2930.0);
            assert_eq!(out[2].detuning_mhz, -159.0);
        }
    }

    #[test]
    fn locked_intensity_keeps_ratio() {
        let beams = beams();
        let axis = ScanAxis::locked(&beams, "L1", BeamParameter::Intensity).unwrap();
        let out = axis.apply(&beams, 2.1).unwrap();
        assert!((out[1].intensity / out[0].intensity - 1.24 / 1.05).abs() < 1e-14);
        let lone = ScanAxis::locked(&beams, "L3", BeamParameter::Intensity).unwrap();
        assert!(lone.partners.is_empty());
    }

    #[test]
    fn errors() {
        let beams = beams();
        assert!(ScanAxis::locked(&beams, "L9", BeamParameter::Detuning).is_err());
        let axis = ScanAxis::new("L1", BeamParameter::Detuning).with_partner("nope");
        assert_eq!(axis.apply(&beams, 1.0), Err(ScanError::UnknownBeam("nope".into())));
        assert!(check_monotone(&[1.0, 2.0, 2.0]).is_err());
        assert!(check_monotone(&[3.0, 2.0, 1.0]).is_ok());
        assert!(check_monotone(&[]).is_ok());
        assert!(linspace(0.0, 1.0, 0).is_empty());
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
    }
}
