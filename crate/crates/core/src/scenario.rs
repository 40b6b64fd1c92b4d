//! Named experiment scenarios: ion, field, beams and the scan to run.
//!
//! Scenario files are TOML with the beam tables of a beam-set file plus
//! optional `[scan]`, `[temperature]`, `[reoptimize]`, `[fluorescence]` and
//! `[fit]` sections. The shipped scenarios are compiled in.

use std::sync::Arc;

use serde::Deserialize;
use toml::Spanned;

use crate::config::{ConfigError, Source};
use crate::cooling::{
    CoolingOptions, DynamicMethod, DynamicOptions, Reoptimize, TemperatureMethod, TemperatureScan,
};
use crate::master::{beams_from_specs, BeamSpec, LaserBeam};
use crate::scan::{linspace, BeamParameter, ScanAxis};
use crate::specfit::FitModel;
use crate::structure::{build_basis, IonModel, StructureError, ZeemanBasis};

const SHIPPED: &[(&str, &str)] = &[
    ("table1_cooling", include_str!("../scenarios/table1_cooling.toml")),
    ("table1_fluorescence", include_str!("../scenarios/table1_fluorescence.toml")),
    ("fig3_scan", include_str!("../scenarios/fig3_scan.toml")),
    ("fig4_scan", include_str!("../scenarios/fig4_scan.toml")),
    ("fig6_a", include_str!("../scenarios/fig6_a.toml")),
    ("fig6_b", include_str!("../scenarios/fig6_b.toml")),
    ("fig6_c", include_str!("../scenarios/fig6_c.toml")),
    ("fig6_d", include_str!("../scenarios/fig6_d.toml")),
];

/// Names of the compiled-in scenarios.
pub fn shipped_names() -> Vec<&'static str> {
    SHIPPED.iter().map(|(n, _)| *n).collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    description: String,
    ion: String,
    field_gauss: f64,
    beam: Vec<Spanned<BeamSpec>>,
    #[serde(default)]
    scan: Option<Spanned<ScanSpec>>,
    #[serde(default)]
    temperature: Option<TemperatureSpec>,
    #[serde(default)]
    reoptimize: Option<ReoptimizeSpec>,
    #[serde(default)]
    fluorescence: Option<FluorescenceSpec>,
    // parsed separately by FitModel
    #[serde(default)]
    fit: Option<toml::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanSpec {
    beam: String,
    parameter: BeamParameter,
    start: f64,
    stop: f64,
    points: usize,
    /// Moves beams from the same laser source along with the scanned one.
    #[serde(default)]
    locked: bool,
    /// Further beams that follow the scanned one.
    #[serde(default)]
    follow: Vec<String>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum MethodName {
    QuasiStatic,
    Dynamic,
    TimeDomain,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemperatureSpec {
    method: MethodName,
    #[serde(default)]
    trap_frequency_mhz: Option<f64>,
    #[serde(default)]
    velocity_step: Option<f64>,
    #[serde(default)]
    steps_per_cycle: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReoptimizeSpec {
    beam: String,
    start: f64,
    stop: f64,
    points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FluorescenceSpec {
    efficiency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linewidths {
    Fitted,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioScan {
    pub axis: ScanAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub ion_name: String,
    pub ion: Arc<IonModel>,
    pub field_gauss: f64,
    pub beams: Vec<LaserBeam>,
    pub scan: Option<ScenarioScan>,
    pub temperature: Option<TemperatureMethod>,
    pub reoptimize: Option<Reoptimize>,
    /// Photon detection efficiency for count-rate predictions.
    pub efficiency: Option<f64>,
    text: String,
    origin: String,
}

impl Scenario {
    pub fn shipped(name: &str) -> Option<Result<Scenario, ConfigError>> {
        SHIPPED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, text)| Scenario::from_toml_str(text, &format!("{n}.toml"), n))
    }

    pub fn from_toml_str(text: &str, origin: &str, name: &str) -> Result<Scenario, ConfigError> {
        let src = Source::new(origin, text);
        let file: ScenarioFile = src.parse()?;
        let ion = IonModel::bundled(&file.ion)
            .ok_or_else(|| src.error(format!("unknown ion {:?}", file.ion)))?;
        Scenario::assemble(&src, file, Arc::new(ion), name)
    }

    /// Same scenario with a different ion model; the beams are revalidated.
    pub fn with_ion(&self, ion: IonModel, ion_name: &str) -> Result<Scenario, ConfigError> {
        let src = Source::new(&self.origin, &self.text);
        let mut file: ScenarioFile = src.parse()?;
        file.ion = ion_name.to_string();
        let mut out = Scenario::assemble(&src, file, Arc::new(ion), &self.name)?;
        out.field_gauss = self.field_gauss;
        Ok(out)
    }

    fn assemble(src: &Source, file: ScenarioFile, ion: Arc<IonModel>, name: &str) -> Result<Scenario, ConfigError> {
        if !(file.field_gauss.is_finite() && file.field_gauss >= 0.0) {
            return Err(src.error("field_gauss must be non-negative"));
        }
        let beams = beams_from_specs(src, &file.beam, &ion)?;
        let scan = match file.scan {
            None => None,
            Some(spec) => {
                let span = spec.span();
                let spec = spec.into_inner();
                let axis = if spec.locked {
                    ScanAxis::locked(&beams, &spec.beam, spec.parameter)
                } else if beams.iter().any(|b| b.name == spec.beam) {
                    Ok(ScanAxis::new(&spec.beam, spec.parameter))
                } else {
                    Err(crate::scan::ScanError::UnknownBeam(spec.beam.clone()))
                }
                .map_err(|e| src.error_at(span.clone(), e.to_string()))?;
                let axis = spec.follow.iter().fold(axis, |a, p| a.with_partner(p));
                if let Some(p) = axis.partners.iter().find(|p| !beams.iter().any(|b| b.name == **p)) {
                    return Err(src.error_at(span, format!("no beam named {p:?}")));
                }
                if !(spec.start.is_finite() && spec.stop.is_finite()) {
                    return Err(src.error_at(span, "scan limits must be finite"));
                }
                Some(ScenarioScan {
                    axis,
                    values: linspace(spec.start, spec.stop, spec.points),
                })
            }
        };
        let temperature = match file.temperature {
            None => None,
            Some(t) => {
                let step = t.velocity_step.unwrap_or(CoolingOptions::default().velocity_step);
                let trap = t.trap_frequency_mhz.map(|f| f * 1e6);
                if trap.is_some_and(|f| !(f.is_finite() && f > 0.0)) {
                    return Err(src.error("trap_frequency_mhz must be positive"));
                }
                Some(match t.method {
                    MethodName::QuasiStatic => TemperatureMethod::QuasiStatic(CoolingOptions {
                        velocity_step: step,
                        ..CoolingOptions::default()
                    }),
                    m => {
                        let trap = trap.ok_or_else(|| src.error("dynamic methods need trap_frequency_mhz"))?;
                        TemperatureMethod::Dynamic(DynamicOptions {
                            trap_frequency_hz: trap,
                            velocity_amplitude: step,
                            method: if m == MethodName::TimeDomain {
                                DynamicMethod::TimeDomain {
                                    steps_per_cycle: t.steps_per_cycle.unwrap_or(200),
                                }
                            } else {
                                DynamicMethod::Harmonic
                            },
                            ..DynamicOptions::default()
                        })
                    }
                })
            }
        };
        let reoptimize = match file.reoptimize {
            None => None,
            Some(r) => {
                if !beams.iter().any(|b| b.name == r.beam) {
                    return Err(src.error(format!("reoptimize: no beam named {:?}", r.beam)));
                }
                Some(Reoptimize {
                    beam: r.beam,
                    offsets_mhz: linspace(r.start, r.stop, r.points),
                })
            }
        };
        let efficiency = match file.fluorescence {
            Some(f) if !(0.0..=1.0).contains(&f.efficiency) => {
                return Err(src.error("efficiency must lie in [0, 1]"));
            }
            f => f.map(|f| f.efficiency),
        };
        Ok(Scenario {
            name: name.to_string(),
            description: file.description,
            ion_name: file.ion,
            ion,
            field_gauss: file.field_gauss,
            beams,
            scan,
            temperature,
            reoptimize,
            efficiency,
            text: src.text.to_string(),
            origin: src.origin.to_string(),
        })
    }

    pub fn basis(&self) -> Result<ZeemanBasis, StructureError> {
        build_basis(self.ion.clone(), self.field_gauss)
    }

    pub fn with_linewidths(mut self, mode: Linewidths) -> Scenario {
        if mode == Linewidths::Zero {
            for b in &mut self.beams {
                b.linewidth_mhz = 0.0;
            }
        }
        self
    }

    /// Sets the quasi-static velocity step, or the time-domain velocity
    /// amplitude, in m/s.
    pub fn with_velocity_step(mut self, step: f64) -> Scenario {
        match &mut self.temperature {
            Some(TemperatureMethod::QuasiStatic(o)) => o.velocity_step = step,
            Some(TemperatureMethod::Dynamic(o)) => o.velocity_amplitude = step,
            None => {}
        }
        self
    }

    /// Temperature scan over the scenario's axis, falling back to the
    /// current value of its beam when the scenario has no scan.
    pub fn temperature_scan(&self) -> Option<TemperatureScan> {
        let method = self.temperature.clone()?;
        let scan = self.scan.clone()?;
        Some(TemperatureScan {
            axis: scan.axis,
            values: scan.values,
            method,
            reoptimize: self.reoptimize.clone(),
        })
    }

    /// The `[fit]` section, when present.
    pub fn fit_model(&self) -> Option<Result<FitModel, ConfigError>> {
        let src = Source::new(&self.origin, &self.text);
        let file: ScenarioFile = src.parse().ok()?;
        file.fit?;
        Some(FitModel::from_toml_str(&self.text, &self.origin, &self.beams))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_scenarios_load() {
        for name in shipped_names() {
            let s = Scenario::shipped(name).unwrap().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(s.ion.name, "43Ca+");
            assert!((s.field_gauss - 146.0).abs() < 1.0);
            assert_eq!(s.beams.len(), 3, "{name}");
        }
        assert!(Scenario::shipped("fig9").is_none());
    }

    #[test]
    fn scan_wiring() {
        let b = Scenario::shipped("fig6_b").unwrap().unwrap();
        let scan = b.temperature_scan().unwrap();
        assert_eq!(scan.axis.beam, "L1");
        assert!(scan.axis.partners.contains(&"L2".to_string()));
        assert!(scan.reoptimize.is_some());
        let a = Scenario::shipped("fig6_a").unwrap().unwrap();
        assert_eq!(a.scan.unwrap().axis.parameter, BeamParameter::Intensity);
        let f = Scenario::shipped("table1_fluorescence").unwrap().unwrap();
        assert_eq!(f.efficiency, Some(0.0017));
        let beams = &f.beams;
        assert_eq!(beams[2].intensity, 1330.0);
        let c = Scenario::shipped("table1_cooling").unwrap().unwrap().with_linewidths(Linewidths::Zero);
        assert!(c.beams.iter().all(|b| b.linewidth_mhz == 0.0));
        let fit = Scenario::shipped("fig3_scan").unwrap().unwrap();
        assert!(fit.fit_model().unwrap().is_ok());
    }

    #[test]
    fn bad_scenarios_name_the_line() {
        let text = "description = \"x\"\nion = \"ca43\"\nfield_gauss = 146.0\n\n[[beam]]\nname = \"L1\"\nlower = \"S1/2\"\nupper = \"P1/2\"\ndetuning_mhz = 0.0\nintensity = 1.0\npolarization = { pi = 1, sigma_minus = 0, sigma_plus = 0 }\npropagation = 1\n\n[scan]\nbeam = \"L7\"\nparameter = \"detuning\"\nstart = 0.0\nstop = 1.0\npoints = 2\n";
        let err = Scenario::from_toml_str(text, "bad.toml", "bad").unwrap_err();
        assert_eq!(err.line, Some(14), "{err}");
        let err = Scenario::from_toml_str(&text.replace("ca43", "ca99"), "bad.toml", "bad").unwrap_err();
        assert!(err.message.contains("ca99"));
        let err = Scenario::from_toml_str(&text.replace("points = 2", "points = 2\nspeed = 1"), "bad.toml", "bad")
            .unwrap_err();
        assert!(err.line.is_some());
    }
}
