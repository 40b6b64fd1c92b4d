//! Fine levels, decay channels and field-dressed hyperfine-Zeeman states.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::angular::{clebsch_gordan, HalfInt};
use crate::config::{read_file, ConfigError, Source};
use crate::constants::BOHR_MAGNETON_MHZ_PER_GAUSS;
use crate::master::LaserBeam;

/// Number of field increments used to carry F labels from zero field.
const RAMP_STEPS: usize = 64;

const CALCIUM_43: &str = include_str!("../ions/ca43.toml");

/// Ion descriptions shipped with the crate, by name.
pub const BUNDLED_IONS: [(&str, &str); 4] = [
    ("ca43", CALCIUM_43),
    ("two_level", include_str!("../ions/two_level.toml")),
    ("toy_half", include_str!("../ions/toy_half.toml")),
    ("lambda", include_str!("../ions/lambda.toml")),
];

/// A fine-structure level with its hyperfine constants.
#[derive(Debug, Clone, PartialEq)]
pub struct FineLevel {
    pub label: String,
    pub j: HalfInt,
    /// Magnetic-dipole hyperfine constant, MHz.
    pub a_mhz: f64,
    /// Electric-quadrupole hyperfine constant, MHz.
    pub b_mhz: f64,
    pub g_j: f64,
}

/// Spontaneous decay from `upper` to `lower` (indices into `IonModel::levels`).
#[derive(Debug, Clone, PartialEq)]
pub struct DecayChannel {
    pub upper: usize,
    pub lower: usize,
    /// Einstein A coefficient, s^-1.
    pub einstein_a: f64,
    pub wavelength_nm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IonModel {
    pub name: String,
    pub nuclear_spin: HalfInt,
    /// Nuclear g-factor in units of the Bohr magneton, entering as g_I mu_B B I_z.
    pub g_i: f64,
    pub levels: Vec<FineLevel>,
    pub channels: Vec<DecayChannel>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIon {
    name: String,
    nuclear_spin: HalfInt,
    g_i: f64,
    #[serde(rename = "level")]
    levels: Vec<Spanned<RawLevel>>,
    #[serde(rename = "channel", default)]
    channels: Vec<Spanned<RawChannel>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLevel {
    label: String,
    j: HalfInt,
    a_mhz: f64,
    #[serde(default)]
    b_mhz: f64,
    g_j: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    upper: String,
    lower: String,
    einstein_a: f64,
    wavelength_nm: f64,
}

impl IonModel {
    /// The bundled 43Ca+ description (S1/2, P1/2, D3/2).
    pub fn calcium43() -> IonModel {
        IonModel::from_toml_str(CALCIUM_43, "ca43.toml").expect("bundled ion file is valid")
    }

    /// A bundled ion by name (see `BUNDLED_IONS`).
    pub fn bundled(name: &str) -> Option<IonModel> {
        BUNDLED_IONS.iter().find(|(n, _)| *n == name).map(|(n, text)| {
            IonModel::from_toml_str(text, &format!("{n}.toml")).expect("bundled ion file is valid")
        })
    }

    pub fn from_file(path: &Path) -> Result<IonModel, ConfigError> {
        let text = read_file(path)?;
        IonModel::from_toml_str(&text, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<IonModel, ConfigError> {
        let src = Source::new(origin, text);
        let raw: RawIon = src.parse()?;
        if raw.nuclear_spin.twice() < 0 {
            return Err(src.error("nuclear_spin must be non-negative"));
        }
        if !raw.g_i.is_finite() {
            return Err(src.error("g_i must be finite"));
        }
        let mut levels = Vec::with_capacity(raw.levels.len());
        for entry in &raw.levels {
            let span = entry.span();
            let l = entry.get_ref();
            if levels.iter().any(|x: &FineLevel| x.label == l.label) {
                return Err(src.error_at(span, format!("duplicate level label {:?}", l.label)));
            }
            if l.j.twice() <= 0 {
                return Err(src.error_at(span, format!("level {:?}: j must be positive", l.label)));
            }
            if !(l.a_mhz.is_finite() && l.b_mhz.is_finite() && l.g_j.is_finite()) {
                return Err(src.error_at(span, format!("level {:?}: non-finite constant", l.label)));
            }
            if l.b_mhz != 0.0 && (l.j.twice() < 2 || raw.nuclear_spin.twice() < 2) {
                return Err(src.error_at(
                    span,
                    format!("level {:?}: quadrupole constant requires I >= 1 and J >= 1", l.label),
                ));
            }
            levels.push(FineLevel {
                label: l.label.clone(),
                j: l.j,
                a_mhz: l.a_mhz,
                b_mhz: l.b_mhz,
                g_j: l.g_j,
            });
        }
        if levels.is_empty() {
            return Err(src.error("at least one [[level]] is required"));
        }
        let find = |label: &str| levels.iter().position(|l| l.label == label);
        let mut channels: Vec<DecayChannel> = Vec::with_capacity(raw.channels.len());
        for entry in &raw.channels {
            let span = entry.span();
            let c = entry.get_ref();
            let upper = find(&c.upper)
                .ok_or_else(|| src.error_at(span.clone(), format!("unknown level {:?}", c.upper)))?;
            let lower = find(&c.lower)
                .ok_or_else(|| src.error_at(span.clone(), format!("unknown level {:?}", c.lower)))?;
            if upper == lower {
                return Err(src.error_at(span, "a channel must connect two different levels"));
            }
            if !(c.einstein_a > 0.0 && c.einstein_a.is_finite()) {
                return Err(src.error_at(span, "einstein_a must be positive"));
            }
            if !(c.wavelength_nm > 0.0 && c.wavelength_nm.is_finite()) {
                return Err(src.error_at(span, "wavelength_nm must be positive"));
            }
            let (ju, jl) = (levels[upper].j.twice(), levels[lower].j.twice());
            if (ju - jl).abs() > 2 {
                return Err(src.error_at(span, "electric-dipole channel needs |J - J'| <= 1"));
            }
            if channels.iter().any(|x| x.upper == upper && x.lower == lower) {
                return Err(src.error_at(span, "duplicate channel"));
            }
            channels.push(DecayChannel {
                upper,
                lower,
                einstein_a: c.einstein_a,
                wavelength_nm: c.wavelength_nm,
            });
        }
        Ok(IonModel {
            name: raw.name,
            nuclear_spin: raw.nuclear_spin,
            g_i: raw.g_i,
            levels,
            channels,
        })
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l.label == label)
    }

    /// Sum of Einstein A coefficients out of a level, s^-1.
    pub fn total_decay_rate(&self, level: usize) -> f64 {
        self.channels
            .iter()
            .filter(|c| c.upper == level)
            .map(|c| c.einstein_a)
            .sum()
    }

    pub fn channel(&self, upper: usize, lower: usize) -> Option<&DecayChannel> {
        self.channels.iter().find(|c| c.upper == upper && c.lower == lower)
    }

    pub fn branching_fraction(&self, upper: usize, lower: usize) -> Option<f64> {
        self.channel(upper, lower)
            .map(|c| c.einstein_a / self.total_decay_rate(upper))
    }
}

/// One component of a dressed state in the decoupled |M_I, M_J> basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisComponent {
    pub m_i: HalfInt,
    pub m_j: HalfInt,
    pub amplitude: f64,
}

/// A field-dressed hyperfine-Zeeman eigenstate.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeemanState {
    /// Position in the global basis.
    pub index: usize,
    /// Index of the fine level in `IonModel::levels`.
    pub level: usize,
    pub level_label: String,
    /// Energy relative to the level's centre of gravity, MHz.
    pub energy_mhz: f64,
    pub m: HalfInt,
    /// F label of the zero-field state this state connects to adiabatically.
    pub f: HalfInt,
    pub components: Vec<BasisComponent>,
}

impl fmt::Display for ZeemanState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.m.twice();
        let sign = if m >= 0 { "+" } else { "-" };
        let mag = HalfInt::from_twice(m.abs());
        write!(f, "{}|F={},M={}{}>", self.level_label, self.f, sign, mag)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("magnetic field must be finite and non-negative, got {0} G")]
    InvalidField(f64),
    #[error("unknown level {0:?}")]
    UnknownLevel(String),
    #[error("state {state} is not in the lower level of channel {lower}->{upper} addressed by beam {beam:?}")]
    ChannelMismatch {
        beam: String,
        state: String,
        lower: String,
        upper: String,
    },
    #[error("state index {0} out of range")]
    StateIndex(usize),
    #[error("could not track F labels for level {level} in the M = {m} block")]
    Tracking { level: String, m: HalfInt },
}

/// Complete ordered set of dressed states: levels in file order, and within a
/// level by ascending (F, M).
#[derive(Debug, Clone)]
pub struct ZeemanBasis {
    pub ion: Arc<IonModel>,
    pub field_gauss: f64,
    states: Vec<ZeemanState>,
    level_ranges: Vec<std::ops::Range<usize>>,
}

impl ZeemanBasis {
    pub fn new(ion: Arc<IonModel>, field_gauss: f64) -> Result<ZeemanBasis, StructureError> {
        build_basis(ion, field_gauss)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[ZeemanState] {
        &self.states
    }

    pub fn state(&self, index: usize) -> &ZeemanState {
        &self.states[index]
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        self.level_ranges[level].clone()
    }

    pub fn level_states(&self, level: usize) -> &[ZeemanState] {
        &self.states[self.level_range(level)]
    }

    /// Global index of the state with the given level, F and M.
    pub fn find(&self, level_label: &str, f: HalfInt, m: HalfInt) -> Option<usize> {
        self.states
            .iter()
            .position(|s| s.level_label == level_label && s.f == f && s.m == m)
    }

    pub fn label(&self, index: usize) -> String {
        self.states[index].to_string()
    }
}

struct LevelOperators {
    pairs: Vec<(HalfInt, HalfInt)>,
    zero_field: DMatrix<f64>,
    zeeman: DMatrix<f64>,
}

/// I.J, the quadrupole operator and the Zeeman operator within one M block.
fn block_operators(ion: &IonModel, level: &FineLevel, m: HalfInt) -> LevelOperators {
    let i = ion.nuclear_spin;
    let j = level.j;
    let pairs: Vec<(HalfInt, HalfInt)> = i
        .projections()
        .filter_map(|mi| {
            let mj = m - mi;
            j.admits(mj).then_some((mi, mj))
        })
        .collect();
    let n = pairs.len();
    let raise = |jj: HalfInt, mm: HalfInt| (jj.casimir() - mm.value() * (mm.value() + 1.0)).max(0.0).sqrt();
    let mut ij = DMatrix::<f64>::zeros(n, n);
    for (col, &(mi, mj)) in pairs.iter().enumerate() {
        ij[(col, col)] += mi.value() * mj.value();
        for (row, &(ni, nj)) in pairs.iter().enumerate() {
            // I+ J- and I- J+
            if ni == mi + HalfInt::ONE && nj == mj - HalfInt::ONE {
                ij[(row, col)] += 0.5 * raise(i, mi) * raise(j, nj);
            }
            if ni == mi - HalfInt::ONE && nj == mj + HalfInt::ONE {
                ij[(row, col)] += 0.5 * raise(i, ni) * raise(j, mj);
            }
        }
    }
    let mut h0 = &ij * level.a_mhz;
    if level.b_mhz != 0.0 {
        let (iv, jv) = (i.value(), j.value());
        let denom = 2.0 * iv * (2.0 * iv - 1.0) * jv * (2.0 * jv - 1.0);
        let ident = DMatrix::<f64>::identity(n, n);
        let q = (&ij * &ij * 3.0 + &ij * 1.5 - ident * (i.casimir() * j.casimir())) / denom;
        h0 += q * level.b_mhz;
    }
    let mut zeeman = DMatrix::<f64>::zeros(n, n);
    for (k, &(mi, mj)) in pairs.iter().enumerate() {
        zeeman[(k, k)] = BOHR_MAGNETON_MHZ_PER_GAUSS * (level.g_j * mj.value() + ion.g_i * mi.value());
    }
    LevelOperators {
        pairs,
        zero_field: h0,
        zeeman,
    }
}

/// Dressed states of one fine level at the given field, ordered by (F, M).
/// `index` is relative to the level.
pub fn diagonalize_level(
    ion: &IonModel,
    level_index: usize,
    field_gauss: f64,
) -> Result<Vec<ZeemanState>, StructureError> {
    if !(field_gauss.is_finite() && field_gauss >= 0.0) {
        return Err(StructureError::InvalidField(field_gauss));
    }
    let level = &ion.levels[level_index];
    let i = ion.nuclear_spin;
    let j = level.j;
    let f_min = (i - j).abs();
    let f_max = i + j;
    let mut states = Vec::new();
    for m in f_max.projections() {
        let ops = block_operators(ion, level, m);
        let fs: Vec<HalfInt> = f_max
            .projections()
            .filter(|f| f.twice() >= f_min.twice() && f.twice() >= m.twice().abs())
            .collect();
        let n = ops.pairs.len();
        debug_assert_eq!(fs.len(), n);
        // zero-field |F M> vectors
        let mut tracked: Vec<DVector<f64>> = fs
            .iter()
            .map(|&f| {
                DVector::from_iterator(
                    n,
                    ops.pairs.iter().map(|&(mi, mj)| clebsch_gordan(i, mi, j, mj, f, m)),
                )
            })
            .collect();
        let mut energies: Vec<f64> = tracked
            .iter()
            .map(|v| (v.transpose() * &ops.zero_field * v)[(0, 0)])
            .collect();
        if field_gauss > 0.0 {
            for step in 1..=RAMP_STEPS {
                let b = field_gauss * step as f64 / RAMP_STEPS as f64;
                let h = &ops.zero_field + &ops.zeeman * b;
                let eig = SymmetricEigen::new(h);
                let mut taken = vec![false; n];
                let mut next: Vec<Option<(usize, f64)>> = vec![None; n];
                // greedy assignment by largest overlap
                let mut overlaps: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
                for (t, v) in tracked.iter().enumerate() {
                    for e in 0..n {
                        let o = v.dot(&eig.eigenvectors.column(e));
                        overlaps.push((o.abs(), t, e));
                    }
                }
                overlaps.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                for (_, t, e) in overlaps {
                    if next[t].is_none() && !taken[e] {
                        taken[e] = true;
                        next[t] = Some((e, eig.eigenvalues[e]));
                    }
                }
                for (t, slot) in next.iter().enumerate() {
                    let (e, energy) = slot.ok_or_else(|| StructureError::Tracking {
                        level: level.label.clone(),
                        m,
                    })?;
                    let mut v: DVector<f64> = eig.eigenvectors.column(e).into_owned();
                    if v.dot(&tracked[t]) < 0.0 {
                        v = -v;
                    }
                    tracked[t] = v;
                    energies[t] = energy;
                }
            }
        }
        for ((f, v), energy) in fs.iter().zip(tracked).zip(energies) {
            let components = ops
                .pairs
                .iter()
                .zip(v.iter())
                .map(|(&(m_i, m_j), &amplitude)| BasisComponent { m_i, m_j, amplitude })
                .collect();
            states.push(ZeemanState {
                index: 0,
                level: level_index,
                level_label: level.label.clone(),
                energy_mhz: energy,
                m,
                f: *f,
                components,
            });
        }
    }
    // the hyperfine and Zeeman operators are traceless; remove rounding drift
    let centre = states.iter().map(|s| s.energy_mhz).sum::<f64>() / states.len() as f64;
    for s in &mut states {
        s.energy_mhz -= centre;
    }
    states.sort_by(|a, b| a.f.cmp(&b.f).then(a.m.cmp(&b.m)));
    for (k, s) in states.iter_mut().enumerate() {
        s.index = k;
    }
    Ok(states)
}

/// Dressed states of every level of the ion at the given field.
pub fn build_basis(ion: Arc<IonModel>, field_gauss: f64) -> Result<ZeemanBasis, StructureError> {
    let mut states = Vec::new();
    let mut level_ranges = Vec::with_capacity(ion.levels.len());
    for level in 0..ion.levels.len() {
        let start = states.len();
        for mut s in diagonalize_level(&ion, level, field_gauss)? {
            s.index = states.len();
            states.push(s);
        }
        level_ranges.push(start..states.len());
    }
    Ok(ZeemanBasis {
        ion,
        field_gauss,
        states,
        level_ranges,
    })
}

/// Detuning of `beam` from the `lower -> upper` transition, MHz (positive is blue).
pub fn transition_detuning(
    basis: &ZeemanBasis,
    beam: &LaserBeam,
    lower: usize,
    upper: usize,
) -> Result<f64, StructureError> {
    let n = basis.len();
    if lower >= n {
        return Err(StructureError::StateIndex(lower));
    }
    if upper >= n {
        return Err(StructureError::StateIndex(upper));
    }
    let (sl, su) = (basis.state(lower), basis.state(upper));
    if sl.level_label != beam.lower || su.level_label != beam.upper {
        return Err(StructureError::ChannelMismatch {
            beam: beam.name.clone(),
            state: format!("{sl} / {su}"),
            lower: beam.lower.clone(),
            upper: beam.upper.clone(),
        });
    }
    Ok(beam.detuning_mhz - (su.energy_mhz - sl.energy_mhz))
}
