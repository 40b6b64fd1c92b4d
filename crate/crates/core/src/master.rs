//! Laser beams, the rotating-frame Hamiltonian and the Lindblad superoperator.
//!
//! Units inside the superoperator: time in microseconds, frequencies in
//! rad/us (so a detuning of x MHz enters as 2 pi x). Density matrices are
//! vectorized row-major, `vec[i * N + j] = rho[i][j]`.
//!
//! Each lower-level state is placed in the frame of the single beam that
//! addresses it; states no beam addresses keep their bare energy. Couplings
//! a beam would have to states outside its own frame are dropped, as are
//! decay cross terms between states in different frames (they oscillate at
//! optical-frequency differences and average out).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::angular::{dipole_amplitude, AngularError, HalfInt};
use crate::config::{fraction, ConfigError, Source};
use crate::constants::{PLANCK, SPEED_OF_LIGHT};
use crate::structure::{DecayChannel, IonModel, ZeemanBasis};

pub type C64 = Complex64;

const I: C64 = C64::new(0.0, 1.0);

/// Relative intensities in the pi, sigma- and sigma+ components.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polarization {
    #[serde(deserialize_with = "fraction")]
    pub pi: f64,
    #[serde(deserialize_with = "fraction")]
    pub sigma_minus: f64,
    #[serde(deserialize_with = "fraction")]
    pub sigma_plus: f64,
}

impl Polarization {
    pub fn new(pi: f64, sigma_minus: f64, sigma_plus: f64) -> Self {
        Polarization {
            pi,
            sigma_minus,
            sigma_plus,
        }
    }

    /// Intensity fraction driving Delta M = q.
    pub fn fraction(&self, q: i32) -> f64 {
        match q {
            -1 => self.sigma_minus,
            0 => self.pi,
            1 => self.sigma_plus,
            _ => 0.0,
        }
    }

    fn check(&self) -> Result<(), String> {
        let parts = [self.pi, self.sigma_minus, self.sigma_plus];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err("polarization fractions must be non-negative".into());
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("polarization fractions sum to {sum}, expected 1"));
        }
        Ok(())
    }
}

/// A laser beam driving one dipole channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserBeam {
    pub name: String,
    /// Label of the lower level of the driven channel.
    pub lower: String,
    /// Label of the upper level of the driven channel.
    pub upper: String,
    /// Detuning from the centre-of-gravity transition frequency, MHz.
    pub detuning_mhz: f64,
    /// Intensity in units of the channel's saturation intensity.
    pub intensity: f64,
    pub polarization: Polarization,
    /// +1 or -1 along the motional axis.
    pub propagation: i8,
    /// Lorentzian laser linewidth (FWHM), MHz.
    pub linewidth_mhz: f64,
    /// Restricts the beam to one hyperfine manifold of the lower level.
    pub ground_f: Option<HalfInt>,
    /// Beams with the same source share phase noise. Defaults to the channel.
    pub source: Option<String>,
}

impl LaserBeam {
    pub fn channel_label(&self) -> String {
        format!("{}-{}", self.lower, self.upper)
    }

    pub fn source_key(&self) -> String {
        self.source.clone().unwrap_or_else(|| self.channel_label())
    }

    fn check(&self, ion: &IonModel) -> Result<(), String> {
        let lower = ion
            .level_index(&self.lower)
            .ok_or_else(|| format!("unknown level {:?}", self.lower))?;
        let upper = ion
            .level_index(&self.upper)
            .ok_or_else(|| format!("unknown level {:?}", self.upper))?;
        if ion.channel(upper, lower).is_none() {
            return Err(format!("no decay channel {} -> {}", self.upper, self.lower));
        }
        if !self.detuning_mhz.is_finite() {
            return Err("detuning must be finite".into());
        }
        if !(self.intensity.is_finite() && self.intensity >= 0.0) {
            return Err("intensity must be non-negative".into());
        }
        if !(self.linewidth_mhz.is_finite() && self.linewidth_mhz >= 0.0) {
            return Err("linewidth must be non-negative".into());
        }
        if self.propagation != 1 && self.propagation != -1 {
            return Err("propagation must be +1 or -1".into());
        }
        self.polarization.check()?;
        if let Some(f) = self.ground_f {
            let i = ion.nuclear_spin;
            let j = ion.levels[lower].j;
            let ok = f.twice() >= (i - j).abs().twice()
                && f.twice() <= (i + j).twice()
                && (f.twice() - (i + j).twice()) % 2 == 0;
            if !ok {
                return Err(format!("ground_f = {f} does not exist in level {}", self.lower));
            }
        }
        Ok(())
    }
}

/// TOML form of a beam.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSpec {
    pub name: String,
    pub lower: String,
    pub upper: String,
    pub detuning_mhz: f64,
    pub intensity: f64,
    pub polarization: Polarization,
    pub propagation: i8,
    #[serde(default)]
    pub linewidth_mhz: f64,
    #[serde(default)]
    pub ground_f: Option<HalfInt>,
    #[serde(default)]
    pub source: Option<String>,
}

impl From<BeamSpec> for LaserBeam {
    fn from(b: BeamSpec) -> Self {
        LaserBeam {
            name: b.name,
            lower: b.lower,
            upper: b.upper,
            detuning_mhz: b.detuning_mhz,
            intensity: b.intensity,
            polarization: b.polarization,
            propagation: b.propagation,
            linewidth_mhz: b.linewidth_mhz,
            ground_f: b.ground_f,
            source: b.source,
        }
    }
}

/// Converts and validates spanned beam tables against an ion.
pub fn beams_from_specs(
    src: &Source,
    specs: &[Spanned<BeamSpec>],
    ion: &IonModel,
) -> Result<Vec<LaserBeam>, ConfigError> {
    let mut beams: Vec<LaserBeam> = Vec::with_capacity(specs.len());
    for entry in specs {
        let beam: LaserBeam = entry.get_ref().clone().into();
        if beams.iter().any(|b| b.name == beam.name) {
            return Err(src.error_at(entry.span(), format!("duplicate beam name {:?}", beam.name)));
        }
        beam.check(ion)
            .map_err(|e| src.error_at(entry.span(), format!("beam {:?}: {e}", beam.name)))?;
        if let Some(other) = beams.iter().find(|b| {
            b.lower == beam.lower
                && (b.ground_f.is_none() || beam.ground_f.is_none() || b.ground_f == beam.ground_f)
        }) {
            return Err(src.error_at(
                entry.span(),
                format!("beams {:?} and {:?} address the same lower states", other.name, beam.name),
            ));
        }
        if beams.iter().any(|b| b.lower == beam.upper || b.upper == beam.lower) {
            return Err(src.error_at(entry.span(), "ladder schemes are not supported"));
        }
        beams.push(beam);
    }
    Ok(beams)
}

/// Parses a file containing `[[beam]]` tables.
pub fn beams_from_toml_str(text: &str, origin: &str, ion: &IonModel) -> Result<Vec<LaserBeam>, ConfigError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct File {
        beam: Vec<Spanned<BeamSpec>>,
    }
    let src = Source::new(origin, text);
    let file: File = src.parse()?;
    beams_from_specs(&src, &file.beam, ion)
}

/// Saturation intensity of a channel, W/m^2: 4 pi^2 h c Gamma / (3 lambda^3)
/// with Gamma the natural linewidth (FWHM, Hz) of the upper level.
///
/// This is twice the textbook two-level saturation intensity, so a closed
/// transition driven at intensity I has s = 2 Omega^2 / Gamma^2 = 2 I / I_S.
pub fn saturation_intensity(ion: &IonModel, channel: &DecayChannel) -> f64 {
    let linewidth_hz = ion.total_decay_rate(channel.upper) / (2.0 * PI);
    let lambda = channel.wavelength_nm * 1e-9;
    4.0 * PI * PI * PLANCK * SPEED_OF_LIGHT * linewidth_hz / (3.0 * lambda.powi(3))
}

/// Rabi frequency (rad/us) of `beam` on a transition with dipole amplitude
/// `amplitude` for spherical component `q`.
pub fn rabi_frequency(ion: &IonModel, beam: &LaserBeam, amplitude: f64, q: i32) -> f64 {
    let upper = ion.level_index(&beam.upper).expect("validated beam");
    let gamma = ion.total_decay_rate(upper) * 1e-6;
    gamma * (beam.intensity * beam.polarization.fraction(q)).sqrt() * amplitude
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MasterError {
    #[error("beam {beam:?}: {reason}")]
    InvalidBeam { beam: String, reason: String },
    #[error("state {state} is addressed by both {first:?} and {second:?}; its rotating frame would be time dependent")]
    FrameConflict {
        state: String,
        first: String,
        second: String,
    },
    #[error("level {0} is the upper level of one beam and the lower level of another; ladder schemes are not supported")]
    Ladder(String),
    #[error("velocity must be finite, got {0}")]
    InvalidVelocity(f64),
    #[error(transparent)]
    Angular(#[from] AngularError),
}

/// Frame of each state: the index of the beam addressing it, if any.
pub fn frame_assignment(basis: &ZeemanBasis, beams: &[LaserBeam]) -> Result<Vec<Option<usize>>, MasterError> {
    let ion = &basis.ion;
    let mut frame: Vec<Option<usize>> = vec![None; basis.len()];
    for (b, beam) in beams.iter().enumerate() {
        beam.check(ion).map_err(|reason| MasterError::InvalidBeam {
            beam: beam.name.clone(),
            reason,
        })?;
        if beams.iter().any(|o| o.lower == beam.upper) {
            return Err(MasterError::Ladder(beam.upper.clone()));
        }
        let lower = ion.level_index(&beam.lower).expect("checked");
        for s in basis.level_states(lower) {
            if beam.ground_f.is_some_and(|f| f != s.f) {
                continue;
            }
            if let Some(other) = frame[s.index] {
                return Err(MasterError::FrameConflict {
                    state: s.to_string(),
                    first: beams[other].name.clone(),
                    second: beam.name.clone(),
                });
            }
            frame[s.index] = Some(b);
        }
    }
    Ok(frame)
}

/// A sparse N x N operator as (row, col, value) entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseOp {
    pub entries: Vec<(usize, usize, C64)>,
}

impl SparseOp {
    fn push(&mut self, r: usize, c: usize, v: C64) {
        if v != C64::new(0.0, 0.0) {
            self.entries.push((r, c, v));
        }
    }

    /// Sums duplicates and sorts by (row, col).
    fn compress(&mut self) {
        let mut map: BTreeMap<(usize, usize), C64> = BTreeMap::new();
        for &(r, c, v) in &self.entries {
            *map.entry((r, c)).or_default() += v;
        }
        self.entries = map
            .into_iter()
            .filter(|(_, v)| *v != C64::new(0.0, 0.0))
            .map(|((r, c), v)| (r, c, v))
            .collect();
    }

    /// A^dagger A.
    fn adjoint_product(&self) -> SparseOp {
        // (A^dag A)_{bd} = sum_a conj(A_ab) A_ad
        let mut by_row: BTreeMap<usize, Vec<(usize, C64)>> = BTreeMap::new();
        for &(r, c, v) in &self.entries {
            by_row.entry(r).or_default().push((c, v));
        }
        let mut out = SparseOp::default();
        for row in by_row.values() {
            for &(b, x) in row {
                for &(d, y) in row {
                    out.push(b, d, x.conj() * y);
                }
            }
        }
        out.compress();
        out
    }
}

/// A single beam-induced coupling H_ul (upper, lower, value in rad/us).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub upper: usize,
    pub lower: usize,
    pub value: f64,
}

/// The Lindblad generator in sparse row-major form, plus the operators it
/// was assembled from.
#[derive(Debug, Clone)]
pub struct Liouvillian {
    n_states: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<C64>,
    /// Rotating-frame Hamiltonian, rad/us.
    pub hamiltonian: SparseOp,
    /// Jump operators, sqrt(1/us).
    pub jumps: Vec<SparseOp>,
    /// Couplings of each beam, in beam order.
    pub couplings: Vec<Vec<Coupling>>,
}

impl Liouvillian {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Superoperator dimension N^2.
    pub fn dim(&self) -> usize {
        self.n_states * self.n_states
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    fn from_triplets(n_states: usize, mut trips: Vec<(usize, usize, C64)>) -> Self {
        let dim = n_states * n_states;
        trips.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx = Vec::with_capacity(trips.len());
        let mut values: Vec<C64> = Vec::with_capacity(trips.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trips {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        Liouvillian {
            n_states,
            row_ptr,
            col_idx,
            values,
            hamiltonian: SparseOp::default(),
            jumps: Vec::new(),
            couplings: Vec::new(),
        }
    }

    /// Entries of row-major row `r` as (col, value).
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// All entries in (row, col) order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim()).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
    }

    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.dim()];
        self.apply_into(x, &mut y);
        y
    }

    /// L^dagger x.
    pub fn apply_adjoint(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.dim()];
        for (r, xr) in x.iter().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.values[k].conj() * xr;
            }
        }
        y
    }

    /// Largest absolute column sum.
    pub fn norm_one(&self) -> f64 {
        let mut cols = vec![0.0; self.dim()];
        for (_, c, v) in self.entries() {
            cols[c] += v.norm();
        }
        cols.into_iter().fold(0.0, f64::max)
    }

    /// self + alpha * other, over the union of both patterns.
    pub fn add_scaled(&self, alpha: f64, other: &Liouvillian) -> Liouvillian {
        assert_eq!(self.n_states, other.n_states);
        let trips: Vec<_> = self
            .entries()
            .chain(other.entries().map(|(r, c, v)| (r, c, v * alpha)))
            .collect();
        let mut out = Liouvillian::from_triplets(self.n_states, trips);
        out.hamiltonian = self.hamiltonian.clone();
        out.jumps = self.jumps.clone();
        out.couplings = self.couplings.clone();
        out
    }

    /// Dense copy, for small systems and tests.
    pub fn to_dense(&self) -> Vec<Vec<C64>> {
        let d = self.dim();
        let mut m = vec![vec![C64::new(0.0, 0.0); d]; d];
        for (r, c, v) in self.entries() {
            m[r][c] += v;
        }
        m
    }
}

/// Assembles -i(H_eff x 1 - 1 x conj(H_eff)) + sum_k J_k x conj(J_k) for
/// H_eff = H - (i/2) sum_k J_k^dag J_k.
fn assemble(n: usize, hamiltonian: &SparseOp, jumps: &[SparseOp]) -> Vec<(usize, usize, C64)> {
    let mut h_eff = hamiltonian.clone();
    for j in jumps {
        for (r, c, v) in j.adjoint_product().entries {
            h_eff.push(r, c, -0.5 * I * v);
        }
    }
    h_eff.compress();
    let mut trips = Vec::with_capacity(2 * n * h_eff.entries.len());
    for &(a, b, v) in &h_eff.entries {
        for k in 0..n {
            trips.push((a * n + k, b * n + k, -I * v));
            trips.push((k * n + a, k * n + b, I * v.conj()));
        }
    }
    for j in jumps {
        for &(a, b, x) in &j.entries {
            for &(c, d, y) in &j.entries {
                trips.push((a * n + c, b * n + d, x * y.conj()));
            }
        }
    }
    trips
}

/// Doppler shift seen by `beam` for velocity `v` (m/s), MHz.
pub fn doppler_shift_mhz(ion: &IonModel, beam: &LaserBeam, velocity: f64) -> f64 {
    let (u, l) = (
        ion.level_index(&beam.upper).expect("validated beam"),
        ion.level_index(&beam.lower).expect("validated beam"),
    );
    let lambda = ion.channel(u, l).expect("validated beam").wavelength_nm * 1e-9;
    f64::from(beam.propagation) * velocity / lambda * 1e-6
}

/// Builds the Lindblad generator for an ion moving at `velocity` (m/s).
pub fn build_liouvillian(basis: &ZeemanBasis, beams: &[LaserBeam], velocity: f64) -> Result<Liouvillian, MasterError> {
    if !velocity.is_finite() {
        return Err(MasterError::InvalidVelocity(velocity));
    }
    let ion = &basis.ion;
    let n = basis.len();
    let frame = frame_assignment(basis, beams)?;

    let mut h = SparseOp::default();
    for s in basis.states() {
        let shift = match frame[s.index] {
            Some(b) => beams[b].detuning_mhz - doppler_shift_mhz(ion, &beams[b], velocity),
            None => 0.0,
        };
        h.push(s.index, s.index, C64::from(2.0 * PI * (s.energy_mhz + shift)));
    }
    let mut couplings = Vec::with_capacity(beams.len());
    for (b, beam) in beams.iter().enumerate() {
        let upper = ion.level_index(&beam.upper).expect("checked");
        let mut list = Vec::new();
        for u in basis.level_states(upper) {
            for l in basis.states().iter().filter(|s| frame[s.index] == Some(b)) {
                let q = (u.m - l.m).twice();
                if q % 2 != 0 || q.abs() > 2 {
                    continue;
                }
                let q = q / 2;
                if beam.polarization.fraction(q) == 0.0 {
                    continue;
                }
                let amp = dipole_amplitude(ion, l, u, q)?;
                if amp == 0.0 {
                    continue;
                }
                let half_rabi = 0.5 * rabi_frequency(ion, beam, amp, q);
                h.push(u.index, l.index, C64::from(half_rabi));
                h.push(l.index, u.index, C64::from(half_rabi));
                list.push(Coupling {
                    upper: u.index,
                    lower: l.index,
                    value: half_rabi,
                });
            }
        }
        couplings.push(list);
    }
    h.compress();

    let mut jumps = decay_operators(basis, &frame)?;
    jumps.extend(dephasing_operators(basis, beams, &frame));

    let trips = assemble(n, &h, &jumps);
    let mut liouv = Liouvillian::from_triplets(n, trips);
    liouv.hamiltonian = h;
    liouv.jumps = jumps;
    liouv.couplings = couplings;
    Ok(liouv)
}

/// Spontaneous-emission jump operators: one per channel, polarization and
/// frame group of the lower states.
fn decay_operators(basis: &ZeemanBasis, frame: &[Option<usize>]) -> Result<Vec<SparseOp>, MasterError> {
    let ion = &basis.ion;
    let mut jumps = Vec::new();
    for ch in &ion.channels {
        let gamma = ion.total_decay_rate(ch.upper) * 1e-6;
        let lowers = basis.level_states(ch.lower);
        let mut groups: Vec<Option<usize>> = lowers.iter().map(|s| frame[s.index]).collect();
        groups.sort();
        groups.dedup();
        for q in -1..=1 {
            for g in &groups {
                let mut op = SparseOp::default();
                for l in lowers.iter().filter(|s| frame[s.index] == *g) {
                    for u in basis.level_states(ch.upper) {
                        if u.m != l.m + HalfInt::from_int(q) {
                            continue;
                        }
                        let amp = dipole_amplitude(ion, l, u, q)?;
                        op.push(l.index, u.index, C64::from(gamma.sqrt() * amp));
                    }
                }
                if !op.entries.is_empty() {
                    jumps.push(op);
                }
            }
        }
    }
    Ok(jumps)
}

/// Laser phase noise: one projector-sum operator per source, so beams
/// derived from one laser dephase together.
fn dephasing_operators(basis: &ZeemanBasis, beams: &[LaserBeam], frame: &[Option<usize>]) -> Vec<SparseOp> {
    let mut sources: Vec<String> = beams.iter().map(LaserBeam::source_key).collect();
    sources.sort();
    sources.dedup();
    let mut ops = Vec::new();
    for key in sources {
        let mut op = SparseOp::default();
        for (b, beam) in beams.iter().enumerate() {
            if beam.source_key() != key || beam.linewidth_mhz == 0.0 {
                continue;
            }
            let amp = (2.0 * PI * beam.linewidth_mhz).sqrt();
            for s in basis.states().iter().filter(|s| frame[s.index] == Some(b)) {
                op.push(s.index, s.index, C64::from(amp));
            }
        }
        if !op.entries.is_empty() {
            ops.push(op);
        }
    }
    ops
}

/// dL/dV (per m/s). The generator is exactly affine in velocity.
pub fn velocity_generator(basis: &ZeemanBasis, beams: &[LaserBeam]) -> Result<Liouvillian, MasterError> {
    let ion = &basis.ion;
    let n = basis.len();
    let frame = frame_assignment(basis, beams)?;
    let mut dh = SparseOp::default();
    for s in basis.states() {
        if let Some(b) = frame[s.index] {
            let slope = -2.0 * PI * doppler_shift_mhz(ion, &beams[b], 1.0);
            dh.push(s.index, s.index, C64::from(slope));
        }
    }
    let trips = assemble(n, &dh, &[]);
    Ok(Liouvillian::from_triplets(n, trips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::build_basis;
    use std::sync::Arc;

    fn cooling_beams() -> Vec<LaserBeam> {
        let pol397 = Polarization::new(1.0 / 3.0, 0.0, 2.0 / 3.0);
        let b = |name: &str, lower: &str, f: Option<i32>, det: f64, int: f64, pol, prop, lw| LaserBeam {
            name: name.into(),
            lower: lower.into(),
            upper: "P1/2".into(),
            detuning_mhz: det,
            intensity: int,
            polarization: pol,
            propagation: prop,
            linewidth_mhz: lw,
            ground_f: f.map(HalfInt::from_int),
            source: None,
        };
        vec![
            b("L1", "S1/2", Some(4), 1042.0, 1.05, pol397, 1, 1.5),
            b("L2", "S1/2", Some(3), -1888.0, 1.24, pol397, 1, 1.5),
            b("L3", "D3/2", None, -159.0, 161.0, Polarization::new(0.0, 0.5, 0.5), -1, 0.1),
        ]
    }

    fn basis() -> ZeemanBasis {
        build_basis(Arc::new(IonModel::calcium43()), 146.0942).unwrap()
    }

    #[test]
    fn trace_is_preserved() {
        let basis = basis();
        let l = build_liouvillian(&basis, &cooling_beams(), 3.0).unwrap();
        let n = basis.len();
        let mut ident = vec![C64::new(0.0, 0.0); n * n];
        for i in 0..n {
            ident[i * n + i] = C64::new(1.0, 0.0);
        }
        let adj = l.apply_adjoint(&ident);
        let worst = adj.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "trace leak {worst}");
    }

    #[test]
    fn hermiticity_is_preserved() {
        // L(rho^dag) = L(rho)^dag for an arbitrary matrix
        let basis = basis();
        let l = build_liouvillian(&basis, &cooling_beams(), 0.0).unwrap();
        let n = basis.len();
        let rho: Vec<C64> = (0..n * n)
            .map(|k| C64::new(((k * 37) % 11) as f64 - 5.0, ((k * 13) % 7) as f64 - 3.0))
            .collect();
        let mut rho_dag = vec![C64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                rho_dag[j * n + i] = rho[i * n + j].conj();
            }
        }
        let a = l.apply(&rho);
        let b = l.apply(&rho_dag);
        for i in 0..n {
            for j in 0..n {
                assert!((b[j * n + i] - a[i * n + j].conj()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn velocity_generator_is_exact_derivative() {
        let basis = basis();
        let beams = cooling_beams();
        let l0 = build_liouvillian(&basis, &beams, 0.0).unwrap();
        let l5 = build_liouvillian(&basis, &beams, 5.0).unwrap();
        let l1 = velocity_generator(&basis, &beams).unwrap();
        let predicted = l0.add_scaled(5.0, &l1);
        let x: Vec<C64> = (0..basis.len().pow(2)).map(|k| C64::new((k % 5) as f64, (k % 3) as f64)).collect();
        let (a, b) = (l5.apply(&x), predicted.apply(&x));
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).norm() < 1e-8 * (1.0 + p.norm()));
        }
    }

    #[test]
    fn decay_sum_rule_per_upper_state() {
        let basis = basis();
        let l = build_liouvillian(&basis, &cooling_beams(), 0.0).unwrap();
        let gamma = 1.404e8 * 1e-6;
        let p = basis.level_range(1);
        let mut out = vec![0.0; basis.len()];
        for j in &l.jumps {
            for &(_, c, v) in &j.entries {
                if p.contains(&c) {
                    out[c] += v.norm_sqr();
                }
            }
        }
        for u in p {
            assert!((out[u] - gamma).abs() < 1e-9 * gamma, "{}: {}", basis.label(u), out[u]);
        }
    }

    #[test]
    fn overlapping_frames_are_rejected() {
        let basis = basis();
        let mut beams = cooling_beams();
        beams[1].ground_f = None;
        assert!(matches!(
            build_liouvillian(&basis, &beams, 0.0),
            Err(MasterError::FrameConflict { .. })
        ));
    }

    #[test]
    fn invalid_beams_are_rejected() {
        let basis = basis();
        let mut beams = cooling_beams();
        beams[0].polarization = Polarization::new(0.5, 0.0, 0.6);
        assert!(matches!(build_liouvillian(&basis, &beams, 0.0), Err(MasterError::InvalidBeam { .. })));
        let mut beams = cooling_beams();
        beams[2].lower = "S1/2".into();
        beams[2].upper = "D3/2".into();
        assert!(matches!(build_liouvillian(&basis, &beams, 0.0), Err(MasterError::InvalidBeam { .. })));
    }

    #[test]
    fn saturation_intensity_scale() {
        let ion = IonModel::calcium43();
        let ch = &ion.channels[0];
        // twice the textbook pi h c A / (3 lambda^3)
        let is = saturation_intensity(&ion, ch);
        let textbook = PI * PLANCK * SPEED_OF_LIGHT * 1.404e8 / (3.0 * 396.959e-9f64.powi(3));
        assert!((is - 2.0 * textbook).abs() < 1e-12 * is);
        assert!(is > 900.0 && is < 950.0);
        // cubic wavelength scaling
        let mut long = ch.clone();
        long.wavelength_nm *= 2.0;
        assert!((saturation_intensity(&ion, &long) * 8.0 - is).abs() < 1e-12 * is);
    }

    #[test]
    fn beam_file_parses() {
        let ion = IonModel::calcium43();
        let text = r#"
[[beam]]
name = "L1"
lower = "S1/2"
upper = "P1/2"
ground_f = 4
detuning_mhz = 1042.0
intensity = 1.05
polarization = { pi = "1/3", sigma_minus = 0, sigma_plus = "2/3" }
propagation = 1
linewidth_mhz = 1.5

[[beam]]
name = "L3"
lower = "D3/2"
upper = "P1/2"
detuning_mhz = -159.0
intensity = 161.0
polarization = { pi = 0, sigma_minus = 0.5, sigma_plus = 0.5 }
propagation = 2
"#;
        let err = beams_from_toml_str(text, "beams.toml", &ion).unwrap_err();
        assert_eq!(err.line, Some(13));
        assert!(err.message.contains("propagation"));
        let fixed = text.replace("propagation = 2", "propagation = -1");
        let beams = beams_from_toml_str(&fixed, "beams.toml", &ion).unwrap();
        assert_eq!(beams.len(), 2);
        assert_eq!(beams[0].ground_f, Some(HalfInt::from_int(4)));
        assert!((beams[0].polarization.pi - 1.0 / 3.0).abs() < 1e-15);
    }
}
