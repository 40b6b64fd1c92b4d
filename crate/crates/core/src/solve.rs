//! Steady states and time evolution of the master equation.

use std::collections::HashMap;
use std::sync::Once;

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Col, Par};
use nalgebra::{Complex, DMatrix, SymmetricEigen};
use petgraph::algo::condensation;
use petgraph::graph::DiGraph;
use petgraph::visit::EdgeRef;
use petgraph::Direction;
use thiserror::Error;

use crate::master::{Liouvillian, C64};
use crate::structure::ZeemanBasis;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Relative smallest-singular-value threshold below which the steady state
/// is declared non-unique. The norm is dominated by GHz frame energies while
/// optical pumping can be slower than 0.01/us, so well-posed 43Ca+ problems
/// sit near 1e-6; exact degeneracies land at rounding level.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;

static SEQUENTIAL: Once = Once::new();

fn sequential_linear_algebra() {
    // scans parallelize over points; keep each factorization on one thread
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(Par::Seq));
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("steady state is not unique (sigma_min/norm = {ratio:.3e}); closed sets: {}", format_classes(.closed_sets))]
    Degenerate { ratio: f64, closed_sets: Vec<Vec<String>> },
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
    #[error("solution is not a physical density matrix: {0}")]
    NotPhysical(String),
    #[error("time step underflow at t = {time_us} us")]
    StepUnderflow { time_us: f64 },
    #[error("invalid evolution time {0}")]
    InvalidTime(f64),
    #[error("density matrix has {got} states, generator acts on {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

fn format_classes(classes: &[Vec<String>]) -> String {
    classes
        .iter()
        .map(|c| format!("{{{}}}", c.join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

/// A density matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n: usize,
    data: Vec<C64>,
}

impl DensityMatrix {
    pub fn from_vec(n: usize, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), n * n);
        DensityMatrix { n, data }
    }

    /// All population in state `i`.
    pub fn pure(n: usize, i: usize) -> Self {
        let mut data = vec![ZERO; n * n];
        data[i * n + i] = ONE;
        DensityMatrix { n, data }
    }

    /// Equal populations in the given states.
    pub fn mixture(n: usize, states: &[usize]) -> Self {
        let mut data = vec![ZERO; n * n];
        let w = 1.0 / states.len() as f64;
        for &i in states {
            data[i * n + i] = C64::new(w, 0.0);
        }
        DensityMatrix { n, data }
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn population(&self, i: usize) -> f64 {
        self.data[i * self.n + i].re
    }

    pub fn trace(&self) -> C64 {
        (0..self.n).map(|i| self.data[i * self.n + i]).sum()
    }

    /// Total population of a fine level.
    pub fn level_population(&self, basis: &ZeemanBasis, level: usize) -> f64 {
        basis.level_range(level).map(|i| self.population(i)).sum()
    }

    /// Largest |rho_ij - conj(rho_ji)|.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        worst
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.n;
        let m = DMatrix::from_fn(n, n, |i, j| {
            let z = 0.5 * (self.get(i, j) + self.get(j, i).conj());
            Complex::new(z.re, z.im)
        });
        SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn normalize(&mut self) {
        let tr = self.trace().re;
        for z in &mut self.data {
            *z /= tr;
        }
    }

    fn symmetrize(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in i..n {
                let z = 0.5 * (self.data[i * n + j] + self.data[j * n + i].conj());
                self.data[i * n + j] = z;
                self.data[j * n + i] = z.conj();
            }
        }
    }
}

/// A sparse LU factorization of a dim x dim complex matrix.
pub struct Factorization {
    lu: Lu<usize, C64>,
    dim: usize,
}

impl Factorization {
    pub fn new(dim: usize, triplets: &[Triplet<usize, usize, C64>]) -> Result<Self, SolveError> {
        sequential_linear_algebra();
        let m = SparseColMat::<usize, C64>::try_new_from_triplets(dim, dim, triplets)
            .map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
        let symbolic =
            SymbolicLu::try_new(m.symbolic()).map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
        let lu = Lu::try_new_with_symbolic(symbolic, m.as_ref())
            .map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
        Ok(Factorization { lu, dim })
    }

    pub fn solve(&self, rhs: &[C64]) -> Vec<C64> {
        let b = Col::<C64>::from_fn(self.dim, |i| rhs[i]);
        let x = self.lu.solve(&b);
        (0..self.dim).map(|i| x[i]).collect()
    }
}

fn to_triplets(
    entries: impl Iterator<Item = (usize, usize, C64)>,
) -> Vec<Triplet<usize, usize, C64>> {
    entries.map(|(r, c, v)| Triplet::new(r, c, v)).collect()
}

/// `shift * 1 - scale * L` as triplets.
pub fn shifted_triplets(l: &Liouvillian, shift: C64, scale: f64) -> Vec<Triplet<usize, usize, C64>> {
    let dim = l.dim();
    let mut t = to_triplets(l.entries().map(|(r, c, v)| (r, c, -v * scale)));
    if shift != ZERO {
        t.extend((0..dim).map(|i| Triplet::new(i, i, shift)));
    }
    t
}

fn norm_inf(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Deterministic probe vector for the singular-value estimate.
fn probe(dim: usize, seed: u64) -> Vec<C64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    let v: Vec<C64> = (0..dim).map(|_| C64::new(next(), next())).collect();
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|z| z / norm).collect()
}

/// The Liouvillian with one diagonal row replaced by the trace functional,
/// factorized once and reusable for any right-hand side.
pub struct BorderedSolver<'a> {
    l: &'a Liouvillian,
    lu: Factorization,
    norm: f64,
    row: usize,
}

impl<'a> BorderedSolver<'a> {
    pub fn new(l: &'a Liouvillian) -> Result<Self, SolveError> {
        Self::with_row(l, 0)
    }

    /// Borders the row of population `state` instead of the first one.
    pub fn with_row(l: &'a Liouvillian, state: usize) -> Result<Self, SolveError> {
        let n = l.n_states();
        if state >= n {
            return Err(SolveError::DimensionMismatch { expected: n, got: state });
        }
        let row = state * n + state;
        let mut t = to_triplets(l.entries().filter(|&(r, _, _)| r != row));
        t.extend((0..n).map(|i| Triplet::new(row, i * n + i, ONE)));
        let norm = l.norm_one().max(1.0);
        let lu = Factorization::new(l.dim(), &t).map_err(|e| match e {
            SolveError::Factorization(_) => degenerate(l, 0.0),
            other => other,
        })?;
        Ok(BorderedSolver { l, lu, norm, row })
    }

    /// Solves L x = rhs subject to tr(x) = trace. The bordered entry of
    /// `rhs` is ignored; it is implied by the others when tr(rhs) = 0.
    pub fn solve_traced(&self, rhs: &[C64], trace: C64) -> Vec<C64> {
        let mut b = rhs.to_vec();
        b[self.row] = trace;
        let mut x = self.lu.solve(&b);
        // one step of iterative refinement against the bordered system
        let lx = self.l.apply(&x);
        let n = self.l.n_states();
        let mut r: Vec<C64> = b.iter().zip(&lx).map(|(b, a)| b - a).collect();
        r[self.row] = trace - (0..n).map(|i| x[i * n + i]).sum::<C64>();
        let dx = self.lu.solve(&r);
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi += d;
        }
        x
    }

    /// sigma_min / ||A||_1 estimated by inverse iteration on probe vectors.
    pub fn conditioning(&self) -> f64 {
        let dim = self.l.dim();
        let mut worst = f64::INFINITY;
        for seed in 1..=2 {
            let v = probe(dim, seed);
            let mut y = self.lu.solve(&v);
            let mut scale = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            // a second pass sharpens the estimate
            if scale.is_finite() && scale > 0.0 {
                for z in &mut y {
                    *z /= scale;
                }
                let y2 = self.lu.solve(&y);
                scale = y2.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            }
            let sigma = if scale.is_finite() { 1.0 / scale } else { 0.0 };
            worst = worst.min(sigma / self.norm);
        }
        worst
    }
}

/// Result of a steady-state solve with its quality measures.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub rho: DensityMatrix,
    /// ||L vec(rho)||_inf in 1/us.
    pub residual: f64,
    /// Estimated sigma_min / ||A||_1 of the bordered matrix.
    pub conditioning: f64,
    pub min_eigenvalue: f64,
}

/// Closed communicating classes of the population-transfer graph.
pub fn closed_sets(l: &Liouvillian, basis: Option<&ZeemanBasis>) -> Vec<Vec<String>> {
    let n = l.n_states();
    let mut g = DiGraph::<usize, ()>::with_capacity(n, 0);
    let nodes: Vec<_> = (0..n).map(|i| g.add_node(i)).collect();
    for &(r, c, v) in &l.hamiltonian.entries {
        if r != c && v.norm() > 0.0 {
            g.update_edge(nodes[r], nodes[c], ());
            g.update_edge(nodes[c], nodes[r], ());
        }
    }
    for j in &l.jumps {
        for &(r, c, v) in &j.entries {
            if r != c && v.norm() > 0.0 {
                g.update_edge(nodes[c], nodes[r], ());
            }
        }
    }
    let cond = condensation(g, true);
    let mut out = Vec::new();
    for idx in cond.node_indices() {
        let leaves = cond.edges_directed(idx, Direction::Outgoing).all(|e| e.target() == idx);
        if leaves {
            let mut members = cond[idx].clone();
            members.sort_unstable();
            out.push(
                members
                    .into_iter()
                    .map(|i| basis.map_or_else(|| format!("#{i}"), |b| b.label(i)))
                    .collect(),
            );
        }
    }
    out.sort();
    out
}

fn degenerate(l: &Liouvillian, ratio: f64) -> SolveError {
    SolveError::Degenerate {
        ratio,
        closed_sets: closed_sets(l, None),
    }
}

fn label_states(err: SolveError, basis: Option<&ZeemanBasis>, l: &Liouvillian) -> SolveError {
    match err {
        SolveError::Degenerate { ratio, .. } => SolveError::Degenerate {
            ratio,
            closed_sets: closed_sets(l, basis),
        },
        other => other,
    }
}

/// Steady state with diagnostics; `basis` only improves error messages.
pub fn steady_state_report(l: &Liouvillian, basis: Option<&ZeemanBasis>) -> Result<SteadyState, SolveError> {
    steady_state_bordered(l, basis, 0)
}

/// Steady state with the trace constraint placed on population row `state`.
pub fn steady_state_bordered(
    l: &Liouvillian,
    basis: Option<&ZeemanBasis>,
    state: usize,
) -> Result<SteadyState, SolveError> {
    let n = l.n_states();
    let solver = BorderedSolver::with_row(l, state).map_err(|e| label_states(e, basis, l))?;
    let conditioning = solver.conditioning();
    if !(conditioning.is_finite() && conditioning >= DEGENERACY_THRESHOLD) {
        return Err(label_states(degenerate(l, conditioning), basis, l));
    }
    let x = solver.solve_traced(&vec![ZERO; l.dim()], ONE);
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(label_states(degenerate(l, 0.0), basis, l));
    }
    let mut rho = DensityMatrix::from_vec(n, x);
    let residual = norm_inf(&l.apply(rho.as_slice()));
    rho.symmetrize();
    rho.normalize();
    let min_eigenvalue = rho.min_eigenvalue();
    if min_eigenvalue < -1e-6 {
        return Err(SolveError::NotPhysical(format!("eigenvalue {min_eigenvalue:.3e}")));
    }
    Ok(SteadyState {
        rho,
        residual,
        conditioning,
        min_eigenvalue,
    })
}

/// The unique stationary density matrix of `l`.
pub fn steady_state(l: &Liouvillian) -> Result<DensityMatrix, SolveError> {
    steady_state_report(l, None).map(|s| s.rho)
}

/// Total photon scattering rate (s^-1): upper-level populations times their
/// total decay rates.
pub fn scattering_rate(rho: &DensityMatrix, basis: &ZeemanBasis) -> f64 {
    let ion = &basis.ion;
    (0..ion.levels.len())
        .map(|lvl| ion.total_decay_rate(lvl) * rho.level_population(basis, lvl))
        .sum()
}

/// Emission rate (s^-1) on the channel `upper -> lower` only.
pub fn channel_emission_rate(rho: &DensityMatrix, basis: &ZeemanBasis, upper: usize, lower: usize) -> f64 {
    basis
        .ion
        .channel(upper, lower)
        .map_or(0.0, |c| c.einstein_a * rho.level_population(basis, upper))
}

/// Net absorption rate (s^-1) driven by one beam: sum over its couplings of
/// 2 Im(H_ul rho_lu).
pub fn beam_absorption_rate(l: &Liouvillian, beam: usize, rho: &[C64]) -> C64 {
    let n = l.n_states();
    l.couplings[beam]
        .iter()
        .map(|c| {
            // d rho_uu/dt from this coupling is -i (H_ul rho_lu - rho_ul H_lu);
            // for complex (linear-response) rho both orders are kept.
            let a = rho[c.lower * n + c.upper];
            let b = rho[c.upper * n + c.lower];
            C64::new(0.0, -1.0) * c.value * (a - b)
        })
        .sum::<C64>()
        * 1e6
}

/// Options for `evolve`.
#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions {
    /// Local error tolerance per step (max-norm on vec(rho)).
    pub tolerance: f64,
    /// Initial step, microseconds.
    pub initial_step_us: f64,
    /// Smallest allowed step as a fraction of the total time, as a power of two.
    pub max_halvings: u32,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            tolerance: 1e-9,
            initial_step_us: 1e-3,
            max_halvings: 50,
        }
    }
}

const GAMMA: f64 = 2.0 - std::f64::consts::SQRT_2;

/// TR-BDF2 integrator on a dyadic step ladder h_k = t / 2^k with cached
/// factorizations of (1 - d h_k L).
struct TrBdf2<'a> {
    l: &'a Liouvillian,
    total_us: f64,
    cache: HashMap<u32, Factorization>,
}

impl<'a> TrBdf2<'a> {
    fn step_size(&self, k: u32) -> f64 {
        self.total_us / 2f64.powi(k as i32)
    }

    fn factor(&mut self, k: u32) -> Result<&Factorization, SolveError> {
        if !self.cache.contains_key(&k) {
            let d = GAMMA / 2.0 * self.step_size(k);
            let t = shifted_triplets(self.l, ONE, d);
            self.cache.insert(k, Factorization::new(self.l.dim(), &t)?);
        }
        Ok(&self.cache[&k])
    }

    fn step(&mut self, y: &[C64], k: u32) -> Result<Vec<C64>, SolveError> {
        let d = GAMMA / 2.0 * self.step_size(k);
        let ly = self.l.apply(y);
        let rhs1: Vec<C64> = y.iter().zip(&ly).map(|(a, b)| a + b * d).collect();
        let lu = self.factor(k)?;
        let y1 = lu.solve(&rhs1);
        let c1 = 1.0 / (GAMMA * (2.0 - GAMMA));
        let c0 = (1.0 - GAMMA).powi(2) / (GAMMA * (2.0 - GAMMA));
        let rhs2: Vec<C64> = y1.iter().zip(y).map(|(a, b)| a * c1 - b * c0).collect();
        Ok(lu.solve(&rhs2))
    }
}

/// Integrates d rho/dt = L rho for `t_seconds` with error control.
pub fn evolve(
    l: &Liouvillian,
    rho0: &DensityMatrix,
    t_seconds: f64,
    options: EvolveOptions,
) -> Result<DensityMatrix, SolveError> {
    if !(t_seconds.is_finite() && t_seconds >= 0.0) {
        return Err(SolveError::InvalidTime(t_seconds));
    }
    if rho0.n_states() != l.n_states() {
        return Err(SolveError::DimensionMismatch {
            expected: l.n_states(),
            got: rho0.n_states(),
        });
    }
    if t_seconds == 0.0 {
        return Ok(rho0.clone());
    }
    let total_us = t_seconds * 1e6;
    let mut integ = TrBdf2 {
        l,
        total_us,
        cache: HashMap::new(),
    };
    let max_k = options.max_halvings.min(62);
    let mut k = ((total_us / options.initial_step_us).log2().ceil().max(0.0) as u32).min(max_k);
    // position in units of total / 2^max_k
    let unit = |k: u32| 1u64 << (max_k - k);
    let end = 1u64 << max_k;
    let mut pos = 0u64;
    let mut y = rho0.as_slice().to_vec();
    while pos < end {
        while pos % unit(k) != 0 || pos + unit(k) > end {
            k += 1;
        }
        let big = integ.step(&y, k)?;
        if k + 1 > max_k {
            return Err(SolveError::StepUnderflow {
                time_us: total_us * pos as f64 / end as f64,
            });
        }
        let half = integ.step(&y, k + 1)?;
        let fine = integ.step(&half, k + 1)?;
        let err = big
            .iter()
            .zip(&fine)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
            / 3.0;
        if !err.is_finite() || err > options.tolerance {
            k += 1;
            continue;
        }
        // local extrapolation of the second-order pair
        y = fine
            .iter()
            .zip(&big)
            .map(|(f, b)| f + (f - b) / 3.0)
            .collect();
        pos += unit(k);
        if err < options.tolerance / 64.0 && k > 0 && pos % unit(k - 1) == 0 {
            k -= 1;
        }
    }
    let mut rho = DensityMatrix::from_vec(l.n_states(), y);
    rho.symmetrize();
    Ok(rho)
}
