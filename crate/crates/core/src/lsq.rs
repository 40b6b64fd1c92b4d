//! Bounded Levenberg-Marquardt least squares with Marquardt scaling,
//! finite-difference Jacobians and curvature-based uncertainties.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub ftol: f64,
    /// Stop when the scaled step is below this relative size.
    pub xtol: f64,
    /// Relative finite-difference step.
    pub diff_step: f64,
    pub initial_damping: f64,
    /// Smallest singular value of the column-scaled Jacobian, relative to the
    /// largest, below which the problem is declared degenerate.
    pub singular_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 200,
            ftol: 1e-14,
            xtol: 1e-11,
            diff_step: 1e-6,
            initial_damping: 1e-3,
            singular_tolerance: 1e-6,
        }
    }
}

/// Parameter box and typical magnitudes (used for finite-difference steps
/// when a parameter is near zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub typical: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(typical: Vec<f64>) -> Self {
        let n = typical.len();
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            typical,
        }
    }

    fn clamp(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[j], self.upper[j]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub params: Vec<f64>,
    /// Sum of squared weighted residuals.
    pub chi2: f64,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub history: Vec<f64>,
    /// Covariance scaled by the reduced chi-square.
    pub covariance: DMatrix<f64>,
    pub degrees_of_freedom: usize,
}

impl LmReport {
    pub fn uncertainties(&self) -> Vec<f64> {
        (0..self.params.len()).map(|j| self.covariance[(j, j)].max(0.0).sqrt()).collect()
    }

    pub fn reduced_chi2(&self) -> f64 {
        self.chi2 / self.degrees_of_freedom.max(1) as f64
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError<E: std::fmt::Display> {
    #[error("model evaluation failed: {0}")]
    Model(E),
    #[error("{residuals} residuals cannot determine {params} parameters")]
    Underdetermined { residuals: usize, params: usize },
    #[error("initial parameters are outside the bounds or not finite")]
    InvalidStart,
    #[error("no convergence after {iterations} iterations (chi2 = {chi2:.6e})")]
    NotConverged { params: Vec<f64>, chi2: f64, iterations: usize },
    /// `direction` is a unit null vector of the Jacobian in parameter space.
    #[error("normal matrix is singular (condition {ratio:.2e})")]
    Singular { direction: Vec<f64>, ratio: f64, params: Vec<f64> },
}

fn dot(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn jacobian<E, F>(f: &F, x: &[f64], r0: &[f64], bounds: &Bounds, step: f64) -> Result<DMatrix<f64>, E>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E> + Sync,
    E: Send,
{
    let n = x.len();
    let m = r0.len();
    let columns: Vec<Result<Vec<f64>, E>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let h = step * x[j].abs().max(bounds.typical[j].abs());
            let up = x[j] + h <= bounds.upper[j];
            let down = x[j] - h >= bounds.lower[j];
            let eval = |v: f64| {
                let mut p = x.to_vec();
                p[j] = v;
                f(&p)
            };
            if up && down {
                let a = eval(x[j] + h)?;
                let b = eval(x[j] - h)?;
                Ok(a.iter().zip(&b).map(|(a, b)| (a - b) / (2.0 * h)).collect())
            } else if up {
                let a = eval(x[j] + h)?;
                Ok(a.iter().zip(r0).map(|(a, b)| (a - b) / h).collect())
            } else {
                let b = eval(x[j] - h)?;
                Ok(r0.iter().zip(&b).map(|(a, b)| (a - b) / h).collect())
            }
        })
        .collect();
    let mut jac = DMatrix::zeros(m, n);
    for (j, col) in columns.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            jac[(i, j)] = v;
        }
    }
    Ok(jac)
}

/// Minimizes sum(f(x)^2) over the box. `f` returns weighted residuals.
pub fn minimize<E, F>(f: F, x0: &[f64], bounds: &Bounds, options: &LmOptions) -> Result<LmReport, LmError<E>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E> + Sync,
    E: Send + std::fmt::Display,
{
    let n = x0.len();
    if x0.iter().any(|v| !v.is_finite())
        || x0.iter().enumerate().any(|(j, v)| *v < bounds.lower[j] || *v > bounds.upper[j])
    {
        return Err(LmError::InvalidStart);
    }
    let mut x = x0.to_vec();
    let mut r = f(&x).map_err(LmError::Model)?;
    let m = r.len();
    if m <= n {
        return Err(LmError::Underdetermined { residuals: m, params: n });
    }
    let mut cost = dot(&r);
    let mut history = vec![cost];
    let mut lambda = options.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let jac = jacobian(&f, &x, &r, bounds, options.diff_step).map_err(LmError::Model)?;
        let jt = jac.transpose();
        let mut a = &jt * &jac;
        let mut g = &jt * DVector::from_column_slice(&r);
        // parameters pinned at a bound by the gradient are frozen for this step
        for j in 0..n {
            let pinned = (x[j] <= bounds.lower[j] && g[j] > 0.0) || (x[j] >= bounds.upper[j] && g[j] < 0.0);
            if pinned {
                for k in 0..n {
                    a[(j, k)] = 0.0;
                    a[(k, j)] = 0.0;
                }
                a[(j, j)] = 1.0;
                g[j] = 0.0;
            }
        }
        let diag: Vec<f64> = (0..n).map(|j| a[(j, j)].max(f64::MIN_POSITIVE)).collect();
        if cost == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut lhs = a.clone();
            for j in 0..n {
                lhs[(j, j)] += lambda * diag[j];
            }
            let Some(delta) = lhs.lu().solve(&(-&g)) else {
                lambda *= 4.0;
                continue;
            };
            let mut trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            bounds.clamp(&mut trial);
            let rt = match f(&trial) {
                Ok(rt) if rt.iter().all(|v| v.is_finite()) => rt,
                _ => {
                    lambda *= 4.0;
                    continue;
                }
            };
            let new_cost = dot(&rt);
            if new_cost <= cost {
                let scaled_step = (0..n)
                    .map(|j| ((trial[j] - x[j]) * diag[j].sqrt()).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let scaled_x = (0..n).map(|j| (x[j] * diag[j].sqrt()).powi(2)).sum::<f64>().sqrt();
                let small_gain = cost - new_cost <= options.ftol * cost;
                let small_step = scaled_step <= options.xtol * (scaled_x + options.xtol);
                x = trial;
                r = rt;
                cost = new_cost;
                history.push(cost);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                converged = small_gain || small_step;
                break;
            }
            lambda *= 2.0;
        }
        if !accepted {
            // no downhill step at any damping: stationary to working precision
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(LmError::NotConverged {
            params: x,
            chi2: cost,
            iterations,
        });
    }

    let jac = jacobian(&f, &x, &r, bounds, options.diff_step).map_err(LmError::Model)?;
    let norms: Vec<f64> = (0..n).map(|j| jac.column(j).norm()).collect();
    let mut scaled = jac.clone();
    for j in 0..n {
        let s = if norms[j] > 0.0 { norms[j] } else { 1.0 };
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = scaled.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let (mut smin, mut imin, mut smax) = (f64::INFINITY, 0, 0.0f64);
    for (k, s) in svd.singular_values.iter().enumerate() {
        smax = smax.max(*s);
        if *s < smin {
            smin = *s;
            imin = k;
        }
    }
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(ratio > options.singular_tolerance) {
        let mut direction: Vec<f64> = (0..n)
            .map(|j| {
                let s = if norms[j] > 0.0 { norms[j] } else { 1.0 };
                v_t[(imin, j)] / s
            })
            .collect();
        let len = dot(&direction).sqrt();
        let sign = direction
            .iter()
            .copied()
            .fold(0.0, |acc: f64, v| if v.abs() > acc.abs() { v } else { acc })
            .signum();
        for d in &mut direction {
            *d *= sign / len;
        }
        return Err(LmError::Singular {
            direction,
            ratio,
            params: x,
        });
    }
    // (J^T J)^-1 through the scaled SVD: V S^-2 V^T, then undo column scaling
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..n {
        let s2 = svd.singular_values[k].powi(2);
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] += v_t[(k, i)] * v_t[(k, j)] / s2;
            }
        }
    }
    let dof = m - n;
    let red = cost / dof as f64;
    for i in 0..n {
        for j in 0..n {
            cov[(i, j)] *= red / (norms[i] * norms[j]);
        }
    }
    Ok(LmReport {
        params: x,
        chi2: cost,
        residuals: r,
        iterations,
        history,
        covariance: cov,
        degrees_of_freedom: dof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exp_model(p: &[f64], t: f64) -> f64 {
        p[0] * (-p[1] * t).exp() + p[2]
    }

    fn data(truth: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ts: Vec<f64> = (0..40).map(|k| k as f64 * 0.1).collect();
        let ys = ts.iter().map(|&t| exp_model(truth, t)).collect();
        (ts, ys)
    }

    #[test]
    fn recovers_exact_parameters() {
        let truth = [2.5, 1.3, 0.4];
        let (ts, ys) = data(&truth);
        let f = |p: &[f64]| -> Result<Vec<f64>, String> {
            Ok(ts.iter().zip(&ys).map(|(t, y)| exp_model(p, *t) - y).collect())
        };
        let rep = minimize(f, &[1.0, 0.5, 0.0], &Bounds::unbounded(vec![1.0; 3]), &LmOptions::default()).unwrap();
        for (a, b) in rep.params.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-9 * b.abs(), "{a} vs {b}");
        }
        assert!(rep.chi2 < 1e-20);
        assert!(rep.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_bounds() {
        let truth = [2.5, 1.3, 0.4];
        let (ts, ys) = data(&truth);
        let f = |p: &[f64]| -> Result<Vec<f64>, String> {
            Ok(ts.iter().zip(&ys).map(|(t, y)| exp_model(p, *t) - y).collect())
        };
        let bounds = Bounds {
            lower: vec![0.0, 0.0, 0.0],
            upper: vec![10.0, 10.0, 0.3],
            typical: vec![1.0; 3],
        };
        let rep = minimize(f, &[1.0, 0.5, 0.1], &bounds, &LmOptions::default()).unwrap();
        assert!(rep.params[2] <= 0.3);
        assert!((rep.params[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn singular_combination_is_identified() {
        // only the sum p0 + p1 is determined
        let f = |p: &[f64]| -> Result<Vec<f64>, String> {
            Ok((0..10).map(|k| (p[0] + p[1]) * k as f64 - 3.0 * k as f64 + 0.01 * (k % 3) as f64).collect())
        };
        match minimize(f, &[1.0, 1.0], &Bounds::unbounded(vec![1.0; 2]), &LmOptions::default()) {
            Err(LmError::Singular { direction, .. }) => {
                assert!((direction[0] + direction[1]).abs() < 1e-6);
                assert!((direction[0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
            }
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn linear_fit_covariance_matches_closed_form() {
        // straight line with unit weights: var(slope) = s^2 / Sxx
        let xs: Vec<f64> = (0..20).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + 1.0 + if (*x as i32) % 2 == 0 { 0.1 } else { -0.1 }).collect();
        let f = |p: &[f64]| -> Result<Vec<f64>, String> {
            Ok(xs.iter().zip(&ys).map(|(x, y)| p[0] * x + p[1] - y).collect())
        };
        let rep = minimize(f, &[0.0, 0.0], &Bounds::unbounded(vec![1.0; 2]), &LmOptions::default()).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        let s2 = rep.chi2 / (n - 2.0);
        let expected = (s2 / sxx).sqrt();
        assert!((rep.uncertainties()[0] / expected - 1.0).abs() < 1e-6);
    }

    #[test]
    fn errors_are_reported() {
        let f = |_: &[f64]| -> Result<Vec<f64>, String> { Ok(vec![1.0]) };
        assert!(matches!(
            minimize(f, &[0.0, 0.0], &Bounds::unbounded(vec![1.0; 2]), &LmOptions::default()),
            Err(LmError::Underdetermined { .. })
        ));
        let g = |_: &[f64]| -> Result<Vec<f64>, String> { Err("boom".into()) };
        assert!(matches!(
            minimize(g, &[0.0], &Bounds::unbounded(vec![1.0]), &LmOptions::default()),
            Err(LmError::Model(_))
        ));
        let h = |p: &[f64]| -> Result<Vec<f64>, String> { Ok(vec![(p[0] - 1.0).sin(), p[0].cos()]) };
        let opts = LmOptions {
            max_iterations: 0,
            ..LmOptions::default()
        };
        assert!(matches!(
            minimize(h, &[3.0], &Bounds::unbounded(vec![1.0]), &opts),
            Err(LmError::NotConverged { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn objective_never_increases(a in 0.5f64..5.0, k in 0.2f64..3.0, c in -1.0f64..1.0) {
            let (ts, ys) = data(&[a, k, c]);
            let f = |p: &[f64]| -> Result<Vec<f64>, String> {
                Ok(ts.iter().zip(&ys).map(|(t, y)| exp_model(p, *t) - y + 1e-3 * t.sin()).collect())
            };
            let rep = minimize(f, &[1.0, 1.0, 0.0], &Bounds::unbounded(vec![1.0; 3]), &LmOptions::default()).unwrap();
            prop_assert!(rep.history.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn rescaling_a_parameter_is_harmless(scale in prop::sample::select(vec![1e-3, 1.0, 1e3])) {
            // the same problem with the rate parameter expressed in other units
            let truth = [2.0, 0.8, 0.1];
            let (ts, ys) = data(&truth);
            let f = |p: &[f64]| -> Result<Vec<f64>, String> {
                let q = [p[0], p[1] * scale, p[2]];
                Ok(ts.iter().zip(&ys).map(|(t, y)| exp_model(&q, *t) - y + 1e-3 * t.cos()).collect())
            };
            let rep = minimize(f, &[1.0, 1.0 / scale, 0.0], &Bounds::unbounded(vec![1.0, 1.0 / scale, 1.0]), &LmOptions::default()).unwrap();
            let unit = minimize(
                |p: &[f64]| -> Result<Vec<f64>, String> {
                    Ok(ts.iter().zip(&ys).map(|(t, y)| exp_model(p, *t) - y + 1e-3 * t.cos()).collect())
                },
                &[1.0, 1.0, 0.0],
                &Bounds::unbounded(vec![1.0; 3]),
                &LmOptions::default(),
            ).unwrap();
            prop_assert!((rep.params[1] * scale / unit.params[1] - 1.0).abs() < 1e-7);
            prop_assert!((rep.uncertainties()[1] * scale / unit.uncertainties()[1] - 1.0).abs() < 1e-4);
        }
    }
}
