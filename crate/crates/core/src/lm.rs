//! Damped Gauss-Newton (Levenberg-Marquardt) for small dense bounded
//! least-squares problems.

use nalgebra::{DMatrix, DVector};

/// A residual vector `r(theta)`; the objective is `sum r_i^2`. Residuals are
/// expected to be pre-weighted, `r_i = (y_i - model_i) / sigma_i`.
pub trait LeastSquares {
    fn n_params(&self) -> usize;

    fn residuals(&self, params: &[f64]) -> DVector<f64>;

    /// `d r_i / d theta_j`. Defaults to central differences.
    fn jacobian(&self, params: &[f64]) -> DMatrix<f64> {
        finite_difference_jacobian(self, params)
    }

    fn lower_bounds(&self) -> Vec<f64> {
        vec![f64::NEG_INFINITY; self.n_params()]
    }

    fn upper_bounds(&self) -> Vec<f64> {
        vec![f64::INFINITY; self.n_params()]
    }
}

pub fn finite_difference_jacobian<P: LeastSquares + ?Sized>(
    problem: &P,
    params: &[f64],
) -> DMatrix<f64> {
    let lo = problem.lower_bounds();
    let hi = problem.upper_bounds();
    let r0 = problem.residuals(params);
    let mut jac = DMatrix::zeros(r0.len(), params.len());
    let mut p = params.to_vec();
    for j in 0..params.len() {
        let h = 1e-6 * params[j].abs().max(1e-3);
        let up = (params[j] + h).min(hi[j]);
        let down = (params[j] - h).max(lo[j]);
        p[j] = up;
        let r_up = problem.residuals(&p);
        p[j] = down;
        let r_down = problem.residuals(&p);
        p[j] = params[j];
        let span = up - down;
        if span > 0.0 {
            jac.set_column(j, &((r_up - r_down) / span));
        }
    }
    jac
}

#[derive(Clone, Copy, Debug)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the relative objective decrease of an
    /// accepted step.
    pub rel_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            rel_tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmReport {
    pub params: Vec<f64>,
    /// `sum r_i^2` at `params`.
    pub objective: f64,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LmReport {
    /// Gauss-Newton curvature `J^T J`.
    pub fn normal_matrix(&self) -> DMatrix<f64> {
        self.jacobian.transpose() * &self.jacobian
    }

    /// `(J^T J)^{-1}` restricted to the parameters listed in `free`, embedded
    /// back into full size with zero rows for the rest. `None` if singular.
    pub fn covariance(&self, free: &[usize]) -> Option<DMatrix<f64>> {
        covariance_from_normal(&self.normal_matrix(), free)
    }

    pub fn degeneracy(&self, free: &[usize]) -> Option<Vec<f64>> {
        degenerate_direction(&self.normal_matrix(), free)
    }
}

pub fn covariance_from_normal(normal: &DMatrix<f64>, free: &[usize]) -> Option<DMatrix<f64>> {
    let n = normal.nrows();
    let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| normal[(free[i], free[j])]);
    if degenerate_direction(normal, free).is_some() {
        return None;
    }
    let inv = sub.try_inverse()?;
    let mut cov = DMatrix::zeros(n, n);
    for (i, &fi) in free.iter().enumerate() {
        for (j, &fj) in free.iter().enumerate() {
            cov[(fi, fj)] = inv[(i, j)];
        }
    }
    Some(cov)
}

/// Relative eigenvalue below which the column-scaled curvature is treated as
/// singular.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;

/// Direction (full parameter size, unit norm in column-scaled coordinates) of
/// the softest mode of `normal` over `free` if it is numerically singular.
pub fn degenerate_direction(normal: &DMatrix<f64>, free: &[usize]) -> Option<Vec<f64>> {
    let n = normal.nrows();
    let k = free.len();
    if k == 0 {
        return None;
    }
    let scale: Vec<f64> = free.iter().map(|&f| normal[(f, f)].sqrt()).collect();
    let mut direction = vec![0.0; n];
    if let Some(j) = scale.iter().position(|&s| !(s > 0.0)) {
        direction[free[j]] = 1.0;
        return Some(direction);
    }
    let scaled = DMatrix::from_fn(k, k, |i, j| {
        normal[(free[i], free[j])] / (scale[i] * scale[j])
    });
    let eig = scaled.symmetric_eigen();
    let (imin, &emin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let emax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if emin > DEGENERACY_THRESHOLD * emax {
        return None;
    }
    for (i, &f) in free.iter().enumerate() {
        direction[f] = eig.eigenvectors[(i, imin)];
    }
    Some(direction)
}

fn clamp(params: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((p, &l), &h) in params.iter_mut().zip(lo).zip(hi) {
        *p = p.clamp(l, h);
    }
}

/// Minimizes `sum r^2` starting from `initial`, projecting onto the bounds
/// after every step.
pub fn minimize<P: LeastSquares + ?Sized>(
    problem: &P,
    initial: &[f64],
    opts: LmOptions,
) -> LmReport {
    let lo = problem.lower_bounds();
    let hi = problem.upper_bounds();
    let n = problem.n_params();
    let mut params = initial.to_vec();
    clamp(&mut params, &lo, &hi);

    let mut residuals = problem.residuals(&params);
    let mut objective = residuals.norm_squared();
    let mut jacobian = problem.jacobian(&params);
    let mut damping = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        if objective == 0.0 {
            converged = true;
            break;
        }
        let jt = jacobian.transpose();
        let normal = &jt * &jacobian;
        let gradient = &jt * &residuals;

        let mut accepted = false;
        while damping < 1e16 {
            let mut lhs = normal.clone();
            for j in 0..n {
                let d = normal[(j, j)];
                lhs[(j, j)] += damping * if d > 0.0 { d } else { 1.0 };
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-&gradient))) else {
                damping *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
            clamp(&mut trial, &lo, &hi);
            if trial == params {
                break;
            }
            let trial_res = problem.residuals(&trial);
            let trial_obj = trial_res.norm_squared();
            if trial_obj.is_finite() && trial_obj < objective {
                let rel = (objective - trial_obj) / objective;
                params = trial;
                residuals = trial_res;
                objective = trial_obj;
                jacobian = problem.jacobian(&params);
                damping = (damping / 3.0).max(1e-12);
                accepted = true;
                if rel < opts.rel_tolerance {
                    converged = true;
                }
                break;
            }
            damping *= 10.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // no descent direction left at working precision
            converged = true;
            break;
        }
    }

    LmReport {
        params,
        objective,
        residuals,
        jacobian,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exponential {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquares for Exponential {
        fn n_params(&self) -> usize {
            2
        }

        fn residuals(&self, p: &[f64]) -> DVector<f64> {
            DVector::from_iterator(
                self.t.len(),
                self.t
                    .iter()
                    .zip(&self.y)
                    .map(|(t, y)| y - p[0] * (-p[1] * t).exp()),
            )
        }
    }

    #[test]
    fn recovers_exponential() {
        let t: Vec<f64> = (0..30).map(|k| k as f64 * 0.1).collect();
        let y = t.iter().map(|t| 2.5 * (-1.3 * t).exp()).collect();
        let rep = minimize(&Exponential { t, y }, &[1.0, 0.5], LmOptions::default());
        assert!(rep.converged);
        assert!((rep.params[0] - 2.5).abs() < 1e-8);
        assert!((rep.params[1] - 1.3).abs() < 1e-8);
    }

    struct Redundant;

    impl LeastSquares for Redundant {
        fn n_params(&self) -> usize {
            2
        }

        fn residuals(&self, p: &[f64]) -> DVector<f64> {
            DVector::from_vec(vec![1.0 - p[0] * p[1], 2.0 - 2.0 * p[0] * p[1]])
        }

        fn lower_bounds(&self) -> Vec<f64> {
            vec![0.0, 0.0]
        }
    }

    #[test]
    fn flags_product_degeneracy() {
        let rep = minimize(&Redundant, &[0.5, 0.5], LmOptions::default());
        let dir = rep.degeneracy(&[0, 1]).expect("degenerate");
        // softest direction trades one factor against the other
        assert!(dir[0] * dir[1] < 0.0);
        assert!(rep.covariance(&[0, 1]).is_none());
    }

    #[test]
    fn respects_bounds() {
        struct Quad;
        impl LeastSquares for Quad {
            fn n_params(&self) -> usize {
                1
            }
            fn residuals(&self, p: &[f64]) -> DVector<f64> {
                DVector::from_vec(vec![p[0] + 1.0])
            }
            fn lower_bounds(&self) -> Vec<f64> {
                vec![0.0]
            }
        }
        let rep = minimize(&Quad, &[3.0], LmOptions::default());
        assert_eq!(rep.params[0], 0.0);
        assert!(rep.converged);
    }
}
