//! Linearization at the equilibrium, continuous algebraic Riccati equation
//! (Newton–Kleinman) and the saturated LQR baseline.

use nalgebra::Complex;

use crate::error::{check_dim, Error, Result};
use crate::simulate::Policy;
use crate::systems::{CostModel, Matrix, SystemModel, Vector};

const MAX_NEWTON_ITERS: usize = 100;
const NEWTON_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Linearization {
    pub a: Matrix,
    pub b: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

/// Jacobians at `(x_e, u_e)` and the cost weights.
pub fn linearize(sys: &SystemModel, cost: &CostModel) -> Result<Linearization> {
    let (a, b) = sys.jacobians(&sys.x_e, &sys.u_e)?;
    Ok(Linearization {
        a,
        b,
        q: cost.q.clone(),
        r: cost.r.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub p: Matrix,
    pub k: Matrix,
    pub closed_loop_eigs: Vec<Complex<f64>>,
    pub x_e: Vector,
    pub u_e: Vector,
    pub newton_iters: usize,
}

impl RiccatiSolution {
    /// `|Re λ|` of the slowest closed-loop mode.
    pub fn slowest_decay_rate(&self) -> f64 {
        self.closed_loop_eigs
            .iter()
            .map(|l| l.re.abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Local quadratic value `(x-x_e)ᵀ P (x-x_e)`.
    pub fn quadratic_value(&self, x: &Vector) -> f64 {
        let dx = x - &self.x_e;
        dx.dot(&(&self.p * &dx))
    }
}

/// Frobenius norm of `PA + AᵀP − PBR⁻¹BᵀP + Q`.
pub fn care_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> f64 {
    let r_inv = r.clone().try_inverse().unwrap_or_else(|| Matrix::zeros(r.nrows(), r.ncols()));
    let s = b * r_inv * b.transpose();
    (p * a + a.transpose() * p - p * s * p + q).norm()
}

/// Solves `A X + X Aᵀ = C` through the Kronecker form; intended for n ≲ 10.
pub fn solve_lyapunov(a: &Matrix, c: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let eye = Matrix::identity(n, n);
    let kron = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = Vector::from_column_slice(c.as_slice());
    let sol = kron
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Riccati("Lyapunov operator is singular".into()))?;
    let x = Matrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

fn spectral_abscissa(m: &Matrix) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Stabilizing initial gain by the shifted-spectrum (Bass) construction:
/// with `β` larger than every `|Re λ(A)|`, solve
/// `(A+βI)Z + Z(A+βI)ᵀ = 2BBᵀ` and take `K = BᵀZ⁻¹`.
fn stabilizing_gain(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if spectral_abscissa(a) < -1e-9 {
        return Ok(Matrix::zeros(b.ncols(), n));
    }
    let beta = 1.0 + a.complex_eigenvalues().iter().map(|l| l.re.abs()).fold(0.0, f64::max);
    let shifted = a + Matrix::identity(n, n) * beta;
    let z = solve_lyapunov(&(-&shifted), &(-(b * b.transpose()) * 2.0))?;
    let z_inv = z
        .try_inverse()
        .ok_or_else(|| Error::Riccati("(A, B) is not stabilizable: controllability Gramian is singular".into()))?;
    let k = b.transpose() * z_inv;
    if spectral_abscissa(&(a - b * &k)) >= 0.0 {
        return Err(Error::Riccati(
            "(A, B) is not stabilizable: shifted-spectrum gain failed to stabilize".into(),
        ));
    }
    Ok(k)
}

/// Stabilizing solution of the continuous algebraic Riccati equation via
/// Newton–Kleinman iteration.
pub fn solve_care(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<RiccatiSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::InvalidArgument(format!(
            "incompatible CARE shapes A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Riccati("R is not positive definite".into()))?
        .inverse();

    let mut k = stabilizing_gain(a, b)?;
    let mut p_prev: Option<Matrix> = None;
    for iter in 1..=MAX_NEWTON_ITERS {
        let acl = a - b * &k;
        let rhs = -(q + k.transpose() * r * &k);
        let p = solve_lyapunov(&acl.transpose(), &rhs)?;
        k = &r_inv * b.transpose() * &p;
        if let Some(prev) = &p_prev {
            if (&p - prev).norm() <= NEWTON_TOL * (1.0 + p.norm()) {
                return finish(a, b, p, k, iter);
            }
        }
        p_prev = Some(p);
    }
    Err(Error::Riccati(format!(
        "Newton–Kleinman did not converge in {MAX_NEWTON_ITERS} iterations"
    )))
}

fn finish(
    a: &Matrix,
    b: &Matrix,
    p: Matrix,
    k: Matrix,
    iters: usize,
) -> Result<RiccatiSolution> {
    let eigs: Vec<Complex<f64>> = (a - b * &k).complex_eigenvalues().iter().copied().collect();
    if eigs.iter().any(|l| l.re >= 0.0) {
        return Err(Error::Riccati(format!(
            "closed loop A - BK is not Hurwitz: {eigs:?}"
        )));
    }
    let min_eig = p.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-10 {
        return Err(Error::Riccati(format!(
            "solution is not positive semidefinite (min eigenvalue {min_eig:e})"
        )));
    }
    let n = a.nrows();
    Ok(RiccatiSolution {
        p,
        k,
        closed_loop_eigs: eigs,
        x_e: Vector::zeros(n),
        u_e: Vector::zeros(b.ncols()),
        newton_iters: iters,
    })
}

/// Linearizes `sys` and solves the CARE, recording the equilibrium so the
/// solution can be evaluated in absolute coordinates.
pub fn solve_for_system(sys: &SystemModel, cost: &CostModel) -> Result<RiccatiSolution> {
    let lin = linearize(sys, cost)?;
    let mut rs = solve_care(&lin.a, &lin.b, &lin.q, &lin.r)?;
    rs.x_e = sys.x_e.clone();
    rs.u_e = sys.u_e.clone();
    Ok(rs)
}

/// `p(T) = 2 P (x_f - x_e)`.
pub fn terminal_costate(rs: &RiccatiSolution, x_f: &Vector) -> Result<Vector> {
    check_dim("terminal state", rs.x_e.len(), x_f.len())?;
    Ok(2.0 * (&rs.p * (x_f - &rs.x_e)))
}

/// `u = u_e − K(x − x_e)`, saturated at the system's control bounds.
#[derive(Clone, Debug)]
pub struct LqrPolicy {
    pub k: Matrix,
    pub x_e: Vector,
    pub u_e: Vector,
    pub u_lo: Vector,
    pub u_hi: Vector,
}

pub fn lqr_policy(rs: &RiccatiSolution, sys: &SystemModel) -> LqrPolicy {
    LqrPolicy {
        k: rs.k.clone(),
        x_e: sys.x_e.clone(),
        u_e: sys.u_e.clone(),
        u_lo: sys.u_lo.clone(),
        u_hi: sys.u_hi.clone(),
    }
}

impl Policy for LqrPolicy {
    fn control(&self, x: &Vector) -> Result<Vector> {
        check_dim("state", self.x_e.len(), x.len())?;
        let u = &self.u_e - &self.k * (x - &self.x_e);
        Ok(Vector::from_iterator(
            u.len(),
            u.iter().enumerate().map(|(i, v)| v.clamp(self.u_lo[i], self.u_hi[i])),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{linear_system, make_benchmark, BENCHMARKS};
    use std::collections::BTreeMap;

    fn m(r: usize, c: usize, xs: &[f64]) -> Matrix {
        Matrix::from_row_slice(r, c, xs)
    }

    #[test]
    fn scalar_care() {
        let rs = solve_care(&m(1, 1, &[-1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0])).unwrap();
        assert!((rs.p[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn nl2_riccati_is_half_hessian_of_analytic_value() {
        let (sys, cost) = make_benchmark("nl2", &BTreeMap::new()).unwrap();
        let lin = linearize(&sys, &cost).unwrap();
        assert_eq!(lin.a, m(2, 2, &[-1.0, 1.0, -0.5, 4.0]));
        assert_eq!(lin.b, m(2, 1, &[0.0, 3.0]));
        assert_eq!(lin.q, Matrix::identity(2, 2));
        assert_eq!(lin.r, m(1, 1, &[1.0]));
        let rs = solve_for_system(&sys, &cost).unwrap();
        assert!((&rs.p - m(2, 2, &[0.5, 0.0, 0.0, 1.0])).amax() < 1e-10);
        assert!((&rs.k - m(1, 2, &[0.0, 3.0])).amax() < 1e-10);
        for x in [[0.3, -1.2], [3.6, 0.0], [-2.0, 2.5]] {
            let x = Vector::from_column_slice(&x);
            let analytic = 0.5 * x[0] * x[0] + x[1] * x[1];
            assert!((rs.quadratic_value(&x) - analytic).abs() < 1e-9);
        }
    }

    #[test]
    fn double_integrator_closed_form() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 400.0]);
        let rs = solve_care(&a, &b, &Matrix::identity(2, 2), &m(1, 1, &[1e4])).unwrap();
        let p2 = 0.25;
        let p3 = 1.5f64.sqrt() / 4.0;
        let p1 = p2 * p3 * 16.0;
        assert!((&rs.p - m(2, 2, &[p1, p2, p2, p3])).amax() < 1e-9);
        assert!((rs.p[(0, 0)] - 1.224745).abs() < 1e-6);
        assert!((rs.p[(1, 1)] - 0.306186).abs() < 1e-6);
        assert!((rs.k[(0, 0)] - 0.01).abs() < 1e-9);
        assert!((rs.k[(0, 1)] - 0.012247).abs() < 1e-6);
        assert!(care_residual(&a, &b, &Matrix::identity(2, 2), &m(1, 1, &[1e4]), &rs.p) <= 1e-10);
    }

    #[test]
    fn attitude_linearization_blocks() {
        let (sys, cost) = make_benchmark("attitude", &BTreeMap::new()).unwrap();
        let lin = linearize(&sys, &cost).unwrap();
        assert_eq!(lin.a[(0, 3)], 1.0);
        assert_eq!(lin.a[(3, 0)], 0.0);
        assert_eq!(lin.a[(3, 3)], 0.0);
        assert!((lin.b[(3, 0)] - 400.0).abs() < 1e-9);
    }

    #[test]
    fn all_benchmarks_satisfy_riccati_invariants() {
        for name in BENCHMARKS {
            let (sys, cost) = make_benchmark(name, &BTreeMap::new()).unwrap();
            let lin = linearize(&sys, &cost).unwrap();
            let rs = solve_for_system(&sys, &cost).unwrap();
            let res = care_residual(&lin.a, &lin.b, &lin.q, &lin.r, &rs.p);
            assert!(res <= 1e-10, "{name}: residual {res:e}");
            assert!((&rs.p - rs.p.transpose()).amax() <= 1e-12);
            assert!(rs.p.clone().symmetric_eigenvalues().min() >= -1e-10);
            assert!(rs.closed_loop_eigs.iter().all(|l| l.re < 0.0));
        }
    }

    #[test]
    fn unstabilizable_pair_is_rejected() {
        // unstable mode not reachable from the input
        let a = m(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let err = solve_care(&a, &b, &Matrix::identity(2, 2), &m(1, 1, &[1.0])).unwrap_err();
        assert!(matches!(err, Error::Riccati(_)), "{err}");
    }

    #[test]
    fn terminal_costate_examples() {
        let (sys, cost) = make_benchmark("nl2", &BTreeMap::new()).unwrap();
        let rs = solve_for_system(&sys, &cost).unwrap();
        let p = terminal_costate(&rs, &Vector::from_column_slice(&[0.01, 0.01])).unwrap();
        assert!((p - Vector::from_column_slice(&[0.01, 0.02])).amax() < 1e-12);
        let p = terminal_costate(&rs, &Vector::from_column_slice(&[0.02, -0.01])).unwrap();
        assert!((p - Vector::from_column_slice(&[0.02, -0.02])).amax() < 1e-12);
        assert_eq!(terminal_costate(&rs, &sys.x_e).unwrap(), Vector::zeros(2));

        let (wsys, wcost) = make_benchmark("winged_cone", &BTreeMap::new()).unwrap();
        let wrs = solve_for_system(&wsys, &wcost).unwrap();
        assert_eq!(terminal_costate(&wrs, &wsys.x_e).unwrap(), Vector::zeros(2));
    }

    #[test]
    fn lqr_policy_examples() {
        let (sys, cost) = make_benchmark("nl2", &BTreeMap::new()).unwrap();
        let rs = solve_for_system(&sys, &cost).unwrap();
        let pol = lqr_policy(&rs, &sys);
        let u = pol.control(&Vector::from_column_slice(&[0.0, 1.0])).unwrap();
        assert!((u[0] + 3.0).abs() < 1e-10);
        assert_eq!(pol.control(&sys.x_e).unwrap(), sys.u_e);

        let (wsys, wcost) = make_benchmark("winged_cone", &BTreeMap::new()).unwrap();
        let wrs = solve_for_system(&wsys, &wcost).unwrap();
        let wpol = lqr_policy(&wrs, &wsys);
        assert!((wpol.control(&wsys.x_e).unwrap()[0] - wsys.u_e[0]).abs() < 1e-15);
        let high = Vector::from_column_slice(&[115000.0, 0.0]);
        assert_eq!(wpol.control(&high).unwrap()[0], -0.0872);
    }

    #[test]
    fn linear_system_round_trip() {
        let a = m(2, 2, &[0.0, 1.0, 2.0, -1.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let sys = linear_system(a.clone(), b.clone()).unwrap();
        let cost = CostModel::new(Matrix::identity(2, 2), m(1, 1, &[0.5]), Vector::zeros(2), Vector::zeros(1)).unwrap();
        let lin = linearize(&sys, &cost).unwrap();
        assert_eq!(lin.a, a);
        assert_eq!(lin.b, b);
        let rs = solve_for_system(&sys, &cost).unwrap();
        assert!(care_residual(&a, &b, &cost.q, &cost.r, &rs.p) < 1e-10);
    }
}
