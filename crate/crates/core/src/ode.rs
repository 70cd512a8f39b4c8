//! Classical fixed-step fourth-order Runge–Kutta.

use crate::error::Result;
use crate::systems::Vector;

/// One RK4 step of size `h` (negative for backward integration).
pub fn rk4_step<F>(y: &Vector, h: f64, mut rhs: F) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    let k1 = rhs(y)?;
    let k2 = rhs(&(y + &k1 * (0.5 * h)))?;
    let k3 = rhs(&(y + &k2 * (0.5 * h)))?;
    let k4 = rhs(&(y + &k3 * h))?;
    Ok(y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

/// Number of uniform steps covering `duration` with steps no longer than `max_step`.
pub fn step_count(duration: f64, max_step: f64) -> usize {
    ((duration.abs() / max_step) - 1e-9).ceil().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_is_fourth_order() {
        let solve = |n: usize| {
            let h = 1.0 / n as f64;
            let mut y = Vector::from_element(1, 1.0);
            for _ in 0..n {
                y = rk4_step(&y, h, |y| Ok(-y)).unwrap();
            }
            (y[0] - (-1f64).exp()).abs()
        };
        let ratio = solve(10) / solve(20);
        assert!(ratio > 14.0 && ratio < 18.0, "{ratio}");
    }

    #[test]
    fn backward_step_inverts_forward() {
        let y0 = Vector::from_column_slice(&[1.0, 0.0]);
        let rot = |y: &Vector| Ok(Vector::from_column_slice(&[y[1], -y[0]]));
        let y1 = rk4_step(&y0, 0.01, rot).unwrap();
        let back = rk4_step(&y1, -0.01, rot).unwrap();
        assert!((back - y0).norm() < 1e-10);
    }

    #[test]
    fn step_counts() {
        assert_eq!(step_count(5.0, 1e-3), 5000);
        assert_eq!(step_count(5.0005, 1e-3), 5001);
        assert_eq!(step_count(0.0, 1e-3), 1);
    }
}
