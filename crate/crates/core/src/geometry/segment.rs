//! c-segments: curves `y_t` with `grad_x c(x, y_t)` affine in `t`.

use nalgebra::DVector;

use super::cost::CostFunction;
use super::induced_metric;
use crate::linalg;
use crate::{Error, Result};

pub const MAX_NEWTON_ITERS: usize = 50;
pub const TOL_NEWTON: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;

/// Point `y_t` on the c-segment with respect to `x` from `y0` to `y1`.
///
/// Bregman costs use the closed form `D phi(y_t) = (1-t) D phi(y0) + t D phi(y1)`.
/// Other costs run damped Newton on `grad_x c(x, y) - target`, starting at `guess`
/// (or `y0` when absent).
pub fn c_segment(
    cost: &dyn CostFunction,
    x: &[f64],
    y0: &[f64],
    y1: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    c_segment_from(cost, x, y0, y1, t, None)
}

pub fn c_segment_from(
    cost: &dyn CostFunction,
    x: &[f64],
    y0: &[f64],
    y1: &[f64],
    t: f64,
    guess: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("t = {t} is outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(y0.to_vec());
    }
    if t == 1.0 {
        return Ok(y1.to_vec());
    }
    if let Some(phi) = cost.bregman_potential() {
        let g0 = phi.gradient(y0)?;
        let g1 = phi.gradient(y1)?;
        let p: Vec<f64> = g0
            .iter()
            .zip(&g1)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        return phi.gradient_inverse(&p);
    }

    let a = cost.grad_x(x, y0)?;
    let b = cost.grad_x(x, y1)?;
    let target: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    let scale = 1.0 + linalg::norm(&target);
    let residual =
        |y: &[f64]| -> Result<Vec<f64>> { Ok(linalg::sub(&cost.grad_x(x, y)?, &target)) };

    let mut y = guess.unwrap_or(y0).to_vec();
    let mut r = residual(&y)?;
    let mut rn = linalg::norm(&r);
    for _ in 0..MAX_NEWTON_ITERS {
        if rn < TOL_NEWTON * scale {
            return Ok(y);
        }
        let jac = cost.mixed_hessian(x, &y)?;
        let neg: Vec<f64> = r.iter().map(|e| -e).collect();
        let step = linalg::solve(&jac, &neg).ok_or(Error::NoConvergence {
            what: "c-segment Newton",
            iterations: 0,
            residual: rn,
        })?;
        let mut s = 1.0;
        let mut accepted = false;
        let mut left_domain = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = y.iter().zip(&step).map(|(a, b)| a + s * b).collect();
            if cost.contains(&trial) {
                if let Ok(rt) = residual(&trial) {
                    let rtn = linalg::norm(&rt);
                    if rtn < rn {
                        y = trial;
                        r = rt;
                        rn = rtn;
                        accepted = true;
                        break;
                    }
                }
            } else {
                left_domain = true;
            }
            s *= 0.5;
        }
        if !accepted {
            if left_domain {
                return Err(Error::OutOfDomain(format!(
                    "c-segment Newton iterate left the domain at t = {t}"
                )));
            }
            break;
        }
    }
    if rn < TOL_NEWTON * scale {
        Ok(y)
    } else {
        Err(Error::NoConvergence {
            what: "c-segment Newton",
            iterations: MAX_NEWTON_ITERS,
            residual: rn,
        })
    }
}

/// Default step for [`c_segment_velocity_check`].
pub const VELOCITY_STEP: f64 = 1e-3;
pub const TOL_VELOCITY: f64 = 1e-4;

/// Residual of the initial-velocity identity for the c-segment from `x` to `y`:
/// `|| (y_h - x) / h + grad_g c(x, y) ||`, where `grad_g = g^{-1} grad_x`
/// is the Riemannian gradient for the induced metric `g`.
///
/// The residual is `O(h)`.
pub fn c_segment_velocity_check(
    cost: &dyn CostFunction,
    x: &[f64],
    y: &[f64],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::InvalidInput(format!(
            "step h = {h} must lie in (0, 1)"
        )));
    }
    let yh = c_segment(cost, x, x, y, h)?;
    let velocity = riemannian_grad_x(cost, x, y)?;
    let r: Vec<f64> = yh
        .iter()
        .zip(x)
        .zip(&velocity)
        .map(|((a, b), v)| (a - b) / h + v)
        .collect();
    Ok(linalg::norm(&r))
}

/// `g(x)^{-1} grad_x c(x, y)` with `g` the metric induced by the cost.
pub fn riemannian_grad_x(cost: &dyn CostFunction, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let g = induced_metric(cost, x)?;
    let grad = cost.grad_x(x, y)?;
    let sol = g
        .lu()
        .solve(&DVector::from_vec(grad))
        .ok_or(Error::SingularMetric {
            min_eigenvalue: 0.0,
        })?;
    Ok(sol.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::geometry::cost::{bregman_cost, mahalanobis_cost, quadratic_cost};
    use crate::geometry::potential::SeparablePolynomial;

    #[test]
    fn quadratic_segment_is_affine() {
        let c = quadratic_cost(2);
        let (y0, y1) = ([0.0, 1.0], [2.0, -1.0]);
        for t in [0.0, 0.25, 0.5, 1.0] {
            let y = c_segment(c.as_ref(), &[0.3, 0.3], &y0, &y1, t).unwrap();
            assert!((y[0] - 2.0 * t).abs() < 1e-14);
            assert!((y[1] - (1.0 - 2.0 * t)).abs() < 1e-14);
        }
    }

    #[test]
    fn quartic_midpoint_inverts_the_gradient() {
        let c = bregman_cost(Arc::new(SeparablePolynomial::quartic(1)));
        let y = c_segment(c.as_ref(), &[1.5], &[1.0], &[2.0], 0.5).unwrap();
        assert!((y[0] - 4.5f64.cbrt()).abs() < 1e-12);
        assert!((y[0] - 1.6510).abs() < 1e-4);
    }

    #[test]
    fn newton_path_agrees_with_closed_form_for_mahalanobis_of_quadratic() {
        // The Mahalanobis cost of a quadratic potential is the quadratic cost
        // but carries no Bregman shortcut, so this exercises Newton.
        let c = mahalanobis_cost(Arc::new(
            SeparablePolynomial::new(2, vec![0.0, 0.0, 0.5]).unwrap(),
        ));
        let y = c_segment(c.as_ref(), &[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.3).unwrap();
        assert!((y[0] - 0.7).abs() < 1e-9 && (y[1] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn velocity_of_quadratic_segment_is_exact() {
        let c = quadratic_cost(2);
        let r =
            c_segment_velocity_check(c.as_ref(), &[0.0, 0.0], &[1.0, 0.0], VELOCITY_STEP).unwrap();
        assert!(r < 1e-12);
    }

    #[test]
    fn quartic_velocity_residual_is_first_order() {
        let c = bregman_cost(Arc::new(SeparablePolynomial::quartic(1)));
        let r1 = c_segment_velocity_check(c.as_ref(), &[1.0], &[2.0], 1e-3).unwrap();
        let r2 = c_segment_velocity_check(c.as_ref(), &[1.0], &[2.0], 5e-4).unwrap();
        let ratio = r1 / r2;
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn bad_parameter_is_rejected() {
        let c = quadratic_cost(1);
        assert!(c_segment(c.as_ref(), &[0.0], &[0.0], &[1.0], 1.5).is_err());
    }
}
