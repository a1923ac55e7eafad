//! Interpolating cubic spline with not-a-knot end conditions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Piecewise cubic through `(x, y)` knots, stored as second derivatives at the knots.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    /// Knots must be strictly increasing. With four or more knots the third
    /// derivative is continuous across the second and second-to-last knots,
    /// so any cubic polynomial is reproduced exactly; three knots give the
    /// interpolating parabola and two the line.
    pub fn not_a_knot(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        let n = x.len();
        if n < 2 {
            return Err(Error::invalid("spline needs at least 2 knots"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "spline knots must be finite and strictly increasing",
            ));
        }
        let m = match n {
            2 => vec![0.0; 2],
            3 => {
                // Parabola: constant second derivative.
                let d0 = (y[1] - y[0]) / (x[1] - x[0]);
                let d1 = (y[2] - y[1]) / (x[2] - x[1]);
                vec![2.0 * (d1 - d0) / (x[2] - x[0]); 3]
            }
            _ => solve_not_a_knot(x, y)?,
        };
        Ok(CubicSpline {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = self.x.partition_point(|&v| v <= t).clamp(1, n - 1) - 1;
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

fn solve_not_a_knot(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    // Third-derivative continuity at x[1] and x[n-2].
    a[(0, 0)] = -1.0 / h[0];
    a[(0, 1)] = 1.0 / h[0] + 1.0 / h[1];
    a[(0, 2)] = -1.0 / h[1];
    a[(n - 1, n - 3)] = -1.0 / h[n - 3];
    a[(n - 1, n - 2)] = 1.0 / h[n - 3] + 1.0 / h[n - 2];
    a[(n - 1, n - 1)] = -1.0 / h[n - 2];
    for i in 1..n - 1 {
        a[(i, i - 1)] = h[i - 1];
        a[(i, i)] = 2.0 * (h[i - 1] + h[i]);
        a[(i, i + 1)] = h[i];
        rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
    }
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular spline system".into()))?;
    Ok(sol.iter().copied().collect())
}
