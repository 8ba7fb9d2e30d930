//! Ordinary least squares on one covariate.
//!
//! Sums are accumulated in exact rational arithmetic, so coefficients are the
//! correctly rounded OLS solution regardless of input order or scale.

use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;

use super::AnalyticsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    /// Root mean squared residual over the fitting sample.
    pub rmse: f64,
}

fn exact(v: f64) -> Result<BigRational, AnalyticsError> {
    BigRational::from_float(v).ok_or(AnalyticsError::NonFinite)
}

/// Fit `y = slope * x + intercept`.
pub fn fit_line(points: &[(f64, f64)]) -> Result<Fit, AnalyticsError> {
    let n = points.len();
    if n < 2 {
        return Err(AnalyticsError::InsufficientData { n });
    }
    let xs = points.iter().map(|p| exact(p.0)).collect::<Result<Vec<_>, _>>()?;
    let ys = points.iter().map(|p| exact(p.1)).collect::<Result<Vec<_>, _>>()?;
    let count = BigRational::from_integer(n.into());
    let mean_x = xs.iter().fold(BigRational::zero(), |a, x| a + x) / &count;
    let mean_y = ys.iter().fold(BigRational::zero(), |a, y| a + y) / &count;
    let mut sxx = BigRational::zero();
    let mut sxy = BigRational::zero();
    for (x, y) in xs.iter().zip(&ys) {
        let dx = x - &mean_x;
        sxy += &dx * (y - &mean_y);
        sxx += &dx * &dx;
    }
    if sxx.is_zero() {
        return Err(AnalyticsError::DegenerateCovariate);
    }
    let slope = sxy / sxx;
    let intercept = &mean_y - &slope * &mean_x;
    let sse = xs.iter().zip(&ys).fold(BigRational::zero(), |acc, (x, y)| {
        let r = y - (&slope * x + &intercept);
        acc + &r * &r
    });
    let to_f64 = |v: &BigRational| v.to_f64().filter(|f| f.is_finite()).ok_or(AnalyticsError::NonFinite);
    Ok(Fit {
        slope: to_f64(&slope)?,
        intercept: to_f64(&intercept)?,
        n,
        rmse: (to_f64(&sse)? / n as f64).sqrt(),
    })
}

/// `slope * x + intercept`, floored at zero since every modelled metric is a
/// physical quantity.
pub fn predict_value(slope: f64, intercept: f64, x: f64) -> f64 {
    slope.mul_add(x, intercept).max(0.0)
}
