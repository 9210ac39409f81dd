//! Central finite-difference gradient checking.

use super::EncoderParams;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared absolutely, so coordinates with a true
/// gradient of zero do not divide rounding noise by zero.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// (coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compare `analytic` against `(f(p + h e_i) - f(p - h e_i)) / 2h` on the
/// given coordinates (all of them when `coords` is `None`).
pub fn check_gradient<F>(
    params: &EncoderParams,
    analytic: &EncoderParams,
    f: F,
    step: f64,
    coords: Option<&[usize]>,
) -> GradCheckReport
where
    F: Fn(&EncoderParams) -> f64,
{
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.num_params()).collect();
            &all
        }
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport { checked: 0, max_relative_error: 0.0, worst: None };
    for &i in coords {
        let x = params.get(i);
        probe.set(i, x + step);
        let up = f(&probe);
        probe.set(i, x - step);
        let down = f(&probe);
        probe.set(i, x);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.get(i);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((i, a, numeric));
        }
    }
    report
}
