//! Central finite-difference gradient checking.

/// Tolerances for [`compare`]. A component passes when
/// `|analytic - numeric| <= rtol * max(|analytic|, |numeric|) + atol`.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-6,
            atol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Numerical gradient of `f` at `x` by central differences.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

pub fn compare(analytic: &[f64], numeric: &[f64], tol: Tolerance) -> Report {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = Report::default();
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        report.checked += 1;
        if diff > tol.rtol * scale + tol.atol {
            report.failures += 1;
        }
        if rel > report.max_rel_error && diff > tol.atol {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    report
}

/// Convenience wrapper: numeric gradient of `f` at `x`, compared to `analytic`.
pub fn check(
    x: &[f64],
    analytic: &[f64],
    tol: Tolerance,
    f: impl FnMut(&[f64]) -> f64,
) -> Report {
    compare(analytic, &numeric_gradient(x, tol.step, f), tol)
}
