//! Central finite-difference check of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Finite-difference gradient checker.
///
/// Probes are random coordinates of the parameter vector. A probe whose
/// forward and backward one-sided differences disagree by more than
/// `kink_tol` (relative) sits on a non-smooth point; it is reported in
/// [`GradCheckReport::excluded`] and replaced by another coordinate.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    pub probes: usize,
    pub seed: u64,
    pub kink_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinates actually compared.
    pub checked: Vec<usize>,
    /// Coordinates skipped as non-smooth.
    pub excluded: Vec<usize>,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
}

impl GradCheckReport {
    pub const CSV_HEADER: &'static str = "op,probes,max_rel_err";

    pub fn csv_row(&self, op: &str) -> String {
        format!("{op},{},{:e}", self.checked.len(), self.max_rel_err)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

impl GradCheck {
    pub fn new(eps: f64, probes: usize) -> Self {
        assert!(eps > 0.0, "finite-difference step must be positive");
        Self {
            eps,
            probes,
            seed: 0,
            kink_tol: 1e-2,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn kink_tol(mut self, tol: f64) -> Self {
        self.kink_tol = tol;
        self
    }

    /// `f` returns the function value and its reverse-mode gradient.
    pub fn run<F>(&self, mut f: F, params: &[f64]) -> GradCheckReport
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let (f0, analytic) = f(params);
        assert_eq!(analytic.len(), params.len(), "gradient length differs from parameter count");
        let mut order: Vec<usize> = (0..params.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));

        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            checked: Vec::new(),
            excluded: Vec::new(),
            worst: None,
        };
        let mut p = params.to_vec();
        for i in order {
            if report.checked.len() >= self.probes {
                break;
            }
            let orig = p[i];
            p[i] = orig + self.eps;
            let fp = f(&p).0;
            p[i] = orig - self.eps;
            let fm = f(&p).0;
            p[i] = orig;

            let fwd = (fp - f0) / self.eps;
            let bwd = (f0 - fm) / self.eps;
            if (fwd - bwd).abs() > self.kink_tol * fwd.abs().max(bwd.abs()).max(1.0) {
                report.excluded.push(i);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * self.eps);
            let err = relative_error(analytic[i], numeric);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(i);
            }
            report.checked.push(i);
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |p: &[f64]| (p.iter().map(|v| v * v).sum::<f64>(), p.iter().map(|v| 2.0 * v).collect());
        let p: Vec<f64> = (0..20).map(|i| i as f64 * 0.37 - 3.0).collect();
        let r = GradCheck::new(1e-3, 20).run(f, &p);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked.len(), 20);
    }

    #[test]
    fn kinks_are_excluded_not_failed() {
        let f = |p: &[f64]| {
            (
                p.iter().map(|v| v.abs()).sum::<f64>(),
                p.iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect(),
            )
        };
        let r = GradCheck::new(1e-4, 3).run(f, &[1.0, 0.0, -2.0]);
        assert_eq!(r.excluded, vec![1]);
        assert_eq!(r.checked.len(), 2);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |p: &[f64]| (p[0].sin(), vec![p[0].cos() * 1.01]);
        let r = GradCheck::new(1e-5, 1).run(f, &[0.4]);
        assert!(r.max_rel_err > 5e-3);
        assert!(r.csv_row("sin").starts_with("sin,1,"));
    }
}
