use super::{Real, Rng, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`,
    /// so gradients far below the floor are effectively compared absolutely.
    pub floor: f64,
    /// Check at most this many elements per tensor (seeded sample).
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element, with its analytic and numeric values.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradients stored in each tensor's gradient slot with
/// central finite differences of `loss`.
///
/// `loss` must be deterministic; it is evaluated twice up front and a bit
/// mismatch is reported as [`Error::Determinism`]. Tensors without a gradient
/// slot are treated as having a zero analytic gradient.
pub fn grad_check<F, L>(
    mut loss: L,
    params: &mut [Tensor<F>],
    names: &[String],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Real,
    L: FnMut(&[Tensor<F>]) -> Result<F>,
{
    let first = loss(params)?.as_f64();
    let second = loss(params)?.as_f64();
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let h = F::of(opts.step);
    let mut rng = Rng::new(opts.seed);
    let mut reports = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let n = params[p].len();
        let mut indices: Vec<usize> = (0..n).collect();
        if let Some(k) = opts.max_elements {
            if n > k {
                rng.shuffle(&mut indices);
                indices.truncate(k);
                indices.sort_unstable();
            }
        }
        let analytic: Vec<f64> = match params[p].grad() {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; n],
        };
        let mut report = ParamReport {
            name: names.get(p).cloned().unwrap_or_else(|| format!("param{p}")),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for &i in &indices {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + h;
            let plus = loss(params)?;
            params[p].data_mut()[i] = orig - h;
            let minus = loss(params)?;
            params[p].data_mut()[i] = orig;
            let numeric = (plus - minus).as_f64() / (2.0 * opts.step);
            let err = relative_error(analytic[i], numeric, opts.floor);
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (i, analytic[i], numeric);
            }
        }
        reports.push(report);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: reports,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let mut theta = Tensor::vector(vec![1.0f64, 2.0]).unwrap();
        theta.accumulate_grad(&[2.0, 4.0]);
        let opts = GradCheckOptions {
            tolerance: 1e-8,
            ..Default::default()
        };
        let report = grad_check(
            |ps: &[Tensor<f64>]| Ok(ps[0].data().iter().map(|x| x * x).sum()),
            std::slice::from_mut(&mut theta),
            &[],
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(theta.data(), &[1.0, 2.0], "parameters restored");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut theta = Tensor::vector(vec![0.3f64, -4.0, 9.0]).unwrap();
        let report = grad_check(
            |_: &[Tensor<f64>]| Ok(7.5),
            std::slice::from_mut(&mut theta),
            &[],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_fails() {
        let mut theta = Tensor::vector(vec![1.0f64]).unwrap();
        theta.accumulate_grad(&[3.0]);
        let report = grad_check(
            |ps: &[Tensor<f64>]| Ok(ps[0].data()[0].powi(2)),
            std::slice::from_mut(&mut theta),
            &["theta".to_string()],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.params[0].name, "theta");
    }

    #[test]
    fn nondeterminism_detected() {
        let mut calls = 0;
        let mut theta = Tensor::vector(vec![1.0f64]).unwrap();
        let err = grad_check(
            |_: &[Tensor<f64>]| {
                calls += 1;
                Ok(calls as f64)
            },
            std::slice::from_mut(&mut theta),
            &[],
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }
}
