//! Central finite-difference gradient checking in 64-bit.
//!
//! The checker only evaluates the forward function; it never consults the
//! backward closures it is validating except through [`Tensor::backward`] on
//! the unperturbed point.

use crate::error::Result;

use super::Tensor;

/// Denominator floor for relative errors so that vanishing gradients are
/// compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_with_floor(a, b, REL_ERR_FLOOR)
}

/// `|a − b| / max(|a|, |b|, floor)`
pub fn relative_error_with_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((input, elem, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self {
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        }
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`, for every element of every input.
///
/// `select`, when given, restricts the comparison to `(input, element)`
/// pairs, which keeps large inputs affordable.
pub fn check_gradients<F>(
    f: F,
    inputs: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    select: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves = inputs
        .iter()
        .map(|(d, s)| Tensor::parameter(d.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |which: usize, elem: usize, delta: f64| -> Result<f64> {
        let ts = inputs
            .iter()
            .enumerate()
            .map(|(i, (d, s))| {
                let mut d = d.clone();
                if i == which {
                    d[elem] += delta;
                }
                Tensor::new(d, s)
            })
            .collect::<Result<Vec<_>>>()?;
        f(&ts)?.item()
    };

    let all: Vec<(usize, usize)>;
    let pairs = match select {
        Some(p) => p,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, (d, _))| (0..d.len()).map(move |e| (i, e)))
                .collect();
            &all
        }
    };
    let mut report = GradCheckReport::default();
    for &(i, e) in pairs {
        let numeric = (eval(i, e, h)? - eval(i, e, -h)?) / (2.0 * h);
        report.record(i, e, analytic[i][e], numeric);
    }
    Ok(report)
}
