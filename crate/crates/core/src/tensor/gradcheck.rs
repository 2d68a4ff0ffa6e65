//! Central-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl CheckReport {
    pub fn merge(&mut self, other: &CheckReport) {
        if other.max_rel_error > self.max_rel_error || self.coordinates == 0 {
            let coords = self.coordinates;
            *self = other.clone();
            self.coordinates += coords;
        } else {
            self.coordinates += other.coordinates;
        }
    }

    fn update(&mut self, idx: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_error || self.coordinates == 0 {
            self.max_rel_error = e;
            self.worst_index = idx;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.coordinates += 1;
    }
}

/// Compares the tape gradient of scalar `f` at `x` against central differences with step `h`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = f(&tape, xv)?;
        if y.value().numel() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        tape.backward(y)?
            .get(xv)
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(t);
        Ok(f(&tape, xv)?.item())
    };
    let mut report = CheckReport::default();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.update(i, analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Central differences over every coordinate of several tensors at once; `eval` returns the
/// scalar objective for a perturbed copy of `inputs`.
pub fn numeric_gradients(
    inputs: &[Tensor],
    h: f64,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape().to_vec());
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Folds analytic/numeric pairs into a report.
pub fn compare(analytic: &[Tensor], numeric: &[Tensor]) -> CheckReport {
    let mut report = CheckReport::default();
    let mut offset = 0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.update(offset + i, av, nv);
        }
        offset += a.numel();
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn([5], |i| i as f64 - 2.0);
        let r = finite_difference_check(|_, x| x.sum(), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.coordinates, 5);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros([1]));
        let y = x.sigmoid().unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap().get(x).unwrap().item();
        assert_eq!(g, 0.25);
        let h = 1e-5;
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let numeric = (s(h) - s(-h)) / (2.0 * h);
        assert!((g - numeric).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }
}
