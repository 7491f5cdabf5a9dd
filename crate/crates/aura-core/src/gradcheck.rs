//! Finite-difference verification of analytic gradients.
//!
//! The checker perturbs one parameter element at a time and evaluates the
//! caller's loss closure, so it exercises only the forward path. It is kept
//! deliberately independent of [`crate::autodiff`]'s backward pass, which is
//! exactly the code it exists to audit. `f64` only: the central-difference
//! estimate needs the headroom.

use crate::error::Result;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub type ParamMap = BTreeMap<String, Tensor<f64>>;

/// Central-difference gradient of `loss` with respect to every element of
/// every parameter: (f(x + h) - f(x - h)) / 2h.
pub fn central_diff<F>(params: &ParamMap, mut loss: F, h: f64) -> Result<ParamMap>
where
    F: FnMut(&ParamMap) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = ParamMap::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let n = params[&name].len();
        let mut grad = params[&name].zeros_like();
        for i in 0..n {
            let orig = work[&name].data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let fp = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let fm = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            grad.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Elementwise relative error between two gradient maps, with the usual
/// guard denominator max(|a|, |b|, 1e-8) so near-zero entries compare on an
/// absolute scale.
pub fn compare(analytic: &ParamMap, numeric: &ParamMap) -> Result<CompareReport> {
    let mut report = CompareReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (name, num) in numeric {
        let ana = analytic.get(name).ok_or_else(|| {
            crate::Error::Lookup(format!("no analytic gradient for parameter {name}"))
        })?;
        for (i, (&a, &n)) in ana.data().iter().zip(num.data()).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            let rel = (a - n).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic_is_exact_enough() {
        // f(x) = sum x_i^2 has gradient 2x; the central difference of a
        // quadratic is exact up to rounding.
        let mut params = ParamMap::new();
        params.insert(
            "x".into(),
            Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap(),
        );
        let fd = central_diff(
            &params,
            |p| Ok(p["x"].data().iter().map(|v| v * v).sum()),
            1e-5,
        )
        .unwrap();
        let expect = [2.0, -4.0, 1.0];
        for (g, e) in fd["x"].data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-9, "{g} vs {e}");
        }
    }

    #[test]
    fn compare_flags_wrong_gradient() {
        let mut a = ParamMap::new();
        a.insert("w".into(), Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let mut n = ParamMap::new();
        n.insert("w".into(), Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let rep = compare(&a, &n).unwrap();
        assert!(rep.max_rel_err > 0.3);
        assert_eq!(rep.worst_param, "w");
        assert_eq!(rep.worst_index, 1);
        assert_eq!(rep.checked, 2);
    }
}
