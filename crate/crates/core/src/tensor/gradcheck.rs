use super::{Graph, ParamSet, Var};
use crate::error::{invalid, Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all checked elements.
    pub max_rel_error: f64,
    /// Parameter name and element index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `build` against central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every
/// parameter in `params`.
///
/// `build` must be deterministic and return a one-element loss.
pub fn grad_check<F>(params: &mut ParamSet<f64>, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(invalid!("grad_check eps must be positive"));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = build(&mut g)?;
        let v = g.value(loss).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check loss".into()))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params.tensor(pi).numel() {
            let orig = params.tensor(pi).data()[ei];
            params.tensor_mut(pi).data_mut()[ei] = orig + eps;
            let up = eval(params);
            params.tensor_mut(pi).data_mut()[ei] = orig - eps;
            let down = eval(params);
            params.tensor_mut(pi).data_mut()[ei] = orig;
            let numeric = (up? - down?) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(pi).to_string(), ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_f64(&[3], &[0.5, -1.5, 2.0]).unwrap())
            .unwrap();
        let r = grad_check(&mut p, 1e-5, |g| {
            let w = g.param(0);
            g.sum_squares(w)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn rejects_bad_eps() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_f64(&[1], &[0.5]).unwrap())
            .unwrap();
        assert!(grad_check(&mut p, 0.0, |g| {
            let w = g.param(0);
            g.sum(w)
        })
        .is_err());
    }
}
