use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Tape, Var};

/// A parameter entry skipped because a probe crossed a non-smooth point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcludedEntry {
    pub param: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Max over checked entries of `|fd - grad| / max(1, |grad|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: Vec<ExcludedEntry>,
}

/// Compares tape gradients against central differences for every scalar of
/// every parameter in `params`.
///
/// `loss_fn` rebuilds the scalar loss on the given tape from the bound
/// parameter leaves (indexed like `params`). Entries whose `±eps` probes
/// change the sign pattern of any activation or hinge are excluded and
/// listed in the report instead of being compared.
pub fn finite_difference_check<F>(params: &ParamSet, eps: f64, mut loss_fn: F) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("finite-difference eps {eps} outside (0, 1e-3]")));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let root = loss_fn(&mut tape, &bound)?;
    let grads = params.collect_grads(&bound, &tape.backward(root)?);
    let base_sig = tape.kink_signature();

    let mut probe = |p: &ParamSet, name: &str| -> Result<(f64, Vec<i8>)> {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let r = loss_fn(&mut t, &b)?;
        let v = t.value(r).item()?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss while probing parameter {name}"
            )));
        }
        Ok((v, t.kink_signature()))
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut work = params.clone();
    for (pi, grad) in grads.iter().enumerate() {
        let name = params.names()[pi].clone();
        for k in 0..grad.len() {
            let orig = params.values()[pi].as_slice()[k];
            work.values_mut()[pi].as_mut_slice()[k] = orig + eps;
            let (plus, sig_plus) = probe(&work, &name)?;
            work.values_mut()[pi].as_mut_slice()[k] = orig - eps;
            let (minus, sig_minus) = probe(&work, &name)?;
            work.values_mut()[pi].as_mut_slice()[k] = orig;

            if sig_plus != base_sig || sig_minus != base_sig {
                report.excluded.push(ExcludedEntry {
                    param: name.clone(),
                    index: k,
                });
                continue;
            }
            let fd = (plus - minus) / (2.0 * eps);
            let g = grad.as_slice()[k];
            let rel = (fd - g).abs() / g.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseMatrix;

    #[test]
    fn quadratic_is_exact() {
        let mut params = ParamSet::new();
        params.push("w", DenseMatrix::from_rows(&[[0.3, -1.2], [2.0, 0.7]]).unwrap());
        let report = finite_difference_check(&params, 1e-5, |t, p| {
            let sq = t.mul(p[0], p[0])?;
            let s = t.scale(sq, 1.5);
            Ok(t.sum_all(s))
        })
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
    }

    #[test]
    fn relu_kink_is_excluded() {
        let mut params = ParamSet::new();
        params.push("x", DenseMatrix::from_rows(&[[0.0, 1.0]]).unwrap());
        let report = finite_difference_check(&params, 1e-5, |t, p| {
            let r = t.relu(p[0]);
            Ok(t.sum_all(r))
        })
        .unwrap();
        assert_eq!(
            report.excluded,
            vec![ExcludedEntry {
                param: "x".into(),
                index: 0
            }]
        );
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut params = ParamSet::new();
        params.push("bad", DenseMatrix::scalar(1.0));
        let err = finite_difference_check(&params, 1e-5, |t, p| {
            let v = t.value(p[0]).item()?;
            let c = t.constant(DenseMatrix::scalar(if v == 1.0 { 0.0 } else { f64::NAN }));
            t.add(p[0], c)
        })
        .unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
    }

    #[test]
    fn rejects_large_eps() {
        let params = ParamSet::new();
        assert!(finite_difference_check(&params, 0.1, |t, _| Ok(t.constant(DenseMatrix::scalar(0.0)))).is_err());
    }
}
