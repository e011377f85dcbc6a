//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::matrix::Matrix;
use super::NumError;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on an absolute scale instead of amplifying round-off.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn check_args(step: f64, tol: f64) -> Result<(), NumError> {
    if !(step > 0.0 && tol > 0.0) {
        return Err(NumError::Contract(format!(
            "gradcheck needs step > 0 and tol > 0, got {step} and {tol}"
        )));
    }
    Ok(())
}

/// Compares supplied analytic gradients against central differences of `value`.
pub fn compare_with_finite_differences<E>(
    value: impl Fn(&[Matrix]) -> Result<f64, E>,
    analytic: &[Matrix],
    params: &[Matrix],
    step: f64,
    tol: f64,
) -> Result<GradcheckReport, E>
where
    E: From<NumError>,
{
    check_args(step, tol)?;
    if analytic.len() != params.len() {
        return Err(NumError::Contract("one analytic gradient per parameter".into()).into());
    }
    let mut work = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(NumError::Shape(format!("gradient {p} has the wrong shape")).into());
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for e in 0..params[p].data().len() {
            let original = params[p].data()[e];
            work[p].data_mut()[e] = original + step;
            let plus = value(&work)?;
            work[p].data_mut()[e] = original - step;
            let minus = value(&work)?;
            work[p].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[e];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        checks.push(ParamCheck {
            index: p,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            max_abs_grad: grad.data().iter().fold(0.0, |m, v| m.max(v.abs())),
            passed: max_rel < tol,
        });
    }
    Ok(GradcheckReport {
        step,
        tol,
        params: checks,
    })
}

/// Builds the scalar graph `f` over trainable leaves holding `params`, runs
/// backward, and checks every parameter entry against central differences.
pub fn gradcheck<F, E>(f: F, params: &[Matrix], step: f64, tol: f64) -> Result<GradcheckReport, E>
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId, E>,
    E: From<NumError>,
{
    check_args(step, tol)?;
    let eval = |values: &[Matrix], with_grad: bool| -> Result<(f64, Vec<Matrix>), E> {
        let mut g = Graph::new();
        let ids = values
            .iter()
            .map(|m| g.param(m))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut g, &ids)?;
        if g.value(out).shape() != (1, 1) {
            return Err(NumError::Contract("gradcheck target must be scalar".into()).into());
        }
        let loss = g.value(out).item();
        if !with_grad {
            return Ok((loss, Vec::new()));
        }
        let grads = g.backward(out)?;
        let grads = ids
            .iter()
            .map(|&id| grads.get(id).expect("param registered").into_owned())
            .collect();
        Ok((loss, grads))
    };
    let (_, analytic) = eval(params, true)?;
    compare_with_finite_differences(|v| eval(v, false).map(|r| r.0), &analytic, params, step, tol)
}
