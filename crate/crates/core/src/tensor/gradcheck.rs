use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Denominator floor for the relative deviation, so near-zero gradients are
/// compared absolutely instead of blowing up.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over elements of `|auto − numeric| / max(|auto|, |numeric|, 1e-3)`.
    pub max_rel_deviation: f64,
    pub max_abs_deviation: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares the autodiff gradient of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh graph and the input node; it must return a scalar.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, &all, h, tol)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_at<T, F>(
    f: F,
    x: &Tensor<T>,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let auto = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0].as_f64())
    };

    let mut report = GradCheckReport {
        max_rel_deviation: 0.0,
        max_abs_deviation: 0.0,
        worst_index: 0,
        passed: true,
    };
    let step = T::c(h);
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        // divide by the realized step, which differs from h in low precision
        let realized = (plus.data()[i] - minus.data()[i]).as_f64();
        let numeric = (eval(plus)? - eval(minus)?) / realized;
        let a = auto.data()[i].as_f64();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_deviation || !rel.is_finite() {
            report.max_rel_deviation = rel;
            report.worst_index = i;
        }
        report.max_abs_deviation = report.max_abs_deviation.max(abs);
    }
    report.passed = report.max_rel_deviation.is_finite() && report.max_rel_deviation <= tol;
    Ok(report)
}
