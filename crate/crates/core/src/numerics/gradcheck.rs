use super::{Array, Graph, NumericsError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` with central differences
/// `(f(θ + eps) − f(θ − eps)) / (2 eps)`, one coordinate at a time.
///
/// `f` builds a scalar objective on a fresh graph from the parameter leaves and
/// must be deterministic.
pub fn finite_difference_check<F, E>(f: F, params: &[Array], eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference eps {eps} outside [1e-7, 1e-3]"
        ))
        .into());
    }
    let eval = |values: &[Array]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(NumericsError::NonFiniteObjective.into());
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).data()[0].is_finite() {
        return Err(NumericsError::NonFiniteObjective.into());
    }
    g.backward(out)?;
    let analytic: Vec<Array> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ci];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
