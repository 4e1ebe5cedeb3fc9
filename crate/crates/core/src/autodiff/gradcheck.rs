use super::{Graph, Var};
use crate::error::{config_err, Error, Result};
use crate::param::{ParamLookup, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and flat index where the worst error occurred.
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_loss<F>(f: &F, params: &ParamStore<f64>) -> Result<(Graph<f64>, Var)>
where
    F: Fn(&mut Graph<f64>, &dyn ParamLookup<f64>) -> Result<Var>,
{
    let mut g = Graph::train();
    let loss = f(&mut g, params)?;
    Ok((g, loss))
}

/// Compares backward() against central differences for every element of
/// every trainable parameter in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &dyn ParamLookup<f64>) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(config_err(format!("grad_check eps must lie in (0, 1e-2], got {eps}")));
    }
    if let Some(p) = params.trainable().find(|p| !p.tensor.is_finite()) {
        return Err(Error::NonFinite { param: p.name.clone() });
    }
    let (g, loss) = eval_loss(&f, params)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut work = params.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    for name in params.trainable_names() {
        let numel = params.tensor(&name)?.numel();
        let analytic = grads.get(&name);
        for i in 0..numel {
            let orig = params.tensor(&name)?.data()[i];
            let mut probe = |x: f64| -> Result<f64> {
                work.get_mut(&name).expect("cloned store").tensor.data_mut()[i] = x;
                let (g, loss) = eval_loss(&f, &work)?;
                Ok(g.value(loss).item())
            };
            let plus = probe(orig + eps)?;
            let minus = probe(orig - eps)?;
            work.get_mut(&name).expect("cloned store").tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite { param: name.clone() });
            }
            let err = relative_error(a, numeric);
            if err > report.max_relative_error || report.checked == 0 {
                report.max_relative_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
