//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward passes, so it is independent of
//! the backward rules it validates.

use super::{Backend, Graph, NumericsError, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Scalar entries compared (inputs plus trainable parameters).
    pub checked: usize,
    pub worst: Option<String>,
}

/// Relative error with the denominator floored at this value, so components
/// whose true gradient is essentially zero are judged by absolute error.
pub const DENOMINATOR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares backpropagated gradients of `loss_fn` with central differences of
/// step `h` for every input element and every trainable parameter entry.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    h: f64,
    loss_fn: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var, NumericsError>,
{
    for (_, p) in store.iter_mut() {
        p.tensor_mut().clear_grad();
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.input_with_grad(t.clone())).collect();
    let loss = loss_fn(&mut graph, store, &vars)?;
    graph.backward(loss, store)?;

    let evaluate = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = loss_fn(&mut g, store, &vars)?;
        Ok(g.tensor(&loss).data()[0])
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut record = |label: String, analytic: f64, numeric: f64| {
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = Some(format!("{label}: analytic {analytic:e}, numeric {numeric:e}"));
        }
    };

    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = graph.grad(*var).unwrap_or(&zeros).to_vec();
        for k in 0..inputs[i].numel() {
            let original = inputs[i].data()[k];
            perturbed[i].data_mut()[k] = original + h;
            let plus = evaluate(store, &perturbed)?;
            perturbed[i].data_mut()[k] = original - h;
            let minus = evaluate(store, &perturbed)?;
            perturbed[i].data_mut()[k] = original;
            record(format!("input {i}[{k}]"), analytic[k], (plus - minus) / (2.0 * h));
        }
    }

    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.is_frozen()).map(|(id, _)| id).collect();
    for id in ids {
        let numel = store.get(id).tensor().numel();
        let analytic = store
            .get(id)
            .tensor()
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let name = store.get(id).name().to_string();
        for k in 0..numel {
            let original = store.get(id).tensor().data()[k];
            store.get_mut(id).tensor_mut().data_mut()[k] = original + h;
            let plus = evaluate(store, inputs)?;
            store.get_mut(id).tensor_mut().data_mut()[k] = original - h;
            let minus = evaluate(store, inputs)?;
            store.get_mut(id).tensor_mut().data_mut()[k] = original;
            record(format!("{name}[{k}]"), analytic[k], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
