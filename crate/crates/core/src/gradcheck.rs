//! Central finite-difference checks against [`Graph::backward`].
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward rules it is checking.

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)`.
    pub max_rel_error: f64,
    /// Name or index of the tensor with the largest error.
    pub worst: String,
}

const ABS_FLOOR: f64 = 1e-6;

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    // the floor keeps finite-difference noise on exactly-zero gradients
    // (such as attention key biases) from reading as total disagreement
    norm(&diff) / norm(analytic).max(norm(numeric)).max(ABS_FLOOR)
}

/// Checks the gradient of a scalar built by `build` from fresh leaves holding `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("leaf gradient").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let err = rel_error(&analytic, &numeric);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("input {i}");
        }
    }
    Ok(report)
}

/// Same check for every tensor of a [`ParamStore`], with `loss` building the
/// scalar from the store on a fresh graph.
pub fn check_param_gradients<F>(store: &ParamStore, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut work = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = grads
            .param(id)
            .map_or_else(|| vec![0.0; n], |t| t.data().to_vec());
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let err = rel_error(&analytic, &numeric);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = store.name(id).to_string();
        }
    }
    Ok(report)
}
