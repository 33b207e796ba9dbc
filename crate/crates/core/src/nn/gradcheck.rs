//! Central finite-difference gradient checks for graph-built functions.

use super::graph::{Graph, Var};
use super::optim::ParameterStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor so that entries which are zero analytically do not
/// produce spurious relative errors from round-off. Central differences at
/// `h = 1e-5` on objectives of order 10 carry about 1e-10 of round-off.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input or parameter position, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, which: usize, idx: usize, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((which, idx, analytic, numeric));
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks `d f / d inputs` where `f` builds a scalar from input leaves.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ts.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *var);
        for (idx, &a) in analytic.iter().enumerate() {
            let x0 = work[which].data()[idx];
            work[which].data_mut()[idx] = x0 + h;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = x0 - h;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = x0;
            report.record(which, idx, a, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar with respect to stored parameters.
/// `select` picks which `(parameter position, flat index)` pairs to probe;
/// `None` probes every scalar.
pub fn check_params<F>(
    store: &mut ParameterStore,
    h: f64,
    select: Option<&[(usize, usize)]>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Graph) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    let grads = g.backward(out)?;
    g.accumulate_param_grads(&grads, store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();

    let ids: Vec<_> = store.ids().collect();
    let all: Vec<(usize, usize)>;
    let probes = match select {
        Some(s) => s,
        None => {
            all = analytic
                .iter()
                .enumerate()
                .flat_map(|(p, g)| (0..g.len()).map(move |i| (p, i)))
                .collect();
            &all
        }
    };
    let mut report = GradCheckReport::default();
    for &(p, idx) in probes {
        let x0 = store.value(ids[p]).data()[idx];
        store.value_mut(ids[p]).data_mut()[idx] = x0 + h;
        let plus = {
            let mut g = Graph::new();
            let o = f(store, &mut g)?;
            g.value(o).item()
        };
        store.value_mut(ids[p]).data_mut()[idx] = x0 - h;
        let minus = {
            let mut g = Graph::new();
            let o = f(store, &mut g)?;
            g.value(o).item()
        };
        store.value_mut(ids[p]).data_mut()[idx] = x0;
        report.record(p, idx, analytic[p][idx], (plus - minus) / (2.0 * h));
    }
    Ok(report)
}
