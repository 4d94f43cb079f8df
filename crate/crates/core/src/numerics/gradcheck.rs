use super::{Ctx, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffReport {
    /// max |analytic - numeric| / max(REL_FLOOR, |analytic| + |numeric|)
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    /// Number of scalar coordinates probed.
    pub probed: usize,
    /// Analytic and numeric values at the worst coordinate.
    pub worst: (f64, f64),
}

impl FiniteDiffReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
            probed: 0,
            worst: (0.0, 0.0),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR);
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = (analytic, numeric);
        }
        self.max_abs_analytic = self.max_abs_analytic.max(analytic.abs());
        self.max_abs_numeric = self.max_abs_numeric.max(numeric.abs());
        self.probed += 1;
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    match g.value(v) {
        [x] => Ok(*x),
        other => Err(Error::Contract(format!(
            "finite-difference target must be scalar, got {} elements",
            other.len()
        ))),
    }
}

/// Central-difference check of a pure tensor function with respect to all of
/// its inputs.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let empty = ParamStore::new();
    finite_diff_check_params(&empty, inputs, |cx, vars| f(&mut cx.g, vars), eps)
}

/// Central-difference check of a module with respect to its inputs and every
/// parameter it reads from `store`.
pub fn finite_diff_check_params<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    eps: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut cx = Ctx::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| cx.g.constant(t)).collect();
        let out = f(&mut cx, &vars)?;
        scalar_of(&cx.g, out)
    };

    let mut cx = Ctx::new(store);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| cx.g.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&mut cx, &vars)?;
    scalar_of(&cx.g, out)?;
    let grads = cx.g.backward(out)?;
    let param_grads = cx.param_grads(out)?;

    let mut report = FiniteDiffReport::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec);
        for e in 0..inputs[i].len() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let fp = eval(store, &work)?;
            work[i].data_mut()[e] = orig - eps;
            let fm = eval(store, &work)?;
            work[i].data_mut()[e] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g[e]);
            report.record(a, (fp - fm) / (2.0 * eps));
        }
    }

    let mut pstore = store.clone();
    for (name, analytic) in &param_grads {
        for e in 0..analytic.len() {
            let orig = pstore.require(name)?.data()[e];
            pstore.get_mut(name).unwrap().data_mut()[e] = orig + eps;
            let fp = eval(&pstore, inputs)?;
            pstore.get_mut(name).unwrap().data_mut()[e] = orig - eps;
            let fm = eval(&pstore, inputs)?;
            pstore.get_mut(name).unwrap().data_mut()[e] = orig;
            report.record(analytic[e], (fp - fm) / (2.0 * eps));
        }
    }
    Ok(report)
}
