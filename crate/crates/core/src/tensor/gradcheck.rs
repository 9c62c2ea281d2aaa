use rayon::prelude::*;

use super::{Bound, ParamStore, Result, Tape, TensorError, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Central-difference gradient checker over every trainable parameter.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Negative-control hook: perturbs the first analytic gradient entry.
    pub corrupt: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            corrupt: false,
        }
    }
}

impl GradCheck {
    pub fn run<F>(&self, params: &ParamStore, f: F) -> Result<GradCheckReport>
    where
        F: for<'t, 's> Fn(&'t Tape, &Bound<'t, 's>) -> Result<Var<'t>> + Sync,
    {
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(TensorError::GradCheck(format!(
                "eps {} outside (0, 1e-3]",
                self.eps
            )));
        }

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let root = f(&tape, &bound)?;
        if !root.item().is_finite() {
            return Err(TensorError::GradCheck("function value is not finite".into()));
        }
        let mut grads = tape.backward(root)?;
        let mut analytic = bound.collect_grads(&mut grads);
        if self.corrupt {
            if let Some(g) = analytic.iter_mut().find(|g| g.numel() > 0) {
                g.data_mut()[0] += 1.0;
            }
        }

        let eval = |store: &ParamStore| -> Result<f64> {
            let tape = Tape::inference();
            let bound = store.bind(&tape);
            let v = f(&tape, &bound)?.item();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(TensorError::GradCheck("function value is not finite".into()))
            }
        };

        let coords: Vec<(usize, usize)> = params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable())
            .flat_map(|(i, p)| (0..p.value().numel()).map(move |j| (i, j)))
            .collect();

        let errors: Vec<f64> = coords
            .par_iter()
            .map(|&(i, j)| -> Result<f64> {
                let mut store = params.clone();
                let orig = store.by_index(i).value().data()[j];
                store.by_index_mut(i).data_mut()[j] = orig + self.eps;
                let plus = eval(&store)?;
                store.by_index_mut(i).data_mut()[j] = orig - self.eps;
                let minus = eval(&store)?;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[i].data()[j];
                Ok((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()))
            })
            .collect::<Result<_>>()?;

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_param: String::new(),
            worst_index: 0,
            entries_checked: coords.len(),
        };
        for (&(i, j), &e) in coords.iter().zip(&errors) {
            if e > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = e;
                report.worst_param = params.by_index(i).name().to_string();
                report.worst_index = j;
            }
        }
        Ok(report)
    }
}

/// Shorthand for [`GradCheck::run`] returning only the max relative error.
pub fn grad_check<F>(params: &ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: for<'t, 's> Fn(&'t Tape, &Bound<'t, 's>) -> Result<Var<'t>> + Sync,
{
    GradCheck {
        eps,
        corrupt: false,
    }
    .run(params, f)
    .map(|r| r.max_rel_error)
}
